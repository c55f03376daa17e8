//! Sample a training pool and the four test splits, then print one graph file.
//!
//! `cargo run --example sample_architectures -- configs/toy.toml`

use ghnq::arch::format::serialize_graph;
use ghnq::arch::SplitKind;
use ghnq::cli::RunConfig;

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    cfg.validate()?;

    let pool = cfg.training_pool()?;
    let depths: Vec<usize> = pool.iter().map(|g| g.depth()).collect();
    let params: Vec<u64> = pool.iter().map(|g| g.count_params()).collect();
    println!(
        "training pool: {} graphs, depth {}..={}, params {}..={}",
        pool.len(),
        depths.iter().min().unwrap(),
        depths.iter().max().unwrap(),
        params.iter().min().unwrap(),
        params.iter().max().unwrap()
    );

    let splits = cfg.make_splits()?;
    for k in SplitKind::ALL {
        let gs = splits.get(k).unwrap_or(&[]);
        let bn = gs.iter().filter(|g| g.has_batchnorm()).count();
        let widths: Vec<usize> = gs.iter().map(|g| g.width()).collect();
        println!(
            "{k:<8} {:>3} graphs, widths {:?}..{:?}, {bn} with BatchNorm",
            gs.len(),
            widths.iter().min(),
            widths.iter().max()
        );
    }

    let g = &pool[0];
    println!("\n# graph {} ({} params)", g.hash(), g.count_params());
    print!("{}", String::from_utf8_lossy(&serialize_graph(g)));
    Ok(())
}
