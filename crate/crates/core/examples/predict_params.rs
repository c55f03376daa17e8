//! Predict every parameter of a sampled CNN with an untrained hypernetwork and
//! inspect the tiling and per-tensor statistics.

use ghnq::arch::sample_architecture;
use ghnq::cli::RunConfig;
use ghnq::hypernet::Hypernet;
use ghnq::train::{layerwise_distribution_stats, per_channel_range};

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    let h = Hypernet::new(cfg.hypernet.clone())?;
    println!("hypernet: {} parameters in {} tensors", h.num_params(), h.names().len());

    let g = sample_architecture(&cfg.space, 3)?;
    let params = h.predict(&g)?;
    params.validate(&g)?;
    println!("graph {}: {} nodes, {} predicted values\n", g.hash(), g.nodes.len(), params.numel());

    for s in layerwise_distribution_stats(&g, &params)? {
        println!(
            "node {:>3} {:<6} n={:<5} min {:>8.4} max {:>8.4} std {:.4} kurtosis {:>7.3}{}",
            s.node,
            s.role,
            s.numel,
            s.min,
            s.max,
            s.std,
            s.kurtosis,
            if s.degenerate { " (degenerate)" } else { "" }
        );
    }

    // Raw decoder output repeats every canonical-Cout channels.
    let cc = cfg.hypernet.canonical_shape[0];
    let raw = h.decode_raw(&g, &h.encode_graph(&g)?)?;
    if let Some(n) = g.nodes.iter().find(|n| n.param_shapes().first().is_some_and(|s| s[0] > cc)) {
        let ranges = per_channel_range(&raw.get(n.id).unwrap()[0])?;
        println!("\nnode {} raw per-channel ranges (period {cc}):", n.id);
        for (c, r) in ranges.iter().enumerate() {
            println!("  channel {c:>2}: {:.5} .. {:.5}", r.0, r.1);
        }
    }
    Ok(())
}
