//! Accuracy change and quantization error of single networks across bitwidths.

use ghnq::cli::RunConfig;
use ghnq::hypernet::Hypernet;
use ghnq::quant::QuantConfig;
use ghnq::train::{finetune, per_network_robustness};

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let pool = cfg.training_pool()?;
    let mut h = Hypernet::new(cfg.hypernet.clone())?;
    finetune(&mut h, &cfg.train, &pool, &train)?;

    println!("{:<18} {:>5} {:>8} {:>8} {:>8} {:>11}", "graph", "bits", "float%", "quant%", "delta", "logit MSE");
    for g in pool.iter().take(4) {
        let p = h.predict(g)?;
        for bits in [8, 4, 2] {
            let r = per_network_robustness(g, &p, &test, &QuantConfig::bits(bits), cfg.eval.test_batch_size)?;
            println!(
                "{:<18} {bits:>5} {:>8.2} {:>8.2} {:>8.2} {:>11.3e}",
                g.hash(),
                r.accuracy_float,
                r.accuracy_quant,
                r.accuracy_delta,
                r.output_mse
            );
        }
    }
    Ok(())
}
