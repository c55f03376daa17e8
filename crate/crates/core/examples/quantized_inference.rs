//! Float, folded-float and fake-quantized inference of one predicted network.

use ghnq::arch::sample_architecture;
use ghnq::cli::RunConfig;
use ghnq::hypernet::Hypernet;
use ghnq::quant::{float_forward, folded_float_forward, quant_error_metrics, QuantConfig};

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    let (_, test) = cfg.load_data()?;
    let h = Hypernet::new(cfg.hypernet.clone())?;
    let g = sample_architecture(&cfg.space, 0)?;
    let p = h.predict(&g)?;
    let (x, _) = test.range(0, 16.min(test.len()))?;

    let plain = float_forward(&g, &p, &x, cfg.quant.eps_fold)?;
    let folded = folded_float_forward(&g, &p, &x, cfg.quant.eps_fold)?;
    println!("folded vs plain float: max |diff| = {:.3e}", plain.max_abs_diff(&folded));

    for bits in [8, 6, 4, 3, 2] {
        let m = quant_error_metrics(&g, &p, &x, &QuantConfig::bits(bits))?;
        let worst = m.per_layer_mse.values().copied().fold(0.0, f64::max);
        println!("quant{bits}: logit MSE {:.3e}, worst weight MSE {worst:.3e}", m.output_mse);
    }
    Ok(())
}
