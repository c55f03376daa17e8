//! Train briefly, then evaluate every test split at Float32, Quant8 and Quant4.
//!
//! `cargo run --release --example evaluate_splits -- configs/toy.toml`

use ghnq::cli::RunConfig;
use ghnq::hypernet::Hypernet;
use ghnq::quant::Precision;
use ghnq::train::{evaluate, finetune};

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    cfg.validate()?;
    let (train, test) = cfg.load_data()?;
    let mut h = Hypernet::new(cfg.hypernet.clone())?;
    let st = finetune(&mut h, &cfg.train, &cfg.training_pool()?, &train)?;
    println!("final training loss {:.4}", st.history.last().unwrap().mean_loss);

    let mut ec = cfg.eval_config();
    ec.distribution_stats = false;
    let report = evaluate(&h, &cfg.make_splits()?, &test, &Precision::defaults(), &ec)?;
    println!("\ntest accuracy, mean±SEM; max:\n{}", report.table());
    print!("{}", report.to_csv());
    Ok(())
}
