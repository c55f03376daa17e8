//! Finetune a hypernetwork, stop halfway, save a checkpoint, resume, and check
//! that the result matches an uninterrupted run.
//!
//! `cargo run --release --example finetune -- configs/toy.toml`

use ghnq::cli::RunConfig;
use ghnq::hypernet::{Checkpoint, Hypernet};
use ghnq::train::{finetune, finetune_from, restore_training, training_checkpoint, TrainState};

fn main() -> ghnq::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/tiny.toml").into());
    let cfg = RunConfig::load(path.as_ref())?;
    cfg.validate()?;
    let (train, _) = cfg.load_data()?;
    let pool = cfg.training_pool()?;
    let half = cfg.train.epochs / 2;

    let mut h = Hypernet::new(cfg.hypernet.clone())?;
    let mut st = TrainState::new(&h);
    finetune_from(&mut h, &mut st, &cfg.train, &pool, &train, |_, s| {
        let r = s.history.last().unwrap();
        println!("epoch {} lr {:e} loss {:.4}", r.epoch, r.lr, r.mean_loss);
        Ok(s.epochs_done < half.max(1))
    })?;
    let bytes = training_checkpoint(&h, &st, &cfg.train).to_bytes();
    println!("checkpoint after {} epochs: {} bytes", st.epochs_done, bytes.len());

    let (mut h, mut st, _) = restore_training(&Checkpoint::from_bytes(&bytes)?)?;
    finetune_from(&mut h, &mut st, &cfg.train, &pool, &train, |_, s| {
        let r = s.history.last().unwrap();
        println!("epoch {} lr {:e} loss {:.4} (resumed)", r.epoch, r.lr, r.mean_loss);
        Ok(true)
    })?;

    let mut straight = Hypernet::new(cfg.hypernet.clone())?;
    finetune(&mut straight, &cfg.train, &pool, &train)?;
    println!("resumed run identical to uninterrupted run: {}", straight == h);
    print!("\n{}", st.history_csv());
    Ok(())
}
