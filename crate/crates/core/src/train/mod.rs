//! Hypernetwork finetuning, dataset handling and the evaluation protocol.

pub mod data;
mod eval;
mod forward;
pub mod stats;

pub use data::{DataConfig, DataSource, Dataset, NormStats, SplitTag};
pub use eval::{
    evaluate, EvalConfig, network_accuracy, per_network_robustness, EvalReport, NetworkRecord, Robustness,
    SummaryRow,
};
pub use forward::forward_on_tape;
pub use stats::{format_cell, layerwise_distribution_stats, per_channel_range, summarize, Summary, TensorStats};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::arch::{stream_rng, ArchGraph};
use crate::error::{Error, Result};
use crate::hypernet::{Checkpoint, Hypernet};
use crate::quant::DEFAULT_EPS_FOLD;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};

/// Epsilon of batch normalization during training.
pub const BN_EPS: f64 = DEFAULT_EPS_FOLD;

const SHUFFLE_SALT: u64 = 0x5348_5546;
const ARCH_SALT: u64 = 0x4152_4348;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the training images.
    pub steps_per_epoch: usize,
    pub lr: f64,
    /// Zero-based epoch from which the learning rate is multiplied by
    /// `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub meta_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            steps_per_epoch: 0,
            lr: 1e-3,
            lr_drop_epoch: 4,
            lr_drop_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 32,
            meta_batch_size: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.epochs == 0 || self.batch_size < 2 || self.meta_batch_size == 0 {
            return bad("epochs and meta_batch_size must be >= 1 and batch_size >= 2");
        }
        if self.lr_drop_epoch >= self.epochs {
            return bad("lr_drop_epoch must be < epochs");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.lr_drop_factor > 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return bad("lr_drop_factor and eps must be > 0, weight_decay >= 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.lr * self.lr_drop_factor
        } else {
            self.lr
        }
    }

    fn adam(&self, epoch: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_at(epoch),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn steps_for(&self, n_train: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            (n_train / self.batch_size).max(1)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(h: &Hypernet) -> Self {
        TrainState {
            epochs_done: 0,
            adam: AdamState::new(h.params()),
            history: vec![],
        }
    }

    /// Loss history as CSV: `epoch,lr,mean_loss,steps`.
    pub fn history_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss,steps\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:.10},{}\n", r.epoch, r.lr, r.mean_loss, r.steps));
        }
        s
    }
}

/// Checkpoint holding the hypernet, optimizer moments and history.
pub fn training_checkpoint(h: &Hypernet, st: &TrainState, cfg: &TrainConfig) -> Checkpoint {
    let mut c = h.to_checkpoint();
    c.header["train"] = json!({
        "epochs_done": st.epochs_done,
        "adam_step": st.adam.step,
        "history": st.history,
        "config": cfg,
    });
    for (i, name) in h.names().iter().enumerate() {
        let shape = h.params()[i].shape().to_vec();
        c.tensors.insert(
            format!("adam.m.{name}"),
            Tensor::new(shape.clone(), st.adam.m[i].clone()).expect("finite moments"),
        );
        c.tensors.insert(
            format!("adam.v.{name}"),
            Tensor::new(shape, st.adam.v[i].clone()).expect("finite moments"),
        );
    }
    c
}

/// Restores what [`training_checkpoint`] stored. A checkpoint without a
/// training record yields a fresh state.
pub fn restore_training(c: &Checkpoint) -> Result<(Hypernet, TrainState, Option<TrainConfig>)> {
    let h = Hypernet::from_checkpoint(c)?;
    let Some(t) = c.header.get("train") else {
        let st = TrainState::new(&h);
        return Ok((h, st, None));
    };
    let bad = |m: String| Error::Checkpoint(format!("training record: {m}"));
    let epochs_done = t["epochs_done"].as_u64().ok_or_else(|| bad("epochs_done".into()))? as usize;
    let step = t["adam_step"].as_u64().ok_or_else(|| bad("adam_step".into()))?;
    let history: Vec<EpochRecord> =
        serde_json::from_value(t["history"].clone()).map_err(|e| bad(e.to_string()))?;
    let cfg: TrainConfig = serde_json::from_value(t["config"].clone()).map_err(|e| bad(e.to_string()))?;
    if history.len() != epochs_done {
        return Err(bad(format!("{} history rows for {epochs_done} epochs", history.len())));
    }
    let mut m = vec![];
    let mut v = vec![];
    for name in h.names() {
        let get = |k: &str| {
            c.tensors
                .get(&format!("adam.{k}.{name}"))
                .map(|t| t.data().to_vec())
                .ok_or_else(|| bad(format!("missing adam.{k}.{name}")))
        };
        m.push(get("m")?);
        v.push(get("v")?);
    }
    Ok((
        h,
        TrainState {
            epochs_done,
            adam: AdamState { step, m, v },
            history,
        },
        Some(cfg),
    ))
}

fn diverged(g: &ArchGraph, e: Error) -> Error {
    match e {
        Error::NonFinite(d) => Error::Diverged {
            hash: g.hash(),
            detail: d,
        },
        other => other,
    }
}

/// One meta-batch step. Returns the mean loss over the architectures.
fn train_step(
    h: &mut Hypernet,
    st: &mut TrainState,
    archs: &[&ArchGraph],
    x: Tensor,
    labels: &[usize],
    adam: &AdamConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = h.bind(&mut tape, true);
    let xv = tape.constant(x);
    let mut total = None;
    for g in archs {
        let run = |tape: &mut Tape| -> Result<_> {
            let dec = h.predict_on_tape(tape, &vars, g)?;
            let logits = forward_on_tape(tape, g, &dec.params, xv, BN_EPS)?;
            tape.softmax_cross_entropy(logits, labels)
        };
        let loss = run(&mut tape).map_err(|e| diverged(g, e))?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Diverged {
                hash: g.hash(),
                detail: format!("loss {lv}"),
            });
        }
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss)?,
        });
    }
    let total = total.ok_or_else(|| Error::Invalid("empty meta-batch".into()))?;
    let mean = tape.affine(total, 1.0 / archs.len() as f64, 0.0)?;
    let grads = tape.backward(mean)?;
    let gs: Vec<Tensor> = vars
        .vars
        .iter()
        .zip(h.params())
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let decay = h.decay_mask().to_vec();
    adam_step(h.params_mut(), &gs, &decay, &mut st.adam, adam)?;
    Ok(tape.value(mean).item())
}

/// Runs epoch `st.epochs_done` and appends its record.
pub fn train_epoch(
    h: &mut Hypernet,
    st: &mut TrainState,
    cfg: &TrainConfig,
    pool: &[ArchGraph],
    data: &Dataset,
) -> Result<EpochRecord> {
    cfg.validate()?;
    if pool.is_empty() || data.is_empty() {
        return Err(Error::Invalid("training needs a non-empty pool and dataset".into()));
    }
    let epoch = st.epochs_done;
    let adam = cfg.adam(epoch);
    let n = data.len();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream_rng(cfg.seed ^ SHUFFLE_SALT, epoch as u64));
    let steps = cfg.steps_for(n);
    let mut loss_sum = 0.0;
    for s in 0..steps {
        let mut rng = stream_rng(cfg.seed ^ ARCH_SALT, ((epoch as u64) << 32) | s as u64);
        let archs: Vec<&ArchGraph> = (0..cfg.meta_batch_size)
            .map(|_| &pool[rng.random_range(0..pool.len())])
            .collect();
        let idx: Vec<usize> = (0..cfg.batch_size).map(|j| perm[(s * cfg.batch_size + j) % n]).collect();
        let (x, y) = data.batch(&idx)?;
        loss_sum += train_step(h, st, &archs, x, &y, &adam)?;
    }
    let rec = EpochRecord {
        epoch,
        lr: adam.lr,
        mean_loss: loss_sum / steps as f64,
        steps,
    };
    st.history.push(rec.clone());
    st.epochs_done += 1;
    Ok(rec)
}

/// Trains from `st` until `cfg.epochs` epochs are done. `on_epoch` runs after
/// every epoch; returning `false` stops early.
pub fn finetune_from(
    h: &mut Hypernet,
    st: &mut TrainState,
    cfg: &TrainConfig,
    pool: &[ArchGraph],
    data: &Dataset,
    mut on_epoch: impl FnMut(&Hypernet, &TrainState) -> Result<bool>,
) -> Result<()> {
    cfg.validate()?;
    while st.epochs_done < cfg.epochs {
        train_epoch(h, st, cfg, pool, data)?;
        if !on_epoch(h, st)? {
            break;
        }
    }
    Ok(())
}

/// Trains a fresh optimizer state for `cfg.epochs` epochs.
pub fn finetune(h: &mut Hypernet, cfg: &TrainConfig, pool: &[ArchGraph], data: &Dataset) -> Result<TrainState> {
    let mut st = TrainState::new(h);
    finetune_from(h, &mut st, cfg, pool, data, |_, _| Ok(true))?;
    Ok(st)
}

/// Per-epoch loss keyed by epoch.
pub fn loss_by_epoch(st: &TrainState) -> BTreeMap<usize, f64> {
    st.history.iter().map(|r| (r.epoch, r.mean_loss)).collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::arch::{training_pool, SpaceConfig};
    use crate::hypernet::{HypernetConfig, Hypernet};
    use crate::quant::float_forward;

    pub(crate) fn toy_space() -> SpaceConfig {
        SpaceConfig {
            depth_min: 2,
            depth_max: 4,
            width_min: 4,
            width_max: 8,
            stages_min: 1,
            stages_max: 2,
            input_resolution: [3, 8, 8],
            ..Default::default()
        }
    }

    fn toy_hyper() -> Hypernet {
        Hypernet::new(HypernetConfig {
            embed_dim: 8,
            mp_rounds: 1,
            canonical_shape: [8, 8, 3, 3],
            decoder_hidden: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn toy_data() -> (Dataset, Dataset) {
        let cfg = DataConfig {
            n_train: 64,
            n_test: 32,
            ..Default::default()
        };
        cfg.load((3, 8, 8), 10, None).unwrap()
    }

    #[test]
    fn tape_forward_matches_executor_bitwise() {
        let h = toy_hyper();
        let (tr, _) = toy_data();
        let pool = training_pool(&toy_space(), 5).unwrap();
        let (x, _) = tr.range(0, 8).unwrap();
        for g in &pool {
            let mut tape = Tape::new();
            let v = h.bind(&mut tape, false);
            let dec = h.predict_on_tape(&mut tape, &v, g).unwrap();
            let xv = tape.constant(x.clone());
            let lt = forward_on_tape(&mut tape, g, &dec.params, xv, BN_EPS).unwrap();
            let p = h.predict(g).unwrap();
            let lf = float_forward(g, &p, &x, BN_EPS).unwrap();
            assert_eq!(tape.value(lt), &lf);
        }
    }

    #[test]
    fn zero_lr_keeps_hypernet_bit_identical() {
        let mut h = toy_hyper();
        let before = h.clone();
        let (tr, _) = toy_data();
        let pool = training_pool(&toy_space(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            lr: 0.0,
            lr_drop_epoch: 0,
            steps_per_epoch: 2,
            batch_size: 8,
            meta_batch_size: 2,
            ..Default::default()
        };
        let st = finetune(&mut h, &cfg, &pool, &tr).unwrap();
        assert_eq!(st.history.len(), 1);
        for (a, b) in h.params().iter().zip(before.params()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn lr_schedule_and_resume_are_exact() {
        let cfg = TrainConfig {
            epochs: 3,
            lr_drop_epoch: 2,
            steps_per_epoch: 2,
            batch_size: 8,
            meta_batch_size: 2,
            ..Default::default()
        };
        assert_eq!(cfg.lr_at(1), 1e-3);
        assert!((cfg.lr_at(2) - 1e-4).abs() < 1e-18);
        let (tr, _) = toy_data();
        let pool = training_pool(&toy_space(), 5).unwrap();

        let mut full = toy_hyper();
        let st_full = finetune(&mut full, &cfg, &pool, &tr).unwrap();
        assert_eq!(st_full.history[2].lr, cfg.lr_at(2));

        let mut part = toy_hyper();
        let mut st = TrainState::new(&part);
        finetune_from(&mut part, &mut st, &cfg, &pool, &tr, |_, s| Ok(s.epochs_done < 1)).unwrap();
        assert_eq!(st.epochs_done, 1);
        let bytes = training_checkpoint(&part, &st, &cfg).to_bytes();
        let (mut h2, mut st2, saved) = restore_training(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(saved.as_ref(), Some(&cfg));
        finetune_from(&mut h2, &mut st2, &cfg, &pool, &tr, |_, _| Ok(true)).unwrap();
        assert_eq!(h2, full);
        assert_eq!(st2, st_full);
        assert_eq!(st2.history_csv().lines().count(), 4);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            lr_drop_epoch: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
