//! Test-set accuracy of predicted networks across precisions and splits.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::stats::{format_cell, layerwise_distribution_stats, summarize, TensorStats};
use crate::arch::{ArchGraph, SplitKind, Splits};
use crate::error::{Error, Result};
use crate::hypernet::Hypernet;
use crate::params::PredictedParams;
use crate::quant::{float_forward, quantized_forward, quantized_forward_traced, Precision, QuantConfig, DEFAULT_EPS_FOLD};
use crate::tensor::ops::argmax_rows;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub test_batch_size: usize,
    pub eps_fold: f64,
    /// Attach per-tensor distribution statistics to every network record.
    pub distribution_stats: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            test_batch_size: 64,
            eps_fold: DEFAULT_EPS_FOLD,
            distribution_stats: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.test_batch_size < 2 {
            return Err(Error::Config("eval: test_batch_size must be >= 2".into()));
        }
        QuantConfig {
            precision: Precision::Float32,
            eps_fold: self.eps_fold,
        }
        .validate()
    }

    fn quant(&self, precision: Precision) -> QuantConfig {
        QuantConfig {
            precision,
            eps_fold: self.eps_fold,
        }
    }
}

/// Batch ranges over `n` images. Batch statistics need two samples, so with
/// BatchNorm a trailing single image is dropped.
fn batches(n: usize, size: usize, has_bn: bool) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(size)
        .map(|s| (s, (s + size).min(n)))
        .filter(|(s, e)| !has_bn || e - s >= 2)
        .collect()
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count()
}

/// Top-1 accuracy in percent.
pub fn network_accuracy(
    g: &ArchGraph,
    params: &PredictedParams,
    data: &Dataset,
    qc: &QuantConfig,
    test_batch_size: usize,
) -> Result<f64> {
    let (mut hit, mut total) = (0, 0);
    for (s, e) in batches(data.len(), test_batch_size, g.has_batchnorm()) {
        let (x, y) = data.range(s, e)?;
        hit += correct(&quantized_forward(g, params, &x, qc)?, &y);
        total += y.len();
    }
    if total == 0 {
        return Err(Error::Invalid("no evaluable test images".into()));
    }
    Ok(100.0 * hit as f64 / total as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetworkRecord {
    pub split: SplitKind,
    pub index: usize,
    pub hash: String,
    pub params: u64,
    pub depth: usize,
    pub width: usize,
    pub has_batchnorm: bool,
    /// Accuracy in percent per precision, in evaluation order.
    pub accuracy: Vec<(Precision, f64)>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub distribution: Vec<TensorStats>,
}

impl NetworkRecord {
    pub fn accuracy_at(&self, p: Precision) -> Option<f64> {
        self.accuracy.iter().find(|(q, _)| *q == p).map(|x| x.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub split: SplitKind,
    pub precision: Precision,
    pub n: usize,
    pub mean_pct: f64,
    pub sem_pct: f64,
    pub max_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub precisions: Vec<Precision>,
    pub rows: Vec<SummaryRow>,
    pub networks: Vec<NetworkRecord>,
}

impl EvalReport {
    pub fn row(&self, split: SplitKind, precision: Precision) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.split == split && r.precision == precision)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("split,precision,n,mean_pct,sem_pct,max_pct\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{:.4},{:.4},{:.4}",
                r.split, r.precision, r.n, r.mean_pct, r.sem_pct, r.max_pct
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Precision rows by split columns, each cell `mean±sem; max`.
    pub fn table(&self) -> String {
        let mut splits: Vec<SplitKind> = vec![];
        for r in &self.rows {
            if !splits.contains(&r.split) {
                splits.push(r.split);
            }
        }
        let mut s = format!("{:<10}", "precision");
        for k in &splits {
            let _ = write!(s, " | {:<20}", k.name());
        }
        s.push('\n');
        for &p in &self.precisions {
            let _ = write!(s, "{:<10}", p.to_string());
            for &k in &splits {
                let cell = self.row(k, p).map_or("-".to_string(), |r| {
                    format_cell(&super::Summary {
                        n: r.n,
                        mean: r.mean_pct,
                        sem: r.sem_pct,
                        max: r.max_pct,
                    })
                });
                let _ = write!(s, " | {cell:<20}");
            }
            s.push('\n');
        }
        s
    }
}

fn record(
    h: &Hypernet,
    split: SplitKind,
    index: usize,
    g: &ArchGraph,
    data: &Dataset,
    precisions: &[Precision],
    cfg: &EvalConfig,
) -> Result<NetworkRecord> {
    let params = h.predict(g)?;
    let accuracy = precisions
        .iter()
        .map(|&p| Ok((p, network_accuracy(g, &params, data, &cfg.quant(p), cfg.test_batch_size)?)))
        .collect::<Result<_>>()?;
    let distribution = if cfg.distribution_stats {
        layerwise_distribution_stats(g, &params)?
    } else {
        vec![]
    };
    Ok(NetworkRecord {
        split,
        index,
        hash: g.hash(),
        params: g.count_params(),
        depth: g.depth(),
        width: g.width(),
        has_batchnorm: g.has_batchnorm(),
        accuracy,
        distribution,
    })
}

/// Evaluates every network of every split at every precision. Networks run
/// in parallel on the current rayon pool; results keep split and index order.
pub fn evaluate(
    h: &Hypernet,
    splits: &Splits,
    data: &Dataset,
    precisions: &[Precision],
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    cfg.validate()?;
    if precisions.is_empty() {
        return Err(Error::Config("eval: no precisions requested".into()));
    }
    for p in precisions {
        p.validate()?;
    }
    let mut jobs = vec![];
    for (k, gs) in &splits.sets {
        if gs.is_empty() {
            return Err(Error::Invalid(format!("split {k} is empty")));
        }
        jobs.extend(gs.iter().enumerate().map(|(i, g)| (*k, i, g)));
    }
    let networks = jobs
        .par_iter()
        .map(|&(k, i, g)| record(h, k, i, g, data, precisions, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = vec![];
    for (k, _) in &splits.sets {
        for &p in precisions {
            let acc: Vec<f64> = networks
                .iter()
                .filter(|r| r.split == *k)
                .filter_map(|r| r.accuracy_at(p))
                .collect();
            let s = summarize(&acc)?;
            rows.push(SummaryRow {
                split: *k,
                precision: p,
                n: s.n,
                mean_pct: s.mean,
                sem_pct: s.sem,
                max_pct: s.max,
            });
        }
    }
    Ok(EvalReport {
        precisions: precisions.to_vec(),
        rows,
        networks,
    })
}

/// Float-versus-quantized comparison of one network on the test set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Robustness {
    pub precision: Precision,
    pub accuracy_float: f64,
    pub accuracy_quant: f64,
    /// `accuracy_float - accuracy_quant`, in percentage points.
    pub accuracy_delta: f64,
    /// Logit MSE, averaged over test batches.
    pub output_mse: f64,
    /// Weight MSE per conv/linear node id, averaged over test batches.
    pub per_layer_mse: BTreeMap<u32, f64>,
}

pub fn per_network_robustness(
    g: &ArchGraph,
    params: &PredictedParams,
    data: &Dataset,
    qc: &QuantConfig,
    test_batch_size: usize,
) -> Result<Robustness> {
    qc.validate()?;
    let ranges = batches(data.len(), test_batch_size.max(2), g.has_batchnorm());
    if ranges.is_empty() {
        return Err(Error::Invalid("no evaluable test images".into()));
    }
    let (mut hit_f, mut hit_q, mut total) = (0, 0, 0);
    let mut out_mse = 0.0;
    let mut layer: BTreeMap<u32, f64> = BTreeMap::new();
    for &(s, e) in &ranges {
        let (x, y) = data.range(s, e)?;
        let f = float_forward(g, params, &x, qc.eps_fold)?;
        let q = quantized_forward_traced(g, params, &x, qc)?;
        hit_f += correct(&f, &y);
        hit_q += correct(&q.logits, &y);
        total += y.len();
        out_mse += f.data().iter().zip(q.logits.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            / f.numel() as f64;
        for (id, m) in q.weight_mse {
            *layer.entry(id).or_default() += m;
        }
    }
    let nb = ranges.len() as f64;
    let accuracy_float = 100.0 * hit_f as f64 / total as f64;
    let accuracy_quant = 100.0 * hit_q as f64 / total as f64;
    Ok(Robustness {
        precision: qc.precision,
        accuracy_float,
        accuracy_quant,
        accuracy_delta: accuracy_float - accuracy_quant,
        output_mse: out_mse / nb,
        per_layer_mse: layer.into_iter().map(|(k, v)| (k, v / nb)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{compute_virtual_edges, make_splits, testing, SplitPlan, SplitSizes};
    use crate::hypernet::tests::tiny_cfg;
    use crate::train::data::{DataConfig, SplitTag};
    use crate::train::tests::toy_space;

    fn toy_test_set(n: usize) -> Dataset {
        let cfg = DataConfig {
            n_train: 8,
            n_test: n,
            ..Default::default()
        };
        let (_, te) = cfg.load((3, 8, 8), 10, None).unwrap();
        assert_eq!(te.tag, SplitTag::Test);
        te
    }

    #[test]
    fn batch_ranges() {
        assert_eq!(batches(5, 2, false), vec![(0, 2), (2, 4), (4, 5)]);
        assert_eq!(batches(5, 2, true), vec![(0, 2), (2, 4)]);
        assert_eq!(batches(4, 64, true), vec![(0, 4)]);
    }

    #[test]
    fn accuracy_matches_standalone_oracle() {
        let h = Hypernet::new(tiny_cfg()).unwrap();
        let g = compute_virtual_edges(&testing::small_net(), 10).unwrap();
        let cfg = DataConfig {
            n_train: 8,
            n_test: 31,
            ..Default::default()
        };
        let (_, te) = cfg.load((3, 6, 6), 3, None).unwrap();
        let p = h.predict(&g).unwrap();
        // Oracle: explicit per-batch float forward and argmax.
        let mut hit = 0;
        let mut total = 0;
        let mut s = 0;
        while s < te.len() {
            let e = (s + 10).min(te.len());
            if e - s >= 2 {
                let (x, y) = te.range(s, e).unwrap();
                let l = float_forward(&g, &p, &x, 1e-5).unwrap();
                for (r, &lab) in y.iter().enumerate() {
                    let row = &l.data()[r * 3..r * 3 + 3];
                    let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                    hit += (best == lab) as usize;
                    total += 1;
                }
            }
            s = e;
        }
        assert_eq!(total, 30);
        let a = network_accuracy(&g, &p, &te, &QuantConfig::float(), 10).unwrap();
        assert!((a - 100.0 * hit as f64 / total as f64).abs() < 1e-12);

        let r = per_network_robustness(&g, &p, &te, &QuantConfig::float(), 10).unwrap();
        assert_eq!((r.accuracy_float, r.accuracy_quant, r.output_mse), (a, a, 0.0));
        let r4 = per_network_robustness(&g, &p, &te, &QuantConfig::bits(4), 10).unwrap();
        assert!(r4.output_mse > 0.0);
        assert_eq!(r4.per_layer_mse.keys().copied().collect::<Vec<_>>(), vec![1, 5]);
    }

    #[test]
    fn report_is_deterministic_and_ordered() {
        let h = Hypernet::new(crate::hypernet::HypernetConfig {
            canonical_shape: [8, 8, 3, 3],
            ..tiny_cfg()
        })
        .unwrap();
        let plan = SplitPlan {
            sizes: SplitSizes {
                iid: 3,
                deep: 2,
                wide: 2,
                bn_free: 2,
            },
            train_draws: 10,
            deep_depth: [5, 6],
            wide_width: [16, 16],
            ..Default::default()
        };
        let splits = make_splits(&toy_space(), &plan).unwrap();
        let te = toy_test_set(20);
        let cfg = EvalConfig {
            test_batch_size: 8,
            ..Default::default()
        };
        let precisions = Precision::defaults();
        let a = evaluate(&h, &splits, &te, &precisions, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| evaluate(&h, &splits, &te, &precisions, &cfg)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 4 * 3);
        assert_eq!(a.networks.len(), 9);
        let csv = a.to_csv();
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.lines().nth(1).unwrap().starts_with("iid,float32,3,"));
        let v: serde_json::Value = serde_json::from_str(&a.to_json()).unwrap();
        assert_eq!(v["networks"].as_array().unwrap().len(), 9);
        assert!(a.table().contains("bn_free"));
        for r in &a.networks {
            assert!(r.accuracy.iter().all(|(_, x)| (0.0..=100.0).contains(x)));
        }
        assert!(evaluate(&h, &splits, &te, &[], &cfg).is_err());
    }
}
