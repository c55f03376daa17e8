//! Summary statistics over networks and over predicted tensors.

use serde::Serialize;

use crate::arch::{ArchGraph, OpKind};
use crate::error::{Error, Result};
use crate::params::PredictedParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Standard error of the mean with the n-1 sample deviation; 0 for n = 1.
    pub sem: f64,
    pub max: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Invalid("summarize: no values".into()));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sem = if n > 1 {
        let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
        (ss / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Summary { n, mean, sem, max })
}

/// `mean±sem; max` with one decimal.
pub fn format_cell(s: &Summary) -> String {
    format!("{:.1}±{:.1}; {:.1}", s.mean, s.sem, s.max)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorStats {
    pub node: u32,
    pub role: &'static str,
    pub numel: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
    /// Excess kurtosis `m4 / m2^2 - 3`; 0 when `degenerate`.
    pub kurtosis: f64,
    /// Zero variance, so kurtosis is undefined.
    pub degenerate: bool,
}

pub fn tensor_stats(node: u32, role: &'static str, t: &Tensor) -> TensorStats {
    let d = t.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in d {
        let c = (x - mean) * (x - mean);
        m2 += c;
        m4 += c * c;
    }
    m2 /= n;
    m4 /= n;
    let degenerate = m2 == 0.0;
    TensorStats {
        node,
        role,
        numel: d.len(),
        min: t.min(),
        max: t.max(),
        mean,
        std: m2.sqrt(),
        kurtosis: if degenerate { 0.0 } else { m4 / (m2 * m2) - 3.0 },
        degenerate,
    }
}

/// One record per predicted tensor, ordered by node id. BatchNorm tensors are
/// reported as `gamma` and `beta`.
pub fn layerwise_distribution_stats(g: &ArchGraph, p: &PredictedParams) -> Result<Vec<TensorStats>> {
    p.validate(g)?;
    let mut out = vec![];
    for n in &g.nodes {
        let Some(ts) = p.get(n.id) else { continue };
        for (i, t) in ts.iter().enumerate() {
            let r = match (n.kind == OpKind::BatchNorm, i) {
                (true, 0) => "gamma",
                (true, _) => "beta",
                (false, 0) => "weight",
                (false, _) => "bias",
            };
            out.push(tensor_stats(n.id, r, t));
        }
    }
    Ok(out)
}

/// `(min, max)` of each slice along axis 0, e.g. each output channel of a
/// conv weight.
pub fn per_channel_range(t: &Tensor) -> Result<Vec<(f64, f64)>> {
    let Some(&c) = t.shape().first() else {
        return Err(Error::shape("per_channel_range", "scalar tensor"));
    };
    if c == 0 {
        return Ok(vec![]);
    }
    let step = t.numel() / c;
    Ok(t.data()
        .chunks(step.max(1))
        .map(|ch| {
            ch.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn hand_computed_summary() {
        let s = summarize(&[50.0, 60.0, 70.0]).unwrap();
        assert_eq!(s.n, 3);
        assert!((s.mean - 60.0).abs() < 1e-12);
        // sqrt(100 / 3)
        assert!((s.sem - 5.773_502_691_896_258).abs() < 1e-9);
        assert_eq!(s.max, 70.0);
        assert_eq!(format_cell(&s), "60.0±5.8; 70.0");
        let one = summarize(&[42.0]).unwrap();
        assert_eq!((one.mean, one.sem, one.max), (42.0, 0.0, 42.0));
        assert!(summarize(&[]).is_err());
    }

    #[test]
    fn normal_sample_has_near_zero_excess_kurtosis() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let d: Vec<f64> = (0..100_000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s = tensor_stats(0, "weight", &Tensor::new(vec![d.len()], d).unwrap());
        assert!(s.kurtosis.abs() < 0.1, "{}", s.kurtosis);
        assert!((s.std - 1.0).abs() < 0.02);
        assert!(!s.degenerate);
    }

    #[test]
    fn constant_and_known_distributions() {
        let c = tensor_stats(0, "bias", &Tensor::full(&[7], 1.5));
        assert!(c.degenerate);
        assert_eq!((c.kurtosis, c.std, c.min, c.max), (0.0, 0.0, 1.5, 1.5));
        // Two-point symmetric distribution: m4 / m2^2 = 1.
        let t = tensor_stats(0, "weight", &Tensor::new(vec![4], vec![-1.0, 1.0, -1.0, 1.0]).unwrap());
        assert!((t.kurtosis + 2.0).abs() < 1e-12);
    }

    #[test]
    fn channel_ranges() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(per_channel_range(&t).unwrap(), vec![(-2.0, 3.0), (0.5, 0.5)]);
        assert_eq!(per_channel_range(&Tensor::scalar(1.0)).unwrap(), vec![(1.0, 1.0)]);
    }

    #[test]
    fn layerwise_roles() {
        let g = crate::arch::compute_virtual_edges(&crate::arch::testing::small_net(), 10).unwrap();
        let h = crate::hypernet::Hypernet::new(crate::hypernet::tests::tiny_cfg()).unwrap();
        let p = h.predict(&g).unwrap();
        let s = layerwise_distribution_stats(&g, &p).unwrap();
        let roles: Vec<_> = s.iter().map(|r| (r.node, r.role)).collect();
        assert_eq!(
            roles,
            vec![(1, "weight"), (2, "gamma"), (2, "beta"), (5, "weight"), (5, "bias")]
        );
    }
}
