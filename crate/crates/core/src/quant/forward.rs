//! Graph executor shared by float inference and simulated quantization.
//!
//! In quantized mode every node output is fake-quantized with an encoding
//! taken from that tensor on the current batch, except `Concat` (and the
//! pass-through `Output`). The input batch is quantized too. A convolution
//! whose sole consumer is a `BatchNorm` is folded: the float conv gives this
//! batch's statistics, the folded weight is quantized, and the remaining
//! per-channel shift enters as an unquantized bias.

use std::collections::BTreeMap;

use super::{bn_fold, fake_quantize_dynamic, BnFoldInputs, QuantConfig};
use crate::arch::{ArchGraph, Attrs, OpKind};
use crate::error::{Error, Result};
use crate::params::PredictedParams;
use crate::tensor::{ops, Tensor};

#[derive(Clone, Copy, Debug)]
struct Mode {
    bits: Option<u32>,
    fold: bool,
    eps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub logits: Tensor,
    /// Mean squared difference between each layer's float weight and the
    /// weight actually used, keyed by conv/linear node id. For folded convs
    /// the reference is the folded weight.
    pub weight_mse: BTreeMap<u32, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantErrorMetrics {
    pub per_layer_mse: BTreeMap<u32, f64>,
    pub output_mse: f64,
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.numel() as f64
}

impl Mode {
    fn act(&self, t: Tensor) -> Result<Tensor> {
        match self.bits {
            Some(b) => Ok(fake_quantize_dynamic(&t, b)?.0),
            None => Ok(t),
        }
    }

    fn weight(&self, id: u32, w: &Tensor, mse_log: &mut BTreeMap<u32, f64>) -> Result<Tensor> {
        match self.bits {
            Some(b) => {
                let (q, _) = fake_quantize_dynamic(w, b)?;
                mse_log.insert(id, mse(w, &q));
                Ok(q)
            }
            None => {
                mse_log.insert(id, 0.0);
                Ok(w.clone())
            }
        }
    }
}

fn execute(
    g: &ArchGraph,
    params: &PredictedParams,
    batch: &Tensor,
    mode: Mode,
) -> Result<ForwardTrace> {
    params.validate(g)?;
    let (c, h, w) = g.input_resolution;
    if batch.ndim() != 4 || batch.shape()[1..] != [c, h, w] {
        return Err(Error::shape(
            "forward",
            format!("batch {:?} does not match input resolution {c}x{h}x{w}", batch.shape()),
        ));
    }
    let n = batch.shape()[0];
    if g.has_batchnorm() && n < 2 {
        return Err(Error::Invalid(format!(
            "forward: batch size {n} < 2 with BatchNorm present"
        )));
    }
    let topo = g.topology()?;
    let mut vals: Vec<Option<Tensor>> = vec![None; g.nodes.len()];
    let mut weight_mse = BTreeMap::new();
    let mut out_pos = None;

    for &i in &topo.order {
        if vals[i].is_some() {
            continue; // BN already produced by its folded conv
        }
        let node = &g.nodes[i];
        let input = |k: usize| -> &Tensor { vals[topo.preds[i][k]].as_ref().unwrap() };
        let p = params.get(node.id).unwrap_or(&[]);
        let v = match node.kind {
            OpKind::Input => mode.act(batch.clone())?,
            OpKind::Output => {
                out_pos = Some(i);
                input(0).clone()
            }
            OpKind::ConvRegular | OpKind::ConvDepthwise | OpKind::ConvDilated => {
                let conv = node.conv().unwrap();
                let x = input(0);
                let bn = match topo.succs[i].as_slice() {
                    [s] if mode.fold
                        && g.nodes[*s].kind == OpKind::BatchNorm
                        && topo.preds[*s].len() == 1 =>
                    {
                        Some(*s)
                    }
                    _ => None,
                };
                if let Some(s) = bn {
                    let bn_node = &g.nodes[s];
                    let bp = params.get(bn_node.id).ok_or(Error::MissingParams(bn_node.id))?;
                    let (gamma, beta) = (&bp[0], &bp[1]);
                    let y = ops::conv2d(x, &p[0], p.get(1), conv.params())?;
                    let (mean, var) = ops::channel_stats(&y)?;
                    let var_t = Tensor::new(vec![var.len()], var.clone())?;
                    let w_fold = bn_fold(&BnFoldInputs {
                        w: &p[0],
                        gamma,
                        batch_var: &var_t,
                        eps: mode.eps,
                    })?;
                    let wq = mode.weight(node.id, &w_fold, &mut weight_mse)?;
                    let shift: Vec<f64> = (0..conv.cout)
                        .map(|co| {
                            let b = p.get(1).map_or(0.0, |b| b.data()[co]);
                            beta.data()[co]
                                - gamma.data()[co] * (mean[co] - b) / (var[co] + mode.eps).sqrt()
                        })
                        .collect();
                    let shift = Tensor::new(vec![conv.cout], shift)?;
                    let out = ops::conv2d(x, &wq, Some(&shift), conv.params())?;
                    vals[s] = Some(mode.act(out)?);
                    continue;
                }
                let wq = mode.weight(node.id, &p[0], &mut weight_mse)?;
                mode.act(ops::conv2d(x, &wq, p.get(1), conv.params())?)?
            }
            OpKind::BatchNorm => {
                let r = ops::batchnorm2d(input(0), &p[0], &p[1], mode.eps)?;
                mode.act(r.output)?
            }
            OpKind::ReLU => mode.act(ops::relu(input(0)))?,
            OpKind::MaxPool | OpKind::AvgPool => {
                let Attrs::Pool(pa) = node.attrs else { unreachable!() };
                let out = if node.kind == OpKind::MaxPool {
                    ops::max_pool2d(input(0), pa.params())?.0
                } else {
                    ops::avg_pool2d(input(0), pa.params())?
                };
                mode.act(out)?
            }
            OpKind::GlobalAvgPool => mode.act(ops::global_avg_pool(input(0))?)?,
            OpKind::Linear => {
                let wq = mode.weight(node.id, &p[0], &mut weight_mse)?;
                mode.act(ops::linear(input(0), &wq, Some(&p[1]))?)?
            }
            OpKind::ResidualAdd => {
                let mut acc = input(0).clone();
                for k in 1..topo.preds[i].len() {
                    acc = ops::add(&acc, input(k))?;
                }
                mode.act(acc)?
            }
            OpKind::Concat => {
                let parts: Vec<&Tensor> = (0..topo.preds[i].len()).map(input).collect();
                ops::concat(&parts)?
            }
        };
        vals[i] = Some(v);
    }
    let logits = vals[out_pos.ok_or_else(|| Error::Graph("no Output node".into()))?]
        .take()
        .unwrap();
    if logits.shape() != [n, g.num_classes] {
        return Err(Error::shape(
            "forward",
            format!("logits {:?}, expected [{n}, {}]", logits.shape(), g.num_classes),
        ));
    }
    Ok(ForwardTrace { logits, weight_mse })
}

fn mode_for(qc: &QuantConfig) -> Result<Mode> {
    qc.validate()?;
    let bits = qc.precision.bits();
    Ok(Mode {
        bits,
        fold: bits.is_some(),
        eps: qc.eps_fold,
    })
}

/// Plain float inference with batch-statistics BatchNorm.
pub fn float_forward(g: &ArchGraph, params: &PredictedParams, batch: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(execute(
        g,
        params,
        batch,
        Mode {
            bits: None,
            fold: false,
            eps,
        },
    )?
    .logits)
}

/// Float inference with every foldable conv->BN pair replaced by the folded
/// conv plus shift.
pub fn folded_float_forward(
    g: &ArchGraph,
    params: &PredictedParams,
    batch: &Tensor,
    eps: f64,
) -> Result<Tensor> {
    Ok(execute(
        g,
        params,
        batch,
        Mode {
            bits: None,
            fold: true,
            eps,
        },
    )?
    .logits)
}

/// `Float32` precision runs [`float_forward`] unchanged.
pub fn quantized_forward(
    g: &ArchGraph,
    params: &PredictedParams,
    batch: &Tensor,
    qc: &QuantConfig,
) -> Result<Tensor> {
    Ok(quantized_forward_traced(g, params, batch, qc)?.logits)
}

pub fn quantized_forward_traced(
    g: &ArchGraph,
    params: &PredictedParams,
    batch: &Tensor,
    qc: &QuantConfig,
) -> Result<ForwardTrace> {
    execute(g, params, batch, mode_for(qc)?)
}

pub fn quant_error_metrics(
    g: &ArchGraph,
    params: &PredictedParams,
    batch: &Tensor,
    qc: &QuantConfig,
) -> Result<QuantErrorMetrics> {
    let float = float_forward(g, params, batch, qc.eps_fold)?;
    let q = quantized_forward_traced(g, params, batch, qc)?;
    Ok(QuantErrorMetrics {
        per_layer_mse: q.weight_mse,
        output_mse: mse(&float, &q.logits),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::testing::{conv, simple, small_net};
    use crate::arch::NodeSpec;
    use crate::quant::{compute_encoding, fake_quantize, Precision};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn random_params(g: &ArchGraph, rng: &mut ChaCha8Rng) -> PredictedParams {
        let mut p = PredictedParams::default();
        for n in &g.nodes {
            let shapes = n.param_shapes();
            if !shapes.is_empty() {
                p.insert(n.id, shapes.iter().map(|s| random(s, rng)).collect());
            }
        }
        p
    }

    fn dq(t: &Tensor, b: u32) -> Tensor {
        fake_quantize(t, &compute_encoding(t, b).unwrap())
    }

    #[test]
    fn float_bypass_is_bit_identical() {
        let g = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(&g, &mut rng);
        let x = random(&[4, 3, 6, 6], &mut rng);
        let a = float_forward(&g, &p, &x, 1e-5).unwrap();
        let b = quantized_forward(&g, &p, &x, &QuantConfig::float()).unwrap();
        assert_eq!(a, b);
        let m = quant_error_metrics(&g, &p, &x, &QuantConfig::float()).unwrap();
        assert_eq!(m.output_mse, 0.0);
        assert!(m.per_layer_mse.values().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_bn_matches_hand_pipeline() {
        let g = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(&g, &mut rng);
        let x = random(&[5, 3, 6, 6], &mut rng);
        let eps = 1e-5;
        let got = quantized_forward(&g, &p, &x, &QuantConfig::bits(8)).unwrap();

        // step-by-step composition of the same pipeline
        let xq = dq(&x, 8);
        let (w, gamma, beta) = (&p.get(1).unwrap()[0], &p.get(2).unwrap()[0], &p.get(2).unwrap()[1]);
        let cp = g.nodes[1].conv().unwrap().params();
        let y = ops::conv2d(&xq, w, None, cp).unwrap();
        let (mu, var) = two_pass(&y);
        let mut wf = w.data().to_vec();
        let per = wf.len() / 4;
        for (i, v) in wf.iter_mut().enumerate() {
            let c = i / per;
            *v *= gamma.data()[c] / (var[c] + eps).sqrt();
        }
        let wf = dq(&Tensor::new(w.shape().to_vec(), wf).unwrap(), 8);
        let shift: Vec<f64> = (0..4)
            .map(|c| beta.data()[c] - gamma.data()[c] * mu[c] / (var[c] + eps).sqrt())
            .collect();
        let z = ops::conv2d(&xq, &wf, Some(&Tensor::new(vec![4], shift).unwrap()), cp).unwrap();
        let z = dq(&ops::relu(&dq(&z, 8)), 8);
        let z = dq(&ops::global_avg_pool(&z).unwrap(), 8);
        let (lw, lb) = (&p.get(5).unwrap()[0], &p.get(5).unwrap()[1]);
        let want = dq(&ops::linear(&z, &dq(lw, 8), Some(lb)).unwrap(), 8);
        assert!(got.max_abs_diff(&want) < 1e-6, "{}", got.max_abs_diff(&want));
    }

    fn two_pass(y: &Tensor) -> (Vec<f64>, Vec<f64>) {
        let s = y.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let mut mu = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let vals: Vec<f64> = (0..n)
                .flat_map(|i| y.data()[(i * c + ch) * hw..][..hw].to_vec())
                .collect();
            mu[ch] = vals.iter().sum::<f64>() / vals.len() as f64;
            var[ch] = vals.iter().map(|v| (v - mu[ch]).powi(2)).sum::<f64>() / vals.len() as f64;
        }
        (mu, var)
    }

    #[test]
    fn fold_identity_in_float() {
        let g = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let p = random_params(&g, &mut rng);
            let x = random(&[4, 3, 6, 6], &mut rng);
            let a = float_forward(&g, &p, &x, 1e-5).unwrap();
            let b = folded_float_forward(&g, &p, &x, 1e-5).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }

    /// input -> conv a, conv b -> concat -> gap -> linear -> output
    fn concat_net() -> ArchGraph {
        ArchGraph {
            nodes: vec![
                simple(0, OpKind::Input),
                conv(1, 3, 2, 3, true),
                conv(2, 3, 3, 1, true),
                simple(3, OpKind::Concat),
                simple(4, OpKind::GlobalAvgPool),
                NodeSpec::new(
                    5,
                    OpKind::Linear,
                    Attrs::Linear {
                        features_in: 5,
                        features_out: 2,
                    },
                ),
                simple(6, OpKind::Output),
            ],
            edges: vec![(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (4, 5), (5, 6)],
            virtual_edges: None,
            input_resolution: (3, 5, 5),
            num_classes: 2,
        }
    }

    #[test]
    fn concat_output_not_requantized() {
        let g = concat_net();
        g.validate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(&g, &mut rng);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let got = quantized_forward(&g, &p, &x, &QuantConfig::bits(4)).unwrap();

        let xq = dq(&x, 4);
        let a = dq(
            &ops::conv2d(&xq, &dq(&p.get(1).unwrap()[0], 4), Some(&p.get(1).unwrap()[1]), g.nodes[1].conv().unwrap().params()).unwrap(),
            4,
        );
        let b = dq(
            &ops::conv2d(&xq, &dq(&p.get(2).unwrap()[0], 4), Some(&p.get(2).unwrap()[1]), g.nodes[2].conv().unwrap().params()).unwrap(),
            4,
        );
        let cat = ops::concat(&[&a, &b]).unwrap();
        let z = dq(&ops::global_avg_pool(&cat).unwrap(), 4);
        let want = dq(&ops::linear(&z, &dq(&p.get(5).unwrap()[0], 4), Some(&p.get(5).unwrap()[1])).unwrap(), 4);
        assert_eq!(got, want);
    }

    #[test]
    fn metrics_track_weight_error() {
        let g = concat_net();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&g, &mut rng);
        let x = random(&[2, 3, 5, 5], &mut rng);
        let m8 = quant_error_metrics(&g, &p, &x, &QuantConfig::bits(8)).unwrap();
        let m4 = quant_error_metrics(&g, &p, &x, &QuantConfig::bits(4)).unwrap();
        let w = &p.get(1).unwrap()[0];
        let oracle = mse(w, &dq(w, 8));
        assert_eq!(m8.per_layer_mse[&1], oracle);
        assert_eq!(m8.per_layer_mse.len(), 3);
        for (k, v) in &m8.per_layer_mse {
            assert!(m4.per_layer_mse[k] >= *v);
        }
        assert!(m4.output_mse > 0.0);
        assert_eq!(Precision::Quant(4), QuantConfig::bits(4).precision);
    }

    #[test]
    fn rejects_bad_inputs() {
        let g = small_net();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_params(&g, &mut rng);
        assert!(float_forward(&g, &p, &random(&[1, 3, 6, 6], &mut rng), 1e-5).is_err());
        assert!(float_forward(&g, &p, &random(&[2, 3, 5, 6], &mut rng), 1e-5).is_err());
        let mut p2 = p.clone();
        p2.tensors.remove(&2);
        assert!(matches!(
            float_forward(&g, &p2, &random(&[2, 3, 6, 6], &mut rng), 1e-5),
            Err(Error::MissingParams(2))
        ));
    }
}
