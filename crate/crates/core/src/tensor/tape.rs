use std::rc::Rc;

use super::ops::{self, ConvParams, PoolParams};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant mixing matrices for [`Tape::graph_mix`].
#[derive(Debug)]
pub struct MixMatrices {
    /// `[n, n]` fixed part.
    pub base: Tensor,
    /// One `[n, n]` matrix per learned coefficient.
    pub terms: Vec<Tensor>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    AddRowBias(Var, Var),
    MatMul(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    Gather(Var, Rc<[usize]>),
    Reshape(Var),
    GraphMix {
        alpha: Var,
        h: Var,
        mix: Rc<MixMatrices>,
        combined: Tensor,
    },
    FanInNorm {
        x: Var,
        target_std: f64,
        mean: f64,
        std: f64,
        floored: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        p: ConvParams,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        beta: Var,
    },
    MaxPool(Var, Vec<usize>),
    AvgPool(Var, PoolParams),
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<f64>,
        labels: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Entry {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of primitive applications. Entries only ever refer to
/// earlier entries, so a reverse sweep visits the graph in topological order.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
}

/// Gradients of a scalar with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Smallest standard deviation used when rescaling in [`Tape::fan_in_normalize`].
pub const NORM_STD_FLOOR: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.entries[v.0].requires_grad);
        self.entries.push(Entry {
            value,
            requires_grad,
            op,
        });
        Var(self.entries.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.entries.push(Entry {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.entries.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.0].requires_grad
    }

    fn binary_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "operands differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::from_raw(x.shape().to_vec(), data).ensure_finite("mul")?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let out = self.value(x).map(|v| scale * v + shift).ensure_finite("affine")?;
        Ok(self.push(out, Op::Affine(x, scale), &[x]))
    }

    /// `[m, n] + [n]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.ndim() != 2 || bv.shape() != [xv.shape()[1]] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let n = xv.shape()[1];
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::from_raw(xv.shape().to_vec(), data).ensure_finite("add_row_bias")?;
        Ok(self.push(out, Op::AddRowBias(x, bias), &[x, bias]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?.ensure_finite("matmul")?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        self.push(out, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = ops::relu(self.value(x));
        self.push(out, Op::Relu(x), &[x])
    }

    /// Concatenation along axis 1.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&vals)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    /// `out.data[i] = x.data[index[i]]`, reshaped to `shape`. Covers slicing,
    /// tiling and row selection.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {} elements", xv.numel()),
            ));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let out = Tensor::from_raw(shape.to_vec(), data);
        Ok(self.push(out, Op::Gather(x, index), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// `(base + Σ_d alpha[d] · terms[d]) · h` for constant `[n, n]` matrices.
    pub fn graph_mix(&mut self, alpha: Var, h: Var, mix: Rc<MixMatrices>) -> Result<Var> {
        let av = self.value(alpha);
        if av.numel() != mix.terms.len() {
            return Err(Error::shape(
                "graph_mix",
                format!("{} coefficients for {} terms", av.numel(), mix.terms.len()),
            ));
        }
        let mut combined = mix.base.data().to_vec();
        for (t, &a) in mix.terms.iter().zip(av.data()) {
            if t.shape() != mix.base.shape() {
                return Err(Error::shape("graph_mix", "term shapes differ from base"));
            }
            combined.iter_mut().zip(t.data()).for_each(|(c, v)| *c += a * v);
        }
        let combined = Tensor::from_raw(mix.base.shape().to_vec(), combined);
        let out = ops::matmul(&combined, self.value(h))?.ensure_finite("graph_mix")?;
        Ok(self.push(
            out,
            Op::GraphMix {
                alpha,
                h,
                mix,
                combined,
            },
            &[alpha, h],
        ))
    }

    /// Rescales `x` to standard deviation `target_std`:
    /// `x * target_std / max(std(x), NORM_STD_FLOOR)`, std taken over all elements.
    pub fn fan_in_normalize(&mut self, x: Var, target_std: f64) -> Result<Var> {
        let xv = self.value(x);
        let mean = xv.mean();
        let raw_std = xv.variance().sqrt();
        let floored = raw_std < NORM_STD_FLOOR;
        let std = raw_std.max(NORM_STD_FLOOR);
        let k = target_std / std;
        let out = xv.map(|v| v * k).ensure_finite("fan_in_normalize")?;
        Ok(self.push(
            out,
            Op::FanInNorm {
                x,
                target_std,
                mean,
                std,
                floored,
            },
            &[x],
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, p: ConvParams) -> Result<Var> {
        let out = ops::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), p)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, p }, &inputs))
    }

    /// Batch-statistics normalization; returns the output and the per-channel
    /// `(mean, var)` used.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let r = ops::batchnorm2d(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let v = self.push(
            r.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: r.xhat,
                inv_std: r.inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, r.mean, r.var))
    }

    pub fn max_pool2d(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let (out, arg) = ops::max_pool2d(self.value(x), p)?;
        Ok(self.push(out, Op::MaxPool(x, arg), &[x]))
    }

    pub fn avg_pool2d(&mut self, x: Var, p: PoolParams) -> Result<Var> {
        let out = ops::avg_pool2d(self.value(x), p)?;
        Ok(self.push(out, Op::AvgPool(x, p), &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let out = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(out, Op::GlobalAvgPool(x), &[x]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let out = ops::linear(self.value(x), self.value(w), b.map(|b| self.value(b)))?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Linear { x, w, b }, &inputs))
    }

    /// Mean cross-entropy of `logits [N, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.entries.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let entry = &self.entries[idx];
            if !entry.requires_grad {
                continue;
            }
            if matches!(entry.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(entry, &g, &mut grads)?;
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.entries)
                .map(|(g, e)| match (&e.op, g) {
                    (Op::Leaf, Some(g)) if e.requires_grad => {
                        Some(Tensor::from_raw(e.value.shape().to_vec(), g))
                    }
                    _ => None,
                })
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.entries[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.entries[v.0].requires_grad {
            return;
        }
        let n = self.entries[v.0].value.numel();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn backprop(&self, entry: &Entry, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let out = &entry.value;
        match &entry.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * scale).collect());
            }
            Op::AddRowBias(x, b) => {
                self.accumulate(grads, *x, g.to_vec());
                let n = self.value(*b).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                // dA = G · Bᵀ, dB = Aᵀ · G
                self.accumulate_with(grads, *a, |da| {
                    ops::gemm(m, n, k, g, n, 1, bv.data(), 1, n, da, true)
                });
                self.accumulate_with(grads, *b, |db| {
                    ops::gemm(k, m, n, av.data(), 1, k, g, n, 1, db, true)
                });
            }
            Op::Sigmoid(x) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g.iter().zip(out.data()).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(grads, *x, d);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = g
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Concat(parts) => {
                let shapes: Vec<Vec<usize>> =
                    parts.iter().map(|v| self.value(*v).shape().to_vec()).collect();
                for (v, d) in parts.iter().zip(ops::concat_backward(&shapes, g)) {
                    self.accumulate(grads, *v, d);
                }
            }
            Op::Gather(x, index) => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, v) in index.iter().zip(g) {
                        dx[i] += v;
                    }
                });
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::GraphMix {
                alpha,
                h,
                mix,
                combined,
            } => {
                let hv = self.value(*h);
                let n = combined.shape()[0];
                let d = hv.shape()[1];
                // dH = Aᵀ · G
                self.accumulate_with(grads, *h, |dh| {
                    ops::gemm(n, n, d, combined.data(), 1, n, g, d, 1, dh, true)
                });
                if self.requires_grad(*alpha) {
                    // dα_t = <G · Hᵀ, T_t>
                    let mut ght = vec![0.0; n * n];
                    ops::gemm(n, d, n, g, d, 1, hv.data(), 1, d, &mut ght, false);
                    let da = mix
                        .terms
                        .iter()
                        .map(|t| t.data().iter().zip(&ght).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *alpha, da);
                }
            }
            Op::FanInNorm {
                x,
                target_std,
                mean,
                std,
                floored,
            } => {
                let xv = self.value(*x).data();
                let k = target_std / std;
                if *floored {
                    self.accumulate(grads, *x, g.iter().map(|v| v * k).collect());
                } else {
                    // y = k x with k = c / std(x); dstd/dx_j = (x_j - mean) / (n std)
                    let n = xv.len() as f64;
                    let gx: f64 = g.iter().zip(xv).map(|(g, x)| g * x).sum();
                    let coef = k * gx / (std * std * n);
                    let d = g
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| k * g - coef * (x - mean))
                        .collect();
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Conv2d { x, w, b, p } => {
                let cg = ops::conv2d_backward(self.value(*x), self.value(*w), g, *p)?;
                self.accumulate(grads, *x, cg.input);
                self.accumulate(grads, *w, cg.weight);
                if let Some(b) = b {
                    self.accumulate(grads, *b, cg.bias);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (dx, dg, db) = ops::batchnorm2d_backward(
                    out.shape(),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    g,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, dg);
                self.accumulate(grads, *beta, db);
            }
            Op::MaxPool(x, arg) => {
                self.accumulate_with(grads, *x, |dx| {
                    for (&i, v) in arg.iter().zip(g) {
                        if i != usize::MAX {
                            dx[i] += v;
                        }
                    }
                });
            }
            Op::AvgPool(x, p) => {
                let d = ops::avg_pool2d_backward(self.value(*x).shape(), *p, g);
                self.accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                let d = g
                    .iter()
                    .flat_map(|v| std::iter::repeat_n(v / hw as f64, hw))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, fin, fout) = (xv.shape()[0], xv.shape()[1], wv.shape()[0]);
                // y = x wᵀ: dx = G w, dw = Gᵀ x
                self.accumulate_with(grads, *x, |dx| {
                    ops::gemm(n, fout, fin, g, fout, 1, wv.data(), fin, 1, dx, true)
                });
                self.accumulate_with(grads, *w, |dw| {
                    ops::gemm(fout, n, fin, g, 1, fout, xv.data(), fin, 1, dw, true)
                });
                if let Some(b) = b {
                    let mut gb = vec![0.0; fout];
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * k + y] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Compares the tape gradient of `f` at every leaf against central
    /// differences with step 1e-4.
    fn check_grads(leaves: Vec<Tensor>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |leaves: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = leaves.iter().map(|l| t.leaf(l.clone(), true)).collect();
            let l = f(&mut t, &vs);
            t.value(l).item()
        };
        let h = 1e-4;
        for (li, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(vars[li]).expect("leaf grad");
            for j in 0..leaf.numel() {
                let mut plus = leaves.clone();
                let mut minus = leaves.clone();
                plus[li] = bump(leaf, j, h);
                minus[li] = bump(leaf, j, -h);
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-3 || (a - numeric).abs() < 1e-8,
                    "leaf {li} elem {j}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn bump(t: &Tensor, j: usize, h: f64) -> Tensor {
        let mut d = t.data().to_vec();
        d[j] += h;
        Tensor::from_raw(t.shape().to_vec(), d)
    }

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_gives_identity() {
        let mut tape = Tape::new();
        let xt = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let x = tape.leaf(xt.clone(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.affine(s, 0.5, 0.0).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), &xt);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0), true);
        let c = tape.constant(Tensor::full(&[2], 3.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn grad_elementwise_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let leaves = vec![
            rand_tensor(&mut rng, &[3, 4]),
            rand_tensor(&mut rng, &[4, 2]),
            rand_tensor(&mut rng, &[2]),
            rand_tensor(&mut rng, &[3, 2]),
        ];
        check_grads(leaves, |t, v| {
            let m = t.matmul(v[0], v[1]).unwrap();
            let m = t.add_row_bias(m, v[2]).unwrap();
            let s = t.sigmoid(m);
            let th = t.tanh(v[3]);
            let p = t.mul(s, th).unwrap();
            let r = t.relu(p);
            let q = t.add(r, p).unwrap();
            let c = t.concat(&[q, s]).unwrap();
            let a = t.affine(c, 1.5, 0.2).unwrap();
            let sq = t.mul(a, a).unwrap();
            t.mean(sq)
        });
    }

    #[test]
    fn grad_gather_and_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let leaves = vec![rand_tensor(&mut rng, &[2, 3]), rand_tensor(&mut rng, &[4])];
        check_grads(leaves, |t, v| {
            let idx: Rc<[usize]> = Rc::from(vec![0usize, 1, 2, 0, 1, 2, 5, 5, 3, 4]);
            let gth = t.gather(v[0], idx, &[2, 5]).unwrap();
            let n = t.fan_in_normalize(gth, 0.7).unwrap();
            let w = t.constant(Tensor::from_fn(&[2, 5], |i| (i as f64 * 0.37).sin()));
            let p = t.mul(n, w).unwrap();
            let s1 = t.sum(p);
            let r = t.reshape(v[1], &[2, 2]).unwrap();
            let s2 = t.tanh(r);
            let s2 = t.sum(s2);
            t.add(s1, s2).unwrap()
        });
    }

    #[test]
    fn grad_graph_mix() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4;
        let base = Tensor::from_fn(&[n, n], |i| if i % 5 == 1 { 1.0 } else { 0.0 });
        let t1 = Tensor::from_fn(&[n, n], |i| if i == 2 || i == 7 { 1.0 } else { 0.0 });
        let t2 = Tensor::from_fn(&[n, n], |i| if i == 3 { 1.0 } else { 0.0 });
        let mix = Rc::new(MixMatrices {
            base,
            terms: vec![t1, t2],
        });
        let leaves = vec![rand_tensor(&mut rng, &[2]), rand_tensor(&mut rng, &[n, 3])];
        check_grads(leaves, move |t, v| {
            let m = t.graph_mix(v[0], v[1], mix.clone()).unwrap();
            let s = t.tanh(m);
            let w = t.constant(Tensor::from_fn(&[n, 3], |i| (i as f64).cos()));
            let p = t.mul(s, w).unwrap();
            t.sum(p)
        });
    }

    #[test]
    fn grad_conv_bn_pool_linear_ce() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let leaves = vec![
            rand_tensor(&mut rng, &[2, 2, 5, 5]),
            rand_tensor(&mut rng, &[4, 2, 3, 3]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4]),
            rand_tensor(&mut rng, &[4, 1, 3, 3]),
            rand_tensor(&mut rng, &[3, 8]),
            rand_tensor(&mut rng, &[3]),
        ];
        check_grads(leaves, |t, v| {
            let c = t
                .conv2d(
                    v[0],
                    v[1],
                    Some(v[2]),
                    ConvParams {
                        padding: 1,
                        ..Default::default()
                    },
                )
                .unwrap();
            let (bn, _, _) = t.batchnorm2d(c, v[3], v[4], 1e-5).unwrap();
            let dw = t
                .conv2d(
                    bn,
                    v[5],
                    None,
                    ConvParams {
                        padding: 2,
                        dilation: 2,
                        groups: 4,
                        stride: 1,
                    },
                )
                .unwrap();
            let res = t.add(dw, bn).unwrap();
            let pp = PoolParams {
                kernel: 2,
                stride: 2,
                padding: 0,
            };
            let mp = t.max_pool2d(res, pp).unwrap();
            let ap = t.avg_pool2d(res, PoolParams { padding: 1, kernel: 3, stride: 1 }).unwrap();
            let ap = t.max_pool2d(ap, pp).unwrap();
            let cat = t.concat(&[mp, ap]).unwrap();
            let g = t.global_avg_pool(cat).unwrap();
            let l = t.linear(g, v[6], Some(v[7])).unwrap();
            t.softmax_cross_entropy(l, &[1, 2]).unwrap()
        });
    }
}
