//! Graph hypernetwork: op embeddings, gated message passing over real and
//! virtual edges, and a decoder that tiles a canonical tensor to every
//! parameter shape.
//!
//! Message passing runs `mp_rounds` rounds, each a forward sweep (messages
//! from predecessors) followed by a backward sweep (messages from successors).
//! A sweep is synchronous over all nodes:
//!
//! ```text
//! m = (A + Σ_d alpha_d V_d) H
//! z = sigmoid([m, H] Wz + bz),  c = tanh([m, H] Wc + bc)
//! H <- H + z * (c - H)
//! ```
//!
//! with `A` the real adjacency and `V_d` the virtual edges at distance `d`
//! (transposed for the backward sweep).
//!
//! Decoding: an MLP maps each conv/linear node state to a canonical tensor of
//! shape `canonical_shape = [Co, Ci, Kh, Kw]`. A conv weight `[co, ci, k, k]`
//! takes element `[o % Co, i % Ci, off + y, off + x]` with `off = (Kh - k) / 2`;
//! a linear weight `[out, in]` views the canonical tensor as
//! `[Co, Ci*Kh*Kw]` and tiles the same way. Weights are then rescaled to
//! standard deviation `sqrt(2 / fan_in)`. Biases and BatchNorm `gamma`/`beta`
//! come from separate linear heads over the node state, tiled modulo `Co`;
//! `gamma` is `1 + head`.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchGraph, Attrs, NodeSpec, OpKind};
use crate::error::{Error, Result};
use crate::params::PredictedParams;
use crate::tensor::{MixMatrices, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    FanInVariance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetConfig {
    pub embed_dim: usize,
    pub mp_rounds: usize,
    /// `[Co, Ci, Kh, Kw]`
    pub canonical_shape: [usize; 4],
    pub decoder_hidden: usize,
    pub s_max: usize,
    pub normalization: Normalization,
    pub init_seed: u64,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig {
            embed_dim: 64,
            mp_rounds: 2,
            canonical_shape: [64, 64, 3, 3],
            decoder_hidden: 64,
            s_max: crate::arch::DEFAULT_S_MAX,
            normalization: Normalization::FanInVariance,
            init_seed: 0,
        }
    }
}

impl HypernetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.mp_rounds == 0 || self.decoder_hidden == 0 {
            return Err(Error::Config(
                "hypernet: embed_dim, mp_rounds and decoder_hidden must be >= 1".into(),
            ));
        }
        if self.canonical_shape.contains(&0) {
            return Err(Error::Config("hypernet: canonical_shape extents must be >= 1".into()));
        }
        if self.s_max < 2 {
            return Err(Error::Config("hypernet: s_max must be >= 2".into()));
        }
        Ok(())
    }

    fn canonical_numel(&self) -> usize {
        self.canonical_shape.iter().product()
    }
}

const CONV_BUCKETS: usize = 32;
const POOL_BUCKETS: usize = 8;
const EMBED_ROWS: usize = 3 * CONV_BUCKETS + 2 * POOL_BUCKETS + 8;

fn kernel_class(k: usize) -> usize {
    match k {
        1 => 0,
        3 => 1,
        5 => 2,
        _ => 3,
    }
}

/// Embedding row for `(kind, kernel, stride > 1, dilation > 1, groups == cin)`.
pub fn embedding_bucket(n: &NodeSpec) -> usize {
    let conv_base = |k: OpKind| match k {
        OpKind::ConvRegular => 0,
        OpKind::ConvDepthwise => CONV_BUCKETS,
        _ => 2 * CONV_BUCKETS,
    };
    let pool0 = 3 * CONV_BUCKETS;
    let rest0 = pool0 + 2 * POOL_BUCKETS;
    match (n.kind, &n.attrs) {
        (k, Attrs::Conv(c)) if k.is_conv() => {
            conv_base(k)
                + kernel_class(c.kernel) * 8
                + usize::from(c.stride > 1) * 4
                + usize::from(c.dilation > 1) * 2
                + usize::from(c.groups == c.cin)
        }
        (k, Attrs::Pool(p)) if k.is_pool() => {
            let base = pool0 + if k == OpKind::MaxPool { 0 } else { POOL_BUCKETS };
            base + kernel_class(p.kernel) * 2 + usize::from(p.stride > 1)
        }
        (k, _) => {
            let j = match k {
                OpKind::BatchNorm => 0,
                OpKind::GlobalAvgPool => 1,
                OpKind::Linear => 2,
                OpKind::ResidualAdd => 3,
                OpKind::Concat => 4,
                OpKind::ReLU => 5,
                OpKind::Input => 6,
                _ => 7,
            };
            rest0 + j
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct GruIdx {
    wz: usize,
    bz: usize,
    wc: usize,
    bc: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    embed: usize,
    alpha: usize,
    rounds: Vec<[GruIdx; 2]>,
    dec_w1: usize,
    dec_b1: usize,
    dec_w2: usize,
    dec_b2: usize,
    bias_w: usize,
    bias_b: usize,
    gamma_w: usize,
    gamma_b: usize,
    beta_w: usize,
    beta_b: usize,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Const(f64),
    /// `1 / d` for the coefficient of distance `d = 2 + index`.
    InvDistance,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    decay: bool,
}

fn build_layout(cfg: &HypernetConfig) -> (Layout, Vec<ParamSpec>) {
    let d = cfg.embed_dim;
    let hid = cfg.decoder_hidden;
    let co = cfg.canonical_shape[0];
    let p = cfg.canonical_numel();
    let mut specs: Vec<ParamSpec> = vec![];
    let mut push = |name: String, shape: Vec<usize>, init: Init, decay: bool| {
        specs.push(ParamSpec {
            name,
            shape,
            init,
            decay,
        });
        specs.len() - 1
    };
    let xavier = |a: usize, b: usize| Init::Normal((2.0 / (a + b) as f64).sqrt());
    let head = Init::Normal(0.01 / (d as f64).sqrt());

    let embed = push("embed".into(), vec![EMBED_ROWS, d], Init::Normal(1.0), false);
    let alpha = push("alpha".into(), vec![cfg.s_max - 1], Init::InvDistance, true);
    let mut rounds = vec![];
    for r in 0..cfg.mp_rounds {
        let mut pair = [GruIdx {
            wz: 0,
            bz: 0,
            wc: 0,
            bc: 0,
        }; 2];
        for (k, dir) in ["fwd", "bwd"].into_iter().enumerate() {
            pair[k] = GruIdx {
                wz: push(format!("mp{r}.{dir}.wz"), vec![2 * d, d], xavier(2 * d, d), true),
                bz: push(format!("mp{r}.{dir}.bz"), vec![d], Init::Const(0.0), true),
                wc: push(format!("mp{r}.{dir}.wc"), vec![2 * d, d], xavier(2 * d, d), true),
                bc: push(format!("mp{r}.{dir}.bc"), vec![d], Init::Const(0.0), true),
            };
        }
        rounds.push(pair);
    }
    let layout = Layout {
        embed,
        alpha,
        rounds,
        dec_w1: push("dec.w1".into(), vec![d, hid], xavier(d, hid), true),
        dec_b1: push("dec.b1".into(), vec![hid], Init::Const(0.0), true),
        dec_w2: push("dec.w2".into(), vec![hid, p], xavier(hid, p), true),
        dec_b2: push("dec.b2".into(), vec![p], Init::Const(0.0), true),
        bias_w: push("head.bias.w".into(), vec![d, co], head, true),
        bias_b: push("head.bias.b".into(), vec![co], Init::Const(0.0), true),
        gamma_w: push("head.gamma.w".into(), vec![d, co], head, true),
        gamma_b: push("head.gamma.b".into(), vec![co], Init::Const(0.0), true),
        beta_w: push("head.beta.w".into(), vec![d, co], head, true),
        beta_b: push("head.beta.b".into(), vec![co], Init::Const(0.0), true),
    };
    (layout, specs)
}

/// Node states, one row per node in graph order.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    pub ids: Vec<u32>,
    /// `[num_nodes, embed_dim]`
    pub states: Tensor,
}

impl NodeStates {
    pub fn get(&self, id: u32) -> Option<&[f64]> {
        let d = self.states.shape()[1];
        let p = self.ids.iter().position(|&i| i == id)?;
        Some(&self.states.data()[p * d..(p + 1) * d])
    }

    pub fn to_map(&self) -> BTreeMap<u32, Vec<f64>> {
        self.ids
            .iter()
            .map(|&id| (id, self.get(id).unwrap().to_vec()))
            .collect()
    }
}

/// Hypernetwork tensors bound into a tape.
#[derive(Clone, Debug)]
pub struct HyperVars {
    pub vars: Vec<Var>,
}

/// Per-node parameter handles: `raw` before weight normalization, `params`
/// after. Only weights differ between the two.
#[derive(Clone, Debug, Default)]
pub struct DecodedVars {
    pub raw: BTreeMap<u32, Vec<Var>>,
    pub params: BTreeMap<u32, Vec<Var>>,
}

pub fn values(tape: &Tape, vars: &BTreeMap<u32, Vec<Var>>) -> PredictedParams {
    PredictedParams {
        tensors: vars
            .iter()
            .map(|(&id, vs)| (id, vs.iter().map(|&v| tape.value(v).clone()).collect()))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypernet {
    cfg: HypernetConfig,
    layout: Layout,
    names: Vec<String>,
    decay: Vec<bool>,
    params: Vec<Tensor>,
}

impl Hypernet {
    pub fn new(cfg: HypernetConfig) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let params = specs
            .iter()
            .map(|s| match s.init {
                Init::Normal(std) => Tensor::from_fn(&s.shape, |_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                }),
                Init::Const(c) => Tensor::full(&s.shape, c),
                Init::InvDistance => Tensor::from_fn(&s.shape, |i| 1.0 / (i + 2) as f64),
            })
            .collect();
        Ok(Hypernet {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            decay: specs.iter().map(|s| s.decay).collect(),
            cfg,
            layout,
            params,
        })
    }

    /// Rebuilds a hypernet from named tensors; every expected name must be
    /// present with its exact shape.
    pub fn from_tensors(cfg: HypernetConfig, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let (layout, specs) = build_layout(&cfg);
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            let t = named
                .get(&s.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{}'", s.name)))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' has shape {:?}, config expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )));
            }
            params.push(t.clone());
        }
        if named.len() != specs.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors supplied, config defines {}",
                named.len(),
                specs.len()
            )));
        }
        Ok(Hypernet {
            names: specs.iter().map(|s| s.name.clone()).collect(),
            decay: specs.iter().map(|s| s.decay).collect(),
            cfg,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &HypernetConfig {
        &self.cfg
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Tensors that receive weight decay (all but the embedding table).
    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> HyperVars {
        HyperVars {
            vars: self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect(),
        }
    }

    fn mix_matrices(&self, g: &ArchGraph) -> Result<(Rc<MixMatrices>, Rc<MixMatrices>)> {
        let ve = g.virtual_edges.as_ref().ok_or_else(|| {
            Error::Graph("graph has no virtual edges; run compute_virtual_edges first".into())
        })?;
        if ve.s_max < self.cfg.s_max {
            return Err(Error::Graph(format!(
                "virtual edges computed with s_max={} but the hypernet uses s_max={}; recompute them",
                ve.s_max, self.cfg.s_max
            )));
        }
        let pos = g.position_map();
        let n = g.nodes.len();
        let mut base = vec![0.0; n * n];
        for &(s, d) in &g.edges {
            base[pos[&d] * n + pos[&s]] = 1.0;
        }
        let mut terms = vec![vec![0.0; n * n]; self.cfg.s_max - 1];
        for &(s, d, dist) in &ve.edges {
            if dist <= self.cfg.s_max {
                terms[dist - 2][pos[&d] * n + pos[&s]] = 1.0;
            }
        }
        let transpose = |m: &[f64]| -> Vec<f64> {
            (0..n * n).map(|i| m[(i % n) * n + i / n]).collect()
        };
        let mk = |b: Vec<f64>, ts: Vec<Vec<f64>>| {
            Rc::new(MixMatrices {
                base: Tensor::from_raw(vec![n, n], b),
                terms: ts.into_iter().map(|t| Tensor::from_raw(vec![n, n], t)).collect(),
            })
        };
        let bwd = mk(transpose(&base), terms.iter().map(|t| transpose(t)).collect());
        Ok((mk(base, terms), bwd))
    }

    /// Node states after `rounds` of message passing (`rounds` may be 0).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        v: &HyperVars,
        g: &ArchGraph,
        rounds: usize,
    ) -> Result<Var> {
        if rounds > self.cfg.mp_rounds {
            return Err(Error::Invalid(format!(
                "{rounds} rounds requested, hypernet has {}",
                self.cfg.mp_rounds
            )));
        }
        let (fwd, bwd) = self.mix_matrices(g)?;
        let d = self.cfg.embed_dim;
        let n = g.nodes.len();
        let idx: Rc<[usize]> = g
            .nodes
            .iter()
            .flat_map(|node| {
                let row = embedding_bucket(node);
                (0..d).map(move |j| row * d + j)
            })
            .collect();
        let mut h = tape.gather(v.vars[self.layout.embed], idx, &[n, d])?;
        let alpha = v.vars[self.layout.alpha];
        for r in 0..rounds {
            for (dir, mix) in [&fwd, &bwd].into_iter().enumerate() {
                let gi = self.layout.rounds[r][dir];
                let m = tape.graph_mix(alpha, h, mix.clone())?;
                let cat = tape.concat(&[m, h])?;
                let z = tape.matmul(cat, v.vars[gi.wz])?;
                let z = tape.add_row_bias(z, v.vars[gi.bz])?;
                let z = tape.sigmoid(z);
                let c = tape.matmul(cat, v.vars[gi.wc])?;
                let c = tape.add_row_bias(c, v.vars[gi.bc])?;
                let c = tape.tanh(c);
                let neg_h = tape.affine(h, -1.0, 0.0)?;
                let diff = tape.add(c, neg_h)?;
                let upd = tape.mul(z, diff)?;
                h = tape.add(h, upd)?;
            }
        }
        Ok(h)
    }

    fn head(&self, tape: &mut Tape, v: &HyperVars, h: Var, w: usize, b: usize) -> Result<Var> {
        let x = tape.matmul(h, v.vars[w])?;
        tape.add_row_bias(x, v.vars[b])
    }

    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        v: &HyperVars,
        g: &ArchGraph,
        states: Var,
    ) -> Result<DecodedVars> {
        let [co_c, ci_c, kh_c, kw_c] = self.cfg.canonical_shape;
        let d = self.cfg.embed_dim;
        let p_len = self.cfg.canonical_numel();
        let n = g.nodes.len();
        if tape.value(states).shape() != [n, d] {
            return Err(Error::shape(
                "decode_params",
                format!("states {:?}, expected [{n}, {d}]", tape.value(states).shape()),
            ));
        }

        // decoder MLP over conv/linear rows only
        let weighted: Vec<usize> = (0..n)
            .filter(|&i| matches!(g.nodes[i].attrs, Attrs::Conv(_) | Attrs::Linear { .. }))
            .collect();
        let canon = if weighted.is_empty() {
            None
        } else {
            let rows: Rc<[usize]> = weighted
                .iter()
                .flat_map(|&i| (0..d).map(move |j| i * d + j))
                .collect();
            let s = tape.gather(states, rows, &[weighted.len(), d])?;
            let hid = tape.matmul(s, v.vars[self.layout.dec_w1])?;
            let hid = tape.add_row_bias(hid, v.vars[self.layout.dec_b1])?;
            let hid = tape.relu(hid);
            let out = tape.matmul(hid, v.vars[self.layout.dec_w2])?;
            Some(tape.add_row_bias(out, v.vars[self.layout.dec_b2])?)
        };
        let needs_heads = g.nodes.iter().any(|n| {
            matches!(n.attrs, Attrs::Norm { .. } | Attrs::Linear { .. })
                || n.conv().is_some_and(|c| c.bias)
        });
        let (bias_h, gamma_h, beta_h) = if needs_heads {
            let l = &self.layout;
            (
                Some(self.head(tape, v, states, l.bias_w, l.bias_b)?),
                Some(self.head(tape, v, states, l.gamma_w, l.gamma_b)?),
                Some(self.head(tape, v, states, l.beta_w, l.beta_b)?),
            )
        } else {
            (None, None, None)
        };
        let vector = |tape: &mut Tape, head: Option<Var>, pos: usize, len: usize| -> Result<Var> {
            let idx: Rc<[usize]> = (0..len).map(|c| pos * co_c + c % co_c).collect();
            tape.gather(head.unwrap(), idx, &[len])
        };

        let mut out = DecodedVars::default();
        for (pos, node) in g.nodes.iter().enumerate() {
            let (raw, params) = match node.attrs {
                Attrs::Conv(c) => {
                    if c.kernel > kh_c || c.kernel > kw_c {
                        return Err(Error::Decode {
                            node: node.id,
                            detail: format!(
                                "kernel {} exceeds canonical {kh_c}x{kw_c}",
                                c.kernel
                            ),
                        });
                    }
                    let r = weighted.iter().position(|&i| i == pos).unwrap();
                    let ci = c.cin / c.groups;
                    let (oy, ox) = ((kh_c - c.kernel) / 2, (kw_c - c.kernel) / 2);
                    let k = c.kernel;
                    let mut idx = Vec::with_capacity(c.cout * ci * k * k);
                    for o in 0..c.cout {
                        for i in 0..ci {
                            for y in 0..k {
                                for x in 0..k {
                                    idx.push(
                                        r * p_len
                                            + (((o % co_c) * ci_c + i % ci_c) * kh_c + oy + y) * kw_c
                                            + ox
                                            + x,
                                    );
                                }
                            }
                        }
                    }
                    let shape = [c.cout, ci, k, k];
                    let w = tape.gather(canon.unwrap(), idx.into(), &shape)?;
                    let wn = self.normalize(tape, w, ci * k * k)?;
                    let mut raw = vec![w];
                    let mut fin = vec![wn];
                    if c.bias {
                        let b = vector(tape, bias_h, pos, c.cout)?;
                        raw.push(b);
                        fin.push(b);
                    }
                    (raw, fin)
                }
                Attrs::Linear {
                    features_in,
                    features_out,
                } => {
                    let r = weighted.iter().position(|&i| i == pos).unwrap();
                    let row = ci_c * kh_c * kw_c;
                    let idx: Rc<[usize]> = (0..features_out)
                        .flat_map(|o| {
                            (0..features_in).map(move |i| r * p_len + (o % co_c) * row + i % row)
                        })
                        .collect();
                    let w = tape.gather(canon.unwrap(), idx, &[features_out, features_in])?;
                    let wn = self.normalize(tape, w, features_in)?;
                    let b = vector(tape, bias_h, pos, features_out)?;
                    (vec![w, b], vec![wn, b])
                }
                Attrs::Norm { channels } => {
                    let gh = vector(tape, gamma_h, pos, channels)?;
                    let gamma = tape.affine(gh, 1.0, 1.0)?;
                    let beta = vector(tape, beta_h, pos, channels)?;
                    (vec![gamma, beta], vec![gamma, beta])
                }
                Attrs::None | Attrs::Pool(_) => continue,
            };
            out.raw.insert(node.id, raw);
            out.params.insert(node.id, params);
        }
        Ok(out)
    }

    fn normalize(&self, tape: &mut Tape, w: Var, fan_in: usize) -> Result<Var> {
        match self.cfg.normalization {
            Normalization::FanInVariance => {
                tape.fan_in_normalize(w, (2.0 / fan_in as f64).sqrt())
            }
            Normalization::None => Ok(w),
        }
    }

    /// Encode and decode on `tape`, returning normalized parameter handles.
    pub fn predict_on_tape(
        &self,
        tape: &mut Tape,
        v: &HyperVars,
        g: &ArchGraph,
    ) -> Result<DecodedVars> {
        let h = self.encode_on_tape(tape, v, g, self.cfg.mp_rounds)?;
        self.decode_on_tape(tape, v, g, h)
    }

    pub fn encode_graph(&self, g: &ArchGraph) -> Result<NodeStates> {
        self.encode_graph_with_rounds(g, self.cfg.mp_rounds)
    }

    /// Like [`encode_graph`](Self::encode_graph) but with an explicit round
    /// count, including 0 (states are then the raw op embeddings).
    pub fn encode_graph_with_rounds(&self, g: &ArchGraph, rounds: usize) -> Result<NodeStates> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let h = self.encode_on_tape(&mut tape, &v, g, rounds)?;
        Ok(NodeStates {
            ids: g.nodes.iter().map(|n| n.id).collect(),
            states: tape.value(h).clone(),
        })
    }

    fn decode_values(&self, g: &ArchGraph, states: &NodeStates, raw: bool) -> Result<PredictedParams> {
        if states.ids.len() != g.nodes.len()
            || states.ids.iter().zip(&g.nodes).any(|(&i, n)| i != n.id)
        {
            return Err(Error::Invalid("node states do not cover the graph's nodes".into()));
        }
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let s = tape.constant(states.states.clone());
        let dec = self.decode_on_tape(&mut tape, &v, g, s)?;
        Ok(values(&tape, if raw { &dec.raw } else { &dec.params }))
    }

    pub fn decode_params(&self, g: &ArchGraph, states: &NodeStates) -> Result<PredictedParams> {
        self.decode_values(g, states, false)
    }

    /// Decoded tensors before weight normalization.
    pub fn decode_raw(&self, g: &ArchGraph, states: &NodeStates) -> Result<PredictedParams> {
        self.decode_values(g, states, true)
    }

    pub fn predict(&self, g: &ArchGraph) -> Result<PredictedParams> {
        let mut tape = Tape::new();
        let v = self.bind(&mut tape, false);
        let dec = self.predict_on_tape(&mut tape, &v, g)?;
        Ok(values(&tape, &dec.params))
    }
}
