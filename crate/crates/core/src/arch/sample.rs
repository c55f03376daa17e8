//! Stage-based sampler for the convolution-only search space.
//!
//! A draw picks a depth (number of convolutions), a stem width from the
//! doubling grid `width_min, 2*width_min, ..., <= width_max`, and a stage
//! count. Every stage after the first starts with a downsampling op (pool or
//! stride-2 convolution) while the resolution allows it; stages are filled with
//! plain conv units, residual blocks and two-branch concat cells until the
//! convolution budget is spent. Draws above `max_params` are rejected and
//! redrawn from the same stream.

use std::collections::HashSet;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{compute_virtual_edges, ArchGraph, Attrs, ConvAttrs, NodeSpec, OpKind, PoolAttrs};
use crate::error::{Error, Result};

const MAX_REJECTIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpaceConfig {
    pub max_params: u64,
    /// Inclusive range of convolution-layer counts.
    pub depth_min: usize,
    pub depth_max: usize,
    /// Inclusive range of stem widths.
    pub width_min: usize,
    pub width_max: usize,
    pub stages_min: usize,
    pub stages_max: usize,
    pub allowed_ops: Vec<OpKind>,
    pub residual_prob: f64,
    pub concat_prob: f64,
    pub bn_free: bool,
    pub kernel_sizes: Vec<usize>,
    pub input_resolution: [usize; 3],
    pub num_classes: usize,
    /// Longest path length that receives a virtual edge.
    pub s_max: usize,
    pub rng_seed: u64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            max_params: 10_000_000,
            depth_min: 4,
            depth_max: 20,
            width_min: 8,
            width_max: 512,
            stages_min: 3,
            stages_max: 5,
            allowed_ops: OpKind::ALL.to_vec(),
            residual_prob: 0.35,
            concat_prob: 0.15,
            bn_free: false,
            kernel_sizes: vec![1, 3],
            input_resolution: [3, 32, 32],
            num_classes: 10,
            s_max: super::DEFAULT_S_MAX,
            rng_seed: 0,
        }
    }
}

impl SpaceConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("space: {m}")));
        if self.max_params == 0 {
            return bad("max_params must be positive".into());
        }
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return bad(format!("depth range {}..={} is empty", self.depth_min, self.depth_max));
        }
        if self.width_min == 0 || self.width_min > self.width_max {
            return bad(format!("width range {}..={} is empty", self.width_min, self.width_max));
        }
        if self.stages_min == 0 || self.stages_min > self.stages_max {
            return bad(format!(
                "stage range {}..={} is empty",
                self.stages_min, self.stages_max
            ));
        }
        if !(0.0..=1.0).contains(&self.residual_prob)
            || !(0.0..=1.0).contains(&self.concat_prob)
            || self.residual_prob + self.concat_prob > 1.0
        {
            return bad("block probabilities must lie in [0, 1] and sum to at most 1".into());
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|k| k % 2 == 0) {
            return bad("kernel_sizes must be a non-empty list of odd sizes".into());
        }
        for k in [
            OpKind::Input,
            OpKind::Output,
            OpKind::ConvRegular,
            OpKind::GlobalAvgPool,
            OpKind::Linear,
        ] {
            if !self.allowed_ops.contains(&k) {
                return bad(format!("allowed_ops must include {k:?}"));
            }
        }
        if self.input_resolution.contains(&0) || self.num_classes == 0 {
            return bad("input_resolution and num_classes must be positive".into());
        }
        if self.s_max < 2 {
            return bad("s_max must be >= 2".into());
        }
        Ok(())
    }

    fn allows(&self, k: OpKind) -> bool {
        self.allowed_ops.contains(&k)
    }

    fn uses_bn(&self) -> bool {
        !self.bn_free && self.allows(OpKind::BatchNorm)
    }

    /// Stem widths reachable by doubling from `width_min`.
    pub fn width_grid(&self) -> Vec<usize> {
        let mut grid = vec![];
        let mut w = self.width_min;
        while w <= self.width_max {
            grid.push(w);
            w *= 2;
        }
        grid
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream for `(seed, index)`.
pub(crate) fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

#[derive(Clone, Copy)]
struct Cur {
    id: u32,
    c: usize,
    h: usize,
    w: usize,
}

struct Builder<'a> {
    cfg: &'a SpaceConfig,
    rng: &'a mut ChaCha8Rng,
    nodes: Vec<NodeSpec>,
    edges: Vec<(u32, u32)>,
    convs: usize,
}

impl Builder<'_> {
    fn add(&mut self, kind: OpKind, attrs: Attrs, inputs: &[u32]) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(NodeSpec::new(id, kind, attrs));
        self.edges.extend(inputs.iter().map(|&s| (s, id)));
        id
    }

    fn kernel(&mut self) -> usize {
        let ks = &self.cfg.kernel_sizes;
        ks[self.rng.random_range(0..ks.len())]
    }

    fn three_or_largest(&self) -> usize {
        if self.cfg.kernel_sizes.contains(&3) {
            3
        } else {
            *self.cfg.kernel_sizes.iter().max().unwrap()
        }
    }

    fn conv(&mut self, from: Cur, kind: OpKind, cout: usize, kernel: usize, stride: usize) -> Cur {
        let (dilation, groups) = match kind {
            OpKind::ConvDilated => (2, 1),
            OpKind::ConvDepthwise => (1, from.c),
            _ => (1, 1),
        };
        let padding = dilation * (kernel - 1) / 2;
        let attrs = ConvAttrs {
            cin: from.c,
            cout,
            kernel,
            stride,
            padding,
            dilation,
            groups,
            bias: !self.cfg.uses_bn(),
        };
        let id = self.add(kind, Attrs::Conv(attrs), &[from.id]);
        self.convs += 1;
        let ext = |l: usize| (l + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
        Cur {
            id,
            c: cout,
            h: ext(from.h),
            w: ext(from.w),
        }
    }

    fn bn(&mut self, from: Cur) -> Cur {
        if !self.cfg.uses_bn() {
            return from;
        }
        let id = self.add(OpKind::BatchNorm, Attrs::Norm { channels: from.c }, &[from.id]);
        Cur { id, ..from }
    }

    fn relu(&mut self, from: Cur) -> Cur {
        if !self.cfg.allows(OpKind::ReLU) {
            return from;
        }
        let id = self.add(OpKind::ReLU, Attrs::None, &[from.id]);
        Cur { id, ..from }
    }

    /// conv -> [bn] -> [relu] with a randomly chosen conv flavour.
    fn conv_unit(&mut self, from: Cur, cout: usize, stride: usize) -> Cur {
        let mut kinds = vec![OpKind::ConvRegular];
        if stride == 1 && self.cfg.allows(OpKind::ConvDepthwise) && from.c == cout {
            kinds.push(OpKind::ConvDepthwise);
        }
        if stride == 1 && self.cfg.allows(OpKind::ConvDilated) {
            kinds.push(OpKind::ConvDilated);
        }
        let kind = kinds[self.rng.random_range(0..kinds.len())];
        let k = match kind {
            OpKind::ConvRegular => self.kernel(),
            _ => self.three_or_largest(),
        };
        let x = self.conv(from, kind, cout, k, stride);
        let x = self.bn(x);
        self.relu(x)
    }

    fn residual_block(&mut self, from: Cur, cout: usize) -> Cur {
        let k1 = self.kernel();
        let a = self.conv(from, OpKind::ConvRegular, cout, k1, 1);
        let a = self.bn(a);
        let a = self.relu(a);
        let k2 = self.kernel();
        let b = self.conv(a, OpKind::ConvRegular, cout, k2, 1);
        let b = self.bn(b);
        let short = if from.c == cout {
            from
        } else {
            let s = self.conv(from, OpKind::ConvRegular, cout, 1, 1);
            self.bn(s)
        };
        let id = self.add(OpKind::ResidualAdd, Attrs::None, &[b.id, short.id]);
        self.relu(Cur { id, ..b })
    }

    fn concat_cell(&mut self, from: Cur, cout: usize) -> Cur {
        let half = cout / 2;
        let k = self.kernel();
        let a = self.conv(from, OpKind::ConvRegular, half, k, 1);
        let a = self.bn(a);
        let a = self.relu(a);
        let kind = if self.cfg.allows(OpKind::ConvDilated) && self.rng.random_bool(0.5) {
            OpKind::ConvDilated
        } else {
            OpKind::ConvRegular
        };
        let k = if kind == OpKind::ConvDilated {
            self.three_or_largest()
        } else {
            self.kernel()
        };
        let b = self.conv(from, kind, cout - half, k, 1);
        let b = self.bn(b);
        let b = self.relu(b);
        let id = self.add(OpKind::Concat, Attrs::None, &[a.id, b.id]);
        Cur {
            id,
            c: cout,
            h: a.h,
            w: a.w,
        }
    }

    fn downsample(&mut self, from: Cur, cout: usize, budget: &mut usize) -> Cur {
        let mut options = vec![];
        if self.cfg.allows(OpKind::MaxPool) {
            options.push(OpKind::MaxPool);
        }
        if self.cfg.allows(OpKind::AvgPool) {
            options.push(OpKind::AvgPool);
        }
        if *budget > 0 {
            options.push(OpKind::ConvRegular);
        }
        if options.is_empty() {
            return from;
        }
        match options[self.rng.random_range(0..options.len())] {
            OpKind::ConvRegular => {
                *budget -= 1;
                let k = self.three_or_largest();
                self.conv_unit_regular_strided(from, cout, k)
            }
            kind => {
                let (kernel, padding) = if self.rng.random_bool(0.5) { (2, 0) } else { (3, 1) };
                let p = PoolAttrs {
                    kernel,
                    stride: 2,
                    padding,
                };
                let id = self.add(kind, Attrs::Pool(p), &[from.id]);
                let ext = |l: usize| (l + 2 * padding - kernel) / 2 + 1;
                Cur {
                    id,
                    c: from.c,
                    h: ext(from.h),
                    w: ext(from.w),
                }
            }
        }
    }

    fn conv_unit_regular_strided(&mut self, from: Cur, cout: usize, k: usize) -> Cur {
        let x = self.conv(from, OpKind::ConvRegular, cout, k, 2);
        let x = self.bn(x);
        self.relu(x)
    }
}

fn draw_once(cfg: &SpaceConfig, rng: &mut ChaCha8Rng) -> ArchGraph {
    let depth = rng.random_range(cfg.depth_min..=cfg.depth_max);
    let grid = cfg.width_grid();
    let width = grid[rng.random_range(0..grid.len())];
    let stages = rng.random_range(cfg.stages_min..=cfg.stages_max).min(depth);

    // stage 0 holds the stem conv; every later stage gets at least one conv
    let mut budgets = vec![0usize; stages];
    budgets[0] = 1;
    for b in budgets.iter_mut().skip(1) {
        *b = 1;
    }
    for _ in 0..depth - stages {
        let s = rng.random_range(0..stages);
        budgets[s] += 1;
    }

    // per-stage width multiplier: non-decreasing, at most 4x the stem
    let mut mult = 1;
    let mut widths = vec![width];
    for _ in 1..stages {
        if mult < 4 && rng.random_bool(0.5) {
            mult *= 2;
        }
        widths.push(width * mult);
    }

    let [c, h, w] = cfg.input_resolution;
    let mut b = Builder {
        cfg,
        rng,
        nodes: vec![],
        edges: vec![],
        convs: 0,
    };
    let input = b.add(OpKind::Input, Attrs::None, &[]);
    let mut cur = Cur { id: input, c, h, w };
    let stem_k = b.three_or_largest();
    cur = b.conv(cur, OpKind::ConvRegular, width, stem_k, 1);
    cur = b.bn(cur);
    cur = b.relu(cur);
    budgets[0] -= 1;

    for (s, (&cout, mut budget)) in widths.iter().zip(budgets.iter().copied()).enumerate() {
        if s > 0 && cur.h >= 2 && cur.w >= 2 {
            cur = b.downsample(cur, cout, &mut budget);
        }
        while budget > 0 {
            let u: f64 = b.rng.random();
            let res_need = if cur.c == cout { 2 } else { 3 };
            if u < cfg.residual_prob && cfg.allows(OpKind::ResidualAdd) && budget >= res_need {
                cur = b.residual_block(cur, cout);
                budget -= res_need;
            } else if u < cfg.residual_prob + cfg.concat_prob
                && u >= cfg.residual_prob
                && cfg.allows(OpKind::Concat)
                && budget >= 2
                && cout >= 2
            {
                cur = b.concat_cell(cur, cout);
                budget -= 2;
            } else {
                cur = b.conv_unit(cur, cout, 1);
                budget -= 1;
            }
        }
    }
    debug_assert_eq!(b.convs, depth);

    let gap = b.add(OpKind::GlobalAvgPool, Attrs::None, &[cur.id]);
    let fc = b.add(
        OpKind::Linear,
        Attrs::Linear {
            features_in: cur.c,
            features_out: cfg.num_classes,
        },
        &[gap],
    );
    b.add(OpKind::Output, Attrs::None, &[fc]);

    ArchGraph {
        nodes: b.nodes,
        edges: b.edges,
        virtual_edges: None,
        input_resolution: (c, h, w),
        num_classes: cfg.num_classes,
    }
}

/// Draws one architecture. The result is a pure function of
/// `(cfg, draw_index)` and always carries virtual edges for `cfg.s_max`.
pub fn sample_architecture(cfg: &SpaceConfig, draw_index: u64) -> Result<ArchGraph> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.rng_seed, draw_index);
    for _ in 0..MAX_REJECTIONS {
        let g = draw_once(cfg, &mut rng);
        if g.count_params() <= cfg.max_params {
            g.validate()?;
            return compute_virtual_edges(&g, cfg.s_max);
        }
    }
    Err(Error::Infeasible(format!(
        "{MAX_REJECTIONS} consecutive draws exceeded max_params={} (depth {}..={}, width {}..={})",
        cfg.max_params, cfg.depth_min, cfg.depth_max, cfg.width_min, cfg.width_max
    )))
}

/// Training draws `0..n`.
pub fn training_pool(cfg: &SpaceConfig, n: u64) -> Result<Vec<ArchGraph>> {
    (0..n).map(|i| sample_architecture(cfg, i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SplitKind {
    #[serde(rename = "iid")]
    Iid,
    #[serde(rename = "deep")]
    Deep,
    #[serde(rename = "wide")]
    Wide,
    #[serde(rename = "bn_free")]
    BnFree,
}

impl SplitKind {
    pub const ALL: [SplitKind; 4] = [SplitKind::Iid, SplitKind::Deep, SplitKind::Wide, SplitKind::BnFree];

    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Iid => "iid",
            SplitKind::Deep => "deep",
            SplitKind::Wide => "wide",
            SplitKind::BnFree => "bn_free",
        }
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        SplitKind::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for SplitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub iid: usize,
    pub deep: usize,
    pub wide: usize,
    pub bn_free: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            iid: 20,
            deep: 20,
            wide: 20,
            bn_free: 20,
        }
    }
}

impl SplitSizes {
    pub fn get(&self, k: SplitKind) -> usize {
        match k {
            SplitKind::Iid => self.iid,
            SplitKind::Deep => self.deep,
            SplitKind::Wide => self.wide,
            SplitKind::BnFree => self.bn_free,
        }
    }
}

/// Where each evaluation split draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub sizes: SplitSizes,
    /// Training uses draw indices `0..train_draws`.
    pub train_draws: u64,
    /// First draw index of the evaluation splits.
    pub draw_offset: u64,
    /// Depth range of the Deep split; must start above the training range.
    pub deep_depth: [usize; 2],
    /// Stem-width range of the Wide split; must start above the training range.
    pub wide_width: [usize; 2],
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            sizes: SplitSizes::default(),
            train_draws: 500,
            draw_offset: 1 << 32,
            deep_depth: [24, 32],
            wide_width: [1024, 2048],
        }
    }
}

/// Draw indices reserved per split beyond its size, for duplicate skipping.
const SPLIT_SLACK: u64 = 16;
const SPLIT_STRIDE: u64 = 1 << 28;

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub sets: Vec<(SplitKind, Vec<ArchGraph>)>,
}

impl Splits {
    pub fn get(&self, k: SplitKind) -> Option<&[ArchGraph]> {
        self.sets.iter().find(|(s, _)| *s == k).map(|(_, v)| v.as_slice())
    }
}

impl SplitPlan {
    pub fn space_for(&self, base: &SpaceConfig, k: SplitKind) -> SpaceConfig {
        let mut cfg = base.clone();
        match k {
            SplitKind::Iid => {}
            SplitKind::Deep => {
                cfg.depth_min = self.deep_depth[0];
                cfg.depth_max = self.deep_depth[1];
            }
            SplitKind::Wide => {
                cfg.width_min = self.wide_width[0];
                cfg.width_max = self.wide_width[1];
            }
            SplitKind::BnFree => cfg.bn_free = true,
        }
        cfg
    }

    fn range(&self, k: SplitKind) -> (u64, u64) {
        let slot = SplitKind::ALL.iter().position(|s| *s == k).unwrap() as u64;
        let start = self.draw_offset + slot * SPLIT_STRIDE;
        (start, start + self.sizes.get(k) as u64 * SPLIT_SLACK + SPLIT_SLACK)
    }

    pub fn validate(&self, base: &SpaceConfig) -> Result<()> {
        if self.draw_offset < self.train_draws {
            return Err(Error::Config(format!(
                "splits: draw_offset {} overlaps training draws 0..{}",
                self.draw_offset, self.train_draws
            )));
        }
        if self.draw_offset.checked_add(4 * SPLIT_STRIDE).is_none() {
            return Err(Error::Config("splits: draw_offset too large".into()));
        }
        for k in SplitKind::ALL {
            let (s, e) = self.range(k);
            if e - s > SPLIT_STRIDE {
                return Err(Error::Config(format!("splits: {k} size too large")));
            }
        }
        if self.deep_depth[0] <= base.depth_max || self.deep_depth[0] > self.deep_depth[1] {
            return Err(Error::Config(format!(
                "splits: deep depth range {:?} must be non-empty and start above training depth_max {}",
                self.deep_depth, base.depth_max
            )));
        }
        if self.wide_width[0] <= base.width_max || self.wide_width[0] > self.wide_width[1] {
            return Err(Error::Config(format!(
                "splits: wide width range {:?} must be non-empty and start above training width_max {}",
                self.wide_width, base.width_max
            )));
        }
        Ok(())
    }
}

/// Draws the IID, Deep, Wide and BN-free evaluation sets. Sets are pairwise
/// disjoint and disjoint from the training draws (by graph hash) and their
/// draw indices never overlap the training range.
pub fn make_splits(base: &SpaceConfig, plan: &SplitPlan) -> Result<Splits> {
    base.validate()?;
    plan.validate(base)?;
    let mut seen: HashSet<String> = training_pool(base, plan.train_draws)?
        .iter()
        .map(ArchGraph::hash)
        .collect();
    let mut sets = vec![];
    for k in SplitKind::ALL {
        let cfg = plan.space_for(base, k);
        cfg.validate()?;
        let (start, end) = plan.range(k);
        let want = plan.sizes.get(k);
        let mut out = Vec::with_capacity(want);
        let mut idx = start;
        while out.len() < want {
            if idx >= end {
                return Err(Error::Infeasible(format!(
                    "split {k}: could not find {want} distinct architectures"
                )));
            }
            let g = sample_architecture(&cfg, idx)?;
            idx += 1;
            if seen.insert(g.hash()) {
                out.push(g);
            }
        }
        sets.push((k, out));
    }
    Ok(Splits { sets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::serialize_graph;

    fn toy() -> SpaceConfig {
        SpaceConfig {
            depth_min: 3,
            depth_max: 8,
            width_min: 4,
            width_max: 16,
            input_resolution: [3, 8, 8],
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_per_draw_index() {
        let cfg = toy();
        let a = serialize_graph(&sample_architecture(&cfg, 7).unwrap());
        let b = serialize_graph(&sample_architecture(&cfg, 7).unwrap());
        assert_eq!(a, b);
        let c = serialize_graph(&sample_architecture(&cfg, 8).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn depth_and_width_within_ranges() {
        let cfg = toy();
        for i in 0..200 {
            let g = sample_architecture(&cfg, i).unwrap();
            g.validate().unwrap();
            assert!((3..=8).contains(&g.depth()), "depth {}", g.depth());
            assert!(cfg.width_grid().contains(&g.width()));
        }
    }

    #[test]
    fn bn_free_has_no_batchnorm() {
        let cfg = SpaceConfig {
            bn_free: true,
            ..toy()
        };
        for i in 0..200 {
            let g = sample_architecture(&cfg, i).unwrap();
            assert!(!g.has_batchnorm());
            assert!(g
                .nodes
                .iter()
                .filter_map(|n| n.conv())
                .all(|c| c.bias));
        }
    }

    #[test]
    fn respects_op_whitelist() {
        let cfg = SpaceConfig {
            allowed_ops: vec![
                OpKind::Input,
                OpKind::Output,
                OpKind::ConvRegular,
                OpKind::GlobalAvgPool,
                OpKind::Linear,
                OpKind::ReLU,
            ],
            ..toy()
        };
        for i in 0..100 {
            let g = sample_architecture(&cfg, i).unwrap();
            assert!(g.nodes.iter().all(|n| cfg.allowed_ops.contains(&n.kind)));
        }
    }

    #[test]
    fn infeasible_cap_reported() {
        let cfg = SpaceConfig {
            max_params: 10,
            ..toy()
        };
        assert!(matches!(sample_architecture(&cfg, 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn splits_are_disjoint_and_shifted() {
        let cfg = toy();
        let plan = SplitPlan {
            sizes: SplitSizes {
                iid: 30,
                deep: 10,
                wide: 10,
                bn_free: 10,
            },
            train_draws: 50,
            draw_offset: 1000,
            deep_depth: [9, 12],
            wide_width: [32, 64],
        };
        let splits = make_splits(&cfg, &plan).unwrap();
        let mut hashes = HashSet::new();
        for (k, set) in &splits.sets {
            assert_eq!(set.len(), plan.sizes.get(*k));
            for g in set {
                assert!(hashes.insert(g.hash()));
                match k {
                    SplitKind::Deep => assert!(g.depth() > cfg.depth_max),
                    SplitKind::Wide => assert!(g.width() > cfg.width_max),
                    SplitKind::BnFree => assert!(!g.has_batchnorm()),
                    SplitKind::Iid => {
                        assert!((cfg.depth_min..=cfg.depth_max).contains(&g.depth()))
                    }
                }
            }
        }
        for g in training_pool(&cfg, 50).unwrap() {
            assert!(!hashes.contains(&g.hash()));
        }
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let cfg = toy();
        let plan = SplitPlan {
            train_draws: 500,
            draw_offset: 100,
            deep_depth: [9, 12],
            wide_width: [32, 64],
            ..Default::default()
        };
        assert!(make_splits(&cfg, &plan).is_err());
        let plan = SplitPlan {
            deep_depth: [8, 12],
            wide_width: [32, 64],
            ..Default::default()
        };
        assert!(make_splits(&cfg, &plan).is_err());
    }
}
