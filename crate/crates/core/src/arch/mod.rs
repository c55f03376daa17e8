//! CNN computational graphs: node/edge model, validation, shape inference,
//! parameter counting, virtual edges, sampling and the text file format.

pub mod format;
mod sample;
mod vedges;

pub use format::{deserialize_graph, deserialize_graph_with, graph_hash, serialize_graph};
pub use sample::{
    make_splits, sample_architecture, training_pool, SpaceConfig, SplitKind, SplitPlan, SplitSizes,
    Splits,
};
pub(crate) use sample::stream_rng;
pub use vedges::{all_pairs_distances, compute_virtual_edges, DEFAULT_S_MAX};

use std::collections::{BTreeSet, BinaryHeap, HashMap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::output_extent;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    ConvRegular,
    ConvDepthwise,
    ConvDilated,
    BatchNorm,
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Linear,
    ResidualAdd,
    Concat,
    ReLU,
    Input,
    Output,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::ConvRegular,
        OpKind::ConvDepthwise,
        OpKind::ConvDilated,
        OpKind::BatchNorm,
        OpKind::MaxPool,
        OpKind::AvgPool,
        OpKind::GlobalAvgPool,
        OpKind::Linear,
        OpKind::ResidualAdd,
        OpKind::Concat,
        OpKind::ReLU,
        OpKind::Input,
        OpKind::Output,
    ];

    pub fn is_conv(self) -> bool {
        matches!(
            self,
            OpKind::ConvRegular | OpKind::ConvDepthwise | OpKind::ConvDilated
        )
    }

    pub fn is_pool(self) -> bool {
        matches!(self, OpKind::MaxPool | OpKind::AvgPool)
    }

    /// Token used in the graph file format.
    pub fn token(self) -> &'static str {
        match self {
            OpKind::ConvRegular => "conv",
            OpKind::ConvDepthwise => "conv_dw",
            OpKind::ConvDilated => "conv_dil",
            OpKind::BatchNorm => "bn",
            OpKind::MaxPool => "max_pool",
            OpKind::AvgPool => "avg_pool",
            OpKind::GlobalAvgPool => "gap",
            OpKind::Linear => "linear",
            OpKind::ResidualAdd => "add",
            OpKind::Concat => "concat",
            OpKind::ReLU => "relu",
            OpKind::Input => "input",
            OpKind::Output => "output",
        }
    }

    pub fn from_token(s: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.token() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvAttrs {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvAttrs {
    pub fn params(&self) -> crate::tensor::ConvParams {
        crate::tensor::ConvParams {
            stride: self.stride,
            padding: self.padding,
            dilation: self.dilation,
            groups: self.groups,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PoolAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolAttrs {
    pub fn params(&self) -> crate::tensor::PoolParams {
        crate::tensor::PoolParams {
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Attrs {
    None,
    Conv(ConvAttrs),
    Pool(PoolAttrs),
    Norm { channels: usize },
    Linear { features_in: usize, features_out: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct NodeSpec {
    pub id: u32,
    pub kind: OpKind,
    pub attrs: Attrs,
}

impl NodeSpec {
    pub fn new(id: u32, kind: OpKind, attrs: Attrs) -> Self {
        NodeSpec { id, kind, attrs }
    }

    /// Shapes of the tensors this node owns, in decode order:
    /// conv `[weight, bias?]`, batch norm `[gamma, beta]`, linear `[weight, bias]`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match self.attrs {
            Attrs::Conv(c) => {
                let mut v = vec![vec![c.cout, c.cin / c.groups.max(1), c.kernel, c.kernel]];
                if c.bias {
                    v.push(vec![c.cout]);
                }
                v
            }
            Attrs::Norm { channels } => vec![vec![channels], vec![channels]],
            Attrs::Linear {
                features_in,
                features_out,
            } => vec![vec![features_out, features_in], vec![features_out]],
            Attrs::None | Attrs::Pool(_) => vec![],
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self.attrs,
            Attrs::Conv(_) | Attrs::Norm { .. } | Attrs::Linear { .. }
        )
    }

    pub fn conv(&self) -> Option<&ConvAttrs> {
        match &self.attrs {
            Attrs::Conv(c) => Some(c),
            _ => None,
        }
    }

    fn check_attrs(&self) -> Result<()> {
        let ok = match (self.kind, &self.attrs) {
            (k, Attrs::Conv(c)) if k.is_conv() => {
                let base = c.cin > 0
                    && c.cout > 0
                    && c.kernel > 0
                    && c.stride > 0
                    && c.dilation > 0
                    && c.groups > 0
                    && c.cin % c.groups == 0
                    && c.cout % c.groups == 0;
                base && match k {
                    OpKind::ConvDepthwise => c.groups == c.cin && c.cout == c.cin,
                    OpKind::ConvDilated => c.dilation > 1,
                    _ => true,
                }
            }
            (k, Attrs::Pool(p)) if k.is_pool() => {
                p.kernel > 0 && p.stride > 0 && 2 * p.padding <= p.kernel
            }
            (OpKind::BatchNorm, Attrs::Norm { channels }) => *channels > 0,
            (
                OpKind::Linear,
                Attrs::Linear {
                    features_in,
                    features_out,
                },
            ) => *features_in > 0 && *features_out > 0,
            (
                OpKind::GlobalAvgPool
                | OpKind::ResidualAdd
                | OpKind::Concat
                | OpKind::ReLU
                | OpKind::Input
                | OpKind::Output,
                Attrs::None,
            ) => true,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Graph(format!(
                "node {}: attributes {:?} invalid for {:?}",
                self.id, self.attrs, self.kind
            )))
        }
    }
}

/// Shape of the activation a node produces (per sample, batch axis omitted).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { features: usize },
}

impl ActShape {
    pub fn with_batch(&self, n: usize) -> Vec<usize> {
        match *self {
            ActShape::Spatial { c, h, w } => vec![n, c, h, w],
            ActShape::Flat { features } => vec![n, features],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VirtualEdges {
    pub s_max: usize,
    /// `(src, dst, shortest-path distance)`, sorted by node position.
    pub edges: Vec<(u32, u32, usize)>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchGraph {
    pub nodes: Vec<NodeSpec>,
    /// Directed `(src, dst)` pairs. The order of a node's incoming edges fixes
    /// the operand order of `Concat`.
    pub edges: Vec<(u32, u32)>,
    /// `None` until [`compute_virtual_edges`] has run.
    pub virtual_edges: Option<VirtualEdges>,
    pub input_resolution: (usize, usize, usize),
    pub num_classes: usize,
}

/// Adjacency in node-position space.
#[derive(Clone, Debug)]
pub struct Topology {
    pub preds: Vec<Vec<usize>>,
    pub succs: Vec<Vec<usize>>,
    pub order: Vec<usize>,
}

impl ArchGraph {
    pub fn position_map(&self) -> HashMap<u32, usize> {
        self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect()
    }

    pub fn node(&self, id: u32) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Builds adjacency lists and a deterministic topological order
    /// (lowest node position first among ready nodes).
    pub fn topology(&self) -> Result<Topology> {
        let pos = self.position_map();
        if pos.len() != self.nodes.len() {
            return Err(Error::Graph("duplicate node ids".into()));
        }
        let n = self.nodes.len();
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        let mut seen = BTreeSet::new();
        for &(s, d) in &self.edges {
            let (Some(&si), Some(&di)) = (pos.get(&s), pos.get(&d)) else {
                return Err(Error::Graph(format!("edge {s}->{d} references unknown node")));
            };
            if si == di {
                return Err(Error::Graph(format!("self loop on node {s}")));
            }
            if !seen.insert((si, di)) {
                return Err(Error::Graph(format!("duplicate edge {s}->{d}")));
            }
            preds[di].push(si);
            succs[si].push(di);
        }
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<usize>> =
            (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse(i)) = ready.pop() {
            order.push(i);
            for &j in &succs[i] {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.push(Reverse(j));
                }
            }
        }
        if order.len() != n {
            return Err(Error::Graph("graph contains a directed cycle".into()));
        }
        Ok(Topology {
            preds,
            succs,
            order,
        })
    }

    /// Activation shape of every node (indexed by position), validating
    /// operand compatibility along the way.
    pub fn infer_shapes(&self) -> Result<Vec<ActShape>> {
        let topo = self.topology()?;
        self.infer_shapes_with(&topo)
    }

    pub fn infer_shapes_with(&self, topo: &Topology) -> Result<Vec<ActShape>> {
        let mut shapes: Vec<Option<ActShape>> = vec![None; self.nodes.len()];
        for &i in &topo.order {
            let node = &self.nodes[i];
            node.check_attrs()?;
            let ins: Vec<ActShape> = topo.preds[i].iter().map(|&p| shapes[p].unwrap()).collect();
            let err = |m: String| Error::Graph(format!("node {} ({:?}): {m}", node.id, node.kind));
            let unary = || -> Result<ActShape> {
                if ins.len() != 1 {
                    return Err(err(format!("expects exactly one input, has {}", ins.len())));
                }
                Ok(ins[0])
            };
            let spatial = |s: ActShape| -> Result<(usize, usize, usize)> {
                match s {
                    ActShape::Spatial { c, h, w } => Ok((c, h, w)),
                    _ => Err(err("expects a spatial input".into())),
                }
            };
            let out = match node.kind {
                OpKind::Input => {
                    if !ins.is_empty() {
                        return Err(err("input node has predecessors".into()));
                    }
                    let (c, h, w) = self.input_resolution;
                    ActShape::Spatial { c, h, w }
                }
                OpKind::Output | OpKind::ReLU => unary()?,
                OpKind::ConvRegular | OpKind::ConvDepthwise | OpKind::ConvDilated => {
                    let conv = node.conv().unwrap();
                    let (c, h, w) = spatial(unary()?)?;
                    if c != conv.cin {
                        return Err(err(format!("cin={} but input has {c} channels", conv.cin)));
                    }
                    let oh = output_extent(h, conv.kernel, conv.stride, conv.padding, conv.dilation);
                    let ow = output_extent(w, conv.kernel, conv.stride, conv.padding, conv.dilation);
                    match (oh, ow) {
                        (Some(h), Some(w)) => ActShape::Spatial { c: conv.cout, h, w },
                        _ => return Err(err(format!("non-positive output extent from {h}x{w}"))),
                    }
                }
                OpKind::BatchNorm => {
                    let s = unary()?;
                    let (c, _, _) = spatial(s)?;
                    if let Attrs::Norm { channels } = node.attrs {
                        if channels != c {
                            return Err(err(format!("c={channels} but input has {c} channels")));
                        }
                    }
                    s
                }
                OpKind::MaxPool | OpKind::AvgPool => {
                    let (c, h, w) = spatial(unary()?)?;
                    let Attrs::Pool(p) = node.attrs else { unreachable!() };
                    let oh = output_extent(h, p.kernel, p.stride, p.padding, 1);
                    let ow = output_extent(w, p.kernel, p.stride, p.padding, 1);
                    match (oh, ow) {
                        (Some(h), Some(w)) => ActShape::Spatial { c, h, w },
                        _ => return Err(err(format!("non-positive output extent from {h}x{w}"))),
                    }
                }
                OpKind::GlobalAvgPool => {
                    let (c, _, _) = spatial(unary()?)?;
                    ActShape::Flat { features: c }
                }
                OpKind::Linear => {
                    let Attrs::Linear {
                        features_in,
                        features_out,
                    } = node.attrs
                    else {
                        unreachable!()
                    };
                    match unary()? {
                        ActShape::Flat { features } if features == features_in => {
                            ActShape::Flat {
                                features: features_out,
                            }
                        }
                        s => return Err(err(format!("in={features_in} but input is {s:?}"))),
                    }
                }
                OpKind::ResidualAdd => {
                    if ins.len() < 2 {
                        return Err(err(format!("needs >= 2 inputs, has {}", ins.len())));
                    }
                    if ins.iter().any(|s| *s != ins[0]) {
                        return Err(err(format!("operand shapes differ: {ins:?}")));
                    }
                    ins[0]
                }
                OpKind::Concat => {
                    if ins.len() < 2 {
                        return Err(err(format!("needs >= 2 inputs, has {}", ins.len())));
                    }
                    let (_, h, w) = spatial(ins[0])?;
                    let mut total = 0;
                    for s in &ins {
                        let (c, hh, ww) = spatial(*s)?;
                        if (hh, ww) != (h, w) {
                            return Err(err(format!("spatial extents differ: {ins:?}")));
                        }
                        total += c;
                    }
                    ActShape::Spatial { c: total, h, w }
                }
            };
            shapes[i] = Some(out);
        }
        Ok(shapes.into_iter().map(Option::unwrap).collect())
    }

    /// Checks every structural invariant: DAG, a single `Input` source and
    /// `Output` sink, all nodes on an input-to-output path, merge arities,
    /// shape compatibility and, when present, the virtual-edge set.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Graph("num_classes must be positive".into()));
        }
        let (c, h, w) = self.input_resolution;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Graph("input resolution must be positive".into()));
        }
        let topo = self.topology()?;
        let sources: Vec<usize> = (0..self.nodes.len()).filter(|&i| topo.preds[i].is_empty()).collect();
        let sinks: Vec<usize> = (0..self.nodes.len()).filter(|&i| topo.succs[i].is_empty()).collect();
        if sources.len() != 1 || self.nodes[sources[0]].kind != OpKind::Input {
            return Err(Error::Graph(format!(
                "expected exactly one Input source node, found {} sources",
                sources.len()
            )));
        }
        if sinks.len() != 1 || self.nodes[sinks[0]].kind != OpKind::Output {
            return Err(Error::Graph(format!(
                "expected exactly one Output sink node, found {} sinks",
                sinks.len()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if (n.kind == OpKind::Input && i != sources[0]) || (n.kind == OpKind::Output && i != sinks[0]) {
                return Err(Error::Graph(format!("extra {:?} node {}", n.kind, n.id)));
            }
        }
        // With a single source and a single sink in a DAG, every node is
        // reachable from the source and reaches the sink.
        self.infer_shapes_with(&topo)?;
        if let Some(v) = &self.virtual_edges {
            let expected = compute_virtual_edges(self, v.s_max)?;
            if expected.virtual_edges.as_ref() != Some(v) {
                return Err(Error::Graph(
                    "virtual edges do not match shortest-path distances".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn count_params(&self) -> u64 {
        self.nodes
            .iter()
            .flat_map(|n| n.param_shapes())
            .map(|s| s.iter().product::<usize>() as u64)
            .sum()
    }

    /// Number of convolution layers.
    pub fn depth(&self) -> usize {
        self.nodes.iter().filter(|n| n.kind.is_conv()).count()
    }

    /// Output channels of the first convolution in topological order (the
    /// stem width the sampler scales every stage from).
    pub fn width(&self) -> usize {
        let Ok(topo) = self.topology() else { return 0 };
        topo.order
            .iter()
            .find_map(|&i| self.nodes[i].conv().map(|c| c.cout))
            .unwrap_or(0)
    }

    pub fn has_batchnorm(&self) -> bool {
        self.nodes.iter().any(|n| n.kind == OpKind::BatchNorm)
    }

    pub fn hash(&self) -> String {
        graph_hash(self)
    }
}


#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    #[test]
    fn count_params_closed_forms() {
        let c = conv(1, 3, 16, 3, true);
        assert_eq!(c.param_shapes(), vec![vec![16, 3, 3, 3], vec![16]]);
        let g = ArchGraph {
            nodes: vec![simple(0, OpKind::Input), c, simple(2, OpKind::Output)],
            edges: vec![(0, 1), (1, 2)],
            virtual_edges: None,
            input_resolution: (3, 8, 8),
            num_classes: 10,
        };
        assert_eq!(g.count_params(), 448);

        let empty = ArchGraph {
            nodes: vec![
                simple(0, OpKind::Input),
                simple(1, OpKind::ReLU),
                simple(2, OpKind::Output),
            ],
            edges: vec![(0, 1), (1, 2)],
            virtual_edges: None,
            input_resolution: (3, 8, 8),
            num_classes: 10,
        };
        assert_eq!(empty.count_params(), 0);

        let bn = NodeSpec::new(5, OpKind::BatchNorm, Attrs::Norm { channels: 32 });
        let n: usize = bn.param_shapes().iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(n, 64);
    }

    #[test]
    fn small_net_is_valid() {
        let g = small_net();
        g.validate().unwrap();
        let shapes = g.infer_shapes().unwrap();
        assert_eq!(shapes[5], ActShape::Flat { features: 3 });
        assert_eq!(g.depth(), 1);
        assert_eq!(g.width(), 4);
    }

    #[test]
    fn rejects_cycles_and_bad_merges() {
        let mut g = small_net();
        g.edges.push((3, 1));
        assert!(g.validate().is_err());

        let mut g = small_net();
        // add with a single operand
        g.nodes[3] = simple(3, OpKind::ResidualAdd);
        assert!(g.validate().unwrap_err().to_string().contains(">= 2"));

        let mut g = small_net();
        g.nodes[1] = conv(1, 5, 4, 3, false);
        assert!(g.validate().unwrap_err().to_string().contains("cin=5"));

        let mut g = small_net();
        g.nodes.push(simple(7, OpKind::ReLU));
        g.edges.push((0, 7));
        assert!(g.validate().is_err(), "dangling branch must be rejected");
    }
}
