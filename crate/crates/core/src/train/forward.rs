use std::collections::BTreeMap;

use crate::arch::{ArchGraph, Attrs, OpKind};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Float forward of `g` on the tape. Calls the same kernels in the same order
/// as [`float_forward`](crate::quant::float_forward), so logits agree bit for
/// bit.
pub fn forward_on_tape(
    tape: &mut Tape,
    g: &ArchGraph,
    params: &BTreeMap<u32, Vec<Var>>,
    x: Var,
    eps: f64,
) -> Result<Var> {
    let topo = g.topology()?;
    let mut vals: Vec<Option<Var>> = vec![None; g.nodes.len()];
    let mut out = None;
    for &i in &topo.order {
        let node = &g.nodes[i];
        let ins: Vec<Var> = topo.preds[i].iter().map(|&p| vals[p].unwrap()).collect();
        let p = || params.get(&node.id).ok_or(Error::MissingParams(node.id));
        let v = match node.kind {
            OpKind::Input => x,
            OpKind::Output => {
                out = Some(ins[0]);
                ins[0]
            }
            OpKind::ConvRegular | OpKind::ConvDepthwise | OpKind::ConvDilated => {
                let p = p()?;
                tape.conv2d(ins[0], p[0], p.get(1).copied(), node.conv().unwrap().params())?
            }
            OpKind::BatchNorm => {
                let p = p()?;
                tape.batchnorm2d(ins[0], p[0], p[1], eps)?.0
            }
            OpKind::ReLU => tape.relu(ins[0]),
            OpKind::MaxPool | OpKind::AvgPool => {
                let Attrs::Pool(pa) = node.attrs else { unreachable!() };
                if node.kind == OpKind::MaxPool {
                    tape.max_pool2d(ins[0], pa.params())?
                } else {
                    tape.avg_pool2d(ins[0], pa.params())?
                }
            }
            OpKind::GlobalAvgPool => tape.global_avg_pool(ins[0])?,
            OpKind::Linear => {
                let p = p()?;
                tape.linear(ins[0], p[0], Some(p[1]))?
            }
            OpKind::ResidualAdd => {
                let mut acc = ins[0];
                for &b in &ins[1..] {
                    acc = tape.add(acc, b)?;
                }
                acc
            }
            OpKind::Concat => tape.concat(&ins)?,
        };
        vals[i] = Some(v);
    }
    out.ok_or_else(|| Error::Graph("no Output node".into()))
}
