//! Line-oriented text format for [`ArchGraph`].
//!
//! ```text
//! ghnq-graph v1
//! resolution <C> <H> <W>
//! classes <K>
//! node <id> <kind> [key=value ...]
//! edge <src> <dst>
//! vedges <s_max>
//! vedge <src> <dst> <distance>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. `resolution` and
//! `classes` must precede the first `node`. Kind tokens and their keys:
//!
//! | kind | keys |
//! |------|------|
//! | `conv`, `conv_dw`, `conv_dil` | `cin`, `cout`, `k` (required); `stride`, `pad`, `dil`, `groups` (default 1, 0, 1, 1); `bias` (0/1, default 0) |
//! | `bn` | `c` |
//! | `max_pool`, `avg_pool` | `k` (required); `stride` (default `k`), `pad` (default 0) |
//! | `linear` | `in`, `out` |
//! | `input`, `output`, `relu`, `add`, `concat`, `gap` | none |
//!
//! Edge order is significant: the incoming edges of a `concat` node give its
//! operand order. When a `vedges` line is present, the `vedge` lines that
//! follow are the stored virtual-edge set (validated against recomputation);
//! otherwise virtual edges are recomputed on load.

use std::collections::HashMap;
use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use super::{
    compute_virtual_edges, ArchGraph, Attrs, ConvAttrs, NodeSpec, OpKind, PoolAttrs, VirtualEdges,
    DEFAULT_S_MAX,
};
use crate::error::{Error, Result};

pub const HEADER: &str = "ghnq-graph v1";

pub fn serialize_graph(g: &ArchGraph) -> Vec<u8> {
    let mut s = String::new();
    let (c, h, w) = g.input_resolution;
    let _ = writeln!(s, "{HEADER}");
    let _ = writeln!(s, "resolution {c} {h} {w}");
    let _ = writeln!(s, "classes {}", g.num_classes);
    for n in &g.nodes {
        let _ = write!(s, "node {} {}", n.id, n.kind.token());
        match n.attrs {
            Attrs::None => {}
            Attrs::Conv(a) => {
                let _ = write!(
                    s,
                    " cin={} cout={} k={} stride={} pad={} dil={} groups={} bias={}",
                    a.cin, a.cout, a.kernel, a.stride, a.padding, a.dilation, a.groups, a.bias as u8
                );
            }
            Attrs::Pool(p) => {
                let _ = write!(s, " k={} stride={} pad={}", p.kernel, p.stride, p.padding);
            }
            Attrs::Norm { channels } => {
                let _ = write!(s, " c={channels}");
            }
            Attrs::Linear {
                features_in,
                features_out,
            } => {
                let _ = write!(s, " in={features_in} out={features_out}");
            }
        }
        s.push('\n');
    }
    for (a, b) in &g.edges {
        let _ = writeln!(s, "edge {a} {b}");
    }
    if let Some(v) = &g.virtual_edges {
        let _ = writeln!(s, "vedges {}", v.s_max);
        for (a, b, d) in &v.edges {
            let _ = writeln!(s, "vedge {a} {b} {d}");
        }
    }
    s.into_bytes()
}

/// Hex SHA-256 prefix of the canonical serialization.
pub fn graph_hash(g: &ArchGraph) -> String {
    let digest = Sha256::digest(serialize_graph(g));
    hex::encode(&digest[..8])
}

/// Parses and validates a graph, recomputing virtual edges with
/// [`DEFAULT_S_MAX`] when the file stores none.
pub fn deserialize_graph(bytes: &[u8]) -> Result<ArchGraph> {
    deserialize_graph_with(bytes, DEFAULT_S_MAX)
}

pub fn deserialize_graph_with(bytes: &[u8], s_max: usize) -> Result<ArchGraph> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some((_, l)) if l == HEADER => {}
        Some((n, l)) => {
            return Err(Error::Parse {
                line: n,
                msg: format!("expected header `{HEADER}`, found `{l}`"),
            })
        }
        None => {
            return Err(Error::Parse {
                line: 0,
                msg: "empty input".into(),
            })
        }
    }

    let mut resolution = None;
    let mut classes = None;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    let mut vedges: Option<VirtualEdges> = None;
    let mut last_line = 1;

    for (ln, line) in lines {
        last_line = ln;
        let perr = |msg: String| Error::Parse { line: ln, msg };
        let mut toks = line.split_whitespace();
        let head = toks.next().unwrap();
        let rest: Vec<&str> = toks.collect();
        let num = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| perr(format!("field `{what}`: expected unsigned integer, got `{s}`")))
        };
        let arity = |n: usize| -> Result<()> {
            if rest.len() != n {
                Err(perr(format!("`{head}` takes {n} fields, got {}", rest.len())))
            } else {
                Ok(())
            }
        };
        match head {
            "resolution" => {
                arity(3)?;
                resolution = Some((num(rest[0], "C")?, num(rest[1], "H")?, num(rest[2], "W")?));
            }
            "classes" => {
                arity(1)?;
                classes = Some(num(rest[0], "classes")?);
            }
            "node" => {
                if resolution.is_none() || classes.is_none() {
                    return Err(perr("`resolution` and `classes` must precede nodes".into()));
                }
                if vedges.is_some() || !edges.is_empty() {
                    return Err(perr("nodes must precede edges".into()));
                }
                nodes.push(parse_node(ln, &rest)?);
            }
            "edge" => {
                arity(2)?;
                if vedges.is_some() {
                    return Err(perr("edges must precede `vedges`".into()));
                }
                edges.push((num(rest[0], "src")? as u32, num(rest[1], "dst")? as u32));
            }
            "vedges" => {
                arity(1)?;
                if vedges.is_some() {
                    return Err(perr("duplicate `vedges` line".into()));
                }
                vedges = Some(VirtualEdges {
                    s_max: num(rest[0], "s_max")?,
                    edges: Vec::new(),
                });
            }
            "vedge" => {
                arity(3)?;
                let v = vedges
                    .as_mut()
                    .ok_or_else(|| perr("`vedge` before `vedges`".into()))?;
                v.edges.push((
                    num(rest[0], "src")? as u32,
                    num(rest[1], "dst")? as u32,
                    num(rest[2], "distance")?,
                ));
            }
            other => return Err(perr(format!("unknown record `{other}`"))),
        }
    }

    let (Some(input_resolution), Some(num_classes)) = (resolution, classes) else {
        return Err(Error::Parse {
            line: last_line,
            msg: "missing `resolution` or `classes`".into(),
        });
    };
    if nodes.is_empty() {
        return Err(Error::Parse {
            line: last_line,
            msg: "no nodes".into(),
        });
    }
    let mut g = ArchGraph {
        nodes,
        edges,
        virtual_edges: vedges,
        input_resolution,
        num_classes,
    };
    if g.virtual_edges.is_none() {
        g.validate().map_err(|e| Error::Parse {
            line: last_line,
            msg: e.to_string(),
        })?;
        g = compute_virtual_edges(&g, s_max)?;
    } else {
        g.validate().map_err(|e| Error::Parse {
            line: last_line,
            msg: e.to_string(),
        })?;
    }
    Ok(g)
}

fn parse_node(ln: usize, toks: &[&str]) -> Result<NodeSpec> {
    let perr = |msg: String| Error::Parse { line: ln, msg };
    if toks.len() < 2 {
        return Err(perr("`node` needs an id and a kind".into()));
    }
    let id: u32 = toks[0]
        .parse()
        .map_err(|_| perr(format!("field `id`: expected integer, got `{}`", toks[0])))?;
    let kind = OpKind::from_token(toks[1]).ok_or_else(|| perr(format!("unknown kind `{}`", toks[1])))?;
    let mut kv: HashMap<&str, usize> = HashMap::new();
    for t in &toks[2..] {
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| perr(format!("expected key=value, got `{t}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| perr(format!("field `{k}`: expected unsigned integer, got `{v}`")))?;
        if kv.insert(k, v).is_some() {
            return Err(perr(format!("duplicate key `{k}`")));
        }
    }
    let allowed: &[&str] = match kind {
        k if k.is_conv() => &["cin", "cout", "k", "stride", "pad", "dil", "groups", "bias"],
        k if k.is_pool() => &["k", "stride", "pad"],
        OpKind::BatchNorm => &["c"],
        OpKind::Linear => &["in", "out"],
        _ => &[],
    };
    if let Some(k) = kv.keys().find(|k| !allowed.contains(k)) {
        return Err(perr(format!("key `{k}` not valid for `{}`", kind.token())));
    }
    let req = |k: &str| -> Result<usize> {
        kv.get(k)
            .copied()
            .ok_or_else(|| perr(format!("`{}` requires key `{k}`", kind.token())))
    };
    let opt = |k: &str, d: usize| kv.get(k).copied().unwrap_or(d);
    let attrs = match kind {
        k if k.is_conv() => Attrs::Conv(ConvAttrs {
            cin: req("cin")?,
            cout: req("cout")?,
            kernel: req("k")?,
            stride: opt("stride", 1),
            padding: opt("pad", 0),
            dilation: opt("dil", 1),
            groups: opt("groups", 1),
            bias: match opt("bias", 0) {
                0 => false,
                1 => true,
                v => return Err(perr(format!("field `bias`: expected 0 or 1, got {v}"))),
            },
        }),
        k if k.is_pool() => {
            let kernel = req("k")?;
            Attrs::Pool(PoolAttrs {
                kernel,
                stride: opt("stride", kernel),
                padding: opt("pad", 0),
            })
        }
        OpKind::BatchNorm => Attrs::Norm { channels: req("c")? },
        OpKind::Linear => Attrs::Linear {
            features_in: req("in")?,
            features_out: req("out")?,
        },
        _ => Attrs::None,
    };
    let node = NodeSpec::new(id, kind, attrs);
    node.check_attrs().map_err(|e| perr(e.to_string()))?;
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::testing::small_net;

    const MINIMAL: &str = "ghnq-graph v1
# input -> conv -> output
resolution 3 8 8
classes 10
node 0 input
node 1 conv cin=3 cout=4 k=3 pad=1
node 2 output
edge 0 1
edge 1 2
";

    #[test]
    fn parses_minimal_fixture() {
        let g = deserialize_graph(MINIMAL.as_bytes()).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.nodes[1].conv().unwrap().padding, 1);
        assert_eq!(g.virtual_edges.as_ref().unwrap().edges, vec![(0, 2, 2)]);
    }

    #[test]
    fn round_trip_small_net() {
        let g = compute_virtual_edges(&small_net(), 10).unwrap();
        let back = deserialize_graph(&serialize_graph(&g)).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let bytes = serialize_graph(&compute_virtual_edges(&small_net(), 10).unwrap());
        for cut in [0, 5, 20, 60, bytes.len() / 2, bytes.len() - 3] {
            assert!(
                deserialize_graph(&bytes[..cut]).is_err(),
                "truncation at {cut} parsed"
            );
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let bad = MINIMAL.replace("cout=4", "cout=four");
        match deserialize_graph(bad.as_bytes()) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 6);
                assert!(msg.contains("cout"), "{msg}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let bad = MINIMAL.replace("node 2 output", "node 2 softmax");
        assert!(matches!(
            deserialize_graph(bad.as_bytes()),
            Err(Error::Parse { line: 7, .. })
        ));
    }

    #[test]
    fn tampered_virtual_edges_rejected() {
        let g = compute_virtual_edges(&small_net(), 10).unwrap();
        let text = String::from_utf8(serialize_graph(&g)).unwrap();
        let bad = text.replace("vedge 0 2 2", "vedge 0 2 3");
        assert!(deserialize_graph(bad.as_bytes()).is_err());
    }
}
