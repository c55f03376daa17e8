use std::collections::VecDeque;

use super::{ArchGraph, VirtualEdges};
use crate::error::{Error, Result};

/// Longest shortest-path distance that receives a virtual edge by default.
pub const DEFAULT_S_MAX: usize = 10;

/// Directed BFS distances from every node, indexed by node position.
pub fn all_pairs_distances(g: &ArchGraph) -> Result<Vec<Vec<Option<usize>>>> {
    let topo = g.topology()?;
    let n = g.nodes.len();
    let mut dist = vec![vec![None; n]; n];
    for (src, row) in dist.iter_mut().enumerate() {
        row[src] = Some(0);
        let mut queue = VecDeque::from([src]);
        while let Some(u) = queue.pop_front() {
            let du = row[u].unwrap();
            for &v in &topo.succs[u] {
                if row[v].is_none() {
                    row[v] = Some(du + 1);
                    queue.push_back(v);
                }
            }
        }
    }
    Ok(dist)
}

/// Returns a copy of `g` whose virtual-edge set holds `(u, v, d)` for every
/// ordered pair at directed shortest-path distance `2 <= d <= s_max`.
pub fn compute_virtual_edges(g: &ArchGraph, s_max: usize) -> Result<ArchGraph> {
    if s_max < 2 {
        return Err(Error::Invalid(format!("s_max must be >= 2, got {s_max}")));
    }
    let dist = all_pairs_distances(g)?;
    let mut edges = Vec::new();
    for (u, row) in dist.iter().enumerate() {
        for (v, d) in row.iter().enumerate() {
            if let Some(d) = *d {
                if (2..=s_max).contains(&d) {
                    edges.push((g.nodes[u].id, g.nodes[v].id, d));
                }
            }
        }
    }
    let mut out = g.clone();
    out.virtual_edges = Some(VirtualEdges { s_max, edges });
    Ok(out)
}
