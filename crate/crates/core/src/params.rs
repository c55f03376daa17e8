use std::collections::BTreeMap;

use crate::arch::ArchGraph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters for one architecture, keyed by node id, in the order given by
/// [`NodeSpec::param_shapes`](crate::arch::NodeSpec::param_shapes).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictedParams {
    pub tensors: BTreeMap<u32, Vec<Tensor>>,
}

impl PredictedParams {
    pub fn get(&self, id: u32) -> Option<&[Tensor]> {
        self.tensors.get(&id).map(Vec::as_slice)
    }

    pub fn insert(&mut self, id: u32, tensors: Vec<Tensor>) {
        self.tensors.insert(id, tensors);
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().flatten().map(Tensor::numel).sum()
    }

    /// Every parameterized node has tensors of exactly its declared shapes and
    /// no other node has any.
    pub fn validate(&self, g: &ArchGraph) -> Result<()> {
        let mut expected = 0;
        for n in &g.nodes {
            let shapes = n.param_shapes();
            if shapes.is_empty() {
                continue;
            }
            expected += 1;
            let got = self.get(n.id).ok_or(Error::MissingParams(n.id))?;
            if got.len() != shapes.len()
                || got.iter().zip(&shapes).any(|(t, s)| t.shape() != s.as_slice())
            {
                return Err(Error::shape(
                    "predicted params",
                    format!(
                        "node {}: expected {shapes:?}, got {:?}",
                        n.id,
                        got.iter().map(Tensor::shape).collect::<Vec<_>>()
                    ),
                ));
            }
        }
        if expected != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "predicted params hold {} entries for {expected} parameterized nodes",
                self.tensors.len()
            )));
        }
        Ok(())
    }
}
