//! Structure of the codec's Bayesian network: which variant realizes each
//! inter-node edge and in which parallel order the latent elements are coded.

pub mod inter;
pub mod intra;

use std::collections::BTreeMap;

pub use inter::{EdgeId, InterChoice, InterEdgeSpec, InterStructureParams};
pub use intra::TopologyField;

/// One concrete network: a hard variant index per edge plus a topology tile.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructureSample {
    pub inter: BTreeMap<EdgeId, usize>,
    pub stages: usize,
    pub tile: Vec<u8>,
}

impl StructureSample {
    pub fn new(inter: BTreeMap<EdgeId, usize>, stages: usize, tile: Vec<u8>) -> Self {
        Self { inter, stages, tile }
    }

    pub fn uniform(index: usize, stages: usize, tile: Vec<u8>) -> Self {
        Self { inter: EdgeId::ALL.into_iter().map(|e| (e, index)).collect(), stages, tile }
    }

    pub fn choice(&self, edge: EdgeId) -> usize {
        self.inter.get(&edge).copied().unwrap_or(0)
    }

    pub fn with_choice(mut self, edge: EdgeId, index: usize) -> Self {
        self.inter.insert(edge, index);
        self
    }

    pub fn groups(&self) -> usize {
        self.tile.len() / 4
    }

    pub fn topology(&self, height: usize, width: usize) -> crate::Result<TopologyField> {
        TopologyField::from_tile(self.stages, &self.tile, height, width)
    }
}
