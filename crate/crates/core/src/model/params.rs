use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderArch};
use super::head::{Head, HeadKind, HeadSpec, NUM_DOMAINS};
use super::layers::Linear;
use crate::error::{Error, Result};

/// Names the six learnable parameter blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockId {
    /// Photo encoder, shared by source and target photos.
    E1,
    /// Sketch encoder.
    E2,
    IdSource,
    IdTarget,
    Attribute,
    Domain,
}

impl BlockId {
    pub const ALL: [BlockId; 6] = [
        BlockId::E1,
        BlockId::E2,
        BlockId::IdSource,
        BlockId::IdTarget,
        BlockId::Attribute,
        BlockId::Domain,
    ];

    pub fn head_kind(self) -> Option<HeadKind> {
        match self {
            BlockId::E1 | BlockId::E2 => None,
            BlockId::IdSource => Some(HeadKind::IdentitySource),
            BlockId::IdTarget => Some(HeadKind::IdentityTarget),
            BlockId::Attribute => Some(HeadKind::Attribute),
            BlockId::Domain => Some(HeadKind::Domain),
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockId::E1 => "E1",
            BlockId::E2 => "E2",
            BlockId::IdSource => "C_id_s",
            BlockId::IdTarget => "C_id_t",
            BlockId::Attribute => "C_att",
            BlockId::Domain => "C_d",
        })
    }
}

/// Sizes that fix every block's shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderArch,
    pub n_source_ids: usize,
    pub n_target_ids: usize,
    pub n_attributes: usize,
}

/// All learnable blocks. Blocks not yet created for the current training
/// stage are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub e1: Encoder,
    pub e2: Option<Encoder>,
    pub id_source: Option<Head>,
    pub id_target: Option<Head>,
    pub attribute: Option<Head>,
    pub domain: Option<Head>,
}

impl ModelParams {
    /// Fresh photo encoder plus the source identity and attribute heads.
    pub fn init_source<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        let e1 = Encoder::init(config.encoder.clone(), rng)?;
        let dim = e1.embedding_dim();
        let id_source = Head::init(HeadSpec::new(HeadKind::IdentitySource, dim, config.n_source_ids), rng)?;
        let attribute = if config.n_attributes > 0 {
            Some(Head::init(HeadSpec::new(HeadKind::Attribute, dim, config.n_attributes), rng)?)
        } else {
            None
        };
        Ok(ModelParams {
            e1,
            e2: None,
            id_source: Some(id_source),
            id_target: None,
            attribute,
            domain: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.e1.embedding_dim()
    }

    pub fn new_head<R: Rng + ?Sized>(&self, kind: HeadKind, output_dim: usize, rng: &mut R) -> Result<Head> {
        let out = if kind == HeadKind::Domain { NUM_DOMAINS } else { output_dim };
        Head::init(HeadSpec::new(kind, self.embedding_dim(), out), rng)
    }

    pub fn encoder(&self, id: BlockId) -> Result<&Encoder> {
        match id {
            BlockId::E1 => Ok(&self.e1),
            BlockId::E2 => self.e2.as_ref().ok_or_else(|| missing(id)),
            _ => Err(Error::Usage(format!("{id} is not an encoder"))),
        }
    }

    pub fn head(&self, kind: HeadKind) -> Result<&Head> {
        let slot = match kind {
            HeadKind::IdentitySource => &self.id_source,
            HeadKind::IdentityTarget => &self.id_target,
            HeadKind::Attribute => &self.attribute,
            HeadKind::Domain => &self.domain,
        };
        slot.as_ref().ok_or_else(|| missing(block_of(kind)))
    }

    pub fn block(&self, id: BlockId) -> Option<&[Linear]> {
        match id {
            BlockId::E1 => Some(&self.e1.layers),
            BlockId::E2 => self.e2.as_ref().map(|e| e.layers.as_slice()),
            BlockId::IdSource => self.id_source.as_ref().map(|h| h.layers.as_slice()),
            BlockId::IdTarget => self.id_target.as_ref().map(|h| h.layers.as_slice()),
            BlockId::Attribute => self.attribute.as_ref().map(|h| h.layers.as_slice()),
            BlockId::Domain => self.domain.as_ref().map(|h| h.layers.as_slice()),
        }
    }

    pub fn block_mut(&mut self, id: BlockId) -> Option<&mut Vec<Linear>> {
        match id {
            BlockId::E1 => Some(&mut self.e1.layers),
            BlockId::E2 => self.e2.as_mut().map(|e| &mut e.layers),
            BlockId::IdSource => self.id_source.as_mut().map(|h| &mut h.layers),
            BlockId::IdTarget => self.id_target.as_mut().map(|h| &mut h.layers),
            BlockId::Attribute => self.attribute.as_mut().map(|h| &mut h.layers),
            BlockId::Domain => self.domain.as_mut().map(|h| &mut h.layers),
        }
    }

    /// Present blocks in canonical order.
    pub fn blocks(&self) -> Vec<(BlockId, &[Linear])> {
        BlockId::ALL
            .iter()
            .filter_map(|&id| self.block(id).map(|b| (id, b)))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.blocks()
            .iter()
            .map(|(_, b)| b.iter().map(Linear::num_params).sum::<usize>())
            .sum()
    }
}

pub(crate) fn block_of(kind: HeadKind) -> BlockId {
    match kind {
        HeadKind::IdentitySource => BlockId::IdSource,
        HeadKind::IdentityTarget => BlockId::IdTarget,
        HeadKind::Attribute => BlockId::Attribute,
        HeadKind::Domain => BlockId::Domain,
    }
}

fn missing(id: BlockId) -> Error {
    Error::Usage(format!("model has no {id} block at this stage"))
}

/// Gradient storage paired with [`ModelParams`]; blocks are created on
/// first accumulation and sum additively across loss terms.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    blocks: BTreeMap<BlockId, Vec<Linear>>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    /// Storage for `id`, zero-initialized with the shapes of `like`.
    pub fn slot(&mut self, id: BlockId, like: &[Linear]) -> &mut Vec<Linear> {
        self.blocks
            .entry(id)
            .or_insert_with(|| like.iter().map(Linear::zeros_like).collect())
    }

    pub fn get(&self, id: BlockId) -> Option<&[Linear]> {
        self.blocks.get(&id).map(Vec::as_slice)
    }

    pub fn remove(&mut self, id: BlockId) -> Option<Vec<Linear>> {
        self.blocks.remove(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.keys().copied()
    }

    pub fn scale(&mut self, c: f64) {
        for block in self.blocks.values_mut() {
            for lin in block {
                lin.values_mut().for_each(|v| *v *= c);
            }
        }
    }

    /// Flattened view of one block's gradient, weights then biases per layer.
    pub fn flat(&self, id: BlockId) -> Vec<f64> {
        self.get(id)
            .map(|b| b.iter().flat_map(|l| l.values().copied()).collect())
            .unwrap_or_default()
    }
}
