//! Self-describing binary checkpoint: magic, a JSON header holding the
//! architecture descriptors, RNG state and epoch counter, then every
//! parameter as little-endian `f64` in canonical block order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderArch};
use super::head::{Head, HeadKind, HeadSpec};
use super::layers::Linear;
use super::params::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"HDACKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    out_features: usize,
    fan_in: usize,
    bias: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    epoch: u64,
    rng: ChaCha8Rng,
    meta: BTreeMap<String, String>,
    e1: EncoderArch,
    e2: Option<EncoderArch>,
    heads: BTreeMap<HeadKind, HeadSpec>,
    /// Layer shapes per block in canonical order; cross-checked on load.
    layers: Vec<Vec<LayerShape>>,
}

fn shapes(layers: &[Linear]) -> Vec<LayerShape> {
    layers
        .iter()
        .map(|l| LayerShape {
            out_features: l.out_features(),
            fan_in: l.fan_in(),
            bias: l.bias.is_some(),
        })
        .collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let p = &self.params;
        let mut heads = BTreeMap::new();
        for head in [&p.id_source, &p.id_target, &p.attribute, &p.domain].into_iter().flatten() {
            heads.insert(head.kind(), head.spec.clone());
        }
        let header = Header {
            epoch: self.epoch,
            rng: self.rng.clone(),
            meta: self.meta.clone(),
            e1: p.e1.arch.clone(),
            e2: p.e2.as_ref().map(|e| e.arch.clone()),
            heads,
            layers: p.blocks().iter().map(|(_, b)| shapes(b)).collect(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + header.len() + 8 * p.num_params());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, block) in p.blocks() {
            for lin in block {
                for v in lin.values() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut payload = bytes[16 + hlen..].chunks_exact(8);
        if payload.remainder().len() != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut next = || -> Result<f64> {
            payload
                .next()
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .ok_or_else(|| bad("truncated payload"))
        };

        let mut e1 = Encoder::zeros(header.e1)?;
        let mut e2 = header.e2.map(Encoder::zeros).transpose()?;
        let head_of = |kind: HeadKind| -> Option<Head> {
            header.heads.get(&kind).map(|spec| {
                let mut dims = vec![spec.input_dim];
                dims.extend(&spec.hidden);
                dims.push(spec.output_dim);
                Head {
                    spec: spec.clone(),
                    layers: dims.windows(2).map(|w| Linear::zeros(w[1], w[0], true)).collect(),
                }
            })
        };
        let mut id_source = head_of(HeadKind::IdentitySource);
        let mut id_target = head_of(HeadKind::IdentityTarget);
        let mut attribute = head_of(HeadKind::Attribute);
        let mut domain = head_of(HeadKind::Domain);

        let mut slots: Vec<&mut Vec<Linear>> = vec![&mut e1.layers];
        slots.extend(e2.as_mut().map(|e| &mut e.layers));
        for h in [&mut id_source, &mut id_target, &mut attribute, &mut domain]
            .into_iter()
            .flatten()
        {
            slots.push(&mut h.layers);
        }
        if slots.len() != header.layers.len() {
            return Err(bad("block count does not match header"));
        }
        for (slot, expected) in slots.into_iter().zip(&header.layers) {
            if slot.len() != expected.len() {
                return Err(bad("layer count does not match header"));
            }
            for (lin, shape) in slot.iter_mut().zip(expected) {
                if lin.weight.dim() != (shape.out_features, shape.fan_in) || lin.bias.is_some() != shape.bias {
                    return Err(bad("layer shape does not match architecture"));
                }
                let w: Vec<f64> = (0..lin.weight.len()).map(|_| next()).collect::<Result<_>>()?;
                lin.weight = Array2::from_shape_vec(lin.weight.raw_dim(), w).expect("sized from shape");
                if let Some(b) = lin.bias.as_mut() {
                    let v: Vec<f64> = (0..b.len()).map(|_| next()).collect::<Result<_>>()?;
                    *b = Array1::from(v);
                }
            }
        }
        if next().is_ok() {
            return Err(bad("trailing payload"));
        }
        Ok(Checkpoint {
            params: ModelParams {
                e1,
                e2,
                id_source,
                id_target,
                attribute,
                domain,
            },
            rng: header.rng,
            epoch: header.epoch,
            meta: header.meta,
        })
    }

    /// Writes via a temporary sibling and rename so readers never see a
    /// partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
