//! Procedural paired-modality corpus: a labeled source photo domain and a
//! target domain of photos and sketches with disjoint identities and shared,
//! color-free binary attributes.

mod corpus;
mod genotype;
pub mod raster;
mod render;

pub use corpus::{generate_corpus, instances, poison_with_color_attributes, AccessAudit, AuditGuard, CorpusReader, Dataset};
pub use genotype::{Genotype, InstanceSpec, Limb, Palette, ATTRIBUTE_NAMES, COLOR_ATTRIBUTE_NAMES};
pub use render::{figure, render_photo, render_sketch, PhotoStyle, SketchStyle};

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
/// Target identity ids start here; source ids stay below it.
pub const TARGET_ID_BASE: u32 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Source,
    TargetTrain,
    TargetTest,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::TargetTrain, Split::TargetTest];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetTrain => "target_train",
            Split::TargetTest => "target_test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// The three sub-domains. The discriminant is the domain classifier label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Domain {
    #[serde(rename = "s")]
    SourcePhoto,
    #[serde(rename = "t1")]
    TargetPhoto,
    #[serde(rename = "t2")]
    TargetSketch,
}

impl Domain {
    pub fn label(self) -> usize {
        match self {
            Domain::SourcePhoto => 0,
            Domain::TargetPhoto => 1,
            Domain::TargetSketch => 2,
        }
    }

    pub fn is_sketch(self) -> bool {
        self == Domain::TargetSketch
    }

    fn file_stem(self) -> &'static str {
        if self.is_sketch() {
            "sketch"
        } else {
            "photo"
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::SourcePhoto => "s",
            Domain::TargetPhoto => "t1",
            Domain::TargetSketch => "t2",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeInfo {
    pub name: String,
    pub is_color: bool,
}

/// Generator settings; the defaults are the reference corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusParams {
    pub n_source_ids: usize,
    pub n_target_train_ids: usize,
    pub n_target_test_ids: usize,
    pub source_photos_per_id: usize,
    pub target_photos_per_id: usize,
    pub target_sketches_per_id: usize,
    pub image_size: usize,
    pub sketch: SketchStyle,
}

impl Default for CorpusParams {
    fn default() -> Self {
        CorpusParams {
            n_source_ids: 200,
            n_target_train_ids: 40,
            n_target_test_ids: 20,
            source_photos_per_id: 4,
            target_photos_per_id: 2,
            target_sketches_per_id: 1,
            image_size: 32,
            sketch: SketchStyle::default(),
        }
    }
}

impl CorpusParams {
    pub const MIN_IMAGE_SIZE: usize = 16;

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("corpus: {m}")));
        if self.n_source_ids < 10 {
            return fail(format!("n_source_ids = {} (need at least 10)", self.n_source_ids));
        }
        if self.n_source_ids >= TARGET_ID_BASE as usize {
            return fail(format!("n_source_ids = {} exceeds the source id range", self.n_source_ids));
        }
        if self.n_target_train_ids < 2 || self.n_target_test_ids < 2 {
            return fail("target train and test splits need at least 2 identities each".into());
        }
        if self.source_photos_per_id < 2 {
            return fail("source_photos_per_id must be at least 2 for triplet positives".into());
        }
        if self.target_photos_per_id == 0 || self.target_sketches_per_id == 0 {
            return fail("every target identity needs at least one photo and one sketch".into());
        }
        if self.image_size < Self::MIN_IMAGE_SIZE {
            return fail(format!(
                "image_size = {} is too small to render parts (minimum {})",
                self.image_size,
                Self::MIN_IMAGE_SIZE
            ));
        }
        if !(self.sketch.distortion >= 0.0 && self.sketch.stroke_width > 0.0) {
            return fail("sketch distortion must be >= 0 and stroke width > 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub domain: Domain,
    pub identity: u32,
    /// Attribute labels; persisted for source samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attributes: Option<Vec<u8>>,
    /// Body palette bits, recorded for source photos so the color-poisoned
    /// variant can be derived without re-rendering.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color_bits: Option<Vec<u8>>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub split: Split,
    pub identities: Vec<u32>,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub params: CorpusParams,
    pub attributes: Vec<AttributeInfo>,
    pub splits: Vec<SplitManifest>,
}

impl CorpusManifest {
    pub fn split(&self, split: Split) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.split == split)
            .ok_or_else(|| Error::Format(format!("manifest has no {split} split")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self)?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let m: CorpusManifest = serde_json::from_slice(bytes)?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes()?)
    }

    /// SHA-256 of the serialized manifest, which pins every image checksum.
    pub fn checksum(&self) -> Result<String> {
        Ok(crate::fsutil::sha256_hex(&self.to_bytes()?))
    }
}
