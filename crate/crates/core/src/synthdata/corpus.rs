use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::genotype::{Genotype, InstanceSpec, Palette, ATTRIBUTE_NAMES, COLOR_ATTRIBUTE_NAMES};
use super::raster;
use super::render::{render_photo, render_sketch, PhotoStyle};
use super::{
    AttributeInfo, CorpusManifest, CorpusParams, Domain, SampleRecord, Split, SplitManifest, MANIFEST_FILE,
    MANIFEST_VERSION, TARGET_ID_BASE,
};
use crate::error::{Error, Result};
use crate::fsutil::{sha256_hex, write_atomic};
use crate::model::InputShape;

/// Each identity draws from its own ChaCha stream, so an identity's renders
/// do not depend on how many identities precede it.
fn identity_rng(seed: u64, identity: u32) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(identity));
    rng
}

fn split_ids(params: &CorpusParams) -> [(Split, Vec<u32>); 3] {
    let n_train = params.n_target_train_ids as u32;
    let n_test = params.n_target_test_ids as u32;
    [
        (Split::Source, (0..params.n_source_ids as u32).collect()),
        (Split::TargetTrain, (TARGET_ID_BASE..TARGET_ID_BASE + n_train).collect()),
        (
            Split::TargetTest,
            (TARGET_ID_BASE + n_train..TARGET_ID_BASE + n_train + n_test).collect(),
        ),
    ]
}

fn instance(seed: u64, identity: u32) -> (InstanceSpec, ChaCha8Rng) {
    let mut rng = identity_rng(seed, identity);
    let genotype = Genotype::sample(&mut rng);
    let palette = Palette::sample(&mut rng);
    (
        InstanceSpec {
            identity,
            genotype,
            palette,
        },
        rng,
    )
}

/// The identity specs of one split, as the generator would produce them.
pub fn instances(seed: u64, params: &CorpusParams, split: Split) -> Vec<InstanceSpec> {
    split_ids(params)
        .into_iter()
        .find(|(s, _)| *s == split)
        .map(|(_, ids)| ids.into_iter().map(|id| instance(seed, id).0).collect())
        .unwrap_or_default()
}

/// Renders the corpus under `root` and writes its manifest.
pub fn generate_corpus(root: &Path, params: &CorpusParams, seed: u64) -> Result<CorpusManifest> {
    params.validate()?;
    let source_attrs: Vec<[u8; 8]> = instances(seed, params, Split::Source)
        .iter()
        .map(|s| s.genotype.attributes())
        .collect();
    for (k, name) in ATTRIBUTE_NAMES.iter().enumerate() {
        let pos = source_attrs.iter().filter(|a| a[k] == 1).count();
        if pos == 0 || pos == source_attrs.len() {
            return Err(Error::Config(format!(
                "seed {seed}: attribute {name} lacks {} source examples",
                if pos == 0 { "positive" } else { "negative" }
            )));
        }
    }

    let size = params.image_size;
    let mut splits = Vec::new();
    for (split, ids) in split_ids(params) {
        let mut samples = Vec::new();
        for &identity in &ids {
            let (spec, mut rng) = instance(seed, identity);
            let dir = root.join(split.dir_name()).join(format!("{identity:05}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let (photo_domain, n_photos, style) = match split {
                Split::Source => (Domain::SourcePhoto, params.source_photos_per_id, PhotoStyle::source()),
                _ => (Domain::TargetPhoto, params.target_photos_per_id, PhotoStyle::target()),
            };
            let n_sketches = if split == Split::Source { 0 } else { params.target_sketches_per_id };
            let renders = (0..n_photos)
                .map(|_| (photo_domain, 3, render_photo(&spec.genotype, &spec.palette, &style, size, &mut rng)))
                .collect::<Vec<_>>()
                .into_iter()
                .chain(
                    (0..n_sketches)
                        .map(|_| (Domain::TargetSketch, 1, render_sketch(&spec.genotype, &params.sketch, size, &mut rng)))
                        .collect::<Vec<_>>(),
                );
            let mut counters: BTreeMap<Domain, usize> = BTreeMap::new();
            for (domain, channels, pixels) in renders {
                let idx = counters.entry(domain).or_default();
                let ext = if channels == 1 { "pgm" } else { "ppm" };
                let name = format!("{}_{}.{ext}", domain.file_stem(), idx);
                *idx += 1;
                let bytes = raster::encode(channels, size, size, &pixels)?;
                write_atomic(&dir.join(&name), &bytes)?;
                let is_source = split == Split::Source;
                samples.push(SampleRecord {
                    path: format!("{}/{identity:05}/{name}", split.dir_name()),
                    domain,
                    identity,
                    attributes: is_source.then(|| spec.genotype.attributes().to_vec()),
                    color_bits: is_source.then(|| spec.palette.color_bits().to_vec()),
                    sha256: sha256_hex(&bytes),
                });
            }
        }
        splits.push(SplitManifest {
            split,
            identities: ids,
            samples,
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        seed,
        params: params.clone(),
        attributes: ATTRIBUTE_NAMES
            .iter()
            .map(|n| AttributeInfo {
                name: n.to_string(),
                is_color: false,
            })
            .collect(),
        splits,
    };
    manifest.save(&root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Appends the palette bits of every source sample to its attribute vector,
/// tagging the new attributes as color. Sketches carry no color, so these
/// bits are not shared across modalities.
pub fn poison_with_color_attributes(manifest: &CorpusManifest) -> Result<CorpusManifest> {
    let mut out = manifest.clone();
    if out.attributes.iter().any(|a| a.is_color) {
        return Err(Error::Usage("manifest already carries color attributes".into()));
    }
    out.attributes.extend(COLOR_ATTRIBUTE_NAMES.iter().map(|n| AttributeInfo {
        name: n.to_string(),
        is_color: true,
    }));
    for split in &mut out.splits {
        for s in split.samples.iter_mut().filter(|s| s.attributes.is_some()) {
            let bits = s
                .color_bits
                .as_ref()
                .ok_or_else(|| Error::Config(format!("{}: source sample without palette bits", s.path)))?;
            s.attributes.as_mut().expect("filtered").extend(bits);
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
struct AuditState {
    forbidden: BTreeMap<Split, usize>,
    reads: Vec<(Split, PathBuf)>,
}

/// Shared log of every corpus file read, with splits that may be forbidden
/// for the lifetime of an [`AuditGuard`].
#[derive(Clone, Debug, Default)]
pub struct AccessAudit {
    state: Arc<Mutex<AuditState>>,
}

#[must_use = "the split is only forbidden while the guard lives"]
pub struct AuditGuard {
    audit: AccessAudit,
    split: Split,
}

impl Drop for AuditGuard {
    fn drop(&mut self) {
        let mut st = self.audit.lock();
        if let Some(n) = st.forbidden.get_mut(&self.split) {
            *n -= 1;
            if *n == 0 {
                st.forbidden.remove(&self.split);
            }
        }
    }
}

impl AccessAudit {
    fn lock(&self) -> std::sync::MutexGuard<'_, AuditState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn forbid(&self, split: Split) -> AuditGuard {
        *self.lock().forbidden.entry(split).or_default() += 1;
        AuditGuard {
            audit: self.clone(),
            split,
        }
    }

    pub fn is_forbidden(&self, split: Split) -> bool {
        self.lock().forbidden.contains_key(&split)
    }

    /// Called before a file is opened; a forbidden split is refused and
    /// never reaches the filesystem.
    fn record(&self, split: Split, path: &Path) -> Result<()> {
        let mut st = self.lock();
        if st.forbidden.contains_key(&split) {
            return Err(Error::Audit {
                split: split.to_string(),
                path: path.to_path_buf(),
            });
        }
        st.reads.push((split, path.to_path_buf()));
        Ok(())
    }

    pub fn reads(&self) -> Vec<(Split, PathBuf)> {
        self.lock().reads.clone()
    }

    pub fn read_count(&self, split: Split) -> usize {
        self.lock().reads.iter().filter(|(s, _)| *s == split).count()
    }

    pub fn clear(&self) {
        self.lock().reads.clear();
    }
}

/// Opens a corpus and loads splits with checksum verification, recording
/// every read in its [`AccessAudit`].
#[derive(Clone, Debug)]
pub struct CorpusReader {
    root: PathBuf,
    manifest: CorpusManifest,
    audit: AccessAudit,
}

impl CorpusReader {
    pub fn open(root: &Path) -> Result<Self> {
        let manifest = CorpusManifest::load(&root.join(MANIFEST_FILE))?;
        Ok(Self::with_manifest(root, manifest))
    }

    /// Reads images under `root` according to a (possibly derived) manifest.
    pub fn with_manifest(root: &Path, manifest: CorpusManifest) -> Self {
        CorpusReader {
            root: root.to_path_buf(),
            manifest,
            audit: AccessAudit::default(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn audit(&self) -> &AccessAudit {
        &self.audit
    }

    pub fn load_split(&self, split: Split) -> Result<Dataset> {
        let sm = self.manifest.split(split)?;
        let size = self.manifest.params.image_size;
        let shape = InputShape {
            channels: 3,
            height: size,
            width: size,
        };
        let n_att = self.manifest.attributes.len();
        let mut images = Array2::zeros((sm.samples.len(), shape.len()));
        let mut attributes = (split == Split::Source).then(|| Array2::zeros((sm.samples.len(), n_att)));
        for (row, rec) in sm.samples.iter().enumerate() {
            let path = self.root.join(&rec.path);
            self.audit.record(split, &path)?;
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(Error::Corrupt(format!("checksum mismatch for {}", rec.path)));
            }
            let r = raster::decode(&bytes)?;
            if r.width != size || r.height != size {
                return Err(Error::Corrupt(format!("{}: {}x{} raster, expected {size}x{size}", rec.path, r.width, r.height)));
            }
            let plane = size * size;
            let mut dst = images.row_mut(row);
            for c in 0..3 {
                let src_c = if r.channels == 1 { 0 } else { c };
                for i in 0..plane {
                    dst[c * plane + i] = f64::from(r.chw[src_c * plane + i]) / 255.0 - 0.5;
                }
            }
            if let Some(att) = attributes.as_mut() {
                let labels = rec
                    .attributes
                    .as_ref()
                    .filter(|a| a.len() == n_att)
                    .ok_or_else(|| Error::Format(format!("{}: missing or mis-sized attribute labels", rec.path)))?;
                for (k, &b) in labels.iter().enumerate() {
                    att[[row, k]] = f64::from(b);
                }
            }
        }
        Ok(Dataset {
            split,
            shape,
            images,
            identities: sm.samples.iter().map(|s| s.identity).collect(),
            domains: sm.samples.iter().map(|s| s.domain).collect(),
            attributes,
            attribute_info: self.manifest.attributes.clone(),
        })
    }
}

/// One split held in memory. Pixels are scaled to `[-0.5, 0.5]`; sketches
/// are replicated to three channels so both encoders share an input shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub shape: InputShape,
    pub images: Array2<f64>,
    pub identities: Vec<u32>,
    pub domains: Vec<Domain>,
    /// Ground-truth attribute labels, present for the source split only.
    pub attributes: Option<Array2<f64>>,
    pub attribute_info: Vec<AttributeInfo>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.identities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identities.is_empty()
    }

    pub fn n_attributes(&self) -> usize {
        self.attribute_info.len()
    }

    pub fn rows_of(&self, domain: Domain) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.domains[i] == domain).collect()
    }

    /// Sorted distinct identities.
    pub fn identity_set(&self) -> Vec<u32> {
        self.identities.iter().copied().collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Dense class index per row (position of the identity in
    /// [`Dataset::identity_set`]).
    pub fn class_indices(&self) -> Vec<usize> {
        let ids = self.identity_set();
        self.identities
            .iter()
            .map(|id| ids.binary_search(id).expect("identity from own set"))
            .collect()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            split: self.split,
            shape: self.shape,
            images: self.images.select(Axis(0), rows),
            identities: rows.iter().map(|&r| self.identities[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            attributes: self.attributes.as_ref().map(|a| a.select(Axis(0), rows)),
            attribute_info: self.attribute_info.clone(),
        }
    }

    pub fn restrict_identities(&self, keep: &BTreeSet<u32>) -> Dataset {
        let rows: Vec<usize> = (0..self.len()).filter(|&r| keep.contains(&self.identities[r])).collect();
        self.subset(&rows)
    }

    /// Keeps the attribute columns at `indices`, in the given order.
    pub fn select_attributes(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.n_attributes()) {
            return Err(Error::Usage(format!(
                "attribute index {bad} out of range ({} attributes)",
                self.n_attributes()
            )));
        }
        let mut out = self.clone();
        out.attributes = self.attributes.as_ref().map(|a| a.select(Axis(1), indices));
        out.attribute_info = indices.iter().map(|&k| self.attribute_info[k].clone()).collect();
        Ok(out)
    }

    pub fn without_color_attributes(&self) -> Dataset {
        let keep: Vec<usize> = (0..self.n_attributes()).filter(|&k| !self.attribute_info[k].is_color).collect();
        self.select_attributes(&keep).expect("indices in range")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusParams {
        CorpusParams {
            n_source_ids: 12,
            n_target_train_ids: 4,
            n_target_test_ids: 3,
            ..CorpusParams::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_loads() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = generate_corpus(a.path(), &small(), 3).unwrap();
        let m2 = generate_corpus(b.path(), &small(), 3).unwrap();
        assert_eq!(m1, m2);
        let bytes = fs::read(a.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(bytes, fs::read(b.path().join(MANIFEST_FILE)).unwrap());
        assert_eq!(CorpusManifest::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);

        let reader = CorpusReader::open(a.path()).unwrap();
        let src = reader.load_split(Split::Source).unwrap();
        assert_eq!(src.len(), 12 * 4);
        assert_eq!(src.attributes.as_ref().unwrap().ncols(), 8);
        let tt = reader.load_split(Split::TargetTrain).unwrap();
        assert_eq!(tt.rows_of(Domain::TargetPhoto).len(), 8);
        assert_eq!(tt.rows_of(Domain::TargetSketch).len(), 4);
        assert!(tt.attributes.is_none());
        assert_eq!(reader.audit().read_count(Split::Source), 48);
    }

    #[test]
    fn forbidden_split_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        generate_corpus(dir.path(), &small(), 1).unwrap();
        let reader = CorpusReader::open(dir.path()).unwrap();
        {
            let _g = reader.audit().forbid(Split::TargetTest);
            assert!(matches!(reader.load_split(Split::TargetTest), Err(Error::Audit { .. })));
            reader.load_split(Split::TargetTrain).unwrap();
        }
        assert_eq!(reader.audit().read_count(Split::TargetTest), 0);
        reader.load_split(Split::TargetTest).unwrap();
    }

    #[test]
    fn tampering_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), &small(), 1).unwrap();
        let victim = dir.path().join(&m.splits[0].samples[0].path);
        let mut bytes = fs::read(&victim).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&victim, bytes).unwrap();
        let reader = CorpusReader::open(dir.path()).unwrap();
        assert!(matches!(reader.load_split(Split::Source), Err(Error::Corrupt(_))));
    }

    #[test]
    fn poisoning_appends_color_bits() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_corpus(dir.path(), &small(), 2).unwrap();
        let p = poison_with_color_attributes(&m).unwrap();
        assert_eq!(p.attributes.len(), 11);
        assert!(p.attributes[8..].iter().all(|a| a.is_color));
        let reader = CorpusReader::with_manifest(dir.path(), p);
        let src = reader.load_split(Split::Source).unwrap();
        assert_eq!(src.n_attributes(), 11);
        assert_eq!(src.without_color_attributes().n_attributes(), 8);
        assert!(poison_with_color_attributes(reader.manifest()).is_err());
    }

    #[test]
    fn rejects_tiny_images() {
        let dir = tempfile::tempdir().unwrap();
        let p = CorpusParams {
            image_size: 8,
            ..small()
        };
        assert!(matches!(generate_corpus(dir.path(), &p, 0), Err(Error::Config(_))));
    }
}
