use std::path::{Path, PathBuf};

use hda_core::synthdata::CorpusParams;
use hda_core::training::TrainConfig;
use hda_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Every setting a subcommand reads. Serialized verbatim as the run
/// snapshot, so reloading it reproduces the run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Corpus directory read by the training and evaluation commands and
    /// written by `gen-data`.
    pub corpus: PathBuf,
    /// Seeds the corpus generator and every training run; copied into
    /// `train.seed`.
    pub seed: u64,
    /// Single-threaded, fixed-order execution. The only supported mode;
    /// recorded so snapshots state it.
    pub deterministic: bool,
    pub generator: CorpusParams,
    pub train: TrainConfig,
    pub ablation: AblationSpec,
    pub sweep: SweepSpec,
    pub attrsel: AttrSelSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub rows: Vec<u8>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub grid: Vec<f64>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttrSelSpec {
    pub min_accuracy: f64,
    pub k_range: Vec<usize>,
    pub repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: PathBuf::from("corpus"),
            seed: 0,
            deterministic: true,
            generator: CorpusParams::default(),
            train: TrainConfig::default(),
            ablation: AblationSpec::default(),
            sweep: SweepSpec::default(),
            attrsel: AttrSelSpec::default(),
        }
    }
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            rows: (1..=13).collect(),
            seeds: 5,
        }
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            grid: vec![0.001, 0.01, 0.1, 1.0, 10.0],
            seeds: 1,
        }
    }
}

impl Default for AttrSelSpec {
    fn default() -> Self {
        AttrSelSpec {
            min_accuracy: hda_core::attrsel::DEFAULT_MIN_ACCURACY,
            k_range: (1..=8).collect(),
            repeats: 10,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.deterministic {
            return Err(Error::Config("deterministic = false is not supported".into()));
        }
        self.generator.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }
}

/// Parses a command-line value as a TOML value; bare words become strings.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key = value` in `table`, creating intermediate tables.
fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Usage(format!("malformed override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Usage(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Reads `path` (or starts from the defaults), applies `key=value`
/// overrides in order, and rejects unknown keys.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Usage(format!("override `{o}` is not key=value")))?;
        set_path(&mut table, k.trim(), parse_value(v.trim()))?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_reference_defaults() {
        let c = load_config(None, &[]).unwrap();
        let w = c.train.weights;
        assert_eq!((w.lambda1, w.lambda2, w.lambda3, w.alpha), (1.0, 0.1, 0.1, 0.3));
        assert_eq!(c.train.base_lr, 1e-4);
        assert_eq!((c.train.epochs_step1, c.train.epochs_step2), (60, 60));
        assert_eq!(c.train.batch_source, 64);
        assert_eq!(c.train.step2_pairs * 2 + c.train.step2_source, 96);
    }

    #[test]
    fn override_changes_only_its_key() {
        let base = load_config(None, &[]).unwrap();
        let c = load_config(None, &["train.weights.lambda2=0.5".into()]).unwrap();
        assert_eq!(c.train.weights.lambda2, 0.5);
        let mut expect = base.clone();
        expect.train.weights.lambda2 = 0.5;
        assert_eq!(c, expect);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_valid_ones() {
        let err = load_config(None, &["train.lamda2=0.5".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("lamda2") && msg.contains("epochs_step1"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = load_config(None, &["seed=9".into(), "train.weights.lambda3=0.25".into(), "corpus=\"x/y\"".into()]).unwrap();
        let path = dir.path().join("config.toml");
        std::fs::write(&path, c.to_toml().unwrap()).unwrap();
        assert_eq!(load_config(Some(&path), &[]).unwrap(), c);
        assert_eq!(c.train.seed, 9);
    }

    #[test]
    fn bare_words_are_strings() {
        let c = load_config(None, &["corpus=data/c1".into(), "train.triplet_features=l2".into()]).unwrap();
        assert_eq!(c.corpus, PathBuf::from("data/c1"));
        assert_eq!(c.train.triplet_features, hda_core::losses::TripletFeatures::L2);
    }

    #[test]
    fn shipped_desk_scale_profile_matches_the_library_profile() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk_scale.toml");
        let c = load_config(Some(&path), &[]).unwrap();
        assert_eq!(c.train, TrainConfig::desk_scale());
    }
}
