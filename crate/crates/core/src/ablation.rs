//! The ablation matrix and the trade-off sweep as runnable experiment
//! plans over a loaded corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attrsel::mean_std;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelConfig, ModelParams};
use crate::retrieval::evaluate_bidirectional;
use crate::synthdata::{CorpusReader, Dataset, Split};
use crate::training::{run_step1, run_step2, Step1Losses, Step2Losses, TrainConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Which networks a row instantiates, in table column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modules {
    pub e1: bool,
    pub e2: bool,
    pub id_source: bool,
    pub id_target: bool,
    pub attribute: bool,
    pub domain: bool,
}

/// Which loss terms a row optimizes, in table column order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossSet {
    pub source_identity: bool,
    pub target_identity: bool,
    pub source_triplet: bool,
    pub target_triplet: bool,
    pub source_attribute: bool,
    pub target_attribute: bool,
    pub domain: bool,
    pub consistency: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingData {
    /// No training; randomly initialized encoders stand in for generic
    /// pre-trained ones.
    Untrained,
    SourceOnly,
    TargetOnly,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: u8,
    pub description: String,
    pub modules: Modules,
    pub losses: LossSet,
    pub data: TrainingData,
    /// Fraction of target-train identities used.
    pub target_fraction: f64,
}

fn bits<const N: usize>(s: &str) -> [bool; N] {
    let v: Vec<bool> = s.chars().filter(|c| !c.is_whitespace()).map(|c| c == 'x').collect();
    v.try_into().expect("pattern width")
}

fn row(id: u8, description: &str, modules: &str, losses: &str, data: TrainingData, target_fraction: f64) -> AblationRow {
    let [e1, e2, id_source, id_target, attribute, domain] = bits::<6>(modules);
    let [source_identity, target_identity, source_triplet, target_triplet, source_attribute, target_attribute, domain_loss, consistency] =
        bits::<8>(losses);
    AblationRow {
        id,
        description: description.to_string(),
        modules: Modules {
            e1,
            e2,
            id_source,
            id_target,
            attribute,
            domain,
        },
        losses: LossSet {
            source_identity,
            target_identity,
            source_triplet,
            target_triplet,
            source_attribute,
            target_attribute,
            domain: domain_loss,
            consistency,
        },
        data,
        target_fraction,
    }
}

/// The thirteen rows. Module columns: E1 E2 C_id_s C_id_t C_att C_d. Loss
/// columns: L_id_s L_id_t L_tri_s L_tri_t L_att_s L_att_t L_d L_con.
pub fn ablation_rows() -> Vec<AblationRow> {
    use TrainingData::*;
    vec![
        row(1, "w/o source & target data", "xx....", "........", Untrained, 1.0),
        row(2, "w/o target data", "xxx.x.", "x.x.x...", SourceOnly, 1.0),
        row(3, "w/o source data", "xx.x..", ".x.x....", TargetOnly, 1.0),
        row(4, "w/ 50% target data", "xxxxxx", "xxxxxxxx", Both, 0.5),
        row(5, "w/ 80% target data", "xxxxxx", "xxxxxxxx", Both, 0.8),
        row(6, "w/o L_att & L_d", "xxxx..", "xxxx....", Both, 1.0),
        row(7, "w/o target L_att & L_con & L_d", "xxxxx.", "xxxxx...", Both, 1.0),
        row(8, "w/o L_att", "xxxx.x", "xxxx..x.", Both, 1.0),
        row(9, "w/o target L_att & L_con", "xxxx.x", "xxxxx.x.", Both, 1.0),
        row(10, "w/o L_con", "xxxxxx", "xxxxxxx.", Both, 1.0),
        row(11, "w/o target L_att", "xxxxxx", "xxxxx.xx", Both, 1.0),
        row(12, "w/o L_d", "xxxxx.", "xxxxxx.x", Both, 1.0),
        row(13, "full model", "xxxxxx", "xxxxxxxx", Both, 1.0),
    ]
}

pub fn ablation_row(id: u8) -> Result<AblationRow> {
    ablation_rows()
        .into_iter()
        .find(|r| r.id == id)
        .ok_or_else(|| Error::Usage(format!("ablation row {id} does not exist (valid: 1..=13)")))
}

impl AblationRow {
    pub fn step1_losses(&self) -> Step1Losses {
        Step1Losses {
            identity: self.losses.source_identity,
            triplet: self.losses.source_triplet,
            attribute: self.losses.source_attribute,
        }
    }

    /// Co-training terms. Source identity and triplet terms belong to
    /// pre-training and stay off here, as in the default configuration.
    pub fn step2_losses(&self) -> Step2Losses {
        Step2Losses {
            source_identity: false,
            source_triplet: false,
            target_identity: self.losses.target_identity,
            target_triplet: self.losses.target_triplet,
            source_attribute: self.losses.source_attribute,
            target_entropy: self.losses.target_attribute,
            consistency: self.losses.consistency,
            domain: self.losses.domain,
        }
    }

    /// `base` with this row's loss toggles.
    pub fn config(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            step1: self.step1_losses(),
            step2: self.step2_losses(),
            ..base.clone()
        }
    }
}

/// Where a result came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub corpus_seed: u64,
    pub corpus_checksum: String,
    pub code_version: String,
}

/// One (configuration, seed) training and evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    /// Sketch-to-photo CMC at ranks 1, 5, 10, 20.
    pub s2p: [f64; 4],
    pub p2s_rank1: f64,
    pub config_hash: String,
}

pub const REPORT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Loaded splits plus a cache of step-1 checkpoints shared by rows whose
/// pre-training is identical.
pub struct Experiment {
    pub source: Dataset,
    pub target: Dataset,
    pub test: Dataset,
    pub provenance: Provenance,
    step1_cache: BTreeMap<String, Checkpoint>,
}

/// The part of a configuration step 1 depends on.
fn step1_key(cfg: &TrainConfig, source: &Dataset) -> Result<String> {
    let d = TrainConfig::default();
    let mut c = cfg.clone();
    c.epochs_step2 = d.epochs_step2;
    c.step2_pairs = d.step2_pairs;
    c.step2_source = d.step2_source;
    c.step2 = d.step2;
    c.weights.lambda3 = d.weights.lambda3;
    c.entropy_form = d.entropy_form;
    c.checkpoint_every = 0;
    let names: Vec<&str> = source.attribute_info.iter().map(|a| a.name.as_str()).collect();
    Ok(format!("{}|{}", serde_json::to_string(&c)?, names.join(",")))
}

pub fn config_hash(cfg: &TrainConfig) -> Result<String> {
    Ok(crate::sha256_hex(serde_json::to_string(cfg)?.as_bytes()))
}

impl Experiment {
    /// Loads the training splits with the test split forbidden, then the
    /// test split for evaluation.
    pub fn load(reader: &CorpusReader) -> Result<Self> {
        let (source, target) = {
            let _guard = reader.audit().forbid(Split::TargetTest);
            (reader.load_split(Split::Source)?, reader.load_split(Split::TargetTrain)?)
        };
        let test = reader.load_split(Split::TargetTest)?;
        Ok(Experiment {
            source,
            target,
            test,
            provenance: Provenance {
                corpus_seed: reader.manifest().seed,
                corpus_checksum: reader.manifest().checksum()?,
                code_version: CODE_VERSION.to_string(),
            },
            step1_cache: BTreeMap::new(),
        })
    }

    pub fn from_splits(source: Dataset, target: Dataset, test: Dataset, provenance: Provenance) -> Self {
        Experiment {
            source,
            target,
            test,
            provenance,
            step1_cache: BTreeMap::new(),
        }
    }

    fn step1(&mut self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let key = step1_key(cfg, &self.source)?;
        if let Some(ck) = self.step1_cache.get(&key) {
            return Ok(ck.clone());
        }
        let ck = run_step1(cfg, &self.source, None)?.checkpoint;
        self.step1_cache.insert(key, ck.clone());
        Ok(ck)
    }

    /// A randomly initialized stand-in for pre-trained encoders.
    fn random_start(&self, cfg: &TrainConfig) -> Result<Checkpoint> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(RANDOM_INIT_STREAM);
        let mc = ModelConfig {
            encoder: cfg.encoder.clone(),
            n_source_ids: self.source.identity_set().len().max(1),
            n_target_ids: 0,
            n_attributes: 0,
        };
        let mut params = ModelParams::init_source(&mc, &mut rng)?;
        params.id_source = None;
        Ok(Checkpoint {
            params,
            rng,
            epoch: 0,
            meta: [("stage".to_string(), "random_init".to_string())].into(),
        })
    }

    /// The first `fraction` of a seeded shuffle of target-train identities.
    pub fn target_subset(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Usage(format!("target fraction {fraction} outside (0, 1]")));
        }
        if fraction == 1.0 {
            return Ok(self.target.clone());
        }
        let mut ids = self.target.identity_set();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FRACTION_STREAM);
        ids.shuffle(&mut rng);
        let keep = ((ids.len() as f64 * fraction).round() as usize).max(2);
        let keep: BTreeSet<u32> = ids.into_iter().take(keep).collect();
        Ok(self.target.restrict_identities(&keep))
    }

    /// Trains and evaluates `row` with `base` settings and `seed`.
    pub fn run_row(&mut self, row: &AblationRow, base: &TrainConfig, seed: u64) -> Result<RunResult> {
        let cfg = TrainConfig {
            seed,
            ..row.config(base)
        };
        let params = match row.data {
            TrainingData::Untrained => self.random_start(&cfg)?.params,
            TrainingData::SourceOnly => self.step1(&cfg)?.params,
            TrainingData::TargetOnly => {
                let start = self.random_start(&cfg)?;
                let target = self.target_subset(row.target_fraction, seed)?;
                run_step2(&cfg, &start, &self.source, &target, None)?.checkpoint.params
            }
            TrainingData::Both => {
                let s1 = self.step1(&cfg)?;
                let target = self.target_subset(row.target_fraction, seed)?;
                run_step2(&cfg, &s1, &self.source, &target, None)?.checkpoint.params
            }
        };
        self.evaluate(&params, format!("row{}", row.id), &cfg)
    }

    /// The full model under `cfg` (its seed included).
    pub fn run_full(&mut self, cfg: &TrainConfig, label: String) -> Result<RunResult> {
        let s1 = self.step1(cfg)?;
        let params = run_step2(cfg, &s1, &self.source, &self.target, None)?.checkpoint.params;
        self.evaluate(&params, label, cfg)
    }

    fn evaluate(&self, params: &ModelParams, label: String, cfg: &TrainConfig) -> Result<RunResult> {
        let b = evaluate_bidirectional(params, &self.test, REPORT_RANKS[3])?;
        let s2p = REPORT_RANKS.map(|k| b.sketch_to_photo.at(k).unwrap_or(1.0));
        log::info!("{label} seed {}: s2p rank-1 {:.3}", cfg.seed, s2p[0]);
        Ok(RunResult {
            label,
            seed: cfg.seed,
            s2p,
            p2s_rank1: b.photo_to_sketch.rank1(),
            config_hash: config_hash(cfg)?,
        })
    }
}

const RANDOM_INIT_STREAM: u64 = 7;
const FRACTION_STREAM: u64 = 8;

/// Per-seed results of one configuration with their mean and spread.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub label: String,
    pub runs: Vec<RunResult>,
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Summary {
    pub fn new(label: String, runs: Vec<RunResult>) -> Self {
        let mut mean = [0.0; 4];
        let mut std = [0.0; 4];
        for k in 0..4 {
            let xs: Vec<f64> = runs.iter().map(|r| r.s2p[k]).collect();
            (mean[k], std[k]) = mean_std(&xs);
        }
        Summary { label, runs, mean, std }
    }

    pub fn rank1(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.s2p[0]).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<(AblationRow, Summary)>,
    pub provenance: Provenance,
}

impl AblationTable {
    pub fn summary(&self, id: u8) -> Option<&Summary> {
        self.rows.iter().find(|(r, _)| r.id == id).map(|(_, s)| s)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "row\tdescription\tR1\tR5\tR10\tR20\tR1_std\tseeds")?;
        for (row, s) in &self.rows {
            writeln!(
                f,
                "{}\t{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{:.3}\t{}",
                row.id,
                row.description,
                s.mean[0],
                s.mean[1],
                s.mean[2],
                s.mean[3],
                s.std[0],
                s.runs.len()
            )?;
        }
        Ok(())
    }
}

/// One training and evaluation per (row, seed), rows in the given order.
pub fn run_ablation(exp: &mut Experiment, base: &TrainConfig, rows: &[u8], seeds: &[u64]) -> Result<AblationTable> {
    let rows: Vec<AblationRow> = rows.iter().map(|&id| ablation_row(id)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for row in rows {
        let runs = seeds
            .iter()
            .map(|&seed| exp.run_row(&row, base, seed))
            .collect::<Result<Vec<_>>>()?;
        let summary = Summary::new(format!("row{}", row.id), runs);
        out.push((row, summary));
    }
    Ok(AblationTable {
        rows: out,
        provenance: exp.provenance.clone(),
    })
}

/// Rank-1 per grid value for one trade-off weight, the others fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCurve {
    /// 1, 2 or 3.
    pub lambda: u8,
    pub values: Vec<f64>,
    pub points: Vec<Summary>,
}

pub fn with_lambda(base: &TrainConfig, lambda: u8, value: f64) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    match lambda {
        1 => cfg.weights.lambda1 = value,
        2 => cfg.weights.lambda2 = value,
        3 => cfg.weights.lambda3 = value,
        _ => return Err(Error::Usage(format!("no trade-off weight lambda{lambda}"))),
    }
    Ok(cfg)
}

/// Varies each of the three trade-off weights over `grid` with the other
/// two at their `base` values; one full-model run per (weight, value, seed).
pub fn sweep_tradeoffs(exp: &mut Experiment, base: &TrainConfig, grid: &[f64], seeds: &[u64]) -> Result<Vec<SweepCurve>> {
    if let Some(v) = grid.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
        return Err(Error::Usage(format!("trade-off grid value {v} must be positive")));
    }
    let mut curves = Vec::new();
    for lambda in 1..=3u8 {
        let mut points = Vec::new();
        for &value in grid {
            let runs = seeds
                .iter()
                .map(|&seed| {
                    let cfg = TrainConfig {
                        seed,
                        ..with_lambda(base, lambda, value)?
                    };
                    exp.run_full(&cfg, format!("lambda{lambda}={value}"))
                })
                .collect::<Result<Vec<_>>>()?;
            points.push(Summary::new(format!("lambda{lambda}={value}"), runs));
        }
        curves.push(SweepCurve {
            lambda,
            values: grid.to_vec(),
            points,
        });
    }
    Ok(curves)
}

const RESULTS_HEADER: &str =
    "label\tseed\tR1\tR5\tR10\tR20\tp2s_R1\tconfig_hash\tcorpus_seed\tcorpus_checksum\tcode_version\n";

/// Appends one line per run to a tab-separated results file, writing the
/// header when the file is new. Existing lines are never rewritten.
pub fn append_results(path: &Path, runs: &[RunResult], provenance: &Provenance) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(RESULTS_HEADER);
    }
    for r in runs {
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.seed,
            r.s2p[0],
            r.s2p[1],
            r.s2p[2],
            r.s2p[3],
            r.p2s_rank1,
            r.config_hash,
            provenance.corpus_seed,
            provenance.corpus_checksum,
            provenance.code_version
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// One-sided sign test: the probability of at least `wins` successes in
/// `n` fair coin flips.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let total = 2f64.powi(n as i32);
    (wins..=n).map(|k| binomial(n, k)).sum::<f64>() / total
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}
