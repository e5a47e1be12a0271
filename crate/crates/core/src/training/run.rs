use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{source_batches, Step2Sampler};
use super::objective::{step1_objective, step2_objective};
use super::optim::{adam_step, LrSchedule, OptimizerState};
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadKind, ModelConfig, ModelParams};
use crate::synthdata::{Dataset, Split};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub stage: String,
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub components: BTreeMap<String, f64>,
    /// Seconds since the stage started.
    pub wall_time: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
}

impl TrainOutput {
    /// Mean total loss per epoch.
    pub fn epoch_losses(&self) -> Vec<f64> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for r in &self.log {
            let e = sums.entry(r.epoch).or_default();
            e.0 += r.total;
            e.1 += 1;
        }
        sums.values().map(|(s, n)| s / *n as f64).collect()
    }
}

/// Distinct ChaCha streams keep the stages' random draws independent.
fn stage_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STEP1_STREAM: u64 = 1;
const STEP2_STREAM: u64 = 2;
const PROBE_STREAM: u64 = 3;

struct Recorder<'a> {
    stage: &'static str,
    dir: Option<&'a Path>,
    file: Option<File>,
    every: usize,
    start: Instant,
    log: Vec<LogRecord>,
}

impl<'a> Recorder<'a> {
    fn new(stage: &'static str, dir: Option<&'a Path>, every: usize) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join("train_log.jsonl");
                Some(
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&path)
                        .map_err(|e| Error::io(&path, e))?,
                )
            }
            None => None,
        };
        Ok(Recorder {
            stage,
            dir,
            file,
            every,
            start: Instant::now(),
            log: Vec::new(),
        })
    }

    fn record<T: Serialize>(&mut self, step: u64, epoch: usize, lr: f64, total: f64, report: &T) -> Result<()> {
        let components = match serde_json::to_value(report)? {
            serde_json::Value::Object(m) => m
                .into_iter()
                .filter(|(k, _)| k != "total")
                .filter_map(|(k, v)| v.as_f64().map(|f| (k, f)))
                .collect(),
            _ => BTreeMap::new(),
        };
        let rec = LogRecord {
            stage: self.stage.to_string(),
            step,
            epoch,
            lr,
            total,
            components,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        if let Some(f) = self.file.as_mut() {
            let mut line = serde_json::to_vec(&rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(self.dir.expect("file implies dir"), e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    fn checkpoint_path(&self, epoch: Option<usize>) -> Option<PathBuf> {
        self.dir.map(|d| match epoch {
            Some(e) => d.join(format!("{}_epoch{:03}.ckpt", self.stage, e)),
            None => d.join(format!("{}.ckpt", self.stage)),
        })
    }

    fn end_of_epoch(&self, ckpt: impl FnOnce() -> Checkpoint, epoch: usize) -> Result<()> {
        if self.every > 0 && (epoch + 1) % self.every == 0 {
            if let Some(p) = self.checkpoint_path(Some(epoch + 1)) {
                ckpt().save(&p)?;
            }
        }
        Ok(())
    }

    fn finish(self, checkpoint: Checkpoint) -> Result<TrainOutput> {
        if let Some(p) = self.checkpoint_path(None) {
            checkpoint.save(&p)?;
        }
        Ok(TrainOutput {
            checkpoint,
            log: self.log,
        })
    }
}

fn refuse_test_split(data: &Dataset, op: &str) -> Result<()> {
    if data.split == Split::TargetTest {
        return Err(Error::Audit {
            split: data.split.to_string(),
            path: PathBuf::from(format!("<{op} input>")),
        });
    }
    Ok(())
}

fn meta(stage: &str, cfg: &TrainConfig) -> BTreeMap<String, String> {
    [
        ("stage".to_string(), stage.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]
    .into()
}

/// Trains `E1` with whichever of the identity, triplet and attribute heads
/// the step-1 toggles enable, on every row of `data`.
fn train_source_stage(
    cfg: &TrainConfig,
    data: &Dataset,
    stage: &'static str,
    rng: &mut ChaCha8Rng,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let on = cfg.step1;
    if on.attribute && (data.attributes.is_none() || data.n_attributes() == 0) {
        return Err(Error::Config(format!("{} split has no attribute labels to train on", data.split)));
    }
    let n_ids = data.identity_set().len();
    if (on.identity || on.triplet) && n_ids < 2 {
        return Err(Error::Config(format!("{} split has fewer than 2 identities", data.split)));
    }
    let mc = ModelConfig {
        encoder: cfg.encoder.clone(),
        n_source_ids: n_ids.max(1),
        n_target_ids: 0,
        n_attributes: if on.attribute { data.n_attributes() } else { 0 },
    };
    let mut params = ModelParams::init_source(&mc, rng)?;
    if !on.identity && !on.triplet {
        params.id_source = None;
    }
    let classes = data.class_indices();
    let per_id = if on.identity || on.triplet {
        cfg.batch_source / cfg.ids_per_batch
    } else {
        0
    };
    let group = if per_id == 0 { cfg.batch_source } else { cfg.ids_per_batch };
    let schedule = cfg.step1_schedule();
    let mut opt = OptimizerState::new();
    let mut rec = Recorder::new(stage, out_dir, cfg.checkpoint_every)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs_step1 {
        let lr = schedule.at(epoch);
        for rows in source_batches(&classes, group, per_id, rng) {
            let (report, grads) = step1_objective(&params, cfg, data, &classes, &rows)?;
            adam_step(&mut params, &grads, &mut opt, lr)?;
            step += 1;
            rec.record(step, epoch, lr, report.total, &report)?;
        }
        rec.end_of_epoch(
            || Checkpoint {
                params: params.clone(),
                rng: rng.clone(),
                epoch: epoch as u64 + 1,
                meta: meta(stage, cfg),
            },
            epoch,
        )?;
    }
    let checkpoint = Checkpoint {
        params,
        rng: rng.clone(),
        epoch: cfg.epochs_step1 as u64,
        meta: meta(stage, cfg),
    };
    rec.finish(checkpoint)
}

/// Source pre-training of `E1`, `C_id_s` and `C_att`.
pub fn run_step1(cfg: &TrainConfig, source: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    cfg.validate()?;
    refuse_test_split(source, "run_step1")?;
    if source.split != Split::Source {
        return Err(Error::Usage(format!("run_step1 expects the source split, got {}", source.split)));
    }
    train_source_stage(cfg, source, "step1", &mut stage_rng(cfg.seed, STEP1_STREAM), out_dir)
}

/// Trains a fresh `E1'` and `C_att'` on photos labeled only with attribute
/// vectors (no identity loss, no adaptation). Uses the step-1 epochs and
/// learning rate.
pub fn train_attribute_probe(cfg: &TrainConfig, photos: &Dataset, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let probe_cfg = TrainConfig {
        step1: super::Step1Losses {
            identity: false,
            triplet: false,
            attribute: true,
        },
        ..cfg.clone()
    };
    probe_cfg.validate()?;
    train_source_stage(&probe_cfg, photos, "probe", &mut stage_rng(cfg.seed, PROBE_STREAM), out_dir)
}

fn layer_diff(a: &crate::model::EncoderArch, b: &crate::model::EncoderArch) -> String {
    let mut diffs = Vec::new();
    if a.input != b.input {
        diffs.push(format!("input {:?} vs {:?}", a.input, b.input));
    }
    if a.bias != b.bias {
        diffs.push(format!("bias {} vs {}", a.bias, b.bias));
    }
    for i in 0..a.layers.len().max(b.layers.len()) {
        match (a.layers.get(i), b.layers.get(i)) {
            (Some(x), Some(y)) if x == y => {}
            (x, y) => diffs.push(format!(
                "layer {i}: {} vs {}",
                x.map_or("none".to_string(), |l| l.to_string()),
                y.map_or("none".to_string(), |l| l.to_string())
            )),
        }
    }
    diffs.join("; ")
}

/// Builds the co-training model from a step-1 checkpoint: `E2` is a copy
/// of `E1`, `C_att` and `C_id_s` are kept, and `C_id_t` and `C_d` are
/// freshly initialized.
pub fn transfer_weights(
    step1: &Checkpoint,
    cfg: &TrainConfig,
    n_target_ids: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ModelParams> {
    if step1.params.e1.arch != cfg.encoder {
        return Err(Error::Config(format!(
            "checkpoint encoder differs from the configured one: {}",
            layer_diff(&step1.params.e1.arch, &cfg.encoder)
        )));
    }
    if cfg.step2.uses_attributes() && step1.params.attribute.is_none() {
        return Err(Error::Config(
            "co-training attribute losses need a checkpoint with an attribute classifier".into(),
        ));
    }
    if cfg.step2.source_identity && step1.params.id_source.is_none() {
        return Err(Error::Config("source identity loss needs a checkpoint with C_id_s".into()));
    }
    let mut params = step1.params.clone();
    params.e2 = Some(params.e1.clone());
    params.id_target = Some(params.new_head(HeadKind::IdentityTarget, n_target_ids, rng)?);
    params.domain = Some(params.new_head(HeadKind::Domain, 0, rng)?);
    Ok(params)
}

/// Tri-domain co-training starting from a step-1 checkpoint.
pub fn run_step2(
    cfg: &TrainConfig,
    step1: &Checkpoint,
    source: &Dataset,
    target: &Dataset,
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    refuse_test_split(source, "run_step2")?;
    refuse_test_split(target, "run_step2")?;
    if source.split != Split::Source || target.split != Split::TargetTrain {
        return Err(Error::Usage(format!(
            "run_step2 expects source and target_train splits, got {} and {}",
            source.split, target.split
        )));
    }
    let on = cfg.step2;
    if on.source_attribute {
        let width = step1.params.attribute.as_ref().map(|h| h.spec.output_dim);
        if source.attributes.is_none() || width != Some(source.n_attributes()) {
            return Err(Error::Config(format!(
                "attribute classifier width {width:?} does not match {} source attributes",
                source.n_attributes()
            )));
        }
    }
    let mut rng = stage_rng(cfg.seed, STEP2_STREAM);
    let target_ids = target.identity_set();
    let mut params = transfer_weights(step1, cfg, target_ids.len(), &mut rng)?;
    if on.source_identity {
        let width = params.id_source.as_ref().map(|h| h.spec.output_dim);
        if width != Some(source.identity_set().len()) {
            return Err(Error::Config("source identity classifier does not match the source split".into()));
        }
    }
    let source_classes = source.class_indices();
    let target_classes = target.class_indices();
    let n_source = if on.uses_source() { cfg.step2_source } else { 0 };
    let mut sampler = Step2Sampler::new(target, source.len(), cfg.step2_pairs, n_source)?;
    let schedule: LrSchedule = cfg.step2_schedule();
    let mut opt = OptimizerState::new();
    let mut rec = Recorder::new("step2", out_dir, cfg.checkpoint_every)?;
    let mut step = 0;
    for epoch in 0..cfg.epochs_step2 {
        let lr = schedule.at(epoch);
        for batch in sampler.epoch(&mut rng) {
            let (report, grads) =
                step2_objective(&params, cfg, source, &source_classes, target, &target_classes, &batch)?;
            adam_step(&mut params, &grads, &mut opt, lr)?;
            step += 1;
            rec.record(step, epoch, lr, report.total, &report)?;
        }
        rec.end_of_epoch(
            || Checkpoint {
                params: params.clone(),
                rng: rng.clone(),
                epoch: epoch as u64 + 1,
                meta: meta("step2", cfg),
            },
            epoch,
        )?;
    }
    let checkpoint = Checkpoint {
        params,
        rng,
        epoch: cfg.epochs_step2 as u64,
        meta: meta("step2", cfg),
    };
    rec.finish(checkpoint)
}
