//! Two-step optimization: source pre-training, weight transfer, and
//! tri-domain co-training with the adversarial domain classifier.

mod batch;
mod objective;
mod optim;
mod run;

pub use batch::{compose_step2_batch, source_batches, Step2Batch, Step2Sampler, TargetPairs};
pub use objective::{step1_objective, step2_objective, Step1Report, Step2Report};
pub use optim::{adam_step, LrSchedule, OptimizerState};
pub use run::{run_step1, run_step2, train_attribute_probe, transfer_weights, LogRecord, TrainOutput};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{EntropyForm, LossWeights, TripletFeatures, TripletMining};
use crate::model::EncoderArch;

/// Loss terms of the source pre-training stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Step1Losses {
    pub identity: bool,
    pub triplet: bool,
    pub attribute: bool,
}

impl Default for Step1Losses {
    fn default() -> Self {
        Step1Losses {
            identity: true,
            triplet: true,
            attribute: true,
        }
    }
}

/// Loss terms of the co-training stage. Source identity and triplet terms
/// are off by default because the co-training objective lists only the
/// target identity terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Step2Losses {
    pub source_identity: bool,
    pub source_triplet: bool,
    pub target_identity: bool,
    pub target_triplet: bool,
    pub source_attribute: bool,
    pub target_entropy: bool,
    pub consistency: bool,
    pub domain: bool,
}

impl Default for Step2Losses {
    fn default() -> Self {
        Step2Losses {
            source_identity: false,
            source_triplet: false,
            target_identity: true,
            target_triplet: true,
            source_attribute: true,
            target_entropy: true,
            consistency: true,
            domain: true,
        }
    }
}

impl Step2Losses {
    pub fn uses_attributes(&self) -> bool {
        self.source_attribute || self.target_entropy || self.consistency
    }

    pub fn uses_source(&self) -> bool {
        self.source_identity || self.source_triplet || self.source_attribute || self.domain
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs_step1: usize,
    pub epochs_step2: usize,
    /// Step-1 batch size, drawn as `ids_per_batch` identities with
    /// `batch_source / ids_per_batch` images each.
    pub batch_source: usize,
    pub ids_per_batch: usize,
    /// Aligned target photo/sketch pairs per co-training batch.
    pub step2_pairs: usize,
    /// Source samples per co-training batch.
    pub step2_source: usize,
    pub base_lr: f64,
    /// Co-training learning rate; `base_lr` when unset.
    pub step2_lr: Option<f64>,
    pub warmup_epochs: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub step1: Step1Losses,
    pub step2: Step2Losses,
    pub triplet_mining: TripletMining,
    pub triplet_features: TripletFeatures,
    pub entropy_form: EntropyForm,
    /// Write a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub encoder: EncoderArch,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs_step1: 60,
            epochs_step2: 60,
            batch_source: 64,
            ids_per_batch: 16,
            step2_pairs: 32,
            step2_source: 32,
            base_lr: 1e-4,
            step2_lr: None,
            warmup_epochs: 10,
            seed: 0,
            weights: LossWeights::default(),
            step1: Step1Losses::default(),
            step2: Step2Losses::default(),
            triplet_mining: TripletMining::default(),
            triplet_features: TripletFeatures::default(),
            entropy_form: EntropyForm::default(),
            checkpoint_every: 0,
            encoder: EncoderArch::default(),
        }
    }
}

impl TrainConfig {
    /// Settings tuned for the synthetic corpus, where the small encoder
    /// trains from scratch: a faster step 1, longer co-training at a lower
    /// rate, and triplets on normalized embeddings.
    pub fn desk_scale() -> Self {
        TrainConfig {
            epochs_step1: 60,
            epochs_step2: 100,
            base_lr: 3e-3,
            step2_lr: Some(3e-4),
            warmup_epochs: 5,
            triplet_features: TripletFeatures::L2,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.epochs_step1 == 0 || self.epochs_step2 == 0 {
            return fail("epochs_step1 and epochs_step2 must be positive".into());
        }
        if self.ids_per_batch < 2 {
            return fail(format!("ids_per_batch = {} (triplet mining needs at least 2)", self.ids_per_batch));
        }
        if self.batch_source < 2 * self.ids_per_batch || self.batch_source % self.ids_per_batch != 0 {
            return fail(format!(
                "batch_source = {} must be a multiple of ids_per_batch = {} with at least 2 images per identity",
                self.batch_source, self.ids_per_batch
            ));
        }
        if self.step2_pairs < 2 {
            return fail(format!("step2_pairs = {} (need at least 2 identities)", self.step2_pairs));
        }
        if self.step2.uses_source() && self.step2_source == 0 {
            return fail("step2_source must be positive when a source or domain loss is active".into());
        }
        if (self.step2.source_triplet || self.step2.source_identity) && self.step2_source < 2 {
            return fail("step2_source must be at least 2 for source identity or triplet terms".into());
        }
        for (name, lr) in [("base_lr", Some(self.base_lr)), ("step2_lr", self.step2_lr)] {
            if let Some(lr) = lr.filter(|lr| !(lr.is_finite() && *lr >= 0.0)) {
                return fail(format!("{name} = {lr} must be finite and non-negative"));
            }
        }
        self.weights.validate()?;
        self.encoder.validate()
    }

    pub fn step1_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs_step1,
        }
    }

    pub fn step2_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.step2_lr.unwrap_or(self.base_lr),
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.epochs_step2,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_settings() {
        let c = TrainConfig::default();
        assert_eq!((c.epochs_step1, c.epochs_step2), (60, 60));
        assert_eq!(c.batch_source, 64);
        assert_eq!(c.step2_pairs * 2 + c.step2_source, 96);
        assert_eq!(c.base_lr, 1e-4);
        assert!(!c.step2.source_identity && !c.step2.source_triplet);
        c.validate().unwrap();
    }

    #[test]
    fn rejects_single_identity_batches() {
        let c = TrainConfig {
            ids_per_batch: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
