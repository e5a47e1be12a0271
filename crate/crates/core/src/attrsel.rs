//! Attribute selection: which shared attributes survive the trip through
//! the target domain, and how rank-1 depends on the size of the attribute
//! set.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Checkpoint, HeadKind, ModelParams};
use crate::retrieval::{encode_all, evaluate_bidirectional, threshold_attributes};
use crate::synthdata::{AccessAudit, Dataset, Domain, Split};
use crate::training::{run_step1, run_step2, train_attribute_probe, TrainConfig, TrainOutput};

/// Thresholded (`>= 0.5`) attribute predictions for the photos of `data`,
/// one row per photo in row order.
pub fn predict_target_attributes(params: &ModelParams, data: &Dataset) -> Result<Array2<u8>> {
    let head = params
        .head(HeadKind::Attribute)
        .map_err(|_| Error::Usage("model has no trained attribute classifier".into()))?;
    let photos = data.rows_of(Domain::TargetPhoto);
    if photos.is_empty() {
        return Err(Error::Usage(format!("{} split has no target photos", data.split)));
    }
    let emb = encode_all(&params.e1, data.images.select(Axis(0), &photos).view())?;
    Ok(threshold_attributes(&head.predict(emb.view())?))
}

/// The photos of `data` labeled with `predicted` attribute vectors, ready
/// for probe training.
pub fn label_photos(data: &Dataset, predicted: &Array2<u8>, names: &[crate::synthdata::AttributeInfo]) -> Result<Dataset> {
    let photos = data.rows_of(Domain::TargetPhoto);
    if predicted.nrows() != photos.len() || predicted.ncols() != names.len() {
        return Err(Error::Usage(format!(
            "{}x{} predictions for {} photos and {} attributes",
            predicted.nrows(),
            predicted.ncols(),
            photos.len(),
            names.len()
        )));
    }
    let mut out = data.subset(&photos);
    out.attributes = Some(predicted.mapv(f64::from));
    out.attribute_info = names.to_vec();
    Ok(out)
}

/// Trains a fresh `E1'` and `C_att'` on labeled target photos alone. The
/// source split is forbidden on `audit` for the whole run, so any attempt
/// to load it fails.
pub fn retrain_probe(audit: &AccessAudit, photos: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutput> {
    let _guard = audit.forbid(Split::Source);
    if photos.split == Split::Source || photos.domains.iter().any(|&d| d != Domain::TargetPhoto) {
        return Err(Error::Usage("the attribute probe trains on target photos only".into()));
    }
    train_attribute_probe(cfg, photos, out_dir)
}

/// Source recognition accuracy of a probe, per attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub names: Vec<String>,
    pub accuracy: Vec<f64>,
    /// Attribute indices by descending accuracy; ties keep index order.
    pub ranking: Vec<usize>,
    /// Ranked attributes whose accuracy reaches `min_accuracy`.
    pub selected: Vec<usize>,
    pub min_accuracy: f64,
}

impl AttributeReport {
    pub fn new(names: Vec<String>, accuracy: Vec<f64>, min_accuracy: f64) -> Self {
        let mut ranking: Vec<usize> = (0..accuracy.len()).collect();
        ranking.sort_by(|&a, &b| accuracy[b].total_cmp(&accuracy[a]));
        let selected = ranking.iter().copied().filter(|&k| accuracy[k] >= min_accuracy).collect();
        AttributeReport {
            names,
            accuracy,
            ranking,
            selected,
            min_accuracy,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        crate::write_atomic(path, &bytes)
    }
}

/// Default `min_accuracy`: attributes must beat a coin flip by a margin.
pub const DEFAULT_MIN_ACCURACY: f64 = 0.6;

/// Compares the probe's thresholded predictions on every source sample
/// with the ground-truth labels.
pub fn score_attributes(probe: &ModelParams, source: &Dataset, min_accuracy: f64) -> Result<AttributeReport> {
    let truth = source
        .attributes
        .as_ref()
        .ok_or_else(|| Error::Usage(format!("{} split has no ground-truth attributes", source.split)))?;
    let head = probe.head(HeadKind::Attribute)?;
    if head.spec.output_dim != truth.ncols() {
        return Err(Error::Usage(format!(
            "probe predicts {} attributes, source has {}",
            head.spec.output_dim,
            truth.ncols()
        )));
    }
    let emb = encode_all(&probe.e1, source.images.view())?;
    let pred = threshold_attributes(&head.predict(emb.view())?);
    let n = source.len() as f64;
    let accuracy = (0..truth.ncols())
        .map(|k| {
            let hits = pred
                .column(k)
                .iter()
                .zip(truth.column(k))
                .filter(|(&p, &t)| f64::from(p) == t)
                .count();
            hits as f64 / n
        })
        .collect();
    let names = source.attribute_info.iter().map(|a| a.name.clone()).collect();
    Ok(AttributeReport::new(names, accuracy, min_accuracy))
}

/// Rank-1 of one full two-step run per repeat, for each subset size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPoint {
    pub k: usize,
    pub subsets: Vec<Vec<usize>>,
    pub rank1: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetStudy {
    pub points: Vec<SubsetPoint>,
}

impl SubsetStudy {
    pub fn point(&self, k: usize) -> Option<&SubsetPoint> {
        self.points.iter().find(|p| p.k == k)
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// The attribute subset used by repeat `repeat` at size `k`: a uniform
/// draw from the non-color attributes, seeded by `(seed, k, repeat)` only.
pub fn subset_for(n_candidates: usize, k: usize, repeat: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 32) | repeat as u64);
    let mut picked = sample(&mut rng, n_candidates, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Full two-step training with the attribute columns `subset` of the
/// source split, returning sketch-to-photo rank-1 on `test`.
pub fn train_with_attributes(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    test: &Dataset,
    subset: &[usize],
) -> Result<f64> {
    let src = source.select_attributes(subset)?;
    let s1 = run_step1(cfg, &src, None)?;
    let s2 = run_step2(cfg, &s1.checkpoint, &src, target, None)?;
    Ok(evaluate_bidirectional(&s2.checkpoint.params, test, 1)?.sketch_to_photo.rank1())
}

/// For each `k`, trains the full model `repeats` times with a random
/// `k`-subset of the non-color attributes. The training seed is `cfg.seed`
/// for every run, so repeats differ only in their subset and identical
/// subsets are trained once.
pub fn subset_study(
    k_range: &[usize],
    repeats: usize,
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    test: &Dataset,
) -> Result<SubsetStudy> {
    let candidates: Vec<usize> = (0..source.n_attributes())
        .filter(|&k| !source.attribute_info[k].is_color)
        .collect();
    if let Some(&k) = k_range.iter().find(|&&k| k == 0 || k > candidates.len()) {
        return Err(Error::Usage(format!(
            "subset size {k} outside 1..={} non-color attributes",
            candidates.len()
        )));
    }
    if repeats == 0 {
        return Err(Error::Usage("subset study needs at least one repeat".into()));
    }
    let mut cache: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut points = Vec::new();
    for &k in k_range {
        let mut subsets = Vec::new();
        let mut rank1 = Vec::new();
        for r in 0..repeats {
            let subset: Vec<usize> = subset_for(candidates.len(), k, r, cfg.seed)
                .into_iter()
                .map(|i| candidates[i])
                .collect();
            let score = match cache.get(&subset) {
                Some(&s) => s,
                None => {
                    let s = train_with_attributes(cfg, source, target, test, &subset)?;
                    log::info!("subset study k={k} repeat {r} {subset:?}: rank-1 {s:.3}");
                    cache.insert(subset.clone(), s);
                    s
                }
            };
            subsets.push(subset);
            rank1.push(score);
        }
        let (mean, std) = mean_std(&rank1);
        points.push(SubsetPoint {
            k,
            subsets,
            rank1,
            mean,
            std,
        });
    }
    Ok(SubsetStudy { points })
}

/// The whole selection procedure on an already trained model: label the
/// target photos, train the probe without touching the source split, then
/// score it on the source ground truth.
pub fn select_attributes(
    trained: &Checkpoint,
    audit: &AccessAudit,
    probe_photos: &Dataset,
    source: &Dataset,
    cfg: &TrainConfig,
    min_accuracy: f64,
    out_dir: Option<&Path>,
) -> Result<(AttributeReport, TrainOutput)> {
    let predicted = predict_target_attributes(&trained.params, probe_photos)?;
    let labeled = label_photos(probe_photos, &predicted, &source.attribute_info)?;
    let probe = retrain_probe(audit, &labeled, cfg, out_dir)?;
    let report = score_attributes(&probe.checkpoint.params, source, min_accuracy)?;
    Ok((report, probe))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranking_is_descending_and_stable() {
        let r = AttributeReport::new(vec!["a".into(), "b".into(), "c".into(), "d".into()], vec![0.7, 0.9, 0.7, 0.4], 0.6);
        assert_eq!(r.ranking, vec![1, 0, 2, 3]);
        assert_eq!(r.selected, vec![1, 0, 2]);
    }

    #[test]
    fn subsets_are_seeded_and_exhaustive_at_full_size() {
        assert_eq!(subset_for(8, 3, 4, 11), subset_for(8, 3, 4, 11));
        for r in 0..5 {
            assert_eq!(subset_for(8, 8, r, 0), (0..8).collect::<Vec<_>>());
            let s = subset_for(8, 1, r, 0);
            assert_eq!(s.len(), 1);
            assert!(s[0] < 8);
        }
        let distinct: std::collections::BTreeSet<_> = (0..10).map(|r| subset_for(8, 2, r, 3)).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn mean_std_of_constant_is_zero() {
        assert_eq!(mean_std(&[0.25; 4]), (0.25, 0.0));
    }
}
