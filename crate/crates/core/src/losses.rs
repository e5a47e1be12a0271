//! Closed-form loss terms with their analytic gradients.
//!
//! Every function takes head probabilities (or embeddings for the triplet
//! losses) and returns the batch-averaged value together with the gradient
//! with respect to those inputs. Every log argument is clamped to at least
//! `1e-12`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PROB_CLAMP: f64 = 1e-12;
const SIMPLEX_TOL: f64 = 1e-6;

fn clamp_p(p: f64) -> f64 {
    p.max(PROB_CLAMP)
}

/// Trade-off weights of the composite objectives and the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.1,
            lambda3: 0.1,
            alpha: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// A loss value with its gradient w.r.t. one input matrix.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Array2<f64>,
}

fn check_finite(name: &str, x: ArrayView2<f64>) -> Result<()> {
    match x.outer_iter().position(|r| r.iter().any(|v| !v.is_finite())) {
        Some(row) => Err(Error::Numerical(format!("{name}: non-finite input at batch index {row}"))),
        None => Ok(()),
    }
}

fn check_unit_interval(name: &str, p: ArrayView2<f64>) -> Result<()> {
    check_finite(name, p)?;
    match p.outer_iter().position(|r| r.iter().any(|v| !(0.0..=1.0).contains(v))) {
        Some(row) => Err(Error::Numerical(format!("{name}: probability outside [0, 1] at batch index {row}"))),
        None => Ok(()),
    }
}

fn check_simplex(name: &str, p: ArrayView2<f64>) -> Result<()> {
    check_unit_interval(name, p)?;
    match p.outer_iter().position(|r| (r.sum() - 1.0).abs() > SIMPLEX_TOL) {
        Some(row) => Err(Error::Numerical(format!("{name}: row {row} is off the probability simplex"))),
        None => Ok(()),
    }
}

/// Identity cross-entropy `-Σ y log ψ̂`, averaged over the batch.
pub fn identity_ce(probs: ArrayView2<f64>, one_hot: ArrayView2<f64>) -> Result<LossGrad> {
    if probs.dim() != one_hot.dim() {
        return Err(Error::Usage(format!(
            "identity_ce: probabilities {:?} and labels {:?} differ in shape",
            probs.dim(),
            one_hot.dim()
        )));
    }
    check_simplex("identity_ce", probs)?;
    let n = probs.nrows();
    let mut grad = Array2::zeros(probs.raw_dim());
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for ((i, k), &y) in one_hot.indexed_iter() {
        if y != 0.0 {
            let p = clamp_p(probs[[i, k]]);
            value -= y * p.ln();
            grad[[i, k]] = -y / p * inv;
        }
    }
    Ok(LossGrad { value: value * inv, grad })
}

/// [`identity_ce`] with class indices instead of one-hot rows.
pub fn identity_ce_indices(probs: ArrayView2<f64>, labels: &[usize]) -> Result<LossGrad> {
    let one_hot = one_hot(labels, probs.ncols())?;
    if one_hot.nrows() != probs.nrows() {
        return Err(Error::Usage(format!(
            "identity_ce: {} labels for {} rows",
            labels.len(),
            probs.nrows()
        )));
    }
    identity_ce(probs, one_hot.view())
}

pub fn one_hot(labels: &[usize], width: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((labels.len(), width));
    for (i, &l) in labels.iter().enumerate() {
        if l >= width {
            return Err(Error::Usage(format!("label {l} out of range for {width} classes")));
        }
        m[[i, l]] = 1.0;
    }
    Ok(m)
}

/// Triplet selection strategy within a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletMining {
    /// Every valid triplet; the loss averages the ones with a positive hinge.
    #[default]
    BatchAll,
    /// Hardest positive and hardest negative per anchor, averaged over anchors.
    BatchHard,
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub value: f64,
    pub grad_anchors: Array2<f64>,
    pub grad_candidates: Array2<f64>,
    /// Number of label-valid triplets in the batch.
    pub n_valid: usize,
    /// Number of triplets with a positive hinge that entered the average.
    pub n_active: usize,
    /// No valid triplet exists at all (no positive or no negative).
    pub degenerate: bool,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `[‖a−p‖² − ‖a−n‖² + α]₊` for single vectors.
pub fn triplet_hinge(anchor: &[f64], positive: &[f64], negative: &[f64], alpha: f64) -> f64 {
    let d = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    (d(anchor, positive) - d(anchor, negative) + alpha).max(0.0)
}

/// Mines triplets with anchors from `anchors` and positives/negatives from
/// `candidates`. With `same_set`, both are the same matrix and an anchor is
/// never its own positive.
fn triplet_core(
    anchors: ArrayView2<f64>,
    anchor_labels: &[usize],
    candidates: ArrayView2<f64>,
    candidate_labels: &[usize],
    alpha: f64,
    mining: TripletMining,
    same_set: bool,
) -> Result<TripletOutput> {
    if anchors.nrows() != anchor_labels.len() || candidates.nrows() != candidate_labels.len() {
        return Err(Error::Usage("triplet: label count does not match embedding rows".into()));
    }
    if anchors.ncols() != candidates.ncols() {
        return Err(Error::Usage("triplet: anchor and candidate widths differ".into()));
    }
    check_finite("triplet anchors", anchors)?;
    check_finite("triplet candidates", candidates)?;
    let (na, nc) = (anchors.nrows(), candidates.nrows());
    let dist = Array2::from_shape_fn((na, nc), |(i, j)| sq_dist(anchors.row(i), candidates.row(j)));
    let is_pos = |i: usize, j: usize| anchor_labels[i] == candidate_labels[j] && !(same_set && i == j);
    let is_neg = |i: usize, j: usize| anchor_labels[i] != candidate_labels[j];

    // Each active triplet adds +d(i,p) - d(i,n); collect those as pair weights.
    let mut pair_w = Array2::<f64>::zeros((na, nc));
    let mut value = 0.0;
    let mut n_valid = 0usize;
    let mut n_active = 0usize;
    let mut denom = 0usize;
    match mining {
        TripletMining::BatchAll => {
            for i in 0..na {
                for p in (0..nc).filter(|&p| is_pos(i, p)) {
                    for n in (0..nc).filter(|&n| is_neg(i, n)) {
                        n_valid += 1;
                        let h = dist[[i, p]] - dist[[i, n]] + alpha;
                        if h > 0.0 {
                            n_active += 1;
                            value += h;
                            pair_w[[i, p]] += 1.0;
                            pair_w[[i, n]] -= 1.0;
                        }
                    }
                }
            }
            denom = n_active;
        }
        TripletMining::BatchHard => {
            for i in 0..na {
                let hardest = |keep: &dyn Fn(usize) -> bool, farthest: bool| {
                    (0..nc).filter(|&j| keep(j)).fold(None, |best: Option<usize>, j| match best {
                        Some(b) if (farthest && dist[[i, j]] <= dist[[i, b]]) || (!farthest && dist[[i, j]] >= dist[[i, b]]) => {
                            Some(b)
                        }
                        _ => Some(j),
                    })
                };
                let (Some(p), Some(n)) = (hardest(&|j| is_pos(i, j), true), hardest(&|j| is_neg(i, j), false)) else {
                    continue;
                };
                n_valid += 1;
                denom += 1;
                let h = dist[[i, p]] - dist[[i, n]] + alpha;
                if h > 0.0 {
                    n_active += 1;
                    value += h;
                    pair_w[[i, p]] += 1.0;
                    pair_w[[i, n]] -= 1.0;
                }
            }
        }
    }

    let mut grad_anchors = Array2::zeros(anchors.raw_dim());
    let mut grad_candidates = Array2::zeros(candidates.raw_dim());
    if denom > 0 && n_active > 0 {
        let scale = 2.0 / denom as f64;
        for ((i, j), &w) in pair_w.indexed_iter() {
            if w != 0.0 {
                let diff = &anchors.row(i) - &candidates.row(j);
                let c = w * scale;
                grad_anchors.row_mut(i).scaled_add(c, &diff);
                grad_candidates.row_mut(j).scaled_add(-c, &diff);
            }
        }
        value /= denom as f64;
    } else {
        value = 0.0;
    }
    Ok(TripletOutput {
        value,
        grad_anchors,
        grad_candidates,
        n_valid,
        n_active,
        degenerate: n_valid == 0,
    })
}

/// Post-processing of embeddings before they enter a triplet term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletFeatures {
    /// Raw pooled encoder outputs.
    #[default]
    Raw,
    /// Rows scaled to unit length, `v / sqrt(‖v‖² + 1e-12)`.
    L2,
}

const UNIT_EPS: f64 = 1e-12;

/// Unit-length rows and the smoothed norms they were divided by.
pub fn unit_rows(v: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = v.map_axis(Axis(1), |r| (r.dot(&r) + UNIT_EPS).sqrt());
    let mut out = v.to_owned();
    for (mut row, &n) in out.outer_iter_mut().zip(&norms) {
        row /= n;
    }
    (out, norms)
}

/// Backward of [`unit_rows`]: `(g − û (û·g)) / n` per row.
pub fn unit_rows_backward(unit: ArrayView2<f64>, norms: ArrayView1<f64>, grad: ArrayView2<f64>) -> Array2<f64> {
    let mut out = grad.to_owned();
    for ((mut g, u), &n) in out.outer_iter_mut().zip(unit.outer_iter()).zip(norms) {
        let proj = u.dot(&g);
        g.scaled_add(-proj, &u);
        g /= n;
    }
    out
}

/// Conventional triplet loss over one labeled embedding set. The returned
/// `grad_anchors` already includes the candidate-side contributions;
/// `grad_candidates` is left zero.
pub fn triplet_source(
    embeddings: ArrayView2<f64>,
    labels: &[usize],
    alpha: f64,
    mining: TripletMining,
) -> Result<TripletOutput> {
    let mut out = triplet_core(embeddings, labels, embeddings, labels, alpha, mining, true)?;
    out.grad_anchors += &out.grad_candidates;
    out.grad_candidates.fill(0.0);
    Ok(out)
}

/// Heterogeneous triplet loss: sketch anchors against photo positives and
/// negatives (positive shares the anchor's identity, negative does not).
pub fn triplet_hetero(
    sketches: ArrayView2<f64>,
    sketch_labels: &[usize],
    photos: ArrayView2<f64>,
    photo_labels: &[usize],
    alpha: f64,
    mining: TripletMining,
) -> Result<TripletOutput> {
    triplet_core(sketches, sketch_labels, photos, photo_labels, alpha, mining, false)
}

/// Multi-label binary cross-entropy summed over attributes, averaged over
/// the batch.
pub fn attribute_bce_source(probs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<LossGrad> {
    if probs.dim() != targets.dim() {
        return Err(Error::Usage(format!(
            "attribute_bce: probabilities {:?} and targets {:?} differ in shape",
            probs.dim(),
            targets.dim()
        )));
    }
    check_unit_interval("attribute_bce", probs)?;
    if targets.iter().any(|&z| z != 0.0 && z != 1.0) {
        return Err(Error::Usage("attribute_bce: targets must be 0 or 1".into()));
    }
    let n = probs.nrows();
    let mut grad = Array2::zeros(probs.raw_dim());
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for ((idx, &p), &z) in probs.indexed_iter().zip(targets.iter()) {
        let (p, q) = (clamp_p(p), clamp_p(1.0 - p));
        value -= z * p.ln() + (1.0 - z) * q.ln();
        grad[idx] = (-z / p + (1.0 - z) / q) * inv;
    }
    Ok(LossGrad { value: value * inv, grad })
}

/// Which entropy the unlabeled-target attribute term minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyForm {
    /// `-Σ φ log φ`.
    #[default]
    Literal,
    /// Full binary entropy `-Σ φ log φ + (1-φ) log(1-φ)`.
    Bernoulli,
}

fn neg_p_log_p(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.ln()
    }
}

/// Entropy of one domain's attribute predictions, summed over attributes and
/// averaged over rows; an empty batch contributes 0.
pub fn attribute_entropy(probs: ArrayView2<f64>, form: EntropyForm) -> Result<LossGrad> {
    check_unit_interval("attribute_entropy", probs)?;
    let n = probs.nrows();
    let mut grad = Array2::zeros(probs.raw_dim());
    if n == 0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (idx, &p) in probs.indexed_iter() {
        let (pc, qc) = (clamp_p(p), clamp_p(1.0 - p));
        match form {
            EntropyForm::Literal => {
                value += neg_p_log_p(p);
                grad[idx] = -(pc.ln() + 1.0) * inv;
            }
            EntropyForm::Bernoulli => {
                value += neg_p_log_p(p) + neg_p_log_p(1.0 - p);
                grad[idx] = (qc.ln() - pc.ln()) * inv;
            }
        }
    }
    Ok(LossGrad { value: value * inv, grad })
}

/// Entropy minimization over target photo and sketch predictions.
pub fn attribute_entropy_target(
    photos: ArrayView2<f64>,
    sketches: ArrayView2<f64>,
    form: EntropyForm,
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    let a = attribute_entropy(photos, form)?;
    let b = attribute_entropy(sketches, form)?;
    Ok((a.value + b.value, a.grad, b.grad))
}

/// `paired · ‖φ̂_photo − φ̂_sketch‖₂` per aligned row, averaged over rows.
/// The subgradient at equal predictions is 0.
pub fn attribute_consistency(
    photos: ArrayView2<f64>,
    sketches: ArrayView2<f64>,
    paired: &[bool],
) -> Result<(f64, Array2<f64>, Array2<f64>)> {
    if photos.dim() != sketches.dim() || paired.len() != photos.nrows() {
        return Err(Error::Usage(format!(
            "attribute_consistency: shapes {:?} / {:?} with {} pairing flags",
            photos.dim(),
            sketches.dim(),
            paired.len()
        )));
    }
    let n = photos.nrows();
    let mut ga = Array2::zeros(photos.raw_dim());
    let mut gb = Array2::zeros(sketches.raw_dim());
    if n == 0 {
        return Ok((0.0, ga, gb));
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    for (i, &is_pair) in paired.iter().enumerate() {
        if !is_pair {
            continue;
        }
        let diff = &photos.row(i) - &sketches.row(i);
        let norm = diff.dot(&diff).sqrt();
        value += norm;
        if norm > 0.0 {
            ga.row_mut(i).scaled_add(inv / norm, &diff);
            gb.row_mut(i).scaled_add(-inv / norm, &diff);
        }
    }
    Ok((value * inv, ga, gb))
}

/// Unweighted sum of the source BCE, target entropy and consistency terms.
pub fn attribute_total(bce_source: f64, entropy_target: f64, consistency: f64) -> f64 {
    bce_source + entropy_target + consistency
}

/// Reverse categorical cross-entropy `Σ d log ρ̂`, summed over domain groups
/// and averaged within each group. Non-positive; zero at perfect domain
/// classification. Returns the gradient w.r.t. each group's probabilities.
pub fn domain_reverse_ce(groups: &[(ArrayView2<f64>, usize)]) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(groups.len());
    for &(probs, domain) in groups {
        if domain >= probs.ncols() {
            return Err(Error::Usage(format!(
                "domain label {domain} out of range for {} domains",
                probs.ncols()
            )));
        }
        check_simplex("domain_reverse_ce", probs)?;
        let mut g = Array2::zeros(probs.raw_dim());
        let n = probs.nrows();
        if n > 0 {
            let inv = 1.0 / n as f64;
            for (i, row) in probs.axis_iter(Axis(0)).enumerate() {
                let p = clamp_p(row[domain]);
                value += p.ln() * inv;
                g[[i, domain]] = inv / p;
            }
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Components of the source-stage objective.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Step1Components {
    pub identity: f64,
    pub triplet: f64,
    pub attribute: f64,
}

/// Components of the co-training objective; `attribute` is the combined
/// source, entropy and consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Step2Components {
    pub identity: f64,
    pub triplet: f64,
    pub attribute: f64,
    pub domain: f64,
}

pub fn step1_loss(c: &Step1Components, w: &LossWeights) -> f64 {
    c.identity + w.lambda1 * c.triplet + w.lambda2 * c.attribute
}

pub fn step2_loss(c: &Step2Components, w: &LossWeights) -> f64 {
    c.identity + w.lambda1 * c.triplet + w.lambda2 * c.attribute + w.lambda3 * c.domain
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn identity_ce_examples() {
        let y = array![[1.0, 0.0, 0.0, 0.0]];
        assert_eq!(identity_ce(array![[1.0, 0.0, 0.0, 0.0]].view(), y.view()).unwrap().value, 0.0);
        let u = identity_ce(array![[0.25, 0.25, 0.25, 0.25]].view(), y.view()).unwrap();
        assert!((u.value - 4f64.ln()).abs() < 1e-12);
        let both = identity_ce(
            array![[1.0, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]].view(),
            array![[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]].view(),
        )
        .unwrap();
        assert!((both.value - 4f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn identity_ce_rejects_width_mismatch() {
        let err = identity_ce(array![[0.5, 0.5]].view(), array![[1.0, 0.0, 0.0]].view()).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert!(identity_ce_indices(array![[0.5, 0.5]].view(), &[2]).is_err());
    }

    #[test]
    fn triplet_examples() {
        let t = |a: [f64; 2], p: [f64; 2], n: [f64; 2], alpha| {
            let emb = array![[a[0], a[1]], [p[0], p[1]], [n[0], n[1]]];
            let single = triplet_hinge(&a, &p, &n, alpha);
            let out = triplet_hetero(
                emb.slice(ndarray::s![0..1, ..]),
                &[0],
                emb.slice(ndarray::s![1..3, ..]),
                &[0, 1],
                alpha,
                TripletMining::BatchAll,
            )
            .unwrap();
            assert!((out.value - single).abs() < 1e-15);
            single
        };
        assert_eq!(t([0.0, 0.0], [0.0, 0.0], [1.0, 0.0], 0.3), 0.0);
        assert!((t([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], 0.3) - 0.3).abs() < 1e-15);
        assert_eq!(t([0.0, 0.0], [1.0, 0.0], [1.0, 0.0], 0.0), 0.0);
        assert_eq!(t([0.0, 0.0], [0.0, 1.0], [2.0, 0.0], 0.3), 0.0);
        assert!((t([0.0, 0.0], [2.0, 0.0], [0.0, 1.0], 0.3) - 3.3).abs() < 1e-12);
    }

    #[test]
    fn triplet_without_negatives_is_degenerate() {
        let emb = array![[0.0, 0.0], [1.0, 1.0]];
        let out = triplet_source(emb.view(), &[3, 3], 0.3, TripletMining::BatchAll).unwrap();
        assert!(out.degenerate);
        assert_eq!(out.value, 0.0);
        assert!(out.grad_anchors.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn batch_hard_picks_extremes() {
        // anchor 0 has positives at distance 1 and 4, negatives at 9 and 2.
        let anchor = array![[0.0]];
        let cands = array![[1.0], [2.0], [3.0], [1.5]];
        let out = triplet_hetero(anchor.view(), &[0], cands.view(), &[0, 0, 1, 1], 0.3, TripletMining::BatchHard).unwrap();
        assert!((out.value - (4.0 - 2.25 + 0.3)).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let v = |p: f64, z: f64| attribute_bce_source(array![[p]].view(), array![[z]].view()).unwrap().value;
        assert!(
            attribute_bce_source(array![[1.0, 0.0]].view(), array![[1.0, 0.0]].view()).unwrap().value < 1e-11
        );
        assert!((v(0.5, 1.0) - LN2).abs() < 1e-12);
        assert!((v(0.5, 0.0) - LN2).abs() < 1e-12);
        assert!(matches!(
            attribute_bce_source(array![[1.2]].view(), array![[1.0]].view()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn entropy_examples() {
        let empty = Array2::<f64>::zeros((0, 1));
        let (v, _, _) = attribute_entropy_target(array![[1.0]].view(), array![[1.0]].view(), EntropyForm::Literal).unwrap();
        assert_eq!(v, 0.0);
        let (v, _, _) = attribute_entropy_target(array![[0.5]].view(), empty.view(), EntropyForm::Literal).unwrap();
        assert!((v - 0.5 * LN2).abs() < 1e-12);
        let e = (-1f64).exp();
        let single = attribute_entropy(array![[e]].view(), EntropyForm::Literal).unwrap();
        assert!((single.value - e).abs() < 1e-12);
        assert!(single.grad[[0, 0]].abs() < 1e-12);
        let zero_one = attribute_entropy(array![[0.0, 1.0]].view(), EntropyForm::Bernoulli).unwrap();
        assert_eq!(zero_one.value, 0.0);
    }

    #[test]
    fn consistency_examples() {
        let (v, _, _) = attribute_consistency(array![[0.3, 0.9]].view(), array![[0.3, 0.9]].view(), &[true]).unwrap();
        assert_eq!(v, 0.0);
        let (v, ga, _) = attribute_consistency(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), &[false]).unwrap();
        assert_eq!(v, 0.0);
        assert!(ga.iter().all(|&g| g == 0.0));
        let (v, _, _) = attribute_consistency(array![[1.0, 0.0]].view(), array![[0.0, 1.0]].view(), &[true]).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn attribute_total_examples() {
        assert_eq!(attribute_total(0.0, 0.0, 0.0), 0.0);
        assert!((attribute_total(0.6931, 0.3466, 1.4142) - 2.4539).abs() < 1e-12);
        assert_eq!(attribute_total(0.1, 0.2, 0.3), attribute_total(0.3, 0.1, 0.2));
    }

    #[test]
    fn domain_examples() {
        let correct = array![[1.0, 0.0, 0.0]];
        let third = 1.0 / 3.0;
        let uniform = array![[third, third, third]];
        let (v, _) = domain_reverse_ce(&[(correct.view(), 0)]).unwrap();
        assert_eq!(v, 0.0);
        let (v, _) = domain_reverse_ce(&[(uniform.view(), 2)]).unwrap();
        assert!((v - third.ln()).abs() < 1e-12);
        let mixed = array![[1.0, 0.0, 0.0], [third, third, third]];
        let (v, _) = domain_reverse_ce(&[(mixed.view(), 0)]).unwrap();
        assert!((v - third.ln() / 2.0).abs() < 1e-12);
        let off = array![[0.5, 0.2, 0.2]];
        assert!(matches!(domain_reverse_ce(&[(off.view(), 0)]), Err(Error::Numerical(_))));
    }

    #[test]
    fn step_losses() {
        let w = LossWeights::default();
        assert_eq!(step1_loss(&Step1Components::default(), &w), 0.0);
        let c1 = Step1Components {
            identity: 1.0,
            triplet: 1.0,
            attribute: 1.0,
        };
        assert!((step1_loss(&c1, &w) - 2.1).abs() < 1e-12);
        let c2 = Step2Components {
            identity: 1.0,
            triplet: 1.0,
            attribute: 1.0,
            domain: -1.0986,
        };
        assert!((step2_loss(&c2, &w) - 1.99014).abs() < 1e-12);
        let w0 = LossWeights { lambda3: 0.0, ..w };
        let c3 = Step2Components { domain: -50.0, ..c2 };
        assert_eq!(step2_loss(&c2, &w0), step2_loss(&c3, &w0));
    }

    #[test]
    fn unit_rows_backward_matches_finite_differences() {
        let v = array![[3.0, -4.0, 0.5], [0.2, 0.1, -0.7]];
        let w = array![[0.3, 1.0, -2.0], [1.5, -0.5, 0.25]];
        let f = |v: &Array2<f64>| (&unit_rows(v.view()).0 * &w).sum();
        let (u, n) = unit_rows(v.view());
        assert!((u.row(0).dot(&u.row(0)) - 1.0).abs() < 1e-12);
        let g = unit_rows_backward(u.view(), n.view(), w.view());
        let h = 1e-6;
        for ((i, j), &analytic) in g.indexed_iter() {
            let (mut a, mut b) = (v.clone(), v.clone());
            a[[i, j]] += h;
            b[[i, j]] -= h;
            assert!((analytic - (f(&a) - f(&b)) / (2.0 * h)).abs() < 1e-8);
        }
    }

    mod invariants {
        use super::*;
        use proptest::prelude::*;

        fn probs(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
            proptest::collection::vec(0.0f64..=1.0, rows * cols)
                .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
        }

        proptest! {
            #[test]
            fn entropies_are_bounded(p in (1usize..5, 1usize..6).prop_flat_map(|(r, c)| probs(r, c))) {
                let m = p.ncols() as f64;
                let lit = attribute_entropy(p.view(), EntropyForm::Literal).unwrap().value;
                let ber = attribute_entropy(p.view(), EntropyForm::Bernoulli).unwrap().value;
                prop_assert!(lit >= 0.0 && lit <= m / std::f64::consts::E + 1e-12);
                prop_assert!(ber >= lit - 1e-12 && ber <= m * LN2 + 1e-12);
            }

            #[test]
            fn bce_is_non_negative(
                p in probs(3, 4),
                z in proptest::collection::vec(any::<bool>(), 12),
            ) {
                let z = Array2::from_shape_fn((3, 4), |(i, j)| f64::from(z[i * 4 + j] as u8));
                prop_assert!(attribute_bce_source(p.view(), z.view()).unwrap().value >= 0.0);
            }

            #[test]
            fn consistency_is_symmetric_and_vanishes_on_copies(a in probs(4, 3), b in probs(4, 3)) {
                let paired = [true, true, false, true];
                let (ab, _, _) = attribute_consistency(a.view(), b.view(), &paired).unwrap();
                let (ba, _, _) = attribute_consistency(b.view(), a.view(), &paired).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12 && ab >= 0.0);
                prop_assert_eq!(attribute_consistency(a.view(), a.view(), &paired).unwrap().0, 0.0);
            }

            #[test]
            fn reverse_domain_ce_is_non_positive(x in probs(4, 3)) {
                let mut p = x.mapv(|v| v + 1e-3);
                for mut row in p.outer_iter_mut() {
                    let s = row.sum();
                    row.mapv_inplace(|v| v / s);
                }
                let groups: Vec<_> = (0..3).map(|d| (p.view(), d)).collect();
                let (value, grads) = domain_reverse_ce(&groups).unwrap();
                prop_assert!(value <= 0.0);
                prop_assert_eq!(grads.len(), 3);
            }

            #[test]
            fn unmargined_hinges_recover_the_distance_gap(
                v in proptest::collection::vec(-2.0f64..2.0, 9),
                alpha in 0.0f64..1.0,
            ) {
                let (a, p, n) = (&v[0..3], &v[3..6], &v[6..9]);
                let h = triplet_hinge(a, p, n, alpha);
                prop_assert!(h >= 0.0);
                let d = |u: &[f64], w: &[f64]| u.iter().zip(w).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
                let gap = triplet_hinge(a, p, n, 0.0) - triplet_hinge(a, n, p, 0.0);
                prop_assert!((gap - (d(a, p) - d(a, n))).abs() < 1e-12);
                prop_assert_eq!(triplet_hinge(a, a, a, alpha), alpha);
            }
        }
    }
}

