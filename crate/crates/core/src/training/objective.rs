use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::batch::Step2Batch;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::{
    attribute_bce_source, attribute_consistency, attribute_entropy, domain_reverse_ce, identity_ce_indices,
    triplet_hetero, triplet_source, unit_rows, unit_rows_backward, TripletFeatures,
};
use crate::model::grl::reverse;
use crate::model::{BlockId, Gradients, HeadKind, ModelParams};
use crate::synthdata::Dataset;

/// Unweighted loss components of one source-stage batch plus the weighted
/// total that was differentiated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Step1Report {
    pub identity: f64,
    pub triplet: f64,
    pub attribute: f64,
    pub total: f64,
}

/// Unweighted loss components of one co-training batch. `domain` is the
/// reverse cross-entropy `L_d` (non-positive); `total` is the weighted
/// objective the encoders descend.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Step2Report {
    pub source_identity: f64,
    pub source_triplet: f64,
    pub target_identity: f64,
    pub target_triplet: f64,
    pub source_attribute: f64,
    pub target_entropy: f64,
    pub consistency: f64,
    pub domain: f64,
    pub total: f64,
}

fn attribute_targets(data: &Dataset, rows: &[usize]) -> Result<Array2<f64>> {
    data.attributes
        .as_ref()
        .map(|a| a.select(Axis(0), rows))
        .ok_or_else(|| Error::Config(format!("{} split has no attribute labels", data.split)))
}

/// Embeddings as a triplet term sees them, plus the map from their
/// gradient back to the raw embeddings.
struct TripletInput {
    x: Array2<f64>,
    norms: Option<Array1<f64>>,
}

impl TripletInput {
    fn new(v: ArrayView2<f64>, features: TripletFeatures) -> Self {
        match features {
            TripletFeatures::Raw => TripletInput {
                x: v.to_owned(),
                norms: None,
            },
            TripletFeatures::L2 => {
                let (x, n) = unit_rows(v);
                TripletInput { x, norms: Some(n) }
            }
        }
    }

    fn back(&self, grad: &Array2<f64>) -> Array2<f64> {
        match &self.norms {
            None => grad.clone(),
            Some(n) => unit_rows_backward(self.x.view(), n.view(), grad.view()),
        }
    }
}

/// Loss and parameter gradients of the source stage on `rows` of `data`:
/// identity CE, source triplet and attribute BCE through `E1`.
pub fn step1_objective(
    params: &ModelParams,
    cfg: &TrainConfig,
    data: &Dataset,
    classes: &[usize],
    rows: &[usize],
) -> Result<(Step1Report, Gradients)> {
    let w = cfg.weights;
    let on = cfg.step1;
    let x = data.images.select(Axis(0), rows);
    let (v, trace) = params.e1.forward(x.view())?;
    let labels: Vec<usize> = rows.iter().map(|&r| classes[r]).collect();
    let mut dv = Array2::zeros(v.raw_dim());
    let mut grads = Gradients::new();
    let mut report = Step1Report::default();

    if on.identity {
        let head = params.head(HeadKind::IdentitySource)?;
        let tr = head.forward(v.view())?;
        let l = identity_ce_indices(tr.probs.view(), &labels)?;
        dv += &head.backward(&tr, &l.grad, grads.slot(BlockId::IdSource, &head.layers))?;
        report.identity = l.value;
    }
    if on.triplet {
        let ti = TripletInput::new(v.view(), cfg.triplet_features);
        let t = triplet_source(ti.x.view(), &labels, w.alpha, cfg.triplet_mining)?;
        dv.scaled_add(w.lambda1, &ti.back(&t.grad_anchors));
        report.triplet = t.value;
    }
    if on.attribute {
        let head = params.head(HeadKind::Attribute)?;
        let tr = head.forward(v.view())?;
        let l = attribute_bce_source(tr.probs.view(), attribute_targets(data, rows)?.view())?;
        dv += &head.backward(&tr, &(l.grad * w.lambda2), grads.slot(BlockId::Attribute, &head.layers))?;
        report.attribute = l.value;
    }
    report.total = report.identity + w.lambda1 * report.triplet + w.lambda2 * report.attribute;
    params.e1.backward(&trace, &dv, grads.slot(BlockId::E1, &params.e1.layers))?;
    Ok((report, grads))
}

/// Loss and gradients of one co-training batch in a single backward pass.
///
/// Photos (source and target) go through `E1`, sketches through `E2`. The
/// domain classifier descends the domain cross-entropy `-L_d` at unit
/// weight, so it keeps learning when `lambda3 = 0`; its input gradient is
/// reversed and scaled by `lambda3` on the way into the encoders, which
/// therefore descend `lambda3 * L_d`.
pub fn step2_objective(
    params: &ModelParams,
    cfg: &TrainConfig,
    source: &Dataset,
    source_classes: &[usize],
    target: &Dataset,
    target_classes: &[usize],
    batch: &Step2Batch,
) -> Result<(Step2Report, Gradients)> {
    let w = cfg.weights;
    let on = cfg.step2;
    let e2 = params.encoder(BlockId::E2)?;
    let (ns, np, nk) = (batch.source_rows.len(), batch.photo_rows.len(), batch.sketch_rows.len());
    if np != nk || batch.paired.len() != np {
        return Err(Error::Usage("co-training batch photo and sketch rows are not aligned".into()));
    }
    let x1 = concatenate![
        Axis(0),
        source.images.select(Axis(0), &batch.source_rows),
        target.images.select(Axis(0), &batch.photo_rows)
    ];
    let x2 = target.images.select(Axis(0), &batch.sketch_rows);
    let (v1, tr1) = params.e1.forward(x1.view())?;
    let (v2, tr2) = e2.forward(x2.view())?;
    let v = concatenate![Axis(0), v1, v2];
    let (src, pho, ske) = (0..ns, ns..ns + np, ns + np..ns + np + nk);
    let ys: Vec<usize> = batch.source_rows.iter().map(|&r| source_classes[r]).collect();
    let yp: Vec<usize> = batch.photo_rows.iter().map(|&r| target_classes[r]).collect();
    let yk: Vec<usize> = batch.sketch_rows.iter().map(|&r| target_classes[r]).collect();

    let mut dv = Array2::<f64>::zeros(v.raw_dim());
    let mut grads = Gradients::new();
    let mut r = Step2Report::default();

    if on.source_identity {
        let head = params.head(HeadKind::IdentitySource)?;
        let tr = head.forward(v.slice(s![src.clone(), ..]))?;
        let l = identity_ce_indices(tr.probs.view(), &ys)?;
        let g = head.backward(&tr, &l.grad, grads.slot(BlockId::IdSource, &head.layers))?;
        dv.slice_mut(s![src.clone(), ..]).scaled_add(1.0, &g);
        r.source_identity = l.value;
    }
    if on.source_triplet {
        let ti = TripletInput::new(v.slice(s![src.clone(), ..]), cfg.triplet_features);
        let t = triplet_source(ti.x.view(), &ys, w.alpha, cfg.triplet_mining)?;
        dv.slice_mut(s![src.clone(), ..]).scaled_add(w.lambda1, &ti.back(&t.grad_anchors));
        r.source_triplet = t.value;
    }
    if on.target_identity {
        let head = params.head(HeadKind::IdentityTarget)?;
        let tr = head.forward(v.slice(s![ns.., ..]))?;
        let labels: Vec<usize> = yp.iter().chain(&yk).copied().collect();
        let l = identity_ce_indices(tr.probs.view(), &labels)?;
        let g = head.backward(&tr, &l.grad, grads.slot(BlockId::IdTarget, &head.layers))?;
        dv.slice_mut(s![ns.., ..]).scaled_add(1.0, &g);
        r.target_identity = l.value;
    }
    if on.target_triplet {
        let tk = TripletInput::new(v.slice(s![ske.clone(), ..]), cfg.triplet_features);
        let tp = TripletInput::new(v.slice(s![pho.clone(), ..]), cfg.triplet_features);
        let t = triplet_hetero(tk.x.view(), &yk, tp.x.view(), &yp, w.alpha, cfg.triplet_mining)?;
        dv.slice_mut(s![ske.clone(), ..]).scaled_add(w.lambda1, &tk.back(&t.grad_anchors));
        dv.slice_mut(s![pho.clone(), ..]).scaled_add(w.lambda1, &tp.back(&t.grad_candidates));
        r.target_triplet = t.value;
    }
    if on.uses_attributes() {
        let head = params.head(HeadKind::Attribute)?;
        let tr = head.forward(v.view())?;
        let mut gp = Array2::zeros(tr.probs.raw_dim());
        if on.source_attribute {
            let l = attribute_bce_source(
                tr.probs.slice(s![src.clone(), ..]),
                attribute_targets(source, &batch.source_rows)?.view(),
            )?;
            gp.slice_mut(s![src.clone(), ..]).assign(&l.grad);
            r.source_attribute = l.value;
        }
        if on.target_entropy {
            for range in [pho.clone(), ske.clone()] {
                let l = attribute_entropy(tr.probs.slice(s![range.clone(), ..]), cfg.entropy_form)?;
                gp.slice_mut(s![range, ..]).scaled_add(1.0, &l.grad);
                r.target_entropy += l.value;
            }
        }
        if on.consistency {
            let (value, ga, gb) = attribute_consistency(
                tr.probs.slice(s![pho.clone(), ..]),
                tr.probs.slice(s![ske.clone(), ..]),
                &batch.paired,
            )?;
            gp.slice_mut(s![pho.clone(), ..]).scaled_add(1.0, &ga);
            gp.slice_mut(s![ske.clone(), ..]).scaled_add(1.0, &gb);
            r.consistency = value;
        }
        dv += &head.backward(&tr, &(gp * w.lambda2), grads.slot(BlockId::Attribute, &head.layers))?;
    }
    if on.domain {
        let head = params.head(HeadKind::Domain)?;
        let tr = head.forward(v.view())?;
        let groups: Vec<_> = [(src.clone(), 0), (pho.clone(), 1), (ske.clone(), 2)]
            .into_iter()
            .filter(|(range, _)| !range.is_empty())
            .collect();
        let views: Vec<_> = groups
            .iter()
            .map(|(range, d)| (tr.probs.slice(s![range.clone(), ..]), *d))
            .collect();
        let (value, group_grads) = domain_reverse_ce(&views)?;
        // the classifier descends -L_d
        let mut g_ce = Array2::zeros(tr.probs.raw_dim());
        for ((range, _), g) in groups.iter().zip(&group_grads) {
            g_ce.slice_mut(s![range.clone(), ..]).scaled_add(-1.0, g);
        }
        let d_emb = head.backward(&tr, &g_ce, grads.slot(BlockId::Domain, &head.layers))?;
        dv.scaled_add(w.lambda3, &reverse(d_emb.view()));
        r.domain = value;
    }
    r.total = r.source_identity
        + r.target_identity
        + w.lambda1 * (r.source_triplet + r.target_triplet)
        + w.lambda2 * (r.source_attribute + r.target_entropy + r.consistency)
        + w.lambda3 * r.domain;

    let dv1 = dv.slice(s![..ns + np, ..]).to_owned();
    let dv2 = dv.slice(s![ns + np.., ..]).to_owned();
    params.e1.backward(&tr1, &dv1, grads.slot(BlockId::E1, &params.e1.layers))?;
    e2.backward(&tr2, &dv2, grads.slot(BlockId::E2, &e2.layers))?;
    Ok((r, grads))
}
