use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, Linear};
use crate::error::{Error, Result};

/// Hidden width of the attribute and domain classifiers.
pub const HEAD_HIDDEN_WIDTH: usize = 512;
/// Domains distinguished by the domain classifier: source photo, target
/// photo, target sketch.
pub const NUM_DOMAINS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    IdentitySource,
    IdentityTarget,
    Attribute,
    Domain,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::IdentitySource => "identity_source",
            HeadKind::IdentityTarget => "identity_target",
            HeadKind::Attribute => "attribute",
            HeadKind::Domain => "domain",
        })
    }
}

impl HeadKind {
    /// Attribute heads emit independent sigmoids, all others a softmax.
    pub fn activation(self) -> Activation {
        match self {
            HeadKind::Attribute => Activation::Sigmoid,
            _ => Activation::Softmax,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softmax,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: HeadKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl HeadSpec {
    /// Identity heads are a single dense layer; attribute and domain heads
    /// are three dense layers with two hidden layers of width 512.
    pub fn new(kind: HeadKind, input_dim: usize, output_dim: usize) -> Self {
        let hidden = match kind {
            HeadKind::IdentitySource | HeadKind::IdentityTarget => vec![],
            HeadKind::Attribute | HeadKind::Domain => vec![HEAD_HIDDEN_WIDTH, HEAD_HIDDEN_WIDTH],
        };
        HeadSpec {
            kind,
            input_dim,
            hidden,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected_layers = match self.kind {
            HeadKind::IdentitySource | HeadKind::IdentityTarget => 1,
            HeadKind::Attribute | HeadKind::Domain => 3,
        };
        if self.hidden.len() + 1 != expected_layers {
            return Err(Error::Config(format!(
                "{} head must have {expected_layers} dense layers, got {}",
                self.kind,
                self.hidden.len() + 1
            )));
        }
        if self.kind == HeadKind::Domain && self.output_dim != NUM_DOMAINS {
            return Err(Error::Config(format!(
                "domain head must have {NUM_DOMAINS} outputs, got {}",
                self.output_dim
            )));
        }
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config(format!("{} head has a zero-width layer", self.kind)));
        }
        Ok(())
    }

    fn param_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub spec: HeadSpec,
    pub layers: Vec<Linear>,
}

/// Activations retained for [`Head::backward`].
#[derive(Clone, Debug)]
pub struct HeadTrace {
    /// Input of every dense layer (post-ReLU for hidden layers).
    inputs: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl Head {
    pub fn init<R: Rng + ?Sized>(spec: HeadSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .param_shapes()
            .into_iter()
            .map(|(o, i)| Linear::init(o, i, true, rng))
            .collect();
        Ok(Head { spec, layers })
    }

    pub fn kind(&self) -> HeadKind {
        self.spec.kind
    }

    fn run(&self, embeddings: ArrayView2<f64>, keep: bool) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        if embeddings.ncols() != self.spec.input_dim {
            return Err(Error::Usage(format!(
                "{} head expects input width {}, got {}",
                self.spec.kind,
                self.spec.input_dim,
                embeddings.ncols()
            )));
        }
        let mut inputs = Vec::new();
        let mut x = embeddings.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(x.view());
            if keep {
                inputs.push(x);
            }
            x = if i == last { y } else { relu(&y) };
        }
        if let Some((row, _)) = x
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Numerical(format!(
                "{} head: non-finite logits at batch index {row}",
                self.spec.kind
            )));
        }
        Ok((x, inputs))
    }

    /// Probabilities for each row: softmax for identity/domain heads, sigmoid
    /// per attribute for the attribute head.
    pub fn predict(&self, embeddings: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (logits, _) = self.run(embeddings, false)?;
        Ok(activate(self.spec.kind.activation(), &logits))
    }

    pub fn forward(&self, embeddings: ArrayView2<f64>) -> Result<HeadTrace> {
        let (logits, inputs) = self.run(embeddings, true)?;
        let probs = activate(self.spec.kind.activation(), &logits);
        Ok(HeadTrace { inputs, logits, probs })
    }

    /// Back-propagates `dL/dprobs` through the output activation and the
    /// dense stack. Accumulates into `grads`; returns `dL/d(embedding)`.
    pub fn backward(&self, trace: &HeadTrace, grad_probs: &Array2<f64>, grads: &mut [Linear]) -> Result<Array2<f64>> {
        let grad_logits = activation_backward(self.spec.kind.activation(), &trace.probs, grad_probs)?;
        self.backward_logits(trace, &grad_logits, grads)
    }

    /// Like [`backward`](Self::backward) but starting from `dL/dlogits`.
    pub fn backward_logits(
        &self,
        trace: &HeadTrace,
        grad_logits: &Array2<f64>,
        grads: &mut [Linear],
    ) -> Result<Array2<f64>> {
        if grad_logits.dim() != trace.logits.dim() || grads.len() != self.layers.len() {
            return Err(Error::Usage(format!(
                "{} head backward: gradient shape {:?} does not match logits {:?}",
                self.spec.kind,
                grad_logits.dim(),
                trace.logits.dim()
            )));
        }
        let mut g = grad_logits.clone();
        for i in (0..self.layers.len()).rev() {
            let x = &trace.inputs[i];
            let dx = self.layers[i]
                .backward(x.view(), g.view(), &mut grads[i], true)
                .expect("input gradient requested");
            g = if i > 0 { relu_backward(x, &dx) } else { dx };
        }
        Ok(g)
    }

    pub fn zero_grads(&self) -> Vec<Linear> {
        self.layers.iter().map(Linear::zeros_like).collect()
    }
}

pub fn activate(act: Activation, logits: &Array2<f64>) -> Array2<f64> {
    match act {
        Activation::Softmax => softmax(logits),
        Activation::Sigmoid => logits.mapv(sigmoid),
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Chains `dL/dprobs` through the activation Jacobian to `dL/dlogits`.
pub fn activation_backward(act: Activation, probs: &Array2<f64>, grad_probs: &Array2<f64>) -> Result<Array2<f64>> {
    if probs.dim() != grad_probs.dim() {
        return Err(Error::Usage(format!(
            "activation backward: gradient shape {:?} does not match {:?}",
            grad_probs.dim(),
            probs.dim()
        )));
    }
    Ok(match act {
        Activation::Sigmoid => {
            let mut g = grad_probs.clone();
            g.zip_mut_with(probs, |g, &p| *g *= p * (1.0 - p));
            g
        }
        Activation::Softmax => {
            let mut g = grad_probs.clone();
            for (mut grow, prow) in g.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
                let dot = grow.dot(&prow);
                grow.zip_mut_with(&prow, |g, &p| *g = p * (*g - dot));
            }
            g
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_of_zero_logits_is_uniform() {
        let p = softmax(&Array2::zeros((1, 4)));
        assert_eq!(p, array![[0.25, 0.25, 0.25, 0.25]]);
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&array![[2f64.ln(), 0.0, 0.0]]);
        for (got, want) in p.iter().zip([0.5, 0.25, 0.25]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let p = softmax(&array![[1000.0, 0.0, -1000.0]]);
        assert!((p.sum() - 1.0).abs() < 1e-12);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn head_structure_is_enforced() {
        let mut spec = HeadSpec::new(HeadKind::Domain, 8, 3);
        assert!(spec.validate().is_ok());
        assert_eq!(spec.hidden, vec![512, 512]);
        spec.output_dim = 4;
        assert!(spec.validate().is_err());
        let mut id = HeadSpec::new(HeadKind::IdentityTarget, 8, 10);
        assert!(id.hidden.is_empty());
        id.hidden.push(16);
        assert!(id.validate().is_err());
    }

    #[test]
    fn head_outputs_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.7);
        let dom = Head::init(HeadSpec::new(HeadKind::Domain, 6, 3), &mut rng).unwrap();
        for row in dom.predict(x.view()).unwrap().outer_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        let att = Head::init(HeadSpec::new(HeadKind::Attribute, 6, 4), &mut rng).unwrap();
        assert!(att.predict(x.view()).unwrap().iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn non_finite_logits_report_batch_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = Head::init(HeadSpec::new(HeadKind::IdentitySource, 2, 3), &mut rng).unwrap();
        let x = array![[0.0, 1.0], [f64::NAN, 0.0]];
        let err = head.predict(x.view()).unwrap_err();
        assert!(matches!(err, Error::Numerical(m) if m.contains("batch index 1")));
    }
}
