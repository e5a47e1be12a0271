//! Gradient reversal: the identity on the way forward, negation on the way
//! back. The adversarial trade-off weight is applied by the caller, never
//! here.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GrlMode {
    Forward,
    Backward,
}

/// Forward mode returns `input` unchanged. Backward mode returns the
/// negated `upstream` gradient, which must match `input` in shape.
pub fn grl_apply(input: ArrayView2<f64>, mode: GrlMode, upstream: Option<ArrayView2<f64>>) -> Result<Array2<f64>> {
    match mode {
        GrlMode::Forward => Ok(input.to_owned()),
        GrlMode::Backward => {
            let g = upstream.ok_or_else(|| Error::Usage("gradient reversal backward needs an upstream gradient".into()))?;
            if g.dim() != input.dim() {
                return Err(Error::Usage(format!(
                    "gradient reversal: upstream shape {:?} does not match {:?}",
                    g.dim(),
                    input.dim()
                )));
            }
            Ok(reverse(g))
        }
    }
}

pub fn reverse(grad: ArrayView2<f64>) -> Array2<f64> {
    grad.mapv(|g| -g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_is_identity() {
        let v = array![[1.5, -2.0]];
        assert_eq!(grl_apply(v.view(), GrlMode::Forward, None).unwrap(), v);
    }

    #[test]
    fn backward_negates() {
        let v = array![[1.5, -2.0]];
        let g = array![[0.3, -0.7]];
        let out = grl_apply(v.view(), GrlMode::Backward, Some(g.view())).unwrap();
        assert_eq!(out, array![[-0.3, 0.7]]);
        let z = Array2::<f64>::zeros((1, 2));
        assert!(grl_apply(v.view(), GrlMode::Backward, Some(z.view()))
            .unwrap()
            .iter()
            .all(|&x| x == 0.0));
    }

    #[test]
    fn backward_checks_shape() {
        let v = array![[1.0, 2.0]];
        let g = array![[1.0, 2.0, 3.0]];
        assert!(grl_apply(v.view(), GrlMode::Backward, Some(g.view())).is_err());
        assert!(grl_apply(v.view(), GrlMode::Backward, None).is_err());
    }
}
