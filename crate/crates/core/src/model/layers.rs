//! Parameterized affine maps and the im2col machinery behind convolutions.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// An affine map `y = x Wᵀ + b`. Convolutions reuse it with `W` laid out as
/// `(out_channels, in_channels * k * k)` over im2col patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn zeros(out_features: usize, fan_in: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((out_features, fan_in)),
            bias: bias.then(|| Array1::zeros(out_features)),
        }
    }

    /// Uniform fan-in scaled initialization, `U(-√(6/fan_in), √(6/fan_in))`,
    /// biases zero.
    pub fn init<R: Rng + ?Sized>(out_features: usize, fan_in: usize, bias: bool, rng: &mut R) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_features, fan_in), |_| rng.gen_range(-bound..bound));
        Linear {
            weight,
            bias: bias.then(|| Array1::zeros(out_features)),
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: self.bias.as_ref().map(|b| Array1::zeros(b.raw_dim())),
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    /// Accumulates `dL/dW`, `dL/db` into `grad` and returns `dL/dx` when
    /// requested.
    pub fn backward(
        &self,
        x: ArrayView2<f64>,
        grad_out: ArrayView2<f64>,
        grad: &mut Linear,
        need_input_grad: bool,
    ) -> Option<Array2<f64>> {
        grad.weight += &grad_out.t().dot(&x);
        if let (Some(gb), true) = (grad.bias.as_mut(), self.bias.is_some()) {
            *gb += &grad_out.sum_axis(Axis(0));
        }
        need_input_grad.then(|| grad_out.dot(&self.weight))
    }

    /// Iterates over every scalar parameter, weight first then bias.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.iter().chain(self.bias.iter().flat_map(|b| b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight
            .iter_mut()
            .chain(self.bias.iter_mut().flat_map(|b| b.iter_mut()))
    }
}

/// Geometry of one convolution applied to a `(channels, height, width)` map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfolds `x` of shape `(batch, C*H*W)` into `(batch*Ho*Wo, C*k*k)`.
    pub fn im2col(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let batch = x.nrows();
        let plane = self.height * self.width;
        let mut cols = Array2::zeros((batch * ho * wo, self.patch_len()));
        for b in 0..batch {
            let img = x.row(b);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut row = cols.row_mut((b * ho + oy) * wo + ox);
                    let mut col = 0;
                    for c in 0..self.in_channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width {
                                    row[col] = img[c * plane + iy as usize * self.width + ix as usize];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): folds patch gradients back onto
    /// the input map, summing overlaps.
    pub fn col2im(&self, cols: ArrayView2<f64>, batch: usize) -> Array2<f64> {
        let (ho, wo, k) = (self.out_height(), self.out_width(), self.kernel);
        let plane = self.height * self.width;
        let mut x = Array2::zeros((batch, self.in_channels * plane));
        for b in 0..batch {
            let mut img = x.row_mut(b);
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = cols.row((b * ho + oy) * wo + ox);
                    let mut col = 0;
                    for c in 0..self.in_channels {
                        for ky in 0..k {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            for kx in 0..k {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.height && (ix as usize) < self.width {
                                    img[c * plane + iy as usize * self.width + ix as usize] += row[col];
                                }
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Converts the `(batch*Ho*Wo, out_channels)` product into channel-major
    /// rows `(batch, out_channels*Ho*Wo)`.
    pub fn to_channel_major(&self, y: ArrayView2<f64>, batch: usize) -> Array2<f64> {
        let positions = self.positions();
        let channels = y.ncols();
        let mut out = Array2::zeros((batch, channels * positions));
        for b in 0..batch {
            let block = y.slice(s![b * positions..(b + 1) * positions, ..]);
            let mut row = out.row_mut(b);
            for p in 0..positions {
                for c in 0..channels {
                    row[c * positions + p] = block[[p, c]];
                }
            }
        }
        out
    }

    /// Inverse of [`to_channel_major`](Self::to_channel_major).
    pub fn from_channel_major(&self, g: ArrayView2<f64>, channels: usize) -> Array2<f64> {
        let positions = self.positions();
        let batch = g.nrows();
        let mut out = Array2::zeros((batch * positions, channels));
        for b in 0..batch {
            let row = g.row(b);
            for p in 0..positions {
                for c in 0..channels {
                    out[[b * positions + p, c]] = row[c * positions + p];
                }
            }
        }
        out
    }
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient of ReLU given its output.
pub fn relu_backward(output: &Array2<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut g = grad_out.clone();
    g.zip_mut_with(output, |g, &y| {
        if y <= 0.0 {
            *g = 0.0;
        }
    });
    g
}
