use std::fmt;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{relu, relu_backward, ConvGeometry, Linear};
use crate::error::{Error, Result};

/// One stage of an encoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    /// Fully connected; a spatial input is flattened channel-major first.
    Dense { out_features: usize },
    Relu,
    GlobalAvgPool,
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => write!(f, "conv(out={out_channels}, k={kernel}, s={stride}, p={padding})"),
            LayerSpec::Dense { out_features } => write!(f, "dense(out={out_features})"),
            LayerSpec::Relu => write!(f, "relu"),
            LayerSpec::GlobalAvgPool => write!(f, "global_avg_pool"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Architecture descriptor shared by the photo and sketch encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input: InputShape,
    pub layers: Vec<LayerSpec>,
    pub bias: bool,
}

impl Default for EncoderArch {
    fn default() -> Self {
        EncoderArch {
            input: InputShape {
                channels: 3,
                height: 32,
                width: 32,
            },
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 5,
                    stride: 2,
                    padding: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 32,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 64,
                    kernel: 3,
                    stride: 2,
                    padding: 1,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
            ],
            bias: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum FeatureShape {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl FeatureShape {
    fn len(self) -> usize {
        match self {
            FeatureShape::Map { c, h, w } => c * h * w,
            FeatureShape::Flat(n) => n,
        }
    }
}

#[derive(Clone, Debug)]
enum Stage {
    Conv { geo: ConvGeometry, out_channels: usize },
    Dense { in_features: usize, out_features: usize },
    Relu,
    GlobalAvgPool { channels: usize, positions: usize },
}

impl EncoderArch {
    /// A dense-only stack `input -> hidden... -> embedding` with ReLU between
    /// layers (none after the last).
    pub fn dense(input: InputShape, hidden: &[usize], embedding_dim: usize, bias: bool) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { out_features: h });
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense {
            out_features: embedding_dim,
        });
        EncoderArch { input, layers, bias }
    }

    fn plan(&self) -> Result<(Vec<Stage>, usize)> {
        if self.input.is_empty() {
            return Err(Error::Config("encoder input shape has a zero dimension".into()));
        }
        let mut shape = FeatureShape::Map {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        };
        let mut stages = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Config(format!("encoder layer {i} ({layer}): {msg}"));
            let stage = match (*layer, shape) {
                (
                    LayerSpec::Conv {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    },
                    FeatureShape::Map { c, h, w },
                ) => {
                    if out_channels == 0 || kernel == 0 || stride == 0 {
                        return Err(bad("zero-sized channel count, kernel or stride".into()));
                    }
                    if kernel > h + 2 * padding || kernel > w + 2 * padding {
                        return Err(bad(format!("kernel does not fit the padded {h}x{w} input")));
                    }
                    let geo = ConvGeometry {
                        in_channels: c,
                        height: h,
                        width: w,
                        kernel,
                        stride,
                        padding,
                    };
                    shape = FeatureShape::Map {
                        c: out_channels,
                        h: geo.out_height(),
                        w: geo.out_width(),
                    };
                    Stage::Conv { geo, out_channels }
                }
                (LayerSpec::Conv { .. }, FeatureShape::Flat(n)) => {
                    return Err(bad(format!("convolution needs a spatial input, got a flat vector of {n}")))
                }
                (LayerSpec::Dense { out_features }, s) => {
                    if out_features == 0 {
                        return Err(bad("zero output width".into()));
                    }
                    shape = FeatureShape::Flat(out_features);
                    Stage::Dense {
                        in_features: s.len(),
                        out_features,
                    }
                }
                (LayerSpec::Relu, _) => Stage::Relu,
                (LayerSpec::GlobalAvgPool, FeatureShape::Map { c, h, w }) => {
                    shape = FeatureShape::Flat(c);
                    Stage::GlobalAvgPool {
                        channels: c,
                        positions: h * w,
                    }
                }
                (LayerSpec::GlobalAvgPool, FeatureShape::Flat(n)) => {
                    return Err(bad(format!("pooling needs a spatial input, got a flat vector of {n}")))
                }
            };
            stages.push(stage);
        }
        match shape {
            FeatureShape::Flat(n) => Ok((stages, n)),
            FeatureShape::Map { .. } => Err(Error::Config(
                "encoder must end in a flat embedding (add global_avg_pool or dense)".into(),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().map(|_| ())
    }

    pub fn embedding_dim(&self) -> Result<usize> {
        self.plan().map(|(_, d)| d)
    }

    /// `(out_features, fan_in)` of every parameterized layer, in order.
    pub fn param_shapes(&self) -> Result<Vec<(usize, usize)>> {
        let (stages, _) = self.plan()?;
        Ok(stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { geo, out_channels } => Some((*out_channels, geo.patch_len())),
                Stage::Dense {
                    in_features,
                    out_features,
                } => Some((*out_features, *in_features)),
                _ => None,
            })
            .collect())
    }
}

/// Encoder parameters plus the architecture they instantiate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub arch: EncoderArch,
    pub layers: Vec<Linear>,
}

#[derive(Clone, Debug)]
enum Cache {
    Conv(Array2<f64>),
    Dense(Array2<f64>),
    Relu(Array2<f64>),
    Pool,
}

/// Activations retained by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    batch: usize,
    caches: Vec<Cache>,
}

impl EncoderTrace {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(arch: EncoderArch, rng: &mut R) -> Result<Self> {
        let layers = arch
            .param_shapes()?
            .into_iter()
            .map(|(o, i)| Linear::init(o, i, arch.bias, rng))
            .collect();
        Ok(Encoder { arch, layers })
    }

    pub fn zeros(arch: EncoderArch) -> Result<Self> {
        let layers = arch
            .param_shapes()?
            .into_iter()
            .map(|(o, i)| Linear::zeros(o, i, arch.bias))
            .collect();
        Ok(Encoder { arch, layers })
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim().unwrap_or(0)
    }

    fn check_params(&self, stages: &[Stage]) -> Result<()> {
        let shapes = self.arch.param_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "encoder has {} parameter layers, architecture expects {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, ((o, f), lin)) in shapes.iter().zip(&self.layers).enumerate() {
            if lin.weight.dim() != (*o, *f) || lin.bias.as_ref().is_some_and(|b| b.len() != *o) {
                return Err(Error::Config(format!(
                    "encoder parameter layer {i}: weight {:?} does not match architecture ({o}, {f})",
                    lin.weight.dim()
                )));
            }
        }
        debug_assert!(stages.len() == self.arch.layers.len());
        Ok(())
    }

    fn run(&self, images: ArrayView2<f64>, keep: bool) -> Result<(Array2<f64>, Option<EncoderTrace>)> {
        let (stages, _) = self.arch.plan()?;
        self.check_params(&stages)?;
        if images.ncols() != self.arch.input.len() {
            return Err(Error::Config(format!(
                "encoder input: expected {} values per image ({:?}), got {}",
                self.arch.input.len(),
                self.arch.input,
                images.ncols()
            )));
        }
        let batch = images.nrows();
        let mut caches = Vec::with_capacity(stages.len());
        let mut x = images.to_owned();
        let mut params = self.layers.iter();
        for stage in &stages {
            x = match stage {
                Stage::Conv { geo, out_channels } => {
                    let lin = params.next().expect("checked parameter count");
                    let cols = geo.im2col(x.view());
                    let y = lin.forward(cols.view());
                    if keep {
                        caches.push(Cache::Conv(cols));
                    }
                    debug_assert_eq!(y.ncols(), *out_channels);
                    geo.to_channel_major(y.view(), batch)
                }
                Stage::Dense { .. } => {
                    let lin = params.next().expect("checked parameter count");
                    let y = lin.forward(x.view());
                    if keep {
                        caches.push(Cache::Dense(x));
                    }
                    y
                }
                Stage::Relu => {
                    let y = relu(&x);
                    if keep {
                        caches.push(Cache::Relu(y.clone()));
                    }
                    y
                }
                Stage::GlobalAvgPool { channels, positions } => {
                    if keep {
                        caches.push(Cache::Pool);
                    }
                    let inv = 1.0 / *positions as f64;
                    let mut y = Array2::zeros((batch, *channels));
                    for (b, row) in x.axis_iter(Axis(0)).enumerate() {
                        for c in 0..*channels {
                            y[[b, c]] = row.slice(ndarray::s![c * positions..(c + 1) * positions]).sum() * inv;
                        }
                    }
                    y
                }
            };
        }
        if let Some((row, _)) = x.outer_iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numerical(format!("non-finite embedding for batch index {row}")));
        }
        Ok((x, keep.then_some(EncoderTrace { batch, caches })))
    }

    /// Inference-mode forward pass: `(batch, C*H*W)` images to
    /// `(batch, embedding_dim)` embeddings.
    pub fn encode(&self, images: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.run(images, false).map(|(y, _)| y)
    }

    /// Training-mode forward pass retaining the activations needed by
    /// [`backward`](Self::backward).
    pub fn forward(&self, images: ArrayView2<f64>) -> Result<(Array2<f64>, EncoderTrace)> {
        let (y, trace) = self.run(images, true)?;
        Ok((y, trace.expect("training mode keeps a trace")))
    }

    /// Accumulates parameter gradients for `dL/d(embedding) = grad_out` into
    /// `grads` (same layout as `self.layers`).
    pub fn backward(&self, trace: &EncoderTrace, grad_out: &Array2<f64>, grads: &mut [Linear]) -> Result<()> {
        let (stages, dim) = self.arch.plan()?;
        if grad_out.dim() != (trace.batch, dim) {
            return Err(Error::Usage(format!(
                "encoder backward: gradient shape {:?} does not match ({}, {dim})",
                grad_out.dim(),
                trace.batch
            )));
        }
        if grads.len() != self.layers.len() || trace.caches.len() != stages.len() {
            return Err(Error::Usage("encoder backward: trace or gradient storage does not match".into()));
        }
        let first_param = stages
            .iter()
            .position(|s| matches!(s, Stage::Conv { .. } | Stage::Dense { .. }));
        let mut g = grad_out.clone();
        let mut p = self.layers.len();
        for (idx, (stage, cache)) in stages.iter().zip(&trace.caches).enumerate().rev() {
            let need_input = Some(idx) != first_param;
            g = match (stage, cache) {
                (Stage::Conv { geo, out_channels }, Cache::Conv(cols)) => {
                    p -= 1;
                    let gm = geo.from_channel_major(g.view(), *out_channels);
                    match self.layers[p].backward(cols.view(), gm.view(), &mut grads[p], need_input) {
                        Some(dcols) => geo.col2im(dcols.view(), trace.batch),
                        None => break,
                    }
                }
                (Stage::Dense { .. }, Cache::Dense(x)) => {
                    p -= 1;
                    match self.layers[p].backward(x.view(), g.view(), &mut grads[p], need_input) {
                        Some(dx) => dx,
                        None => break,
                    }
                }
                (Stage::Relu, Cache::Relu(y)) => relu_backward(y, &g),
                (Stage::GlobalAvgPool { channels, positions }, Cache::Pool) => {
                    let inv = 1.0 / *positions as f64;
                    let mut dx = Array2::zeros((trace.batch, channels * positions));
                    for (b, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        for c in 0..*channels {
                            row.slice_mut(ndarray::s![c * positions..(c + 1) * positions])
                                .fill(g[[b, c]] * inv);
                        }
                    }
                    dx
                }
                _ => return Err(Error::Usage("encoder backward: trace does not match architecture".into())),
            };
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Vec<Linear> {
        self.layers.iter().map(Linear::zeros_like).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn flat(n: usize) -> InputShape {
        InputShape {
            channels: 1,
            height: 1,
            width: n,
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let arch = EncoderArch::dense(flat(4), &[3], 2, false);
        let enc = Encoder::zeros(arch).unwrap();
        let y = enc.encode(array![[1.0, -2.0, 3.0, 4.0]].view()).unwrap();
        assert_eq!(y, array![[0.0, 0.0]]);
    }

    #[test]
    fn identity_dense_layer_passes_pixels_through() {
        let arch = EncoderArch::dense(
            InputShape {
                channels: 1,
                height: 2,
                width: 2,
            },
            &[],
            4,
            false,
        );
        let mut enc = Encoder::zeros(arch).unwrap();
        enc.layers[0].weight = Array2::eye(4);
        let y = enc.encode(array![[1.0, 2.0, 3.0, 4.0]].view()).unwrap();
        assert_eq!(y, array![[1.0, 2.0, 3.0, 4.0]]);
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let arch = EncoderArch {
            input: flat(4),
            layers: vec![
                LayerSpec::Dense { out_features: 3 },
                LayerSpec::Conv {
                    out_channels: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
            ],
            bias: true,
        };
        let msg = arch.validate().unwrap_err().to_string();
        assert!(msg.contains("layer 1 (conv"), "{msg}");

        let enc = Encoder::zeros(EncoderArch::dense(flat(4), &[], 2, true)).unwrap();
        let err = enc.encode(Array2::zeros((1, 5)).view()).unwrap_err();
        assert!(matches!(err, Error::Config(m) if m.contains("encoder input")));
    }

    #[test]
    fn default_arch_embeds_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = Encoder::init(EncoderArch::default(), &mut rng).unwrap();
        assert_eq!(enc.embedding_dim(), 64);
        let y = enc.encode(Array2::from_elem((2, 3 * 32 * 32), 0.5).view()).unwrap();
        assert_eq!(y.dim(), (2, 64));
        assert_eq!(enc.encode(Array2::from_elem((2, 3072), 0.5).view()).unwrap(), y);
    }
}
