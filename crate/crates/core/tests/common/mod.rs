//! Fixtures shared by the integration test targets.

#![allow(dead_code)]

use hda_core::model::{BlockId, EncoderArch, Gradients, HeadKind, InputShape, LayerSpec, ModelConfig, ModelParams};
use hda_core::synthdata::{AttributeInfo, Dataset, Domain, Split};
use hda_core::training::Step2Batch;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const SHAPE: InputShape = InputShape {
    channels: 3,
    height: 6,
    width: 6,
};

pub const N_ATTR: usize = 4;

/// Conv, ReLU, conv, ReLU, pooling and a linear projection.
pub fn conv_arch() -> EncoderArch {
    EncoderArch {
        input: SHAPE,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::Conv {
                out_channels: 6,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out_features: 5 },
        ],
        bias: true,
    }
}

/// Two parameterized layers: one convolution and one projection.
pub fn two_layer_arch() -> EncoderArch {
    EncoderArch {
        input: SHAPE,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 6,
                kernel: 3,
                stride: 2,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Dense { out_features: 5 },
        ],
        bias: true,
    }
}

pub fn dataset(split: Split, layout: &[(u32, Domain)], n_attr: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let images = Array2::from_shape_fn((layout.len(), SHAPE.len()), |_| rng.sample::<f64, _>(StandardNormal));
    let attributes =
        (n_attr > 0).then(|| Array2::from_shape_fn((layout.len(), n_attr), |_| f64::from(rng.gen::<bool>() as u8)));
    Dataset {
        split,
        shape: SHAPE,
        images,
        identities: layout.iter().map(|l| l.0).collect(),
        domains: layout.iter().map(|l| l.1).collect(),
        attributes,
        attribute_info: (0..n_attr)
            .map(|i| AttributeInfo {
                name: format!("a{i}"),
                is_color: false,
            })
            .collect(),
    }
}

pub struct Fixture {
    pub params: ModelParams,
    pub source: Dataset,
    pub target: Dataset,
    pub batch: Step2Batch,
}

/// Four source identities with `per_id` photos each, four target
/// identities with two photos and one sketch each, and a model with every
/// head. The co-training batch holds all source rows and four
/// photo/sketch pairs, one of them mismatched.
pub fn fixture(arch: EncoderArch, seed: u64, per_id: usize) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let src_layout: Vec<_> = (0..4).flat_map(|i| vec![(i, Domain::SourcePhoto); per_id]).collect();
    let tgt_layout: Vec<_> = (0..4)
        .flat_map(|i| [(100 + i, Domain::TargetPhoto), (100 + i, Domain::TargetPhoto), (100 + i, Domain::TargetSketch)])
        .collect();
    let source = dataset(Split::Source, &src_layout, N_ATTR, &mut rng);
    let target = dataset(Split::TargetTrain, &tgt_layout, 0, &mut rng);
    let cfg = ModelConfig {
        encoder: arch,
        n_source_ids: 4,
        n_target_ids: 4,
        n_attributes: N_ATTR,
    };
    let mut params = ModelParams::init_source(&cfg, &mut rng).unwrap();
    params.e2 = Some(ModelParams::init_source(&cfg, &mut rng).unwrap().e1);
    params.id_target = Some(params.new_head(HeadKind::IdentityTarget, 4, &mut rng).unwrap());
    params.domain = Some(params.new_head(HeadKind::Domain, 0, &mut rng).unwrap());
    // zero biases put dead-ReLU rows exactly on a kink of the next layer
    let ids: Vec<BlockId> = params.blocks().into_iter().map(|(id, _)| id).collect();
    for id in ids {
        for layer in params.block_mut(id).unwrap().iter_mut() {
            for b in layer.bias.iter_mut().flat_map(|b| b.iter_mut()) {
                *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    let batch = Step2Batch {
        source_rows: (0..source.len()).collect(),
        photo_rows: vec![0, 4, 6, 9],
        sketch_rows: vec![2, 5, 8, 2],
        paired: vec![true, true, true, false],
    };
    Fixture {
        params,
        source,
        target,
        batch,
    }
}

/// Central differences with step `h` on `per_layer` sampled coordinates of
/// every layer of every block that received a gradient. `objective(p, id)`
/// is the scalar block `id` descends. Returns the number of compared
/// coordinates whose gradient is not negligible.
pub fn fd_check(
    params: &ModelParams,
    grads: &Gradients,
    objective: impl Fn(&ModelParams, BlockId) -> f64,
    h: f64,
    rel_tol: f64,
    per_layer: usize,
) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut live = 0;
    for (id, block) in params.blocks() {
        let Some(g) = grads.get(id) else { continue };
        for (li, layer) in block.iter().enumerate() {
            let n = layer.num_params();
            for _ in 0..per_layer {
                let k = rng.gen_range(0..n);
                let analytic = *g[li].values().nth(k).unwrap();
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    *p.block_mut(id).unwrap()[li].values_mut().nth(k).unwrap() += delta;
                    objective(&p, id)
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-8 {
                    live += 1;
                }
                let err = (analytic - numeric).abs() / scale.max(1e-6);
                if !(err < rel_tol || (analytic - numeric).abs() < 1e-10) {
                    return Err(format!(
                        "block {id} layer {li} coord {k}: analytic {analytic:e} numeric {numeric:e}"
                    ));
                }
            }
        }
    }
    Ok(live)
}
