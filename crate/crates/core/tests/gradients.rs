mod common;

use common::{conv_arch, fd_check, fixture, SHAPE};
use hda_core::model::{BlockId, EncoderArch, ModelParams};
use hda_core::training::{step1_objective, step2_objective, TrainConfig};

#[test]
fn step1_gradients_match_finite_differences() {
    for arch in [conv_arch(), EncoderArch::dense(SHAPE, &[7], 5, true)] {
        let f = fixture(arch, 1, 3);
        let cfg = TrainConfig {
            triplet_features: hda_core::losses::TripletFeatures::L2,
            ..TrainConfig::default()
        };
        let classes = f.source.class_indices();
        let rows: Vec<usize> = (0..12).collect();
        let (_, grads) = step1_objective(&f.params, &cfg, &f.source, &classes, &rows).unwrap();
        let objective = |p: &ModelParams, _| step1_objective(p, &cfg, &f.source, &classes, &rows).unwrap().0.total;
        let live = fd_check(&f.params, &grads, objective, 1e-5, 1e-4, 6).unwrap();
        assert!(live > 0);
    }
}

#[test]
fn step2_gradients_match_finite_differences() {
    for arch in [conv_arch(), EncoderArch::dense(SHAPE, &[7], 5, true)] {
        let f = fixture(arch, 2, 3);
        let mut cfg = TrainConfig::default();
        cfg.step2.source_identity = true;
        cfg.step2.source_triplet = true;
        cfg.weights.lambda3 = 0.7;
        let sc = f.source.class_indices();
        let tc = f.target.class_indices();
        let run = |p: &ModelParams| step2_objective(p, &cfg, &f.source, &sc, &f.target, &tc, &f.batch).unwrap();
        let (_, grads) = run(&f.params);
        let objective = |p: &ModelParams, id| {
            let r = run(p).0;
            if id == BlockId::Domain {
                -r.domain
            } else {
                r.total
            }
        };
        let live = fd_check(&f.params, &grads, objective, 1e-5, 1e-4, 6).unwrap();
        assert!(live > 0);
    }
}
