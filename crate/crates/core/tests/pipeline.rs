//! End-to-end behaviour of training, attribute selection and ablation on a
//! small generated corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use hda_core::ablation::{ablation_row, Experiment};
use hda_core::attrsel::{label_photos, predict_target_attributes, retrain_probe, score_attributes};
use hda_core::synthdata::{generate_corpus, instances, CorpusParams, CorpusReader, Dataset, Domain, Split};
use hda_core::training::{run_step1, run_step2, TrainConfig};
use ndarray::Array2;

fn params() -> CorpusParams {
    CorpusParams {
        n_source_ids: 16,
        n_target_train_ids: 6,
        n_target_test_ids: 4,
        ..CorpusParams::default()
    }
}

fn corpus(root: &Path) -> CorpusReader {
    generate_corpus(root, &params(), 11).unwrap();
    CorpusReader::open(root).unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs_step1: epochs,
        epochs_step2: epochs,
        warmup_epochs: 1,
        seed: 3,
        ..TrainConfig::desk_scale()
    }
}

fn splits(reader: &CorpusReader) -> (Dataset, Dataset) {
    let _g = reader.audit().forbid(Split::TargetTest);
    (reader.load_split(Split::Source).unwrap(), reader.load_split(Split::TargetTrain).unwrap())
}

#[test]
fn step1_loss_falls() {
    let tmp = tempfile::tempdir().unwrap();
    let (source, _) = splits(&corpus(tmp.path()));
    let losses = run_step1(&quick(8), &source, None).unwrap().epoch_losses();
    assert_eq!(losses.len(), 8);
    let head = (losses[0] + losses[1]) / 2.0;
    let tail = (losses[6] + losses[7]) / 2.0;
    assert!(tail < head, "{losses:?}");
}

#[test]
fn zero_learning_rate_freezes_both_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let (source, target) = splits(&corpus(tmp.path()));
    let frozen = |epochs| TrainConfig {
        base_lr: 0.0,
        step2_lr: None,
        ..quick(epochs)
    };
    let one = run_step1(&frozen(1), &source, None).unwrap().checkpoint;
    let three = run_step1(&frozen(3), &source, None).unwrap().checkpoint;
    assert_eq!(one.params, three.params);

    let a = run_step2(&frozen(1), &one, &source, &target, None).unwrap().checkpoint.params;
    let b = run_step2(&frozen(3), &one, &source, &target, None).unwrap().checkpoint.params;
    assert_eq!(a, b);
    // E2 starts as a copy of E1 and nothing moved
    assert_eq!(a.e2.as_ref().unwrap(), &a.e1);
    assert_eq!(a.e1, one.params.e1);
}

#[test]
fn seeds_change_the_run_and_repeats_do_not() {
    let tmp = tempfile::tempdir().unwrap();
    let (source, _) = splits(&corpus(tmp.path()));
    let a = run_step1(&quick(2), &source, None).unwrap();
    let b = run_step1(&quick(2), &source, None).unwrap();
    let c = run_step1(&TrainConfig { seed: 4, ..quick(2) }, &source, None).unwrap();
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    assert_eq!(a.epoch_losses(), b.epoch_losses());
    assert_ne!(a.checkpoint.params, c.checkpoint.params);
}

#[test]
fn training_writes_its_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (source, _) = splits(&corpus(&tmp.path().join("c")));
    let out_dir = tmp.path().join("run/nested");
    let out = run_step1(&quick(1), &source, Some(&out_dir)).unwrap();
    let text = std::fs::read_to_string(out_dir.join("train_log.jsonl")).unwrap();
    assert_eq!(text.lines().count(), out.log.len());
    assert!(text.lines().all(|l| l.contains("\"stage\":\"step1\"")));
}

#[test]
fn untrained_probe_is_a_coin_flip_per_attribute() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = corpus(tmp.path());
    let (source, _) = splits(&reader);
    let photos = reader.load_split(Split::TargetTest).unwrap();
    let model = run_step1(&quick(1), &source, None).unwrap().checkpoint;
    let predicted = predict_target_attributes(&model.params, &photos).unwrap();
    let labeled = label_photos(&photos, &predicted, &source.attribute_info).unwrap();
    let cfg = TrainConfig {
        base_lr: 0.0,
        ..quick(1)
    };
    let probe = retrain_probe(reader.audit(), &labeled, &cfg, None).unwrap();
    let report = score_attributes(&probe.checkpoint.params, &source, 0.6).unwrap();
    let mean = report.accuracy.iter().sum::<f64>() / report.accuracy.len() as f64;
    assert!((0.35..=0.65).contains(&mean), "{:?}", report.accuracy);
}

#[test]
fn probe_trained_on_true_labels_beats_the_untrained_one() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = corpus(tmp.path());
    let (source, target) = splits(&reader);
    // target photos labeled with the attributes of their genotypes
    let truth: BTreeMap<u32, [u8; 8]> = instances(11, &params(), Split::TargetTrain)
        .into_iter()
        .map(|i| (i.identity, i.genotype.attributes()))
        .collect();
    let photos = target.rows_of(Domain::TargetPhoto);
    let predicted = Array2::from_shape_fn((photos.len(), 8), |(i, k)| truth[&target.identities[photos[i]]][k]);
    let labeled = label_photos(&target, &predicted, &source.attribute_info).unwrap();

    let score = |cfg: &TrainConfig| {
        let probe = retrain_probe(reader.audit(), &labeled, cfg, None).unwrap();
        let r = score_attributes(&probe.checkpoint.params, &source, 0.6).unwrap();
        r.accuracy.iter().sum::<f64>() / r.accuracy.len() as f64
    };
    let trained = score(&quick(30));
    let untrained = score(&TrainConfig {
        base_lr: 0.0,
        ..quick(1)
    });
    assert!(trained > untrained + 0.05, "trained {trained} untrained {untrained}");
}

#[test]
fn probe_rejects_source_images_and_forbids_the_source_split() {
    let tmp = tempfile::tempdir().unwrap();
    let reader = corpus(tmp.path());
    let (source, _) = splits(&reader);
    assert!(retrain_probe(reader.audit(), &source, &quick(1), None).is_err());
    let _g = reader.audit().forbid(Split::Source);
    assert!(reader.load_split(Split::Source).is_err());
}

#[test]
fn reduced_target_rows_keep_the_requested_share_of_identities() {
    let tmp = tempfile::tempdir().unwrap();
    let exp = Experiment::load(&corpus(tmp.path())).unwrap();
    let all: BTreeSet<u32> = exp.target.identity_set().into_iter().collect();
    for (row, expect) in [(4, 3), (5, 5)] {
        let fraction = ablation_row(row).unwrap().target_fraction;
        let sub = exp.target_subset(fraction, 1).unwrap();
        let ids: BTreeSet<u32> = sub.identity_set().into_iter().collect();
        assert_eq!(ids.len(), expect, "row {row}");
        assert!(ids.is_subset(&all));
        assert_eq!(sub.len(), expect * exp.target.len() / all.len());
        assert_eq!(exp.target_subset(fraction, 1).unwrap().identities, sub.identities);
    }
    assert_ne!(
        exp.target_subset(0.5, 1).unwrap().identity_set(),
        exp.target_subset(0.5, 2).unwrap().identity_set()
    );
    assert!(exp.target_subset(0.0, 1).is_err());
    assert!(exp.target_subset(1.5, 1).is_err());
}

#[test]
fn untrained_row_needs_no_training_data() {
    let tmp = tempfile::tempdir().unwrap();
    let mut exp = Experiment::load(&corpus(tmp.path())).unwrap();
    exp.source = exp.source.subset(&[]);
    exp.target = exp.target.subset(&[]);
    let r = exp.run_row(&ablation_row(1).unwrap(), &quick(1), 0).unwrap();
    assert!((0.0..=1.0).contains(&r.s2p[0]));
    assert!(r.s2p.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(r.label, "row1");
}
