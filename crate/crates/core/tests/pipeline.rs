use std::fs;

use qent_core::dataset::{self, Strategy};
use qent_core::harness::{
    combined_decisions, entangled_cut_recall, predict_dataset, reports_csv, run_experiment, train,
    ExperimentPlan, MetricsReport,
};
use qent_core::model::{
    batch_loss, build_cnn, ArchConfig, Augmentation, Model, ModelKind, Objective, TrainConfig,
};
use qent_core::Execution;

fn small_arch() -> ArchConfig {
    ArchConfig {
        conv_layers: 2,
        fc_units: 32,
        ..ArchConfig::new(3)
    }
}

fn untimed(reports: &[MetricsReport]) -> String {
    let mut r = reports.to_vec();
    for x in &mut r {
        x.seconds = 0.0;
    }
    reports_csv(&r)
}

#[test]
fn dataset_file_round_trip_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.qent");
    let ds = dataset::build_training_set(3, Strategy::Verified, 0.002, 5, Execution::default()).unwrap();
    dataset::save(&ds, &path).unwrap();
    let back = dataset::load(&path).unwrap();
    assert_eq!(back.records, ds.records);
    assert_eq!(back.manifest.sections, ds.manifest.sections);
    let side = fs::read_to_string(dataset::sidecar_path(&path)).unwrap();
    assert!(side.contains("strategy=verified"), "{side}");
}

#[test]
fn datasets_do_not_depend_on_execution_mode() {
    for strategy in [Strategy::Negativity, Strategy::Verified, Strategy::Weakly] {
        let a = dataset::build_training_set(3, strategy, 0.002, 9, Execution::Sequential).unwrap();
        let b = dataset::build_training_set(3, strategy, 0.002, 9, Execution::Parallel).unwrap();
        assert_eq!(dataset::encode(&a).unwrap(), dataset::encode(&b).unwrap());
    }
    let a = dataset::build_test_sets(4, 0.002, 2, Execution::Sequential).unwrap();
    let b = dataset::build_test_sets(4, 0.002, 2, Execution::Parallel).unwrap();
    assert_eq!(dataset::encode(&a.mixed).unwrap(), dataset::encode(&b.mixed).unwrap());
    let c = dataset::build_test_sets(4, 0.002, 3, Execution::Sequential).unwrap();
    assert_ne!(dataset::encode(&a.pure).unwrap(), dataset::encode(&c.pure).unwrap());
}

#[test]
fn training_is_bit_identical_across_modes_and_threads() {
    let data = dataset::build_training_set(3, Strategy::Negativity, 0.0005, 4, Execution::Sequential).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        seed: 4,
        kind: ModelKind::Siamese,
        ..TrainConfig::default()
    };
    let run = |exec, threads| {
        qent_core::exec::with_threads(threads, || {
            let m = build_cnn(&small_arch(), 4).unwrap();
            train(m, &data, None, &cfg, exec).unwrap()
        })
    };
    let a = run(Execution::Sequential, None);
    let b = run(Execution::Parallel, Some(3));
    let c = run(Execution::Parallel, Some(1));
    let bytes = |m: &Model| qent_core::autograd::encode_params(m.params());
    assert_eq!(bytes(&a.model), bytes(&b.model));
    assert_eq!(bytes(&a.model), bytes(&c.model));
    assert_eq!(a.step_losses, b.step_losses);
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.qenm");
    let model = build_cnn(&small_arch(), 8).unwrap();
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    let ds = dataset::build_pptes_set(qent_core::entanglement::PptesFamily::Acin, 3, 0.002, 1, Execution::Sequential)
        .unwrap();
    assert_eq!(
        predict_dataset(&model, &ds, Execution::Sequential).unwrap(),
        predict_dataset(&back, &ds, Execution::Parallel).unwrap()
    );
    fs::write(&path, b"QENMxx").unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn siamese_with_zero_weights_matches_cnn() {
    let data = dataset::build_training_set(3, Strategy::Weakly, 0.0005, 6, Execution::Sequential).unwrap();
    let base = TrainConfig {
        epochs: 1,
        seed: 6,
        ..TrainConfig::default()
    };
    let sia = TrainConfig {
        kind: ModelKind::Siamese,
        lambda1: 0.0,
        lambda2: 0.0,
        ..base.clone()
    };
    let a = train(build_cnn(&small_arch(), 6).unwrap(), &data, None, &base, Execution::Sequential).unwrap();
    let b = train(build_cnn(&small_arch(), 6).unwrap(), &data, None, &sia, Execution::Sequential).unwrap();
    assert_eq!(a.step_losses.len(), b.step_losses.len());
    for (x, y) in a.step_losses.iter().zip(&b.step_losses) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn identity_augmentation_has_no_consistency_penalty() {
    let data = dataset::build_training_set(3, Strategy::Negativity, 0.0002, 2, Execution::Sequential).unwrap();
    let model = build_cnn(&small_arch(), 2).unwrap();
    let batch: Vec<_> = data.records.iter().take(20).collect();
    let aug = Augmentation::identity(3);
    let obj = Objective::Siamese {
        lambda1: 1.0,
        lambda2: 1.0,
        aug: &aug,
    };
    let (parts, _) = batch_loss(&model, &batch, &obj, Execution::Sequential, false).unwrap();
    assert!(parts.locc < 1e-12 && parts.perm < 1e-12);
    let (cnn, _) = batch_loss(&model, &batch, &Objective::Cnn, Execution::Sequential, false).unwrap();
    assert!((parts.total - cnn.total).abs() < 1e-12);
}

#[test]
fn combined_rule_flags_every_npt_cut() {
    let model = build_cnn(&small_arch(), 3).unwrap();
    let ds = dataset::build_mixed_test_set(3, 0.002, 3, Execution::Sequential).unwrap();
    let probs = predict_dataset(&model, &ds, Execution::Sequential).unwrap();
    let decisions: Vec<Vec<u8>> = probs
        .iter()
        .zip(&ds.records)
        .map(|(p, r)| combined_decisions(p, &r.neg_values))
        .collect();
    assert_eq!(entangled_cut_recall(&decisions, &ds.records), 1.0);
}

#[test]
fn experiment_writes_reproducible_reports() {
    let dir = tempfile::tempdir().unwrap();
    let plan = |out: &str| {
        let mut p = ExperimentPlan::new(3, Strategy::Verified, 0.001, 12);
        p.arch = small_arch();
        p.train.epochs = 1;
        p.retrain_epochs = Some(1);
        p.out_dir = Some(dir.path().join(out));
        p
    };
    let a = run_experiment(&plan("a"), Execution::Parallel).unwrap();
    let b = run_experiment(&plan("b"), Execution::Sequential).unwrap();
    let names: Vec<&str> = a.reports.iter().map(|r| r.dataset.as_str()).collect();
    assert_eq!(names.len(), 5, "{names:?}");
    assert_eq!(a.retrained.len(), 5);
    assert_eq!(untimed(&a.reports), untimed(&b.reports));
    let csv = fs::read_to_string(dir.path().join("a/report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("dataset,accuracy,convneg,npt_fraction,seconds"));
    assert!(lines.all(|l| l.split(',').count() == 5));
    assert_eq!(
        fs::read(dir.path().join("a/model.qenm")).unwrap(),
        fs::read(dir.path().join("b/model.qenm")).unwrap()
    );
    for f in ["config.txt", "summary.txt", "history.csv", "model.qenm.arch"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
}

#[test]
fn npt_fraction_at_the_mixture_cap() {
    for seed in 0..4 {
        let p = &qent_core::harness::transition_analysis(None, 3, &[30], 200, seed, Execution::default()).unwrap()[0];
        // the circuit pool stays below 0.1 at this cap and is only reported
        println!("seed {seed}: circuit {} haar {}", p.npt_fraction_circuit, p.npt_fraction_haar);
        assert!(p.npt_fraction_haar >= 0.1, "{p:?}");
        assert_eq!(p.npt_fraction_separable, 0.0);
    }
}
