use super::*;
use crate::network::ArchDescriptor;

fn small_options() -> DatasetOptions {
    DatasetOptions {
        points_per_tooth: 40,
        gingiva_points: 100,
        ..DatasetOptions::default()
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        points: 128,
        arch: ArchDescriptor {
            encoder_widths: vec![8, 16],
            decoder_widths: vec![16],
            presence_hidden: 8,
            ..ArchDescriptor::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn generate_writes_a_patient_disjoint_split() {
    let dir = tempfile::tempdir().unwrap();
    let split = generate(dir.path(), 20, &DentitionMix::uniform(), 4, &small_options()).unwrap();
    assert_eq!((split.train.len(), split.val.len(), split.test.len()), (14, 3, 3));
    for (name, ids) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        let entries = load_dataset_dir(&dir.path().join(name)).unwrap();
        let mut found: Vec<String> = entries.iter().map(|e| e.annotation.model_id.clone()).collect();
        let mut expected = ids.clone();
        found.sort();
        expected.sort();
        assert_eq!(found, expected);
    }
    assert!(dir.path().join("split.json").is_file());
}

#[test]
fn history_sits_next_to_the_checkpoint() {
    assert_eq!(history_path(Path::new("a/model.ckpt")), PathBuf::from("a/model.ckpt.history.csv"));
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 12, &DentitionMix::uniform(), 1, &small_options()).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let mut seen = 0;
    let summary = train_dir(&data, &small_config(), &ckpt, false, |_| seen += 1).unwrap();
    assert_eq!(seen, 2);
    assert_eq!(summary.history.epochs.len(), 2);
    assert!(history_path(&ckpt).is_file());

    let test_dir = data.join("test");
    let preds = dir.path().join("preds");
    fs::create_dir(&preds).unwrap();
    let first = load_dataset_dir(&test_dir).unwrap().remove(0);
    let id = &first.annotation.model_id;
    let cloud_path = test_dir.join(format!("{id}.ply"));
    let pre_path = dir.path().join("pre.ply");
    let pre = preprocess_file(&cloud_path, &pre_path, 128, 0).unwrap();
    assert_eq!(pre.cloud.len(), 129);
    assert_eq!(pre.arch, Some(first.annotation.arch));

    let opts = PredictOptions {
        points: 128,
        ..PredictOptions::default()
    };
    let out = preds.join(format!("{id}.json"));
    let pred = predict_file(&ckpt, &cloud_path, &out, &opts).unwrap();
    assert_eq!(pred.landmarks.len(), NUM_LANDMARKS);
    assert_eq!(&pred.model_id, id);
    let again = predict_file(&ckpt, &pre_path, &dir.path().join("p2.json"), &opts).unwrap();
    // The raw path and the preprocessed file use the same seed, so they
    // see the same points and centroid.
    assert_eq!(again.landmarks, pred.landmarks);
    for l in &pred.landmarks {
        if !l.in_mesh {
            continue;
        }
        let near = first.cloud.points().iter().any(|p| crate::geometry::distance(p, &l.position) < 1e-9);
        assert!(near, "in-mesh prediction must be an input point");
    }

    let report = evaluate_dirs(&preds, &test_dir, &dir.path().join("r.csv"), 1.0).unwrap();
    assert_eq!(report.micro_avg.models, 1);
    let timing = benchmark(&ckpt, &data, 1, 2, &opts).unwrap();
    assert_eq!(timing.stats.samples, 2 * load_dataset_dir(&test_dir).unwrap().len());
}

#[test]
fn baseline_checkpoints_have_no_presence_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate(&data, 10, &DentitionMix::uniform(), 2, &small_options()).unwrap();
    let ckpt = dir.path().join("b.ckpt");
    let mut config = small_config();
    config.epochs = 1;
    let summary = train_dir(&data.join("train"), &config, &ckpt, true, |_| {}).unwrap();
    assert!(!summary.params.descriptor().char_module);
    assert_eq!(summary.saved_epoch, 1);
    let first = load_dataset_dir(&data.join("train")).unwrap().remove(0);
    let path = data.join("train").join(format!("{}.ply", first.annotation.model_id));
    let pred = predict_file(&ckpt, &path, &dir.path().join("p.json"), &PredictOptions::default()).unwrap();
    assert!(pred.landmarks.iter().all(|l| l.presence_prob.is_none()));
}

#[test]
fn input_problems_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let err = train_dir(&empty, &small_config(), &dir.path().join("x.ckpt"), false, |_| {}).unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)), "{err}");
    let err = evaluate_dirs(&empty, &empty, &dir.path().join("r.csv"), 1.0).unwrap_err();
    assert!(matches!(err, PipelineError::Input(_)), "{err}");
    let xyz = dir.path().join("c.xyz");
    fs::write(&xyz, "0 0 0\n1 0 0\n0 1 0\n").unwrap();
    let params = init_params(&small_config().arch, 0).unwrap();
    let prepared = prepare_cloud(&load_cloud_file(&xyz).unwrap(), &PredictOptions::default()).unwrap();
    assert!(matches!(predict_cloud(&params, &prepared, "c"), Err(PipelineError::Input(_))));
}
