use super::*;
use crate::evaluation::{aggregate, ModelResult};
use crate::geometry::append_null;
use crate::synthetic::{generate_arch, ArchSpec};
use crate::training::EpochRecord;

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn ascii_ply_keeps_vertex_order() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "a.ply",
        "ply\nformat ascii 1.0\ncomment hello\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n\
         1 2 3 9\n4 5 6 9\n7 8 9.5 9\n3 0 1 2\n",
    );
    let pc = load_pointcloud(&p).unwrap();
    assert_eq!(pc.points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.5]]);
    assert!(!pc.has_null());
}

#[test]
fn obj_faces_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.obj", "# c\nv 1 2 3\nvn 0 0 1\nv 4 5 6 1.0\nf 1 2 1\n");
    assert_eq!(load_pointcloud(&p).unwrap().points(), &[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
}

#[test]
fn xyz_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "a.xyz", "1 2 3\n4 NaN 6\n");
    let err = load_pointcloud(&p).unwrap_err();
    assert!(matches!(err, IoError::Parse { line: 2, .. }), "{err}");
    assert!(err.to_string().contains(":2:"));
    let empty = write(dir.path(), "b.xyz", "# nothing\n");
    assert!(matches!(load_pointcloud(&empty), Err(IoError::Invalid { .. })));
    let short = write(dir.path(), "c.ply", "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n");
    assert!(matches!(load_pointcloud(&short), Err(IoError::Parse { .. })));
    let binary = write(dir.path(), "d.ply", "ply\nformat binary_little_endian 1.0\nend_header\n");
    assert!(matches!(load_pointcloud(&binary), Err(IoError::Parse { line: 2, .. })));
    assert!(matches!(load_pointcloud(&dir.path().join("e.stl")), Err(IoError::UnknownFormat { .. })));
    assert!(matches!(load_pointcloud(&dir.path().join("missing.ply")), Err(IoError::Io { .. })));
}

#[test]
fn cloud_round_trip_preserves_bits_and_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let raw = PointCloud::new(vec![[0.1, -2.0 / 3.0, 1e-17], [std::f64::consts::PI, 5.0, -7.25], [1.0, 1.0, 1.0]]).unwrap();
    let with_null = append_null(&raw).unwrap();
    let path = dir.path().join("x.ply");
    let file = CloudFile {
        cloud: with_null.clone(),
        centroid: Some([1.5, -0.1, 1.0 / 3.0]),
        arch: Some(Arch::Lower),
    };
    save_cloud_file(&path, &file).unwrap();
    assert_eq!(load_cloud_file(&path).unwrap(), file);
    for ext in ["obj", "xyz"] {
        let p = dir.path().join(format!("x.{ext}"));
        save_pointcloud(&p, &raw).unwrap();
        assert_eq!(load_pointcloud(&p).unwrap(), raw);
    }
}

fn sample_annotation() -> DentalAnnotation {
    let mut spec = ArchSpec::new(Arch::Lower, 3);
    spec.points_per_tooth = 20;
    spec.gingiva_points = 0;
    spec.presence[4] = false;
    spec.presence[15] = false;
    generate_arch(&spec).unwrap().annotation
}

#[test]
fn annotation_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ann = sample_annotation();
    let path = dir.path().join("a.json");
    save_annotation(&path, &ann).unwrap();
    assert_eq!(load_annotation(&path).unwrap(), ann);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.contains("\"LL8\""));
    assert!(text.contains(&format!("\"dentition_type\": \"{}\"", ann.dentition_type().code())));
}

#[test]
fn annotation_schema_violations_are_reported() {
    let path = Path::new("a.json");
    let good = annotation_to_json(&sample_annotation());
    let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
    doc["teeth"]["LR3"].as_object_mut().unwrap().remove("landmarks");
    let err = annotation_from_json(path, &doc.to_string()).unwrap_err();
    assert!(matches!(&err, IoError::Schema { json_path, .. } if json_path == "teeth.LR3"), "{err}");

    let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
    doc["dentition_type"] = "00".into();
    let err = annotation_from_json(path, &doc.to_string()).unwrap_err();
    assert!(err.to_string().contains("classify_dentition"), "{err}");

    let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
    doc["teeth"]["LR3"]["landmarks"]["CP"] = serde_json::json!([1.0, "x", 2.0]);
    let err = annotation_from_json(path, &doc.to_string()).unwrap_err();
    assert!(matches!(&err, IoError::Schema { json_path, .. } if json_path.contains("teeth.LR3.landmarks")), "{err}");

    let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
    let entry = doc["teeth"]["LR3"].clone();
    doc["teeth"].as_object_mut().unwrap().insert("UR3".into(), entry);
    assert!(annotation_from_json(path, &doc.to_string()).unwrap_err().to_string().contains("upper"));

    let mut doc: serde_json::Value = serde_json::from_str(&good).unwrap();
    doc["teeth"].as_object_mut().unwrap().remove("LL1");
    assert!(annotation_from_json(path, &doc.to_string()).unwrap_err().to_string().contains("LL1"));
}

#[test]
fn prediction_files_need_every_landmark() {
    let dir = tempfile::tempdir().unwrap();
    let ann = sample_annotation();
    let landmarks: Vec<LandmarkPrediction> = (0..NUM_LANDMARKS)
        .map(|k| LandmarkPrediction {
            tooth: ToothId::from_index(ann.arch, k / 5 + 1).unwrap().label(),
            kind: LandmarkKind::ALL[k % 5],
            position: [k as f64, 0.5, -1.0],
            in_mesh: k % 3 != 0,
            presence_prob: Some(0.25),
        })
        .collect();
    let mut pred = PredictionFile {
        model_id: "m".into(),
        arch: ann.arch,
        landmarks,
    };
    let path = dir.path().join("p.json");
    save_prediction(&path, &pred).unwrap();
    assert_eq!(load_prediction(&path).unwrap(), pred);
    pred.landmarks.pop();
    save_prediction(&path, &pred).unwrap();
    assert!(matches!(load_prediction(&path), Err(IoError::Schema { .. })));
}

#[test]
fn config_and_csv_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write(dir.path(), "c.json", r#"{"epochs": 3, "lr": 0.01}"#);
    let cfg = load_train_config(&cfg_path).unwrap();
    assert_eq!((cfg.epochs, cfg.lr, cfg.batch_size), (3, 0.01, 16));
    let bad = write(dir.path(), "d.json", r#"{"epochs": "three"}"#);
    assert!(matches!(load_train_config(&bad), Err(IoError::Schema { json_path, .. }) if json_path == "epochs"));
    save_train_config(&cfg_path, &cfg).unwrap();
    assert_eq!(load_train_config(&cfg_path).unwrap(), cfg);

    let history = TrainHistory {
        epochs: vec![EpochRecord {
            epoch: 1,
            lr: 0.005,
            loss: 0.5,
            mse: 0.25,
            bce: None,
            val_mede: Some(1.5),
            val_f1: None,
        }],
    };
    let h = dir.path().join("h.csv");
    write_history_csv(&h, &history).unwrap();
    assert_eq!(
        fs::read_to_string(&h).unwrap(),
        "epoch,lr,loss,mse,bce,val_mede,val_f1\n1,0.005,0.5,0.25,,1.5,\n"
    );

    let ann = sample_annotation();
    let positions: Vec<Point> = (0..NUM_LANDMARKS).map(|k| ann.landmark(k + 1).unwrap_or([0.0; 3])).collect();
    let flags: Vec<bool> = (0..NUM_LANDMARKS).map(|k| ann.landmark(k + 1).is_some()).collect();
    let report = aggregate(&[ModelResult::new(&ann, &positions, &flags).unwrap()], 1.0);
    let r = dir.path().join("r.csv");
    write_report_csv(&r, &report).unwrap();
    let text = fs::read_to_string(&r).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[1], format!("{},1,1,1,0,100,70,0,0,10", ann.dentition_type().code()));
    assert!(lines[3].starts_with("micro,1,1,1,0,100,70"));
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = ArchSpec::new(Arch::Upper, 8);
    spec.points_per_tooth = 10;
    spec.gingiva_points = 10;
    let s = generate_arch(&spec).unwrap();
    save_dataset_entry(dir.path(), &s.cloud, &s.annotation).unwrap();
    let loaded = load_dataset_dir(dir.path()).unwrap();
    assert_eq!(loaded.len(), 1);
    assert_eq!(loaded[0].cloud, s.cloud);
    assert_eq!(loaded[0].annotation, s.annotation);
    let ply = load_cloud_file(&dir.path().join(format!("{}.ply", s.annotation.model_id))).unwrap();
    assert_eq!(ply.arch, Some(Arch::Upper));
}
