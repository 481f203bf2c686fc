//! File formats: point clouds (ASCII PLY, OBJ, XYZ), annotation and
//! prediction JSON, training configuration, history and report CSV.
//!
//! Coordinates are millimetres throughout; no unit field is stored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dental::{
    classify_dentition, Arch, DentalAnnotation, DentitionType, LandmarkKind, ToothId, ToothLandmarks, NUM_LANDMARKS,
    NUM_TEETH,
};
use crate::evaluation::MetricsReport;
use crate::geometry::{GeometryError, Point, PointCloud};
use crate::training::{TrainConfig, TrainHistory};

/// PLY comment marking the last vertex as the null point.
pub const NULL_COMMENT: &str = "charm null_point";
/// PLY comment prefix carrying the centering translation.
pub const CENTROID_COMMENT: &str = "charm centroid";
/// PLY comment prefix naming the dental arch.
pub const ARCH_COMMENT: &str = "charm arch";

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}: at {json_path}: {message}")]
    Schema {
        path: PathBuf,
        json_path: String,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
    #[error("{path}: unsupported point-cloud format (expected .ply, .obj or .xyz)")]
    UnknownFormat { path: PathBuf },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl IoError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    fn parse(path: &Path, line: usize, message: impl Into<String>) -> Self {
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Whether the error stems from file contents rather than file access.
    pub fn is_format_error(&self) -> bool {
        !matches!(self, IoError::Io { .. })
    }
}

fn read_text(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|e| IoError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    fs::write(path, text).map_err(|e| IoError::io(path, e))
}

/// Supported point-cloud encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Obj,
    Xyz,
}

impl CloudFormat {
    /// Format implied by a file extension.
    pub fn from_path(path: &Path) -> Result<Self, IoError> {
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        match ext.as_deref() {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("obj") => Ok(CloudFormat::Obj),
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            _ => Err(IoError::UnknownFormat {
                path: path.to_path_buf(),
            }),
        }
    }
}

/// A point cloud with the metadata stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFile {
    pub cloud: PointCloud,
    /// Translation removed by centering, when recorded.
    pub centroid: Option<Point>,
    /// Dental arch, when recorded.
    pub arch: Option<Arch>,
}

impl CloudFile {
    /// A cloud without metadata.
    pub fn plain(cloud: PointCloud) -> Self {
        Self {
            cloud,
            centroid: None,
            arch: None,
        }
    }
}

fn parse_coords(path: &Path, line: usize, fields: &[&str]) -> Result<Point, IoError> {
    if fields.len() < 3 {
        return Err(IoError::parse(path, line, format!("expected 3 coordinates, found {}", fields.len())));
    }
    let mut p = [0.0; 3];
    for (a, f) in fields[..3].iter().enumerate() {
        let v: f64 = f
            .parse()
            .map_err(|_| IoError::parse(path, line, format!("invalid number {f:?}")))?;
        if !v.is_finite() {
            return Err(IoError::parse(path, line, format!("non-finite coordinate {f:?}")));
        }
        p[a] = v;
    }
    Ok(p)
}

fn finish_cloud(path: &Path, points: Vec<Point>, has_null: bool) -> Result<PointCloud, IoError> {
    if points.is_empty() {
        return Err(IoError::invalid(path, "no vertices"));
    }
    let built = if has_null {
        PointCloud::with_null(points)
    } else {
        PointCloud::new(points)
    };
    built.map_err(|e: GeometryError| IoError::invalid(path, e.to_string()))
}

fn parse_ply(path: &Path, text: &str) -> Result<CloudFile, IoError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(IoError::parse(path, 1, "missing 'ply' magic line")),
    }
    let mut vertices: Option<usize> = None;
    let mut in_vertex = false;
    let mut props: Vec<String> = Vec::new();
    let mut has_null = false;
    let mut centroid = None;
    let mut arch = None;
    let mut header_end = None;
    for (n, line) in lines.by_ref() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.first().copied() {
            Some("format") => {
                if fields.get(1) != Some(&"ascii") {
                    return Err(IoError::parse(path, n, "only ASCII PLY is supported"));
                }
            }
            Some("comment") | Some("obj_info") => {
                let rest = line.split_once(char::is_whitespace).map_or("", |(_, r)| r.trim());
                if rest == NULL_COMMENT {
                    has_null = true;
                } else if let Some(c) = rest.strip_prefix(CENTROID_COMMENT) {
                    let f: Vec<&str> = c.split_whitespace().collect();
                    centroid = Some(parse_coords(path, n, &f)?);
                } else if let Some(a) = rest.strip_prefix(ARCH_COMMENT) {
                    arch = Some(match a.trim() {
                        "upper" => Arch::Upper,
                        "lower" => Arch::Lower,
                        other => return Err(IoError::parse(path, n, format!("unknown arch {other:?}"))),
                    });
                }
            }
            Some("element") => {
                in_vertex = fields.get(1) == Some(&"vertex");
                if in_vertex {
                    if vertices.is_some() {
                        return Err(IoError::parse(path, n, "duplicate vertex element"));
                    }
                    let count = fields
                        .get(2)
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| IoError::parse(path, n, "invalid vertex count"))?;
                    vertices = Some(count);
                } else if vertices.is_none() {
                    return Err(IoError::parse(path, n, "elements before the vertex element are not supported"));
                }
            }
            Some("property") => {
                if in_vertex {
                    if fields.get(1) == Some(&"list") {
                        return Err(IoError::parse(path, n, "list properties on vertices are not supported"));
                    }
                    let name = fields.get(2).ok_or_else(|| IoError::parse(path, n, "property without a name"))?;
                    props.push(name.to_string());
                }
            }
            Some("end_header") => {
                header_end = Some(n);
                break;
            }
            None => {}
            Some(other) => return Err(IoError::parse(path, n, format!("unexpected header keyword {other:?}"))),
        }
    }
    let end = header_end.ok_or_else(|| IoError::parse(path, text.lines().count(), "missing end_header"))?;
    let count = vertices.ok_or_else(|| IoError::parse(path, end, "no vertex element"))?;
    let index = |name: &str| {
        props
            .iter()
            .position(|p| p == name)
            .ok_or_else(|| IoError::parse(path, end, format!("vertex property {name} missing")))
    };
    let cols = [index("x")?, index("y")?, index("z")?];
    let mut points = Vec::with_capacity(count);
    for (n, line) in lines {
        if points.len() == count {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != props.len() {
            return Err(IoError::parse(
                path,
                n,
                format!("expected {} values, found {}", props.len(), fields.len()),
            ));
        }
        points.push(parse_coords(path, n, &cols.map(|c| fields[c]))?);
    }
    if points.len() != count {
        return Err(IoError::parse(
            path,
            text.lines().count(),
            format!("header declares {count} vertices, found {}", points.len()),
        ));
    }
    Ok(CloudFile {
        cloud: finish_cloud(path, points, has_null)?,
        centroid,
        arch,
    })
}

fn parse_obj(path: &Path, text: &str) -> Result<CloudFile, IoError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.first() == Some(&"v") {
            points.push(parse_coords(path, i + 1, &fields[1..])?);
        }
    }
    Ok(CloudFile::plain(finish_cloud(path, points, false)?))
}

fn parse_xyz(path: &Path, text: &str) -> Result<CloudFile, IoError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(|c: char| c.is_whitespace() || c == ',').filter(|f| !f.is_empty()).collect();
        points.push(parse_coords(path, i + 1, &fields)?);
    }
    Ok(CloudFile::plain(finish_cloud(path, points, false)?))
}

/// Read a cloud and its PLY metadata. Vertices keep file order; faces and
/// extra vertex properties are ignored.
pub fn load_cloud_file(path: &Path) -> Result<CloudFile, IoError> {
    let format = CloudFormat::from_path(path)?;
    let text = read_text(path)?;
    match format {
        CloudFormat::Ply => parse_ply(path, &text),
        CloudFormat::Obj => parse_obj(path, &text),
        CloudFormat::Xyz => parse_xyz(path, &text),
    }
}

pub fn load_pointcloud(path: &Path) -> Result<PointCloud, IoError> {
    Ok(load_cloud_file(path)?.cloud)
}

/// ASCII PLY text. Coordinates use the shortest representation that reads
/// back to the same value.
pub fn ply_string(file: &CloudFile) -> String {
    let cloud = &file.cloud;
    let mut out = String::from("ply\nformat ascii 1.0\n");
    if cloud.has_null() {
        let _ = writeln!(out, "comment {NULL_COMMENT}");
    }
    if let Some(c) = file.centroid {
        let _ = writeln!(out, "comment {CENTROID_COMMENT} {} {} {}", c[0], c[1], c[2]);
    }
    if let Some(a) = file.arch {
        let _ = writeln!(out, "comment {ARCH_COMMENT} {}", a.as_str());
    }
    let _ = write!(
        out,
        "element vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    for p in cloud.points() {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    out
}

/// Write a cloud without metadata in the format implied by the extension.
pub fn save_pointcloud(path: &Path, cloud: &PointCloud) -> Result<(), IoError> {
    save_cloud_file(path, &CloudFile::plain(cloud.clone()))
}

/// Write a cloud in the format implied by the extension. The null-point
/// flag, centroid and arch are kept only by PLY.
pub fn save_cloud_file(path: &Path, file: &CloudFile) -> Result<(), IoError> {
    let cloud = &file.cloud;
    let text = match CloudFormat::from_path(path)? {
        CloudFormat::Ply => ply_string(file),
        CloudFormat::Obj => cloud.points().iter().fold(String::new(), |mut s, p| {
            let _ = writeln!(s, "v {} {} {}", p[0], p[1], p[2]);
            s
        }),
        CloudFormat::Xyz => cloud.points().iter().fold(String::new(), |mut s, p| {
            let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
            s
        }),
    };
    write_text(path, &text)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToothEntry {
    present: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    landmarks: Option<BTreeMap<LandmarkKind, [f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationDoc {
    model_id: String,
    patient_id: String,
    arch: Arch,
    dentition_type: DentitionType,
    teeth: BTreeMap<String, ToothEntry>,
}

/// Annotation JSON text.
pub fn annotation_to_json(ann: &DentalAnnotation) -> String {
    let teeth = ToothId::all(ann.arch)
        .zip(&ann.teeth)
        .map(|(id, lm)| {
            let entry = ToothEntry {
                present: lm.is_some(),
                landmarks: lm.map(|lm| LandmarkKind::ALL.iter().zip(lm).map(|(k, p)| (*k, p)).collect()),
            };
            (id.label(), entry)
        })
        .collect();
    let doc = AnnotationDoc {
        model_id: ann.model_id.clone(),
        patient_id: ann.patient_id.clone(),
        arch: ann.arch,
        dentition_type: ann.dentition_type(),
        teeth,
    };
    serde_json::to_string_pretty(&doc).expect("annotation serializes")
}

/// Parse and validate annotation JSON.
pub fn annotation_from_json(path: &Path, text: &str) -> Result<DentalAnnotation, IoError> {
    let schema = |json_path: String, message: String| IoError::Schema {
        path: path.to_path_buf(),
        json_path,
        message,
    };
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: AnnotationDoc =
        serde_path_to_error::deserialize(de).map_err(|e| schema(e.path().to_string(), e.inner().to_string()))?;
    let mut teeth: [Option<ToothLandmarks>; NUM_TEETH] = [None; NUM_TEETH];
    let mut seen = [false; NUM_TEETH];
    for (label, entry) in &doc.teeth {
        let at = format!("teeth.{label}");
        let id = ToothId::parse_label(label).map_err(|e| schema(at.clone(), e.to_string()))?;
        if id.arch != doc.arch {
            return Err(schema(at, format!("tooth of the {} arch in a {} annotation", id.arch.as_str(), doc.arch.as_str())));
        }
        let t = id.index() - 1;
        seen[t] = true;
        match (entry.present, &entry.landmarks) {
            (true, Some(lm)) => {
                let mut out = [[0.0; 3]; 5];
                for (g, kind) in LandmarkKind::ALL.iter().enumerate() {
                    let p = lm
                        .get(kind)
                        .ok_or_else(|| schema(format!("{at}.landmarks"), format!("missing {}", kind.as_str())))?;
                    if p.iter().any(|c| !c.is_finite()) {
                        return Err(schema(format!("{at}.landmarks.{}", kind.as_str()), "non-finite coordinate".into()));
                    }
                    out[g] = *p;
                }
                teeth[t] = Some(out);
            }
            (true, None) => return Err(schema(at, "present tooth without landmarks".into())),
            (false, Some(_)) => return Err(schema(at, "absent tooth with landmarks".into())),
            (false, None) => {}
        }
    }
    if let Some(t) = seen.iter().position(|s| !s) {
        let label = ToothId::from_index(doc.arch, t + 1).expect("index").label();
        return Err(schema("teeth".into(), format!("missing entry for {label}")));
    }
    let ann = DentalAnnotation {
        model_id: doc.model_id,
        patient_id: doc.patient_id,
        arch: doc.arch,
        teeth,
    };
    let derived = classify_dentition(&ann.presence());
    if derived != doc.dentition_type {
        return Err(schema(
            "dentition_type".into(),
            format!(
                "declared {} but classify_dentition gives {} for the listed teeth",
                doc.dentition_type, derived
            ),
        ));
    }
    Ok(ann)
}

pub fn save_annotation(path: &Path, ann: &DentalAnnotation) -> Result<(), IoError> {
    write_text(path, &annotation_to_json(ann))
}

pub fn load_annotation(path: &Path) -> Result<DentalAnnotation, IoError> {
    annotation_from_json(path, &read_text(path)?)
}

/// One predicted landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkPrediction {
    pub tooth: String,
    pub kind: LandmarkKind,
    pub position: [f64; 3],
    pub in_mesh: bool,
    /// Predicted presence probability of the tooth; absent for models
    /// without a presence head.
    pub presence_prob: Option<f64>,
}

/// Prediction JSON document: exactly one entry per landmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionFile {
    pub model_id: String,
    pub arch: Arch,
    pub landmarks: Vec<LandmarkPrediction>,
}

impl PredictionFile {
    /// Positions and in-mesh flags in landmark order.
    pub fn flags(&self) -> (Vec<Point>, Vec<bool>) {
        (
            self.landmarks.iter().map(|l| l.position).collect(),
            self.landmarks.iter().map(|l| l.in_mesh).collect(),
        )
    }
}

pub fn save_prediction(path: &Path, pred: &PredictionFile) -> Result<(), IoError> {
    write_text(path, &serde_json::to_string_pretty(pred).expect("prediction serializes"))
}

pub fn load_prediction(path: &Path) -> Result<PredictionFile, IoError> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let pred: PredictionFile = serde_path_to_error::deserialize(de).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    if pred.landmarks.len() != NUM_LANDMARKS {
        return Err(IoError::Schema {
            path: path.to_path_buf(),
            json_path: "landmarks".into(),
            message: format!("expected {NUM_LANDMARKS} entries, found {}", pred.landmarks.len()),
        });
    }
    for (k, l) in pred.landmarks.iter().enumerate() {
        let id = ToothId::from_index(pred.arch, k / 5 + 1).expect("index");
        if l.tooth != id.label() || l.kind != LandmarkKind::ALL[k % 5] {
            return Err(IoError::Schema {
                path: path.to_path_buf(),
                json_path: format!("landmarks[{k}]"),
                message: format!("expected {} {}, found {} {}", id.label(), LandmarkKind::ALL[k % 5].as_str(), l.tooth, l.kind.as_str()),
            });
        }
    }
    Ok(pred)
}

/// Read a JSON training configuration; absent keys take their defaults.
pub fn load_train_config(path: &Path) -> Result<TrainConfig, IoError> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| IoError::Schema {
        path: path.to_path_buf(),
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn save_train_config(path: &Path, config: &TrainConfig) -> Result<(), IoError> {
    write_text(path, &serde_json::to_string_pretty(config).expect("config serializes"))
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> IoError + '_ {
    move |source| IoError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// History CSV: `epoch,lr,loss,mse,bce,val_mede,val_f1`, blanks for
/// missing values.
pub fn write_history_csv(path: &Path, history: &TrainHistory) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["epoch", "lr", "loss", "mse", "bce", "val_mede", "val_f1"]).map_err(csv_error(path))?;
    for r in &history.epochs {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.to_string(),
            r.mse.to_string(),
            opt(r.bce),
            opt(r.val_mede),
            opt(r.val_f1),
        ])
        .map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Report CSV with one row per dentition type, then macro and micro rows.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<(), IoError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error(path))?;
    w.write_record(["type", "models", "f1", "tooth_f1", "mede_mm", "msr_pct", "tp", "fp", "fn", "tn"])
        .map_err(csv_error(path))?;
    let counts = |label: &str| {
        let c = match label {
            "macro" => None,
            "micro" => Some(report.micro_avg.landmarks),
            code => report.per_type.iter().find(|(t, _)| t.code() == code).map(|(_, m)| m.landmarks),
        };
        c.map_or_else(|| vec![String::new(); 4], |c| [c.tp, c.fp, c.fn_, c.tn].map(|v| v.to_string()).to_vec())
    };
    for (label, models, f1, tooth_f1, mede, msr) in report.rows() {
        let mut row = vec![label.clone(), models.to_string(), f1.to_string(), tooth_f1.to_string(), opt(mede), opt(msr)];
        row.extend(counts(&label));
        w.write_record(&row).map_err(csv_error(path))?;
    }
    w.flush().map_err(|e| IoError::io(path, e))
}

/// Model ids of each subset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub fn save_split(path: &Path, split: &SplitFile) -> Result<(), IoError> {
    write_text(path, &serde_json::to_string_pretty(split).expect("split serializes"))
}

/// A raw cloud paired with its annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub cloud: PointCloud,
    pub annotation: DentalAnnotation,
}

/// Every `<id>.json` annotation in `dir` with its `<id>.ply` cloud, sorted
/// by file name.
pub fn load_dataset_dir(dir: &Path) -> Result<Vec<DatasetEntry>, IoError> {
    let mut names: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| IoError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|json| {
            let annotation = load_annotation(&json)?;
            let ply = json.with_extension("ply");
            let cloud = load_pointcloud(&ply)?;
            Ok(DatasetEntry { cloud, annotation })
        })
        .collect()
}

/// Write a cloud and its annotation as `<dir>/<model_id>.{ply,json}`.
pub fn save_dataset_entry(dir: &Path, cloud: &PointCloud, annotation: &DentalAnnotation) -> Result<(), IoError> {
    let file = CloudFile {
        cloud: cloud.clone(),
        centroid: None,
        arch: Some(annotation.arch),
    };
    save_cloud_file(&dir.join(format!("{}.ply", annotation.model_id)), &file)?;
    save_annotation(&dir.join(format!("{}.json", annotation.model_id)), annotation)
}

#[cfg(test)]
mod tests;
