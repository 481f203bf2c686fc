//! End-to-end workflows over files: dataset generation, preprocessing,
//! training, prediction, evaluation and inference timing.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dental::{Arch, LandmarkKind, ToothId, NUM_LANDMARKS};
use crate::evaluation::{aggregate, benchmark_inference, BenchError, EvalError, MetricsReport, ModelResult, TimingReport};
use crate::geometry::{preprocess, GeometryError, Point, PointCloud};
use crate::heatmap::{decode_landmarks, HeatmapError};
use crate::io::{
    load_annotation, load_cloud_file, load_dataset_dir, load_prediction, save_cloud_file, save_dataset_entry,
    save_prediction, save_split, write_history_csv, write_report_csv, CloudFile, DatasetEntry, IoError,
    LandmarkPrediction, PredictionFile, SplitFile,
};
use crate::network::{
    charnet_forward, init_params, load_checkpoint, save_checkpoint, CheckpointError, ForwardOptions, ModelParams,
    NetworkError,
};
use crate::synthetic::{generate_dataset, DatasetOptions, DentitionMix, SyntheticError};
use crate::training::{
    split_dataset, train, EpochRecord, SplitItem, TrainConfig, TrainError, TrainHistory, TrainingExample, SPLIT_RATIOS,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{path}: {source}")]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{0}")]
    Input(String),
}

fn checkpoint_error(path: &Path) -> impl Fn(CheckpointError) -> PipelineError + '_ {
    move |source| PipelineError::Checkpoint {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|source| {
        IoError::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

/// Dentition-type mixture of a generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixKind {
    /// Equal share of every type.
    Uniform,
    /// Shares proportional to the reference clinical dataset.
    Weighted,
}

impl MixKind {
    pub fn mix(self) -> DentitionMix {
        match self {
            MixKind::Uniform => DentitionMix::uniform(),
            MixKind::Weighted => DentitionMix::weighted(),
        }
    }
}

/// Generate a synthetic dataset into `out/{train,val,test}` with a
/// patient-disjoint stratified split recorded in `out/split.json`.
pub fn generate(
    out: &Path,
    count: usize,
    mix: &DentitionMix,
    seed: u64,
    options: &DatasetOptions,
) -> Result<SplitFile, PipelineError> {
    let samples = generate_dataset(count, mix, seed, options)?;
    let items: Vec<SplitItem> = samples
        .iter()
        .map(|s| SplitItem {
            patient_id: s.annotation.patient_id.clone(),
            dentition_type: s.dentition_type(),
        })
        .collect();
    let split = split_dataset(&items, SPLIT_RATIOS, seed)?;
    let mut file = SplitFile::default();
    for (name, indices, ids) in [
        ("train", &split.train, &mut file.train),
        ("val", &split.val, &mut file.val),
        ("test", &split.test, &mut file.test),
    ] {
        let dir = out.join(name);
        create_dir(&dir)?;
        for &i in indices {
            let s = &samples[i];
            save_dataset_entry(&dir, &s.cloud, &s.annotation)?;
            ids.push(s.annotation.model_id.clone());
        }
    }
    save_split(&out.join("split.json"), &file)?;
    Ok(file)
}

/// Center, downsample to `points` mesh points and append the null point.
/// The output keeps the centroid and arch as PLY metadata.
pub fn preprocess_file(input: &Path, output: &Path, points: usize, seed: u64) -> Result<CloudFile, PipelineError> {
    let raw = load_cloud_file(input)?;
    if raw.cloud.has_null() {
        return Err(PipelineError::Input(format!("{}: cloud is already preprocessed", input.display())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pre = preprocess(&raw.cloud, points, &mut rng)?;
    let file = CloudFile {
        cloud: pre.cloud,
        centroid: Some(pre.centroid),
        arch: raw.arch,
    };
    save_cloud_file(output, &file)?;
    Ok(file)
}

/// Preprocess dataset entries into training examples. Each entry draws its
/// downsampling from its own stream so results do not depend on order.
pub fn prepare_examples(
    entries: &[DatasetEntry],
    points: usize,
    sigma: f64,
    seed: u64,
) -> Result<Vec<TrainingExample>, PipelineError> {
    entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            Ok(TrainingExample::prepare(&e.cloud, &e.annotation, points, sigma, &mut rng)?)
        })
        .collect()
}

/// Training and validation entries of a data directory: its `train/` and
/// `val/` subdirectories when `train/` exists, otherwise the directory
/// itself with no validation set.
pub fn load_training_data(data: &Path) -> Result<(Vec<DatasetEntry>, Vec<DatasetEntry>), PipelineError> {
    let train_dir = data.join("train");
    if !train_dir.is_dir() {
        return Ok((load_dataset_dir(data)?, Vec::new()));
    }
    let val_dir = data.join("val");
    let val = if val_dir.is_dir() { load_dataset_dir(&val_dir)? } else { Vec::new() };
    Ok((load_dataset_dir(&train_dir)?, val))
}

/// Path of the history CSV written next to a checkpoint.
pub fn history_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".history.csv");
    PathBuf::from(name)
}

/// Result of a training run on files.
#[derive(Debug, Clone)]
pub struct TrainSummary {
    /// Epoch whose parameters were saved: the best validated one, or the
    /// last one without validation.
    pub saved_epoch: usize,
    pub params: ModelParams,
    pub history: TrainHistory,
    pub seconds: f64,
}

/// Train on a data directory and write the checkpoint and its history CSV.
/// `baseline` drops the presence head and conditioning.
pub fn train_dir(
    data: &Path,
    config: &TrainConfig,
    out: &Path,
    baseline: bool,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainSummary, PipelineError> {
    let mut config = config.clone();
    if baseline {
        config.arch = config.arch.baseline();
    }
    config.validate()?;
    let (train_entries, val_entries) = load_training_data(data)?;
    if train_entries.is_empty() {
        return Err(PipelineError::Input(format!("{}: no training samples", data.display())));
    }
    let train_set = prepare_examples(&train_entries, config.points, config.sigma, config.seed)?;
    let val_set = prepare_examples(&val_entries, config.points, config.sigma, config.seed ^ u64::MAX)?;
    let params = init_params(&config.arch, config.seed)?;
    let outcome = train(params, &train_set, &val_set, &config, |record, _| {
        progress(record);
        Ok(())
    })?;
    let (saved_epoch, params) = outcome.best.unwrap_or((config.epochs, outcome.params));
    save_checkpoint(out, &params).map_err(checkpoint_error(out))?;
    write_history_csv(&history_path(out), &outcome.history)?;
    Ok(TrainSummary {
        saved_epoch,
        params,
        history: outcome.history,
        seconds: outcome.seconds,
    })
}

/// How raw clouds are preprocessed before prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    /// Mesh points after downsampling (ignored for preprocessed clouds).
    pub points: usize,
    pub seed: u64,
    /// Arch used for tooth labels when the cloud does not record one.
    pub arch: Option<Arch>,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self {
            points: TrainConfig::default().points,
            seed: 0,
            arch: None,
        }
    }
}

/// A cloud ready for the network and the translation back to the
/// original frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCloud {
    pub cloud: PointCloud,
    pub centroid: Point,
    pub arch: Option<Arch>,
}

/// Preprocess a loaded cloud unless it already carries a null point.
pub fn prepare_cloud(file: &CloudFile, opts: &PredictOptions) -> Result<PreparedCloud, PipelineError> {
    if file.cloud.has_null() {
        return Ok(PreparedCloud {
            cloud: file.cloud.clone(),
            centroid: file.centroid.unwrap_or([0.0; 3]),
            arch: opts.arch.or(file.arch),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pre = preprocess(&file.cloud, opts.points, &mut rng)?;
    Ok(PreparedCloud {
        cloud: pre.cloud,
        centroid: pre.centroid,
        arch: opts.arch.or(file.arch),
    })
}

/// Landmark predictions in the original coordinate frame.
pub fn predict_cloud(params: &ModelParams, prepared: &PreparedCloud, model_id: &str) -> Result<PredictionFile, PipelineError> {
    let arch = prepared
        .arch
        .ok_or_else(|| PipelineError::Input("the cloud does not record its arch; pass it explicitly".into()))?;
    let desc = params.descriptor();
    if desc.num_landmarks() != NUM_LANDMARKS {
        return Err(PipelineError::Input(format!(
            "checkpoint predicts {} landmarks, expected {NUM_LANDMARKS}",
            desc.num_landmarks()
        )));
    }
    let out = charnet_forward(params, &prepared.cloud, ForwardOptions::infer())?;
    let decoded = decode_landmarks(out.decodable(), &prepared.cloud)?;
    let c = prepared.centroid;
    let landmarks = (0..NUM_LANDMARKS)
        .map(|k| {
            let t = k / LandmarkKind::ALL.len();
            let p = decoded.positions[k];
            LandmarkPrediction {
                tooth: ToothId::from_index(arch, t + 1).expect("tooth index").label(),
                kind: LandmarkKind::ALL[k % LandmarkKind::ALL.len()],
                position: [p[0] + c[0], p[1] + c[1], p[2] + c[2]],
                in_mesh: decoded.in_mesh[k],
                presence_prob: out.presence.as_ref().map(|p| p[t]),
            }
        })
        .collect();
    Ok(PredictionFile {
        model_id: model_id.to_string(),
        arch,
        landmarks,
    })
}

/// Model id of a cloud file: its file stem.
pub fn model_id_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Load a checkpoint, predict one cloud file and write the prediction JSON.
pub fn predict_file(checkpoint: &Path, input: &Path, output: &Path, opts: &PredictOptions) -> Result<PredictionFile, PipelineError> {
    let params = load_checkpoint(checkpoint, None).map_err(checkpoint_error(checkpoint))?;
    let file = load_cloud_file(input)?;
    let prepared = prepare_cloud(&file, opts)?;
    let pred = predict_cloud(&params, &prepared, &model_id_of(input))?;
    save_prediction(output, &pred)?;
    Ok(pred)
}

fn json_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    Ok(files)
}

/// Score every prediction in `pred_dir` against the annotation with the
/// same model id in `gt_dir`, write the report CSV and return it.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, out: &Path, radius: f64) -> Result<MetricsReport, PipelineError> {
    if !(radius.is_finite() && radius > 0.0) {
        return Err(PipelineError::Input(format!("radius must be positive, got {radius}")));
    }
    let mut results = Vec::new();
    for path in json_files(pred_dir)? {
        let pred = load_prediction(&path)?;
        let gt_path = gt_dir.join(format!("{}.json", pred.model_id));
        if !gt_path.is_file() {
            return Err(PipelineError::Input(format!(
                "{}: no ground truth for model {}",
                gt_dir.display(),
                pred.model_id
            )));
        }
        let gt = load_annotation(&gt_path)?;
        if gt.arch != pred.arch {
            return Err(PipelineError::Input(format!(
                "{}: predicted arch {} differs from the annotated {}",
                path.display(),
                pred.arch.as_str(),
                gt.arch.as_str()
            )));
        }
        let (positions, in_mesh) = pred.flags();
        results.push(ModelResult::new(&gt, &positions, &in_mesh)?);
    }
    if results.is_empty() {
        return Err(PipelineError::Input(format!("{}: no prediction files", pred_dir.display())));
    }
    let report = aggregate(&results, radius);
    write_report_csv(out, &report)?;
    Ok(report)
}

/// Time single-cloud inference (forward pass and decoding) over every
/// cloud of a data directory.
pub fn benchmark(
    checkpoint: &Path,
    data: &Path,
    warmup: usize,
    reps: usize,
    opts: &PredictOptions,
) -> Result<TimingReport, PipelineError> {
    let params = load_checkpoint(checkpoint, None).map_err(checkpoint_error(checkpoint))?;
    let dir = if data.join("test").is_dir() { data.join("test") } else { data.to_path_buf() };
    let mut clouds = Vec::new();
    for entry in load_dataset_dir(&dir)? {
        let file = CloudFile::plain(entry.cloud);
        clouds.push(prepare_cloud(&file, opts)?.cloud);
    }
    let run = |pc: &PointCloud| -> Result<(), PipelineError> {
        let out = charnet_forward(&params, pc, ForwardOptions::infer())?;
        decode_landmarks(out.decodable(), pc)?;
        Ok(())
    };
    benchmark_inference(&clouds, warmup, reps, "cpu", run).map_err(|e| match e {
        BenchError::Eval(e) => e.into(),
        BenchError::Run(e) => e,
    })
}

#[cfg(test)]
mod tests;
