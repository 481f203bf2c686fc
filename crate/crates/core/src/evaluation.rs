//! Presence confusion, F1, MEDE and MSR with per-type, macro and micro
//! aggregation, plus an inference timing harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dental::{DentalAnnotation, DentitionType, LANDMARKS_PER_TOOTH, NUM_LANDMARKS, NUM_TEETH};
use crate::geometry::{distance, Point};
use crate::heatmap::annotation_targets;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("expected {expected} flags, got {found}")]
    Length { expected: usize, found: usize },
    #[error("nothing to evaluate: {0}")]
    Empty(&'static str),
}

/// Landmark-level (or tooth-level) presence outcomes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn count_outcomes(pred: &[bool], gt: &[bool]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (g, p) {
            (true, true) => c.tp += 1,
            (false, true) => c.fp += 1,
            (true, false) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Landmark outcomes from predicted in-mesh flags and ground-truth existence.
pub fn confusion(pred_in_mesh: &[bool], gt_present: &[bool]) -> Result<ConfusionCounts, EvalError> {
    for len in [pred_in_mesh.len(), gt_present.len()] {
        if len != NUM_LANDMARKS {
            return Err(EvalError::Length {
                expected: NUM_LANDMARKS,
                found: len,
            });
        }
    }
    Ok(count_outcomes(pred_in_mesh, gt_present))
}

/// Tooth outcomes: a tooth is predicted present only when all five of its
/// landmarks are predicted inside the mesh.
pub fn tooth_confusion(pred_in_mesh: &[bool], gt_teeth: &[bool]) -> Result<ConfusionCounts, EvalError> {
    if pred_in_mesh.len() != NUM_LANDMARKS {
        return Err(EvalError::Length {
            expected: NUM_LANDMARKS,
            found: pred_in_mesh.len(),
        });
    }
    if gt_teeth.len() != NUM_TEETH {
        return Err(EvalError::Length {
            expected: NUM_TEETH,
            found: gt_teeth.len(),
        });
    }
    let pred: Vec<bool> = pred_in_mesh
        .chunks(LANDMARKS_PER_TOOTH)
        .map(|c| c.iter().all(|&f| f))
        .collect();
    Ok(count_outcomes(&pred, gt_teeth))
}

/// `2·TP / (2·TP + FP + FN)`, and 1 when there are no positives at all.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    }
}

fn tp_distances(pred: &[Point], gt: &[Point], tp: &[bool]) -> Vec<f64> {
    pred.iter()
        .zip(gt)
        .zip(tp)
        .filter(|(_, &t)| t)
        .map(|((p, g), _)| distance(p, g))
        .collect()
}

/// Mean Euclidean distance over true positives; `None` without any.
pub fn mede(pred: &[Point], gt: &[Point], tp: &[bool]) -> Option<f64> {
    mean_distance(&tp_distances(pred, gt, tp))
}

/// Percentage of true positives within `radius` (inclusive); `None`
/// without any true positive.
pub fn msr(pred: &[Point], gt: &[Point], tp: &[bool], radius: f64) -> Option<f64> {
    success_ratio(&tp_distances(pred, gt, tp), radius)
}

fn mean_distance(d: &[f64]) -> Option<f64> {
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

fn success_ratio(d: &[f64], radius: f64) -> Option<f64> {
    (!d.is_empty()).then(|| 100.0 * d.iter().filter(|&&x| x <= radius).count() as f64 / d.len() as f64)
}

/// Evaluation inputs for one model, all in the same coordinate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelResult {
    pub model_id: String,
    pub dentition_type: DentitionType,
    pub confusion: ConfusionCounts,
    pub tooth_confusion: ConfusionCounts,
    /// Prediction error of each true-positive landmark, in landmark order.
    pub tp_distances: Vec<f64>,
}

impl ModelResult {
    /// Score decoded predictions against an annotation.
    pub fn new(annotation: &DentalAnnotation, positions: &[Point], in_mesh: &[bool]) -> Result<Self, EvalError> {
        if positions.len() != NUM_LANDMARKS {
            return Err(EvalError::Length {
                expected: NUM_LANDMARKS,
                found: positions.len(),
            });
        }
        let gt = annotation_targets(annotation);
        let present: Vec<bool> = gt.iter().map(Option::is_some).collect();
        let confusion = confusion(in_mesh, &present)?;
        let tooth_confusion = tooth_confusion(in_mesh, &annotation.presence())?;
        let tp_distances = (0..NUM_LANDMARKS)
            .filter_map(|k| match gt[k] {
                Some(g) if in_mesh[k] => Some(distance(&positions[k], &g)),
                _ => None,
            })
            .collect();
        Ok(Self {
            model_id: annotation.model_id.clone(),
            dentition_type: annotation.dentition_type(),
            confusion,
            tooth_confusion,
            tp_distances,
        })
    }
}

/// Metrics of one group of models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMetrics {
    pub models: usize,
    pub landmarks: ConfusionCounts,
    pub teeth: ConfusionCounts,
    pub f1: f64,
    pub tooth_f1: f64,
    pub mede: Option<f64>,
    pub msr: Option<f64>,
}

fn group_metrics<'a>(results: impl Iterator<Item = &'a ModelResult>, radius: f64) -> GroupMetrics {
    let mut models = 0;
    let mut landmarks = ConfusionCounts::default();
    let mut teeth = ConfusionCounts::default();
    let mut distances = Vec::new();
    for r in results {
        models += 1;
        landmarks.add(&r.confusion);
        teeth.add(&r.tooth_confusion);
        distances.extend_from_slice(&r.tp_distances);
    }
    GroupMetrics {
        models,
        landmarks,
        teeth,
        f1: f1(&landmarks),
        tooth_f1: f1(&teeth),
        mede: mean_distance(&distances),
        msr: success_ratio(&distances, radius),
    }
}

/// Macro averages over the dentition types present in the evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroMetrics {
    pub f1: f64,
    pub tooth_f1: f64,
    pub mede: Option<f64>,
    pub msr: Option<f64>,
    /// Types with models but no true positives, left out of the MEDE/MSR mean.
    pub excluded: Vec<DentitionType>,
}

/// Per-type, macro and micro metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub radius: f64,
    /// One entry per type with at least one model, in table order.
    pub per_type: Vec<(DentitionType, GroupMetrics)>,
    pub macro_avg: MacroMetrics,
    pub micro_avg: GroupMetrics,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Aggregate per-model results. Micro pools all landmarks; macro is the
/// unweighted mean over the types present.
pub fn aggregate(results: &[ModelResult], radius: f64) -> MetricsReport {
    let per_type: Vec<(DentitionType, GroupMetrics)> = DentitionType::ALL
        .iter()
        .filter_map(|&ty| {
            let m = group_metrics(results.iter().filter(|r| r.dentition_type == ty), radius);
            (m.models > 0).then_some((ty, m))
        })
        .collect();
    let collect = |f: fn(&GroupMetrics) -> Option<f64>| per_type.iter().filter_map(|(_, m)| f(m)).collect::<Vec<_>>();
    let macro_avg = MacroMetrics {
        f1: mean(&collect(|m| Some(m.f1))).unwrap_or(1.0),
        tooth_f1: mean(&collect(|m| Some(m.tooth_f1))).unwrap_or(1.0),
        mede: mean(&collect(|m| m.mede)),
        msr: mean(&collect(|m| m.msr)),
        excluded: per_type.iter().filter(|(_, m)| m.mede.is_none()).map(|(t, _)| *t).collect(),
    };
    MetricsReport {
        radius,
        per_type,
        macro_avg,
        micro_avg: group_metrics(results.iter(), radius),
    }
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl MetricsReport {
    /// Rows of `(label, models, f1, tooth_f1, mede, msr)` in table order:
    /// each type, then macro and micro averages.
    pub fn rows(&self) -> Vec<(String, usize, f64, f64, Option<f64>, Option<f64>)> {
        let mut rows: Vec<_> = self
            .per_type
            .iter()
            .map(|(t, m)| (t.code(), m.models, m.f1, m.tooth_f1, m.mede, m.msr))
            .collect();
        let a = &self.macro_avg;
        rows.push(("macro".into(), self.micro_avg.models, a.f1, a.tooth_f1, a.mede, a.msr));
        let m = &self.micro_avg;
        rows.push(("micro".into(), m.models, m.f1, m.tooth_f1, m.mede, m.msr));
        rows
    }

    /// Fixed-width text table.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<8}{:>8}{:>10}{:>10}{:>11}{:>10}\n",
            "type", "models", "F1", "tooth F1", "MEDE(mm)", "MSR(%)"
        );
        for (label, models, f, tf, d, s) in self.rows() {
            out += &format!(
                "{label:<8}{models:>8}{:>10}{:>10}{:>11}{:>10}\n",
                format!("{f:.4}"),
                format!("{tf:.4}"),
                cell(d, 3),
                cell(s, 1)
            );
        }
        out
    }
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingStats {
    pub mean: f64,
    pub std: f64,
    pub samples: usize,
}

pub fn timing_stats(seconds: &[f64]) -> Result<TimingStats, EvalError> {
    let mean = mean(seconds).ok_or(EvalError::Empty("no timings"))?;
    let var = seconds.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / seconds.len() as f64;
    Ok(TimingStats {
        mean,
        std: var.sqrt(),
        samples: seconds.len(),
    })
}

/// Inference timing over a dataset at batch size 1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub device: String,
    pub warmup: usize,
    pub reps: usize,
    pub stats: TimingStats,
}

impl TimingReport {
    pub fn summary(&self) -> String {
        format!(
            "{}: {:.4} ± {:.4} s per model ({} timed runs, {} warm-up)",
            self.device, self.stats.mean, self.stats.std, self.stats.samples, self.warmup
        )
    }
}

/// Time `run` on every item: `warmup` discarded calls, then `reps` timed
/// calls each. Strictly sequential.
pub fn benchmark_inference<T, E>(
    items: &[T],
    warmup: usize,
    reps: usize,
    device: &str,
    mut run: impl FnMut(&T) -> Result<(), E>,
) -> Result<TimingReport, BenchError<E>> {
    if items.is_empty() {
        return Err(BenchError::Eval(EvalError::Empty("benchmark dataset")));
    }
    if reps == 0 {
        return Err(BenchError::Eval(EvalError::Empty("zero repetitions")));
    }
    let mut times = Vec::with_capacity(items.len() * reps);
    for item in items {
        for _ in 0..warmup {
            run(item).map_err(BenchError::Run)?;
        }
        for _ in 0..reps {
            let start = Instant::now();
            run(item).map_err(BenchError::Run)?;
            times.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(TimingReport {
        device: device.to_string(),
        warmup,
        reps,
        stats: timing_stats(&times).map_err(BenchError::Eval)?,
    })
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError<E> {
    #[error(transparent)]
    Eval(EvalError),
    #[error("inference failed: {0}")]
    Run(E),
}
