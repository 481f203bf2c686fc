//! Losses, dataset splitting and the mini-batch training loop.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, cosine_lr, update_running_stats, AdamConfig, AdamState, AutodiffError, Tensor, BN_MOMENTUM};
use crate::dental::{DentalAnnotation, DentitionType, NUM_LANDMARKS};
use crate::evaluation::{aggregate, ModelResult};
use crate::geometry::{preprocess, GeometryError, Point, PointCloud};
use crate::heatmap::{decode_landmarks, gt_heatmaps, HeatmapError, HeatmapSet};
use crate::network::{
    build_network, forward_batch, stack_points, ArchDescriptor, ForwardOptions, LossWeights, ModelParams, NetworkError,
};

/// Default probability clamp of the presence cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite {what} at epoch {epoch}, batch {batch} (loss {loss})")]
    NonFinite {
        what: &'static str,
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("{0}")]
    Shape(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error("{0}")]
    Callback(String),
}

/// `(1/K)·Σ_k (1/N)·Σ_i (h_ki − ĥ_ki)²`.
pub fn mse_heatmap_loss(gt: &HeatmapSet, pred: &HeatmapSet) -> Result<f64, TrainError> {
    if gt.landmarks() != pred.landmarks() || gt.points() != pred.points() {
        return Err(TrainError::Shape(format!(
            "heatmap shapes differ: {}x{} vs {}x{}",
            gt.landmarks(),
            gt.points(),
            pred.landmarks(),
            pred.points()
        )));
    }
    let sum: f64 = gt.values().iter().zip(pred.values()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / gt.values().len() as f64)
}

/// Mean binary cross-entropy with predictions clamped to `[clamp, 1 − clamp]`.
pub fn bce_presence_loss(labels: &[bool], probs: &[f64], clamp: f64) -> Result<f64, TrainError> {
    if labels.len() != probs.len() || labels.is_empty() {
        return Err(TrainError::Shape(format!("{} labels for {} probabilities", labels.len(), probs.len())));
    }
    let sum: f64 = labels
        .iter()
        .zip(probs)
        .map(|(&y, &p)| {
            let p = p.clamp(clamp, 1.0 - clamp);
            if y {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-sum / labels.len() as f64)
}

/// `λ_reg·mse + λ_cls·bce`.
pub fn combined_loss(mse: f64, bce: f64, lambda_reg: f64, lambda_cls: f64) -> f64 {
    lambda_reg * mse + lambda_cls * bce
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Weight decay applied directly to the weights instead of through
    /// the gradient.
    pub decoupled_weight_decay: bool,
    pub dropout: f64,
    pub lambda_reg: f64,
    pub lambda_cls: f64,
    /// Heatmap Gaussian width, mm.
    pub sigma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bce_clamp: f64,
    /// Fit the raw heatmaps instead of the conditioned ones.
    pub mse_on_raw: bool,
    /// Mesh points per cloud after downsampling.
    pub points: usize,
    pub seed: u64,
    /// Validate every this many epochs (and always after the last one).
    pub validate_every: usize,
    /// Success radius for validation MSR, mm.
    pub radius: f64,
    pub arch: ArchDescriptor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            lr: 0.005,
            weight_decay: 0.003,
            decoupled_weight_decay: false,
            dropout: 0.5,
            lambda_reg: 0.001,
            lambda_cls: 1.0,
            sigma: 2.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bce_clamp: BCE_CLAMP,
            mse_on_raw: false,
            points: 2048,
            seed: 0,
            validate_every: 1,
            radius: 1.0,
            arch: ArchDescriptor::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if self.epochs == 0 {
            return fail("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch size must be at least 1");
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_cls >= 0.0) || !self.lambda_reg.is_finite() || !self.lambda_cls.is_finite() {
            return fail("loss weights must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if !finite_pos(self.lr) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("learning rate must be positive and weight decay non-negative");
        }
        if !finite_pos(self.sigma) || !finite_pos(self.radius) {
            return fail("sigma and radius must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && finite_pos(self.adam_eps)) {
            return fail("Adam betas must lie in [0, 1) and epsilon be positive");
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return fail("cross-entropy clamp must lie in (0, 0.5)");
        }
        if self.points < 2 {
            return fail("at least 2 points per cloud");
        }
        if self.validate_every == 0 {
            return fail("validate_every must be at least 1");
        }
        self.arch.validate()?;
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            decoupled_weight_decay: self.decoupled_weight_decay,
        }
    }

    fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda_reg: self.lambda_reg,
            lambda_cls: self.lambda_cls,
            bce_clamp: self.bce_clamp,
            mse_on_raw: self.mse_on_raw,
        }
    }
}

/// A preprocessed cloud with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    /// Centered, downsampled cloud with the null point appended.
    pub cloud: PointCloud,
    /// Translation removed by centering.
    pub centroid: Point,
    /// Annotation in the centered frame.
    pub annotation: DentalAnnotation,
    /// Ground-truth heatmaps, point-major (`points × landmarks`).
    pub heatmaps: Vec<f64>,
    /// Tooth presence labels as 0/1.
    pub presence: Vec<f64>,
}

impl TrainingExample {
    /// Preprocess a raw cloud and build its targets.
    pub fn prepare<R: Rng + ?Sized>(
        raw: &PointCloud,
        annotation: &DentalAnnotation,
        points: usize,
        sigma: f64,
        rng: &mut R,
    ) -> Result<Self, TrainError> {
        let pre = preprocess(raw, points, rng)?;
        let c = pre.centroid;
        let annotation = annotation.translated([-c[0], -c[1], -c[2]]);
        let heatmaps = gt_heatmaps(&pre.cloud, &annotation, sigma)?.to_point_major();
        let presence = annotation.presence().iter().map(|&p| f64::from(u8::from(p))).collect();
        Ok(Self {
            cloud: pre.cloud,
            centroid: c,
            annotation,
            heatmaps,
            presence,
        })
    }

    pub fn dentition_type(&self) -> DentitionType {
        self.annotation.dentition_type()
    }
}

/// Statistics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    /// Absent without the presence head.
    pub bce: Option<f64>,
    pub val_mede: Option<f64>,
    pub val_f1: Option<f64>,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Final parameters, the best validated parameters and the history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    /// Epoch and parameters with the lowest validation micro MEDE.
    pub best: Option<(usize, ModelParams)>,
    pub history: TrainHistory,
    pub seconds: f64,
}

/// Loss terms of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub bce: Option<f64>,
}

fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x6A09_E667_F3BC_C909u64;
    for &p in parts {
        h = (h ^ p).wrapping_mul(0x100_0000_01B3).rotate_left(29) ^ 0x9E37_79B9_7F4A_7C15;
    }
    ChaCha8Rng::seed_from_u64(h).random()
}

/// Forward, backward, Adam update and running-statistics update on one batch.
/// Parameters are left untouched when the loss or a gradient is not finite.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[&TrainingExample],
    config: &TrainConfig,
    lr: f64,
    seed: u64,
    position: (usize, usize),
) -> Result<StepStats, TrainError> {
    let (epoch, index) = position;
    let clouds: Vec<&PointCloud> = batch.iter().map(|e| &e.cloud).collect();
    let input = stack_points(&clouds)?;
    let k = params.descriptor().num_landmarks();
    let t = params.descriptor().num_teeth;
    let n = clouds[0].len();
    let heat: Vec<f64> = batch.iter().flat_map(|e| e.heatmaps.iter().copied()).collect();
    if heat.len() != batch.len() * n * k {
        return Err(TrainError::Shape("heatmap targets do not match the batch".into()));
    }
    let heat = Tensor::matrix(batch.len() * n, k, heat)?;
    let presence = Tensor::matrix(batch.len(), t, batch.iter().flat_map(|e| e.presence.iter().copied()).collect())?;

    let mut net = build_network(params.descriptor(), batch.len(), n, ForwardOptions::train(config.dropout, seed))?;
    let loss = net.attach_loss(&config.loss_weights());
    let learnable = net.learnable(params);
    let (stats, grads, norm_updates) = {
        let mut bindings = net.bind(params, &input)?;
        bindings.bind(loss.heatmap_target, &heat);
        if let Some(p) = loss.presence_target {
            bindings.bind(p, &presence);
        }
        let eval = net.graph.evaluate(&bindings)?;
        let stats = StepStats {
            loss: eval.value(loss.total).item(),
            mse: eval.value(loss.mse).item(),
            bce: loss.bce.map(|b| eval.value(b).item()),
        };
        let non_finite = |what| TrainError::NonFinite {
            what,
            epoch,
            batch: index,
            loss: stats.loss,
        };
        if !stats.loss.is_finite() {
            return Err(non_finite("loss"));
        }
        let grads = net.graph.backward(&eval, loss.total, &learnable)?;
        if !grads.iter().all(Tensor::is_finite) {
            return Err(non_finite("gradient"));
        }
        let norm_updates: Vec<_> = net
            .norms
            .iter()
            .filter_map(|site| {
                let (mean, var) = eval.batch_stats(site.node)?;
                let rows = eval.value(site.node).rows();
                Some((site.running_mean, site.running_var, mean.to_vec(), var.to_vec(), rows))
            })
            .collect();
        (stats, grads, norm_updates)
    };

    let adam = config.adam(lr);
    adam_step(&mut params.learnable_mut(), &grads, state, &adam)?;
    let entries = params.entries_mut();
    for (mean_idx, var_idx, mean, var, rows) in norm_updates {
        let mut running_mean = entries[mean_idx].value.data().to_vec();
        let mut running_var = entries[var_idx].value.data().to_vec();
        update_running_stats(&mut running_mean, &mut running_var, &mean, &var, rows, BN_MOMENTUM);
        entries[mean_idx].value.data_mut().copy_from_slice(&running_mean);
        entries[var_idx].value.data_mut().copy_from_slice(&running_var);
    }
    Ok(stats)
}

/// Micro MEDE and landmark F1 of `params` on `examples`, in the centered frame.
pub fn validate(
    params: &ModelParams,
    examples: &[TrainingExample],
    batch_size: usize,
    radius: f64,
) -> Result<(Option<f64>, f64), TrainError> {
    let mut results = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let clouds: Vec<&PointCloud> = chunk.iter().map(|e| &e.cloud).collect();
        let outputs = forward_batch(params, &clouds, ForwardOptions::infer())?;
        for (ex, out) in chunk.iter().zip(outputs) {
            let mut decoded = decode_landmarks(out.decodable(), &ex.cloud)?;
            // Reduced architectures cover a prefix of the landmarks; the
            // rest count as predicted absent.
            let null = ex.cloud.null_point().unwrap_or([0.0; 3]);
            decoded.positions.resize(NUM_LANDMARKS, null);
            decoded.in_mesh.resize(NUM_LANDMARKS, false);
            let result = ModelResult::new(&ex.annotation, &decoded.positions, &decoded.in_mesh)
                .map_err(|e| TrainError::Shape(e.to_string()))?;
            results.push(result);
        }
    }
    let report = aggregate(&results, radius);
    Ok((report.micro_avg.mede, report.micro_avg.f1))
}

/// Train `params` on `train_set`, validating on `val_set` when it is not
/// empty. `on_epoch` sees every completed epoch and may abort training.
pub fn train(
    mut params: ModelParams,
    train_set: &[TrainingExample],
    val_set: &[TrainingExample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ModelParams) -> Result<(), TrainError>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if params.descriptor() != &config.arch {
        return Err(TrainError::Config("parameters do not match the configured architecture".into()));
    }
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n = train_set[0].cloud.len();
    if train_set.iter().chain(val_set).any(|e| e.cloud.len() != n) {
        return Err(TrainError::Shape("all clouds must have the same number of points".into()));
    }
    let start = Instant::now();
    let mut state = AdamState::new(params.learnable());
    let mut history = TrainHistory::default();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let (mut loss, mut mse, mut bce) = (0.0, 0.0, 0.0);
        for (index, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let seed = derive_seed(&[config.seed, epoch as u64, index as u64, 1]);
            let s = train_step(&mut params, &mut state, &batch, config, lr, seed, (epoch, index))?;
            let w = batch.len() as f64;
            loss += s.loss * w;
            mse += s.mse * w;
            bce += s.bce.unwrap_or(0.0) * w;
        }
        let count = train_set.len() as f64;
        let last = epoch + 1 == config.epochs;
        let (val_mede, val_f1) = if !val_set.is_empty() && ((epoch + 1) % config.validate_every == 0 || last) {
            let (m, f) = validate(&params, val_set, config.batch_size, config.radius)?;
            (m, Some(f))
        } else {
            (None, None)
        };
        if let Some(m) = val_mede {
            if best.as_ref().is_none_or(|(_, b, _)| m < *b) {
                best = Some((epoch, m, params.clone()));
            }
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: loss / count,
            mse: mse / count,
            bce: params.descriptor().char_module.then_some(bce / count),
            val_mede,
            val_f1,
        };
        on_epoch(&record, &params)?;
        history.epochs.push(record);
    }
    Ok(TrainOutcome {
        params,
        best: best.map(|(e, _, p)| (e + 1, p)),
        history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Assignment of sample indices to the three subsets.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// What the splitter needs to know about a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitItem {
    pub patient_id: String,
    pub dentition_type: DentitionType,
}

/// Default subset ratios.
pub const SPLIT_RATIOS: [f64; 3] = [0.70, 0.15, 0.15];

/// Patient-disjoint split stratified by dentition type. A patient belongs
/// to the stratum of its first sample. Per-stratum sample targets are
/// rounded so that the overall subset sizes also match their largest
/// remainder targets.
pub fn split_dataset(items: &[SplitItem], ratios: [f64; 3], seed: u64) -> Result<Split, TrainError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(TrainError::Config(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut patients: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        patients.entry(&it.patient_id).or_default().push(i);
    }
    if patients.len() < 3 {
        return Err(TrainError::Config(format!("need at least 3 patients to split, got {}", patients.len())));
    }
    let mut strata: BTreeMap<usize, Vec<Vec<usize>>> = BTreeMap::new();
    for members in patients.into_values() {
        strata.entry(items[members[0]].dentition_type.ordinal()).or_default().push(members);
    }

    let sizes: Vec<usize> = strata.values().map(|ps| ps.iter().map(Vec::len).sum()).collect();
    let targets = controlled_rounding(&sizes, ratios);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsets: [Vec<usize>; 3] = Default::default();
    let mut patient_subsets: [Vec<Vec<usize>>; 3] = Default::default();
    for (mut group, target) in strata.into_values().zip(targets) {
        group.shuffle(&mut rng);
        let mut filled = [0usize; 3];
        for members in group {
            // Largest remaining deficit first; ties go to the earlier subset.
            let j = (0..3)
                .max_by_key(|&j| (target[j] as isize - filled[j] as isize, std::cmp::Reverse(j)))
                .expect("three subsets");
            filled[j] += members.len();
            patient_subsets[j].push(members);
        }
    }
    for j in 0..3 {
        if patient_subsets[j].is_empty() && ratios[j] > 0.0 {
            let donor = (0..3).max_by_key(|&d| patient_subsets[d].len()).expect("three subsets");
            let smallest = (0..patient_subsets[donor].len())
                .min_by_key(|&p| patient_subsets[donor][p].len())
                .expect("non-empty donor");
            let moved = patient_subsets[donor].remove(smallest);
            patient_subsets[j].push(moved);
        }
    }
    for j in 0..3 {
        subsets[j] = patient_subsets[j].iter().flatten().copied().collect();
        subsets[j].sort_unstable();
    }
    let [train, val, test] = subsets;
    Ok(Split { train, val, test })
}

/// Round `size_s · ratio_j` to integers so that each row sums to its size
/// and each column to the largest-remainder rounding of its total.
fn controlled_rounding(sizes: &[usize], ratios: [f64; 3]) -> Vec<[usize; 3]> {
    let total: usize = sizes.iter().sum();
    let column_targets = crate::synthetic::largest_remainder(&ratios, total);
    let mut cells: Vec<[usize; 3]> = sizes
        .iter()
        .map(|&s| ratios.map(|r| (r * s as f64).floor() as usize))
        .collect();
    let mut row_left: Vec<usize> = sizes.iter().zip(&cells).map(|(&s, c)| s - c.iter().sum::<usize>()).collect();
    let mut col_left: [usize; 3] = std::array::from_fn(|j| column_targets[j] - cells.iter().map(|c| c[j]).sum::<usize>());
    let mut order: Vec<(usize, usize, f64)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..3).map(move |j| (s, j, ratios[j] * n as f64 - (ratios[j] * n as f64).floor())))
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    for &(s, j, _) in &order {
        if row_left[s] > 0 && col_left[j] > 0 {
            cells[s][j] += 1;
            row_left[s] -= 1;
            col_left[j] -= 1;
        }
    }
    for s in 0..sizes.len() {
        while row_left[s] > 0 {
            let j = (0..3).find(|&j| col_left[j] > 0).unwrap_or(0);
            cells[s][j] += 1;
            row_left[s] -= 1;
            col_left[j] = col_left[j].saturating_sub(1);
        }
    }
    cells
}
