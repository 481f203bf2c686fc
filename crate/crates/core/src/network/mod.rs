//! The landmark network: a shared per-point encoder, a heatmap regression
//! head, a tooth-presence classification head and presence conditioning of
//! the heatmaps, all recorded on an autodiff [`Graph`].

mod checkpoint;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use params::{init_params, param_specs, ModelParams, ParamEntry, ParamRole, ParamSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, Bindings, Graph, Mode, NodeId, NormStats, Tensor, BN_EPS};
use crate::geometry::PointCloud;
use crate::heatmap::{HeatmapKind, HeatmapSet};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid architecture: {0}")]
    InvalidArch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("parameters do not match the architecture: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Output nonlinearity of the heatmap head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapActivation {
    Sigmoid,
    Linear,
}

/// Layer widths and head sizes. Every width must be positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescriptor {
    /// Per-point shared MLP widths; the last one is the feature width of
    /// both per-point and pooled global features.
    pub encoder_widths: Vec<usize>,
    /// Per-point MLP widths after concatenating the global feature.
    pub decoder_widths: Vec<usize>,
    /// Hidden width of the two presence-head layers.
    pub presence_hidden: usize,
    pub num_teeth: usize,
    pub landmarks_per_tooth: usize,
    pub heatmap_activation: HeatmapActivation,
    /// With the presence head and conditioning; without it the network is
    /// the plain heatmap-regression baseline.
    pub char_module: bool,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            encoder_widths: vec![64, 128, 256],
            decoder_widths: vec![256, 128],
            presence_hidden: 256,
            num_teeth: crate::dental::NUM_TEETH,
            landmarks_per_tooth: crate::dental::LANDMARKS_PER_TOOTH,
            heatmap_activation: HeatmapActivation::Sigmoid,
            char_module: true,
        }
    }
}

impl ArchDescriptor {
    /// A small configuration (2 teeth, 10 landmarks, narrow layers) for
    /// gradient checks and quick tests.
    pub fn reduced() -> Self {
        Self {
            encoder_widths: vec![4, 6],
            decoder_widths: vec![5],
            presence_hidden: 4,
            num_teeth: 2,
            landmarks_per_tooth: 5,
            heatmap_activation: HeatmapActivation::Sigmoid,
            char_module: true,
        }
    }

    /// The same architecture without the presence head.
    pub fn baseline(mut self) -> Self {
        self.char_module = false;
        self
    }

    pub fn num_landmarks(&self) -> usize {
        self.num_teeth * self.landmarks_per_tooth
    }

    /// Width of per-point and global features.
    pub fn feature_width(&self) -> usize {
        *self.encoder_widths.last().expect("validated descriptor")
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::InvalidArch(m.to_string()));
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return bad("encoder and decoder need at least one layer each");
        }
        if self.encoder_widths.iter().chain(&self.decoder_widths).any(|&w| w == 0) {
            return bad("layer widths must be positive");
        }
        if self.num_teeth == 0 || self.landmarks_per_tooth == 0 {
            return bad("tooth and landmark counts must be positive");
        }
        if self.char_module && self.presence_hidden == 0 {
            return bad("presence hidden width must be positive");
        }
        Ok(())
    }
}

/// How a forward pass treats stochastic and batch-dependent layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Dropout rate of the presence head (train mode only).
    pub dropout: f64,
    /// Seed of the dropout masks.
    pub seed: u64,
    /// Normalize with running statistics even in train mode.
    pub running_stats: bool,
}

impl ForwardOptions {
    pub fn infer() -> Self {
        Self {
            mode: Mode::Infer,
            dropout: 0.0,
            seed: 0,
            running_stats: true,
        }
    }

    pub fn train(dropout: f64, seed: u64) -> Self {
        Self {
            mode: Mode::Train,
            dropout,
            seed,
            running_stats: false,
        }
    }

    fn with_mode(mode: Mode) -> Self {
        match mode {
            Mode::Train => Self::train(0.0, 0),
            Mode::Infer => Self::infer(),
        }
    }
}

/// A train-mode batch normalization whose batch statistics feed the
/// running averages held in the given parameter entries.
#[derive(Debug, Clone, Copy)]
pub struct NormSite {
    pub node: NodeId,
    pub running_mean: usize,
    pub running_var: usize,
}

/// Loss nodes attached to a [`NetGraph`], with the target leaves to bind.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    /// Point-major ground-truth heatmaps, `(batch·points) × landmarks`.
    pub heatmap_target: NodeId,
    /// Presence labels, `batch × teeth` (absent for the baseline).
    pub presence_target: Option<NodeId>,
    pub mse: NodeId,
    pub bce: Option<NodeId>,
    pub total: NodeId,
}

/// Weights and clamp of the training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_reg: f64,
    pub lambda_cls: f64,
    pub bce_clamp: f64,
    /// Compare ground truth with the raw instead of the conditioned heatmaps.
    pub mse_on_raw: bool,
}

/// The recorded network for one batch shape.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub graph: Graph,
    /// Stacked input points, `(batch·points) × 3`.
    pub input: NodeId,
    /// One leaf per parameter entry, in entry order.
    pub params: Vec<NodeId>,
    pub features: NodeId,
    pub global: NodeId,
    /// Point-major raw heatmaps, `(batch·points) × landmarks`.
    pub raw: NodeId,
    /// Presence probabilities, `batch × teeth`.
    pub presence: Option<NodeId>,
    /// Point-major conditioned heatmaps.
    pub conditioned: Option<NodeId>,
    pub norms: Vec<NormSite>,
    pub batch: usize,
    pub points: usize,
}

struct Builder<'d> {
    desc: &'d ArchDescriptor,
    specs: Vec<ParamSpec>,
    graph: Graph,
    params: Vec<NodeId>,
    norms: Vec<NormSite>,
    opts: ForwardOptions,
    dropout_layers: u64,
}

impl<'d> Builder<'d> {
    fn new(desc: &'d ArchDescriptor, opts: ForwardOptions) -> Result<Self, NetworkError> {
        desc.validate()?;
        let specs = param_specs(desc);
        let mut graph = Graph::new();
        let params = specs.iter().map(|s| graph.leaf(s.name.clone())).collect();
        Ok(Self {
            desc,
            specs,
            graph,
            params,
            norms: Vec::new(),
            opts,
            dropout_layers: 0,
        })
    }

    fn index(&self, name: &str) -> usize {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    fn param(&self, name: &str) -> NodeId {
        self.params[self.index(name)]
    }

    fn linear(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let w = self.param(&format!("{prefix}.weight"));
        self.graph.matmul(x, w)
    }

    fn norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let scale = self.param(&format!("{prefix}.bn.scale"));
        let shift = self.param(&format!("{prefix}.bn.shift"));
        let mean_idx = self.index(&format!("{prefix}.bn.running_mean"));
        let var_idx = self.index(&format!("{prefix}.bn.running_var"));
        let batch_stats = self.opts.mode == Mode::Train && !self.opts.running_stats;
        let stats = if batch_stats {
            NormStats::Batch { eps: BN_EPS }
        } else {
            NormStats::Running {
                mean: self.params[mean_idx],
                var: self.params[var_idx],
                eps: BN_EPS,
            }
        };
        let node = self.graph.batch_norm(x, scale, shift, stats);
        if batch_stats {
            self.norms.push(NormSite {
                node,
                running_mean: mean_idx,
                running_var: var_idx,
            });
        }
        node
    }

    fn dropout(&mut self, x: NodeId) -> Result<NodeId, NetworkError> {
        self.dropout_layers += 1;
        let seed = self.opts.seed ^ self.dropout_layers.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        Ok(self.graph.dropout(x, self.opts.dropout, self.opts.mode, seed)?)
    }

    fn encoder(&mut self, x: NodeId, batch: usize) -> (NodeId, NodeId) {
        let mut h = x;
        for i in 0..self.desc.encoder_widths.len() {
            let prefix = format!("encoder.{i}");
            h = self.linear(h, &prefix);
            h = self.norm(h, &prefix);
            h = self.graph.relu(h);
        }
        let g = self.graph.max_pool(h, batch);
        (h, g)
    }

    fn heatmap_head(&mut self, features: NodeId, global: NodeId) -> NodeId {
        // The first decoder layer acts on [per-point feature, global feature];
        // its weight is split so the global half is computed once per sample.
        let wp = self.param("decoder.0.weight_point");
        let wg = self.param("decoder.0.weight_global");
        let local = self.graph.matmul(features, wp);
        let shared = self.graph.matmul(global, wg);
        let mut h = self.graph.add(local, shared);
        h = self.norm(h, "decoder.0");
        h = self.graph.relu(h);
        for i in 1..self.desc.decoder_widths.len() {
            let prefix = format!("decoder.{i}");
            h = self.linear(h, &prefix);
            h = self.norm(h, &prefix);
            h = self.graph.relu(h);
        }
        h = self.linear(h, "heatmap");
        let bias = self.param("heatmap.bias");
        h = self.graph.add(h, bias);
        match self.desc.heatmap_activation {
            HeatmapActivation::Sigmoid => self.graph.sigmoid(h),
            HeatmapActivation::Linear => h,
        }
    }

    fn presence_head(&mut self, global: NodeId) -> Result<NodeId, NetworkError> {
        let mut h = global;
        for i in 0..2 {
            let prefix = format!("presence.{i}");
            h = self.linear(h, &prefix);
            h = self.norm(h, &prefix);
            h = self.graph.relu(h);
            h = self.dropout(h)?;
        }
        h = self.linear(h, "presence.2");
        let bias = self.param("presence.2.bias");
        h = self.graph.add(h, bias);
        Ok(self.graph.sigmoid(h))
    }

    /// Mesh rows of sample `b` scaled by `p_b`, its null row by `1 − p_b`,
    /// computed as `raw ⊙ (sign ⊙ p + offset)` with `sign = +1 / −1` and
    /// `offset = 0 / 1` on mesh / null rows.
    fn condition(&mut self, raw: NodeId, presence: NodeId, batch: usize, points: usize) -> NodeId {
        let (teeth, per_tooth) = (self.desc.num_teeth, self.desc.landmarks_per_tooth);
        let k = teeth * per_tooth;
        let mut expand = vec![0.0; teeth * k];
        for t in 0..teeth {
            for g in 0..per_tooth {
                expand[t * k + t * per_tooth + g] = 1.0;
            }
        }
        let expand = self.graph.constant(Tensor::matrix(teeth, k, expand).expect("shape"));
        let per_landmark = self.graph.matmul(presence, expand);

        let rows = batch * points;
        let mut sign = vec![1.0; rows * k];
        let mut offset = vec![0.0; rows * k];
        for b in 0..batch {
            let null_row = b * points + points - 1;
            sign[null_row * k..(null_row + 1) * k].fill(-1.0);
            offset[null_row * k..(null_row + 1) * k].fill(1.0);
        }
        let sign = self.graph.constant(Tensor::matrix(rows, k, sign).expect("shape"));
        let offset = self.graph.constant(Tensor::matrix(rows, k, offset).expect("shape"));
        let signed = self.graph.mul(sign, per_landmark);
        let weights = self.graph.add(signed, offset);
        self.graph.mul(raw, weights)
    }
}

/// Record the full network for `batch` clouds of `points` points each
/// (null point included).
pub fn build_network(
    desc: &ArchDescriptor,
    batch: usize,
    points: usize,
    opts: ForwardOptions,
) -> Result<NetGraph, NetworkError> {
    if batch == 0 || points < 2 {
        return Err(NetworkError::InvalidInput(format!(
            "need at least one cloud of at least 2 points, got {batch} of {points}"
        )));
    }
    let mut b = Builder::new(desc, opts)?;
    let input = b.graph.leaf("points");
    let (features, global) = b.encoder(input, batch);
    let raw = b.heatmap_head(features, global);
    let (presence, conditioned) = if desc.char_module {
        let p = b.presence_head(global)?;
        let c = b.condition(raw, p, batch, points);
        (Some(p), Some(c))
    } else {
        (None, None)
    };
    Ok(NetGraph {
        graph: b.graph,
        input,
        params: b.params,
        features,
        global,
        raw,
        presence,
        conditioned,
        norms: b.norms,
        batch,
        points,
    })
}

impl NetGraph {
    /// Append the training objective: `λ_reg·MSE + λ_cls·BCE` with the
    /// presence head, `λ_reg·MSE` on raw heatmaps without it.
    pub fn attach_loss(&mut self, weights: &LossWeights) -> LossNodes {
        let g = &mut self.graph;
        let heatmap_target = g.leaf("heatmap_target");
        match (self.presence, self.conditioned) {
            (Some(p), Some(cond)) => {
                let pred = if weights.mse_on_raw { self.raw } else { cond };
                let mse = g.squared_error(pred, heatmap_target);
                let presence_target = g.leaf("presence_target");
                let bce = g.binary_cross_entropy(p, presence_target, weights.bce_clamp);
                let reg = g.scale(mse, weights.lambda_reg);
                let cls = g.scale(bce, weights.lambda_cls);
                let total = g.add(reg, cls);
                LossNodes {
                    heatmap_target,
                    presence_target: Some(presence_target),
                    mse,
                    bce: Some(bce),
                    total,
                }
            }
            _ => {
                let mse = g.squared_error(self.raw, heatmap_target);
                let total = g.scale(mse, weights.lambda_reg);
                LossNodes {
                    heatmap_target,
                    presence_target: None,
                    mse,
                    bce: None,
                    total,
                }
            }
        }
    }

    /// Bind every parameter entry and the stacked input points.
    pub fn bind<'a>(&self, params: &'a ModelParams, input: &'a Tensor) -> Result<Bindings<'a>, NetworkError> {
        if params.entries().len() != self.params.len() {
            return Err(NetworkError::ParamMismatch(format!(
                "{} entries for {} parameter leaves",
                params.entries().len(),
                self.params.len()
            )));
        }
        let mut b = Bindings::new(&self.graph);
        for (node, entry) in self.params.iter().zip(params.entries()) {
            b.bind(*node, &entry.value);
        }
        b.bind(self.input, input);
        Ok(b)
    }

    /// Learnable parameter leaves, in entry order.
    pub fn learnable(&self, params: &ModelParams) -> Vec<NodeId> {
        params
            .entries()
            .iter()
            .zip(&self.params)
            .filter(|(e, _)| e.role == ParamRole::Learnable)
            .map(|(_, &n)| n)
            .collect()
    }
}

/// Stack the points of equally sized clouds into a `(batch·points) × 3` tensor.
pub fn stack_points(clouds: &[&PointCloud]) -> Result<Tensor, NetworkError> {
    let first = clouds
        .first()
        .ok_or_else(|| NetworkError::InvalidInput("empty batch".into()))?;
    let n = first.len();
    let mut data = Vec::with_capacity(clouds.len() * n * 3);
    for (i, c) in clouds.iter().enumerate() {
        if !c.has_null() {
            return Err(NetworkError::InvalidInput(format!("cloud {i} has no null point")));
        }
        if c.len() != n {
            return Err(NetworkError::InvalidInput(format!(
                "cloud {i} has {} points, expected {n}",
                c.len()
            )));
        }
        data.extend(c.points().iter().flatten());
    }
    Ok(Tensor::matrix(clouds.len() * n, 3, data)?)
}

/// Per-sample network outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub raw: HeatmapSet,
    /// Presence probabilities (with the presence head only).
    pub presence: Option<Vec<f64>>,
    /// Conditioned heatmaps (with the presence head only).
    pub conditioned: Option<HeatmapSet>,
}

impl ForwardOutput {
    /// The heatmaps to decode: conditioned when available, raw otherwise.
    pub fn decodable(&self) -> &HeatmapSet {
        self.conditioned.as_ref().unwrap_or(&self.raw)
    }
}

/// Forward pass over a batch of preprocessed clouds.
pub fn forward_batch(
    params: &ModelParams,
    clouds: &[&PointCloud],
    opts: ForwardOptions,
) -> Result<Vec<ForwardOutput>, NetworkError> {
    let input = stack_points(clouds)?;
    let desc = params.descriptor();
    let net = build_network(desc, clouds.len(), clouds[0].len(), opts)?;
    let bindings = net.bind(params, &input)?;
    let eval = net.graph.evaluate(&bindings)?;
    let k = desc.num_landmarks();
    let t = desc.num_teeth;
    let n = net.points;
    let slice = |node: NodeId, b: usize, kind| {
        let rows = &eval.value(node).data()[b * n * k..(b + 1) * n * k];
        HeatmapSet::from_point_major(kind, k, n, rows).expect("shape")
    };
    Ok((0..clouds.len())
        .map(|b| ForwardOutput {
            raw: slice(net.raw, b, HeatmapKind::Raw),
            presence: net.presence.map(|p| eval.value(p).data()[b * t..(b + 1) * t].to_vec()),
            conditioned: net.conditioned.map(|c| slice(c, b, HeatmapKind::Conditioned)),
        })
        .collect())
}

/// Forward pass over one preprocessed cloud.
pub fn charnet_forward(params: &ModelParams, pc: &PointCloud, opts: ForwardOptions) -> Result<ForwardOutput, NetworkError> {
    Ok(forward_batch(params, &[pc], opts)?.remove(0))
}

/// Encoder only: per-point features (`points × width`) and the pooled
/// global feature (`1 × width`).
pub fn encoder_forward(params: &ModelParams, pc: &PointCloud, mode: Mode) -> Result<(Tensor, Tensor), NetworkError> {
    let input = stack_points(&[pc])?;
    let opts = ForwardOptions::with_mode(mode);
    let mut b = Builder::new(params.descriptor(), opts)?;
    let x = b.graph.leaf("points");
    let (f, g) = b.encoder(x, 1);
    let eval = evaluate_partial(&b, params, &[(x, &input)])?;
    Ok((eval.0[f.index()].clone(), eval.0[g.index()].clone()))
}

/// Heatmap head on given per-point and global features; returns the raw
/// heatmaps.
pub fn heatmap_head_forward(
    params: &ModelParams,
    features: &Tensor,
    global: &Tensor,
    mode: Mode,
) -> Result<HeatmapSet, NetworkError> {
    let opts = ForwardOptions::with_mode(mode);
    let mut b = Builder::new(params.descriptor(), opts)?;
    let (f, g) = (b.graph.leaf("features"), b.graph.leaf("global"));
    let raw = b.heatmap_head(f, g);
    let eval = evaluate_partial(&b, params, &[(f, features), (g, global)])?;
    let k = params.descriptor().num_landmarks();
    Ok(HeatmapSet::from_point_major(HeatmapKind::Raw, k, features.rows(), eval.0[raw.index()].data()).expect("shape"))
}

/// Presence head on a global feature row; returns one probability per tooth.
pub fn presence_head_forward(params: &ModelParams, global: &Tensor, opts: ForwardOptions) -> Result<Vec<f64>, NetworkError> {
    if !params.descriptor().char_module {
        return Err(NetworkError::InvalidArch("the baseline architecture has no presence head".into()));
    }
    let mut b = Builder::new(params.descriptor(), opts)?;
    let g = b.graph.leaf("global");
    let p = b.presence_head(g)?;
    let eval = evaluate_partial(&b, params, &[(g, global)])?;
    Ok(eval.0[p.index()].data().to_vec())
}

struct PartialValues(Vec<Tensor>);

fn evaluate_partial(b: &Builder<'_>, params: &ModelParams, extra: &[(NodeId, &Tensor)]) -> Result<PartialValues, NetworkError> {
    if params.entries().len() != b.params.len() {
        return Err(NetworkError::ParamMismatch("entry count".into()));
    }
    let mut bindings = Bindings::new(&b.graph);
    for (node, entry) in b.params.iter().zip(params.entries()) {
        bindings.bind(*node, &entry.value);
    }
    for (node, t) in extra {
        bindings.bind(*node, t);
    }
    let eval = b.graph.evaluate(&bindings)?;
    Ok(PartialValues(
        (0..b.graph.len()).map(|i| eval.value(NodeId(i)).clone()).collect(),
    ))
}

#[cfg(test)]
mod tests;
