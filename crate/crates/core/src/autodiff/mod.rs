//! Dense tensors, a recorded computation graph with reverse-mode gradients,
//! Adam and the cosine learning-rate schedule.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{Bindings, Evaluation, Graph, Mode, NodeId, NormStats};
pub use optim::{adam_step, cosine_lr, AdamConfig, AdamState};
pub use tensor::Tensor;

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics update factor for batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}{}): {detail}", label.as_ref().map(|l| format!(" '{l}'")).unwrap_or_default())]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        label: Option<String>,
        detail: String,
    },
    #[error("leaf node {node} '{name}' has no bound value")]
    UnboundLeaf { node: usize, name: String },
    #[error("gradient requested of non-scalar node {node} with shape {shape:?}")]
    NotScalar { node: usize, shape: Vec<usize> },
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidRate(f64),
    #[error("{0}")]
    InvalidArgument(String),
}

/// Exponential moving average update of batch-norm running statistics.
///
/// The running variance tracks the unbiased batch variance.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch_mean: &[f64],
    batch_var: &[f64],
    rows: usize,
    momentum: f64,
) {
    let unbias = if rows > 1 {
        rows as f64 / (rows as f64 - 1.0)
    } else {
        1.0
    };
    for i in 0..running_mean.len() {
        running_mean[i] = (1.0 - momentum) * running_mean[i] + momentum * batch_mean[i];
        running_var[i] = (1.0 - momentum) * running_var[i] + momentum * batch_var[i] * unbias;
    }
}
