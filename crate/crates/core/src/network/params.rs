use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ArchDescriptor, NetworkError};
use crate::autodiff::Tensor;

/// What a parameter entry holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Trained by the optimizer.
    Learnable,
    /// Batch-norm running mean, updated from batch statistics.
    RunningMean,
    /// Batch-norm running variance, updated from batch statistics.
    RunningVar,
}

/// Name, shape and initialization of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: [usize; 2],
    pub role: ParamRole,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    /// Uniform in `±1/√fan_in`.
    FanIn(usize),
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor,
}

/// All tensors of a network in descriptor order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    descriptor: ArchDescriptor,
    entries: Vec<ParamEntry>,
}

fn weight(name: String, rows: usize, cols: usize, fan_in: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: [rows, cols],
        role: ParamRole::Learnable,
        init: Init::FanIn(fan_in),
    }
}

fn norm(prefix: &str, width: usize, out: &mut Vec<ParamSpec>) {
    let entries = [
        ("scale", ParamRole::Learnable, 1.0),
        ("shift", ParamRole::Learnable, 0.0),
        ("running_mean", ParamRole::RunningMean, 0.0),
        ("running_var", ParamRole::RunningVar, 1.0),
    ];
    for (suffix, role, value) in entries {
        out.push(ParamSpec {
            name: format!("{prefix}.bn.{suffix}"),
            shape: [1, width],
            role,
            init: Init::Constant(value),
        });
    }
}

/// Every parameter tensor of the architecture, in the order used by
/// [`ModelParams`], the graph builder and checkpoints.
///
/// Linear layers followed by batch normalization carry no bias; the
/// normalization shift takes its place.
pub fn param_specs(desc: &ArchDescriptor) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let mut width = 3;
    for (i, &w) in desc.encoder_widths.iter().enumerate() {
        let prefix = format!("encoder.{i}");
        out.push(weight(format!("{prefix}.weight"), width, w, width));
        norm(&prefix, w, &mut out);
        width = w;
    }
    let feat = width;
    for (i, &w) in desc.decoder_widths.iter().enumerate() {
        let prefix = format!("decoder.{i}");
        if i == 0 {
            out.push(weight(format!("{prefix}.weight_point"), feat, w, 2 * feat));
            out.push(weight(format!("{prefix}.weight_global"), feat, w, 2 * feat));
        } else {
            out.push(weight(format!("{prefix}.weight"), width, w, width));
        }
        norm(&prefix, w, &mut out);
        width = w;
    }
    let k = desc.num_landmarks();
    out.push(weight("heatmap.weight".into(), width, k, width));
    out.push(weight("heatmap.bias".into(), 1, k, width));
    if desc.char_module {
        let h = desc.presence_hidden;
        out.push(weight("presence.0.weight".into(), feat, h, feat));
        norm("presence.0", h, &mut out);
        out.push(weight("presence.1.weight".into(), h, h, h));
        norm("presence.1", h, &mut out);
        out.push(weight("presence.2.weight".into(), h, desc.num_teeth, h));
        out.push(weight("presence.2.bias".into(), 1, desc.num_teeth, h));
    }
    out
}

/// Fan-in scaled uniform weights, unit/zero normalization affine terms and
/// running statistics `(0, 1)`. Deterministic per seed.
pub fn init_params(desc: &ArchDescriptor, seed: u64) -> Result<ModelParams, NetworkError> {
    desc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = param_specs(desc)
        .into_iter()
        .map(|spec| {
            let n = spec.shape[0] * spec.shape[1];
            let data = match spec.init {
                Init::FanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
                Init::Constant(v) => vec![v; n],
            };
            ParamEntry {
                name: spec.name,
                role: spec.role,
                value: Tensor::matrix(spec.shape[0], spec.shape[1], data).expect("shape"),
            }
        })
        .collect();
    Ok(ModelParams {
        descriptor: desc.clone(),
        entries,
    })
}

impl ModelParams {
    /// Assemble parameters from raw values laid out per [`param_specs`].
    pub fn from_values(descriptor: ArchDescriptor, values: &[f64]) -> Result<Self, NetworkError> {
        descriptor.validate()?;
        let specs = param_specs(&descriptor);
        let expected: usize = specs.iter().map(|s| s.shape[0] * s.shape[1]).sum();
        if values.len() != expected {
            return Err(NetworkError::ParamMismatch(format!(
                "{} values for an architecture with {expected}",
                values.len()
            )));
        }
        let mut offset = 0;
        let entries = specs
            .into_iter()
            .map(|spec| {
                let n = spec.shape[0] * spec.shape[1];
                let value = Tensor::matrix(spec.shape[0], spec.shape[1], values[offset..offset + n].to_vec());
                offset += n;
                ParamEntry {
                    name: spec.name,
                    role: spec.role,
                    value: value.expect("shape"),
                }
            })
            .collect();
        Ok(Self { descriptor, entries })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.value)
    }

    /// Number of scalar values with the given role.
    pub fn count(&self, role: ParamRole) -> usize {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.value.len()).sum()
    }

    /// All values concatenated in entry order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.value.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    /// Mutable references to the learnable tensors, in entry order.
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries
            .iter_mut()
            .filter(|e| e.role == ParamRole::Learnable)
            .map(|e| &mut e.value)
            .collect()
    }

    pub fn learnable(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().filter(|e| e.role == ParamRole::Learnable).map(|e| &e.value)
    }
}
