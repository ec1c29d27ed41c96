//! Cost accounting: parameter counts, FLOP estimates, and the closed-form
//! communication cost of split training versus the feature-exchange
//! protocol.
//!
//! FLOP formula sheet (per sample, forward):
//!   conv:    2 * Cout * H' * W' * Cin * kh * kw
//!   linear:  2 * in * out
//!   batch norm: 2 per element; ReLU: 1 per element
//!   pooling: kh * kw per output element; residual add: 1 per element
//! Training cost uses the standard forward + backward heuristic of
//! `TRAIN_FLOP_FACTOR` (3) times the forward cost; the factor is an
//! argument where it matters.

use crate::models::Model;

/// fwd + bwd ≈ 3x fwd.
pub const TRAIN_FLOP_FACTOR: u64 = 3;

/// Exact trainable parameter count (includes batch-norm scale and shift,
/// excludes running statistics).
pub fn count_params(model: &mut dyn Model) -> u64 {
    crate::models::count_trainable(model)
}

/// Per-sample forward FLOPs for a (C, H, W) input.
pub fn count_flops(model: &dyn Model, input: (usize, usize, usize)) -> u64 {
    model.flops(input).0
}

/// Per-sample training FLOPs with an explicit forward-to-training factor.
pub fn training_flops(model: &dyn Model, input: (usize, usize, usize), factor: u64) -> u64 {
    count_flops(model, input) * factor
}

/// Split-training communication: every epoch moves the split-layer feature
/// map up and its gradient down for every sample.
///
/// cost = (feature_bytes + gradient_bytes) * samples * epochs
pub fn comm_cost_sl(
    feature_bytes_per_sample: u64,
    gradient_bytes_per_sample: u64,
    samples: u64,
    epochs: u64,
) -> u64 {
    (feature_bytes_per_sample + gradient_bytes_per_sample) * samples * epochs
}

/// Feature-exchange communication: every round moves the feature map up and
/// the server's soft labels down for every sample.
///
/// cost = (feature_bytes + soft_label_bytes) * samples * rounds
pub fn comm_cost_gkt(
    feature_bytes_per_sample: u64,
    soft_label_bytes_per_sample: u64,
    samples: u64,
    rounds: u64,
) -> u64 {
    (feature_bytes_per_sample + soft_label_bytes_per_sample) * samples * rounds
}

/// f32 payload bytes of a (C, H, W) feature map.
pub fn feature_bytes(shape: (usize, usize, usize)) -> u64 {
    4 * (shape.0 * shape.1 * shape.2) as u64
}

/// f32 payload bytes of a logit / soft-label vector.
pub fn logit_bytes(classes: usize) -> u64 {
    4 * classes as u64
}

/// Cost summary serialized into the run manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CostReport {
    pub edge_params: u64,
    pub server_params: u64,
    pub edge_flops_fwd_per_sample: u64,
    pub server_flops_fwd_per_sample: u64,
    pub edge_flops_train_per_sample: u64,
    pub server_flops_train_per_sample: u64,
    /// Closed-form protocol communication bytes for the whole run.
    pub comm_bytes_gkt: u64,
    /// Closed-form split-training bytes for an equivalent epoch budget.
    pub comm_bytes_sl: u64,
}

impl CostReport {
    pub fn build(
        edge: &mut dyn Model,
        server: &mut dyn Model,
        input: (usize, usize, usize),
        feature_shape: (usize, usize, usize),
        classes: usize,
        samples: u64,
        rounds: u64,
        sl_epochs: u64,
    ) -> CostReport {
        let fb = feature_bytes(feature_shape);
        let lb = logit_bytes(classes);
        let ef = count_flops(edge, input);
        let sf = count_flops(server, feature_shape);
        CostReport {
            edge_params: count_params(edge),
            server_params: count_params(server),
            edge_flops_fwd_per_sample: ef,
            server_flops_fwd_per_sample: sf,
            edge_flops_train_per_sample: ef * TRAIN_FLOP_FACTOR,
            server_flops_train_per_sample: sf * TRAIN_FLOP_FACTOR,
            comm_bytes_gkt: comm_cost_gkt(fb, lb, samples, rounds),
            // split training moves the feature map up and a same-sized
            // gradient down each epoch
            comm_bytes_sl: comm_cost_sl(fb, fb, samples, sl_epochs),
        }
    }
}
