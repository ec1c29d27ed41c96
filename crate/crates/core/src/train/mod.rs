//! Training orchestration: the alternating-minimization loop in sync and
//! async flavors, the weight-averaging and centralized baselines, round
//! metrics, evaluation, and learning-rate scheduling.
//!
//! The round contract that keeps both sides aligned without shipping batch
//! indices: a client's round-`t` upload enumerates batches with the cursor
//! for round `t`; its round-`t+1` local training re-iterates that same
//! cursor so the server logits cached under `b_idx` line up with the
//! batches being trained on. Cursors are pure functions of
//! (shuffle seed, client id, round).

mod baselines;
mod client;
mod runner;
mod server;

pub use baselines::{fedavg_aggregate, read_state, run_centralized, run_fedavg, write_state, FedAvgConfig};
pub use client::ClientState;
pub use runner::{run_gkt, run_gkt_async, GktRunResult, TransportKind};
pub use server::ServerState;

use crate::data::{DataError, Dataset};
use crate::distill::KdMode;
use crate::models::{EdgeModel, FwdCtx, Model, ServerModel};
use crate::protocol::ProtocolError;
use crate::tensor::{Mode, OptimizerSpec, Tape, TensorError};
use std::io::Write;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("protocol error: {0}")]
    Protocol(#[from] ProtocolError),
    #[error("data error: {0}")]
    Data(#[from] DataError),
    #[error("protocol desync: {0}")]
    Desync(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("worker thread panicked")]
    WorkerPanic,
}

/// Run mode of the alternating loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum RunMode {
    Sync,
    Async,
}

/// Hyperparameters of one federated run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GktConfig {
    pub rounds: usize,
    pub edge_epochs: usize,
    pub server_epochs: usize,
    pub batch_size: usize,
    pub client_opt: OptimizerSpec,
    pub server_opt: OptimizerSpec,
    pub temperature: f32,
    pub kd_mode: KdMode,
    pub mode: RunMode,
    pub seed: u64,
    /// Reflect-pad crop + horizontal flip on training batches.
    pub augment: bool,
    /// Optional accuracy-plateau LR decay applied to both optimizers.
    pub plateau: Option<PlateauConfig>,
    /// Evaluation batch size (forward only, can be larger than training).
    pub eval_batch: usize,
}

impl GktConfig {
    /// Scaled-down defaults that exercise every code path in seconds.
    pub fn toy(seed: u64) -> GktConfig {
        GktConfig {
            rounds: 15,
            edge_epochs: 1,
            server_epochs: 4,
            batch_size: 32,
            client_opt: OptimizerSpec::adam(1e-3, 1e-4),
            server_opt: OptimizerSpec::adam(1e-3, 1e-4),
            temperature: 1.0,
            kd_mode: KdMode::Both,
            mode: RunMode::Sync,
            seed,
            augment: false,
            plateau: None,
            eval_batch: 128,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let mut problems = Vec::new();
        if self.rounds < 1 {
            problems.push("rounds must be >= 1");
        }
        if self.edge_epochs < 1 {
            problems.push("edge_epochs must be >= 1");
        }
        if self.server_epochs < 1 {
            problems.push("server_epochs must be >= 1");
        }
        if self.batch_size < 1 {
            problems.push("batch_size must be >= 1");
        }
        if self.eval_batch < 1 {
            problems.push("eval_batch must be >= 1");
        }
        if !(self.temperature > 0.0) {
            problems.push("temperature must be positive");
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(problems.join("; ")))
        }
    }
}

/// Accuracy-plateau decay: multiply the LR by `factor` when the best seen
/// accuracy has not improved for `patience` evaluations.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PlateauConfig {
    pub factor: f32,
    pub patience: usize,
    pub floor: f32,
}

/// Stateful plateau tracker.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    cfg: PlateauConfig,
    best: f32,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(cfg: PlateauConfig) -> PlateauScheduler {
        PlateauScheduler {
            cfg,
            best: f32::NEG_INFINITY,
            stale: 0,
        }
    }

    /// Observe one evaluation; returns the (possibly reduced) LR.
    pub fn observe(&mut self, accuracy: f32, current_lr: f32) -> f32 {
        if accuracy > self.best {
            self.best = accuracy;
            self.stale = 0;
            return current_lr;
        }
        self.stale += 1;
        if self.stale >= self.cfg.patience {
            self.stale = 0;
            (current_lr * self.cfg.factor).max(self.cfg.floor)
        } else {
            current_lr
        }
    }
}

/// One CSV row of run telemetry.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub test_acc: f32,
    pub server_loss: f32,
    pub mean_client_ce: f32,
    pub mean_client_kd: f32,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub flops_edge: u64,
    pub flops_server: u64,
    pub wall_ms: u64,
}

pub const METRICS_CSV_HEADER: &str =
    "round,test_acc,server_loss,mean_client_ce,mean_client_kd,bytes_up,bytes_down,flops_edge,flops_server,wall_ms";

impl RoundMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.round,
            self.test_acc,
            self.server_loss,
            self.mean_client_ce,
            self.mean_client_kd,
            self.bytes_up,
            self.bytes_down,
            self.flops_edge,
            self.flops_server,
            self.wall_ms
        )
    }

    /// Equality on every deterministic field (everything but wall time).
    pub fn deterministic_eq(&self, other: &RoundMetrics) -> bool {
        self.round == other.round
            && self.test_acc.to_bits() == other.test_acc.to_bits()
            && self.server_loss.to_bits() == other.server_loss.to_bits()
            && self.mean_client_ce.to_bits() == other.mean_client_ce.to_bits()
            && self.mean_client_kd.to_bits() == other.mean_client_kd.to_bits()
            && self.bytes_up == other.bytes_up
            && self.bytes_down == other.bytes_down
            && self.flops_edge == other.flops_edge
            && self.flops_server == other.flops_server
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[RoundMetrics]) -> Result<(), TrainError> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{METRICS_CSV_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Pair the parameters registered by a training forward with the model's
/// canonical parameter order and apply one optimizer step.
pub(crate) fn apply_step(
    model: &mut dyn Model,
    params: &[crate::tensor::Var],
    tape: &Tape,
    opt: &mut crate::tensor::Optimizer,
) -> Result<(), TrainError> {
    let mut i = 0usize;
    let mut failure: Option<TrainError> = None;
    model.visit_trainable(&mut |t| {
        if failure.is_some() {
            return;
        }
        match params.get(i).and_then(|&v| tape.grad(v)) {
            Some(g) => {
                if let Err(e) = opt.step(i, t, g) {
                    failure = Some(e.into());
                }
            }
            None => {
                failure = Some(TrainError::Config(format!(
                    "parameter {i} missing gradient; forward and visit order disagree"
                )));
            }
        }
        i += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if i != params.len() {
        return Err(TrainError::Config(format!(
            "forward registered {} parameters but the model visits {i}",
            params.len()
        )));
    }
    Ok(())
}

/// Stable per-party seed derivation from the run seed.
pub(crate) fn derive_seed(base: u64, tag: u64, k: u64) -> u64 {
    let mut x = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    // splitmix64 finalizer
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// ---- evaluation ----

/// Top-1 accuracy of any end-to-end model, eval mode.
pub fn evaluate_model(
    model: &mut dyn Model,
    data: &Dataset,
    batch: usize,
) -> Result<f32, TrainError> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.minibatch(chunk);
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, Mode::Eval);
        let xv = ctx.tape.leaf(x, false);
        let z = model.forward(&mut ctx, xv)?;
        correct += count_correct(ctx.tape.value(z).data(), data.classes, &y);
    }
    Ok(correct as f32 / data.len() as f32)
}

/// Top-1 accuracy of the deployed composition server(extract(x)), eval
/// mode on both halves.
pub fn evaluate_assembled(
    edge: &mut EdgeModel,
    server: &mut ServerModel,
    data: &Dataset,
    batch: usize,
) -> Result<f32, TrainError> {
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch) {
        let (x, y) = data.minibatch(chunk);
        let logits = crate::models::assembled_logits(edge, server, &x)?;
        correct += count_correct(logits.data(), data.classes, &y);
    }
    Ok(correct as f32 / data.len() as f32)
}

fn count_correct(logits: &[f32], classes: usize, labels: &[usize]) -> usize {
    let mut correct = 0;
    for (row, &label) in logits.chunks(classes).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_unchanged_while_improving() {
        let mut s = PlateauScheduler::new(PlateauConfig {
            factor: 0.1,
            patience: 2,
            floor: 1e-6,
        });
        let mut lr = 0.1;
        for acc in [0.1, 0.2, 0.3, 0.4] {
            lr = s.observe(acc, lr);
        }
        assert_eq!(lr, 0.1);
    }

    #[test]
    fn plateau_decays_after_patience_flat_evals() {
        let mut s = PlateauScheduler::new(PlateauConfig {
            factor: 0.5,
            patience: 3,
            floor: 1e-6,
        });
        let mut lr = 0.4;
        lr = s.observe(0.5, lr); // best
        for _ in 0..3 {
            lr = s.observe(0.5, lr); // not strictly better
        }
        assert!((lr - 0.2).abs() < 1e-7);
    }

    #[test]
    fn plateau_matches_hand_simulated_trace() {
        // history: 0.1, 0.3, 0.3, 0.3, 0.35, 0.35, 0.35, 0.35
        // patience 2, factor 0.5: decay after the two 0.3 repeats, again
        // after two 0.35 repeats, again after two more
        let cfg = PlateauConfig {
            factor: 0.5,
            patience: 2,
            floor: 0.01,
        };
        let mut s = PlateauScheduler::new(cfg);
        let mut trace = Vec::new();
        let mut lr = 0.32f32;
        for acc in [0.1, 0.3, 0.3, 0.3, 0.35, 0.35, 0.35, 0.35] {
            lr = s.observe(acc, lr);
            trace.push(lr);
        }
        let want = [0.32, 0.32, 0.32, 0.16, 0.16, 0.16, 0.08, 0.08];
        for (got, want) in trace.iter().zip(want) {
            assert!((got - want).abs() < 1e-7, "{trace:?}");
        }
    }

    #[test]
    fn plateau_respects_floor() {
        let mut s = PlateauScheduler::new(PlateauConfig {
            factor: 0.1,
            patience: 1,
            floor: 1e-3,
        });
        let mut lr = 0.01;
        s.observe(0.9, lr);
        for _ in 0..5 {
            lr = s.observe(0.1, lr);
        }
        assert!((lr - 1e-3).abs() < 1e-9);
    }

    #[test]
    fn config_validation_aggregates_problems() {
        let mut cfg = GktConfig::toy(0);
        cfg.rounds = 0;
        cfg.temperature = 0.0;
        let err = cfg.validate().unwrap_err();
        let text = err.to_string();
        assert!(text.contains("rounds") && text.contains("temperature"));
    }

    #[test]
    fn csv_row_has_fixed_column_count() {
        let m = RoundMetrics {
            round: 1,
            test_acc: 0.5,
            server_loss: 1.0,
            mean_client_ce: 1.0,
            mean_client_kd: 0.0,
            bytes_up: 10,
            bytes_down: 5,
            flops_edge: 100,
            flops_server: 200,
            wall_ms: 3,
        };
        assert_eq!(m.csv_row().split(',').count(), 10);
        assert_eq!(METRICS_CSV_HEADER.split(',').count(), 10);
    }

    #[test]
    fn derive_seed_separates_parties() {
        let a = derive_seed(7, 1, 0);
        let b = derive_seed(7, 1, 1);
        let c = derive_seed(7, 2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 1, 0));
    }

    #[test]
    fn count_correct_scores_argmax() {
        let logits = [0.1, 0.9, 0.0, 2.0, -1.0, 0.5];
        assert_eq!(count_correct(&logits, 3, &[1, 0]), 2);
        assert_eq!(count_correct(&logits, 3, &[0, 0]), 1);
    }
}
