//! Reference training loops: weight-averaging federated learning and
//! plain centralized supervised training. Both serve as accuracy
//! yardsticks for the feature-exchange protocol at matched budgets.

use super::{derive_seed, evaluate_model, RoundMetrics, TrainError};
use crate::accounting::TRAIN_FLOP_FACTOR;
use crate::data::{augment_batch, round_batches, Dataset, PartitionPlan};
use crate::models::{FwdCtx, Model};
use crate::tensor::{Mode, Optimizer, OptimizerSpec, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Shared knobs for the two baselines.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FedAvgConfig {
    /// Communication rounds (for centralized training: epochs).
    pub rounds: usize,
    /// Local epochs per client per round (ignored by centralized).
    pub local_epochs: usize,
    pub batch_size: usize,
    pub opt: OptimizerSpec,
    pub seed: u64,
    pub augment: bool,
    pub eval_batch: usize,
}

impl FedAvgConfig {
    pub fn toy(seed: u64) -> FedAvgConfig {
        FedAvgConfig {
            rounds: 15,
            local_epochs: 1,
            batch_size: 32,
            opt: OptimizerSpec::adam(1e-3, 1e-4),
            seed,
            augment: false,
            eval_batch: 128,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.rounds < 1 || self.local_epochs < 1 || self.batch_size < 1 || self.eval_batch < 1
        {
            return Err(TrainError::Config(
                "rounds, local_epochs, batch_size and eval_batch must all be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One CE epoch over the given batch order; returns the mean loss.
fn ce_epoch(
    model: &mut dyn Model,
    opt: &mut Optimizer,
    data: &Dataset,
    batches: &[Vec<usize>],
    augment: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f32, TrainError> {
    let mut loss_sum = 0f64;
    let mut samples = 0usize;
    for idx in batches {
        let (x, y) = data.minibatch(idx);
        let x = if augment { augment_batch(&x, rng) } else { x };
        let mut tape = Tape::new();
        let mut ctx = FwdCtx::new(&mut tape, Mode::Train);
        let xv = ctx.tape.leaf(x, false);
        let z = model.forward(&mut ctx, xv)?;
        let loss = ctx.tape.cross_entropy(z, &y)?;
        let params = ctx.params;
        tape.backward(loss)?;
        loss_sum += tape.value(loss).item() as f64 * idx.len() as f64;
        samples += idx.len();
        super::apply_step(model, &params, &tape, opt)?;
    }
    Ok((loss_sum / samples.max(1) as f64) as f32)
}

/// Snapshot of every persistent tensor (weights and batch-norm running
/// statistics) in visit order.
pub fn read_state(model: &mut dyn Model) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit_state("", &mut |_, t| out.push(t.data().to_vec()));
    out
}

pub fn write_state(model: &mut dyn Model, state: &[Vec<f32>]) {
    let mut i = 0usize;
    model.visit_state("", &mut |_, t| {
        t.data_mut().copy_from_slice(&state[i]);
        i += 1;
    });
    assert_eq!(i, state.len(), "state snapshot does not match model");
}

/// Weighted average of per-client state snapshots with weights
/// `n_k / n_total`.
pub fn fedavg_aggregate(states: &[Vec<Vec<f32>>], sizes: &[usize]) -> Vec<Vec<f32>> {
    assert_eq!(states.len(), sizes.len());
    assert!(!states.is_empty());
    let total: f64 = sizes.iter().map(|&s| s as f64).sum();
    let mut out: Vec<Vec<f64>> = states[0]
        .iter()
        .map(|t| vec![0f64; t.len()])
        .collect();
    for (state, &n) in states.iter().zip(sizes) {
        let w = n as f64 / total;
        for (acc, t) in out.iter_mut().zip(state) {
            for (a, &v) in acc.iter_mut().zip(t) {
                *a += w * v as f64;
            }
        }
    }
    out.into_iter()
        .map(|t| t.into_iter().map(|v| v as f32).collect())
        .collect()
}

/// Weight-averaging federated learning on any end-to-end model. `build`
/// constructs a fresh model from a seed; one global instance plus one
/// scratch instance per client share the architecture.
pub fn run_fedavg<M: Model>(
    cfg: &FedAvgConfig,
    build: impl Fn(u64) -> M,
    train: &Dataset,
    plan: &PartitionPlan,
    test: &Dataset,
) -> Result<(Vec<RoundMetrics>, M), TrainError> {
    cfg.validate()?;
    let k = plan.clients();
    if k == 0 {
        return Err(TrainError::Config("partition has no clients".into()));
    }
    let shards: Vec<Dataset> = plan
        .assignments
        .iter()
        .map(|idx| train.subset(idx))
        .collect();
    if shards.iter().any(|s| s.is_empty()) {
        return Err(TrainError::Config(
            "every client needs at least one sample".into(),
        ));
    }
    let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
    let mut global = build(derive_seed(cfg.seed, 20, 0));
    let mut workers: Vec<M> = (0..k).map(|_| build(0)).collect();
    let mut opts: Vec<Optimizer> = (0..k).map(|_| Optimizer::new(cfg.opt)).collect();
    let mut rngs: Vec<ChaCha8Rng> = (0..k)
        .map(|i| ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 21, i as u64)))
        .collect();
    let fwd_flops = global.flops(train.sample_shape()).0;
    let param_bytes: u64 = {
        let mut n = 0u64;
        global.visit_trainable(&mut |t| n += 4 * t.numel() as u64);
        n
    };

    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut flops_total = 0u64;
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let global_state = read_state(&mut global);
        let mut states = Vec::with_capacity(k);
        let mut ce_sum = 0f64;
        for i in 0..k {
            write_state(&mut workers[i], &global_state);
            // local optimizer state restarts each round: aggregation
            // invalidates cross-round moments
            opts[i] = Optimizer::new(cfg.opt);
            let cursor_seed = derive_seed(cfg.seed, 22, i as u64);
            let mut last_ce = 0f32;
            for epoch in 0..cfg.local_epochs {
                let batches = round_batches(
                    shards[i].len(),
                    cfg.batch_size,
                    cursor_seed,
                    (round * cfg.local_epochs + epoch) as u64,
                );
                last_ce = ce_epoch(
                    &mut workers[i],
                    &mut opts[i],
                    &shards[i],
                    &batches,
                    cfg.augment,
                    &mut rngs[i],
                )?;
            }
            flops_total +=
                fwd_flops * sizes[i] as u64 * cfg.local_epochs as u64 * TRAIN_FLOP_FACTOR;
            ce_sum += last_ce as f64;
            states.push(read_state(&mut workers[i]));
        }
        let aggregated = fedavg_aggregate(&states, &sizes);
        write_state(&mut global, &aggregated);
        let acc = evaluate_model(&mut global, test, cfg.eval_batch)?;
        metrics.push(RoundMetrics {
            round,
            test_acc: acc,
            server_loss: f32::NAN,
            mean_client_ce: (ce_sum / k as f64) as f32,
            mean_client_kd: 0.0,
            // full-model weights down to each client and back up
            bytes_up: param_bytes * k as u64,
            bytes_down: param_bytes * k as u64,
            flops_edge: flops_total,
            flops_server: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((metrics, global))
}

/// Plain supervised training; `rounds` counts epochs and evaluation
/// happens after each.
pub fn run_centralized<M: Model>(
    cfg: &FedAvgConfig,
    mut model: M,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Vec<RoundMetrics>, M), TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let mut opt = Optimizer::new(cfg.opt);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 23, 0));
    let fwd_flops = model.flops(train.sample_shape()).0;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut flops_total = 0u64;
    for round in 1..=cfg.rounds {
        let start = Instant::now();
        let batches = round_batches(
            train.len(),
            cfg.batch_size,
            derive_seed(cfg.seed, 24, 0),
            round as u64,
        );
        let ce = ce_epoch(&mut model, &mut opt, train, &batches, cfg.augment, &mut rng)?;
        flops_total += fwd_flops * train.len() as u64 * TRAIN_FLOP_FACTOR;
        let acc = evaluate_model(&mut model, test, cfg.eval_batch)?;
        metrics.push(RoundMetrics {
            round,
            test_acc: acc,
            server_loss: f32::NAN,
            mean_client_ce: ce,
            mean_client_kd: 0.0,
            bytes_up: 0,
            bytes_down: 0,
            flops_edge: 0,
            flops_server: flops_total,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok((metrics, model))
}
