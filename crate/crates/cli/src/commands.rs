//! Subcommand bodies: dataset/model assembly, the in-process simulation,
//! partition and cost emission, and the two baselines.

use crate::config::{CliError, RunConfig};
use gkt_core::accounting::CostReport;
use gkt_core::data::{
    dirichlet_partition, load_cifar10_bins, synthetic_dataset, Dataset, PartitionPlan,
};
use gkt_core::models::{build_edge, build_server, build_stacked, Model};
use gkt_core::train::{
    run_centralized, run_fedavg, run_gkt, run_gkt_async, write_metrics_csv, ClientState,
    FedAvgConfig, GktRunResult, RoundMetrics, RunMode, ServerState,
};
use gkt_core::Optimizer;
use std::fs;
use std::path::Path;

/// Deterministic per-party seed derivation (splitmix64 finalizer).
pub fn mix_seed(base: u64, tag: u64, k: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(k.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SEED_EDGE_INIT: u64 = 100;
const SEED_SERVER_INIT: u64 = 101;
const SEED_TRAIN_SAMPLES: u64 = 102;
const SEED_TEST_SAMPLES: u64 = 103;
const SEED_TEMPLATES: u64 = 104;

/// Load (or synthesize) the train and test sets, normalized with
/// channel statistics computed on the training set.
pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset), CliError> {
    let (mut train, mut test) = match cfg.dataset.as_str() {
        "cifar10" => {
            let dir = cfg.data_dir.as_ref().expect("validated");
            let train_paths: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            if train_paths.is_empty() {
                return Err(CliError::Config(format!(
                    "no data_batch_*.bin files under {}",
                    dir.display()
                )));
            }
            let mut train = load_cifar10_bins(&train_paths)?;
            let test = load_cifar10_bins(&[dir.join("test_batch.bin")])?;
            if cfg.train_size > 0 && cfg.train_size < train.len() {
                let idx: Vec<usize> = (0..cfg.train_size).collect();
                train = train.subset(&idx);
            }
            (train, test)
        }
        _ => {
            let templates = mix_seed(cfg.seed, SEED_TEMPLATES, 0);
            let train = synthetic_dataset(
                cfg.train_size,
                cfg.classes,
                3,
                cfg.side,
                cfg.noise,
                templates,
                mix_seed(cfg.seed, SEED_TRAIN_SAMPLES, 0),
            );
            let test = synthetic_dataset(
                cfg.test_size,
                cfg.classes,
                3,
                cfg.side,
                cfg.noise,
                templates,
                mix_seed(cfg.seed, SEED_TEST_SAMPLES, 0),
            );
            (train, test)
        }
    };
    let (mean, std) = train.channel_stats();
    train.normalize(&mean, &std);
    test.normalize(&mean, &std);
    Ok((train, test))
}

/// Resolve the partition: an explicit plan file wins, otherwise sample a
/// Dirichlet plan from the configured seed.
pub fn load_partition(cfg: &RunConfig, train: &Dataset) -> Result<PartitionPlan, CliError> {
    let plan = match &cfg.partition_file {
        Some(path) => PartitionPlan::from_text(&fs::read_to_string(path)?)?,
        None => dirichlet_partition(
            &train.labels,
            train.classes,
            cfg.k,
            cfg.alpha,
            cfg.partition_seed,
        ),
    };
    if plan.clients() != cfg.k {
        return Err(CliError::Config(format!(
            "partition has {} clients but k = {}",
            plan.clients(),
            cfg.k
        )));
    }
    let total: usize = plan.assignments.iter().map(Vec::len).sum();
    if total != train.len() {
        return Err(CliError::Config(format!(
            "partition covers {total} samples but the training set has {}",
            train.len()
        )));
    }
    Ok(plan)
}

pub fn build_clients(
    cfg: &RunConfig,
    train: &Dataset,
    plan: &PartitionPlan,
) -> Result<Vec<ClientState>, CliError> {
    let variant = cfg.parse_edge_variant().expect("validated");
    let mut clients = Vec::with_capacity(cfg.k);
    for (id, shard) in plan.assignments.iter().enumerate() {
        if shard.is_empty() {
            return Err(CliError::Config(format!(
                "client {id} received no samples; re-seed the partition or lower k"
            )));
        }
        // every edge starts from the same weights, as is standard in
        // federated training; only the data shards differ per client
        let model = build_edge(variant, train.classes, mix_seed(cfg.seed, SEED_EDGE_INIT, 0));
        clients.push(ClientState::new(
            id as u32,
            model,
            Optimizer::new(cfg.client_opt()),
            train.subset(shard),
            cfg.seed,
        ));
    }
    Ok(clients)
}

pub fn build_server_state(cfg: &RunConfig, classes: usize) -> ServerState {
    let variant = cfg.parse_edge_variant().expect("validated");
    let depth = cfg.parse_server_depth().expect("validated");
    let model = build_server(
        depth,
        variant.base(),
        cfg.server_base.unwrap_or(variant.base()),
        classes,
        mix_seed(cfg.seed, SEED_SERVER_INIT, 0),
    );
    ServerState::new(model, Optimizer::new(cfg.server_opt()))
}

/// Closed-form cost summary for the configured pair of architectures.
pub fn cost_report(cfg: &RunConfig, samples: u64, sl_epochs: u64) -> CostReport {
    let variant = cfg.parse_edge_variant().expect("validated");
    let depth = cfg.parse_server_depth().expect("validated");
    let side = if cfg.dataset == "cifar10" { 32 } else { cfg.side };
    let mut edge = build_edge(variant, cfg.classes, 0);
    let mut server = build_server(
        depth,
        variant.base(),
        cfg.server_base.unwrap_or(variant.base()),
        cfg.classes,
        0,
    );
    CostReport::build(
        &mut edge,
        &mut server,
        (3, side, side),
        (variant.base(), side, side),
        cfg.classes,
        samples,
        cfg.rounds as u64,
        sl_epochs,
    )
}

fn reject_non_finite(rows: &[RoundMetrics], check_server_loss: bool) -> Result<(), CliError> {
    for r in rows {
        let bad_loss = check_server_loss && !r.server_loss.is_finite();
        if bad_loss || !r.mean_client_ce.is_finite() {
            return Err(CliError::Diverged(format!(
                "round {}: server_loss={} mean_client_ce={}",
                r.round, r.server_loss, r.mean_client_ce
            )));
        }
    }
    Ok(())
}

fn write_manifest(
    out_dir: &Path,
    cfg: &RunConfig,
    extra: serde_json::Value,
) -> Result<(), CliError> {
    let mut doc = serde_json::json!({
        "config": cfg,
        "metrics_csv": "metrics.csv",
    });
    if let (Some(d), Some(serde_json::Value::Object(e))) = (doc.as_object_mut(), Some(extra)) {
        d.extend(e);
    }
    fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&doc).expect("manifest serializes") + "\n",
    )?;
    Ok(())
}

/// `sim`: the full protocol, every party in one process.
pub fn run_sim(cfg: &RunConfig) -> Result<GktRunResult, CliError> {
    let (train, test) = load_datasets(cfg)?;
    let plan = load_partition(cfg, &train)?;
    let clients = build_clients(cfg, &train, &plan)?;
    let server = build_server_state(cfg, train.classes);
    let gkt = cfg.gkt_config();
    let transport = cfg.parse_transport().expect("validated");

    log::info!(
        "sim: k={} rounds={} mode={} transport={}",
        cfg.k,
        cfg.rounds,
        cfg.mode,
        cfg.transport
    );
    let (result, mut clients, mut server) = match gkt.mode {
        RunMode::Sync => run_gkt(&gkt, clients, server, &test, transport)?,
        RunMode::Async => run_gkt_async(&gkt, clients, server, &test, &[])?,
    };
    reject_non_finite(&result.metrics, true)?;

    fs::create_dir_all(&cfg.out_dir)?;
    let partition_path = cfg.out_dir.join("partition.txt");
    fs::write(&partition_path, plan.to_text())?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &result.metrics)?;
    gkt_core::models::save_checkpoint(&cfg.out_dir.join("server.ckpt"), &mut server.model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    for c in clients.iter_mut() {
        gkt_core::models::save_checkpoint(
            &cfg.out_dir.join(format!("edge_{}.ckpt", c.id)),
            &mut c.model,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let samples = train.len() as u64;
    write_manifest(
        &cfg.out_dir,
        cfg,
        serde_json::json!({
            "partition_file": "partition.txt",
            "client_sizes": plan.assignments.iter().map(Vec::len).collect::<Vec<_>>(),
            "cost": cost_report(cfg, samples, cfg.rounds as u64 * cfg.edge_epochs as u64),
            "final_accuracy": result.final_accuracy,
            "payload_up_bytes": result.payload_up_bytes,
            "payload_down_bytes": result.payload_down_bytes,
            "wire_up_bytes": result.wire_up_bytes,
            "wire_down_bytes": result.wire_down_bytes,
        }),
    )?;
    log::info!("sim: final accuracy {:.4}", result.final_accuracy);
    Ok(result)
}

/// `partition`: emit a plan file; identical flags give identical bytes.
pub fn run_partition(
    k: usize,
    alpha: f64,
    seed: u64,
    n: usize,
    classes: usize,
    data_dir: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    if k < 1 {
        return Err(CliError::Config("k must be >= 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(CliError::Config("alpha must be positive".into()));
    }
    let labels: Vec<usize> = match data_dir {
        Some(dir) => {
            let paths: Vec<_> = (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .filter(|p| p.exists())
                .collect();
            load_cifar10_bins(&paths)?.labels
        }
        None => (0..n).map(|i| i % classes).collect(),
    };
    let plan = dirichlet_partition(&labels, classes, k, alpha, seed);
    fs::write(out, plan.to_text())?;
    log::info!(
        "partition: {} samples over {k} clients -> {}",
        labels.len(),
        out.display()
    );
    Ok(())
}

/// `baseline fedavg` / `baseline centralized` on the stacked single model.
pub fn run_baseline(cfg: &RunConfig, which: &str) -> Result<f32, CliError> {
    let (train, test) = load_datasets(cfg)?;
    let depth = cfg.parse_server_depth().expect("validated");
    let variant = cfg.parse_edge_variant().expect("validated");
    let base = variant.base();
    let server_base = cfg.server_base.unwrap_or(base);
    let fed = FedAvgConfig {
        rounds: cfg.rounds,
        local_epochs: cfg.edge_epochs,
        batch_size: cfg.batch_size,
        opt: cfg.client_opt(),
        seed: cfg.seed,
        augment: cfg.augment,
        eval_batch: cfg.eval_batch,
    };
    let classes = train.classes;
    let (metrics, mut model) = match which {
        "fedavg" => {
            let plan = load_partition(cfg, &train)?;
            run_fedavg(
                &fed,
                |s| build_stacked(depth, base, server_base, classes, s),
                &train,
                &plan,
                &test,
            )?
        }
        "centralized" => {
            let model =
                build_stacked(depth, base, server_base, classes, mix_seed(cfg.seed, SEED_EDGE_INIT, 0));
            run_centralized(&fed, model, &train, &test)?
        }
        other => return Err(CliError::Config(format!("unknown baseline '{other}'"))),
    };
    reject_non_finite(&metrics, false)?;

    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &metrics)?;
    gkt_core::models::save_checkpoint(&cfg.out_dir.join("model.ckpt"), &mut model as &mut dyn Model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let final_acc = metrics.last().map(|m| m.test_acc).unwrap_or(f32::NAN);
    write_manifest(
        &cfg.out_dir,
        cfg,
        serde_json::json!({ "baseline": which, "final_accuracy": final_acc }),
    )?;
    log::info!("baseline {which}: final accuracy {final_acc:.4}");
    Ok(final_acc)
}
