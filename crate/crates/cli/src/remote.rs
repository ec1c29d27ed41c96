//! Distributed roles: a coordinator process hosting the server model and
//! single-session client processes, talking the framed protocol over TCP.
//!
//! In distributed runs no process holds every extractor, so no per-round
//! assembled accuracy can be computed; metric rows carry NaN there and
//! final evaluation happens offline from the saved checkpoints. The
//! client role records its own edge model's test accuracy instead.

use crate::commands::{build_clients, build_server_state, load_datasets, load_partition};
use crate::config::{CliError, RunConfig};
use gkt_core::protocol::{Message, TcpTransport, Transport};
use gkt_core::train::{
    evaluate_model, write_metrics_csv, RoundMetrics, TrainError,
};
use std::fs;
use std::net::TcpListener;
use std::time::Instant;

fn desync(msg: String) -> CliError {
    CliError::Train(TrainError::Desync(msg))
}

/// Host the listener and the server model: accept `k` sessions, then run
/// the synchronous round loop against real sockets.
pub fn run_server(cfg: &RunConfig) -> Result<(), CliError> {
    let addr = cfg.listen.as_ref().expect("validated");
    let listener = TcpListener::bind(addr)?;
    log::info!("server: listening on {} for {} clients", addr, cfg.k);

    let mut conns: Vec<TcpTransport> = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let (stream, peer) = listener.accept()?;
        log::info!("server: accepted {peer}");
        conns.push(TcpTransport::from_stream(stream));
    }

    // order sessions by announced client id so downloads address correctly
    let mut ids = vec![u32::MAX; cfg.k];
    for (i, conn) in conns.iter_mut().enumerate() {
        match conn.recv().map_err(TrainError::from)? {
            Message::Hello { client_id, .. } => {
                if client_id as usize >= cfg.k || ids.contains(&client_id) {
                    return Err(desync(format!("bad or duplicate client id {client_id}")));
                }
                ids[i] = client_id;
            }
            other => return Err(desync(format!("expected hello, got {other:?}"))),
        }
    }

    let mut server = build_server_state(cfg, cfg.classes);
    let gkt = cfg.gkt_config();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds as u32 {
        let start = Instant::now();
        let up_before: u64 = conns.iter().map(|t| t.bytes_received()).sum();
        let down_before: u64 = conns.iter().map(|t| t.bytes_sent()).sum();
        for conn in conns.iter_mut() {
            conn.send(&Message::RoundBegin {
                round,
                shuffle_seed: cfg.seed,
            })
            .map_err(TrainError::from)?;
        }
        for conn in conns.iter_mut() {
            match conn.recv().map_err(TrainError::from)? {
                Message::Upload(u) if u.round == round => server.accept_upload(u)?,
                other => return Err(desync(format!("expected upload, got {other:?}"))),
            }
        }
        let (mut downloads, server_loss) = server.sweep(round, &gkt)?;
        if !server_loss.is_finite() {
            return Err(CliError::Diverged(format!(
                "round {round}: server loss {server_loss}"
            )));
        }
        for (i, conn) in conns.iter_mut().enumerate() {
            let d = downloads
                .remove(&ids[i])
                .ok_or_else(|| desync(format!("no download for client {}", ids[i])))?;
            conn.send(&Message::Download(d)).map_err(TrainError::from)?;
        }
        let up: u64 = conns.iter().map(|t| t.bytes_received()).sum::<u64>() - up_before;
        let down: u64 = conns.iter().map(|t| t.bytes_sent()).sum::<u64>() - down_before;
        log::info!("server: round {round} loss {server_loss:.4}");
        metrics.push(RoundMetrics {
            round: round as usize,
            test_acc: f32::NAN,
            server_loss,
            mean_client_ce: f32::NAN,
            mean_client_kd: f32::NAN,
            bytes_up: up,
            bytes_down: down,
            flops_edge: 0,
            flops_server: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    for conn in conns.iter_mut() {
        conn.send(&Message::Bye).map_err(TrainError::from)?;
    }

    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &metrics)?;
    gkt_core::models::save_checkpoint(&cfg.out_dir.join("server.ckpt"), &mut server.model)
        .map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config": cfg,
            "metrics_csv": "metrics.csv",
            "checkpoint": "server.ckpt",
        }))
        .expect("manifest serializes")
            + "\n",
    )?;
    Ok(())
}

/// One client session: derive the local shard from the shared seeds, then
/// follow the coordinator's round schedule until it says goodbye.
pub fn run_client(cfg: &RunConfig) -> Result<(), CliError> {
    let (train, test) = load_datasets(cfg)?;
    let plan = load_partition(cfg, &train)?;
    let mut state = build_clients(cfg, &train, &plan)?
        .into_iter()
        .nth(cfg.client_id as usize)
        .expect("validated client id");
    let gkt = cfg.gkt_config();

    let addr = cfg.server_addr.as_ref().expect("validated");
    let mut conn = TcpTransport::connect(addr).map_err(TrainError::from)?;
    log::info!("client {}: connected to {addr}", state.id);
    conn.send(&Message::Hello {
        client_id: state.id,
        model_hash: ((state.model.feature_channels() as u64) << 32) | state.model.classes() as u64,
    })
    .map_err(TrainError::from)?;

    let mut metrics = Vec::new();
    loop {
        let start = Instant::now();
        let up_before = conn.bytes_sent();
        let down_before = conn.bytes_received();
        let (round, shuffle_seed) = match conn.recv().map_err(TrainError::from)? {
            Message::RoundBegin {
                round,
                shuffle_seed,
            } => (round, shuffle_seed),
            Message::Bye => break,
            other => return Err(desync(format!("expected round_begin, got {other:?}"))),
        };
        let (upload, ce, kd) = state.local_round(round, shuffle_seed, &gkt)?;
        if !ce.is_finite() {
            return Err(CliError::Diverged(format!("round {round}: local loss {ce}")));
        }
        conn.send(&Message::Upload(upload)).map_err(TrainError::from)?;
        match conn.recv().map_err(TrainError::from)? {
            Message::Download(d) => state.store_download(&d, round)?,
            other => return Err(desync(format!("expected download, got {other:?}"))),
        }
        let acc = evaluate_model(&mut state.model, &test, cfg.eval_batch)?;
        log::info!("client {}: round {round} ce {ce:.4} kd {kd:.4} acc {acc:.4}", state.id);
        metrics.push(RoundMetrics {
            round: round as usize,
            test_acc: acc,
            server_loss: f32::NAN,
            mean_client_ce: ce,
            mean_client_kd: kd,
            bytes_up: conn.bytes_sent() - up_before,
            bytes_down: conn.bytes_received() - down_before,
            flops_edge: 0,
            flops_server: 0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    fs::create_dir_all(&cfg.out_dir)?;
    write_metrics_csv(&cfg.out_dir.join("metrics.csv"), &metrics)?;
    gkt_core::models::save_checkpoint(
        &cfg.out_dir.join(format!("edge_{}.ckpt", state.id)),
        &mut state.model,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(
        cfg.out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config": cfg,
            "metrics_csv": "metrics.csv",
            "checkpoint": format!("edge_{}.ckpt", state.id),
        }))
        .expect("manifest serializes")
            + "\n",
    )?;
    Ok(())
}
