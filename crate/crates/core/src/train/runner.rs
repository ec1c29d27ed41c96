//! The full alternating loop, driven either sequentially over transports
//! (sync mode) or with concurrent client threads and a coordinator that
//! trains on whatever uploads have arrived (async mode).
//!
//! Both modes exchange the same message sequence per client and round —
//! hello once, then round_begin, upload, download, and a final bye — so a
//! one-client async run reproduces the sync run exactly. Evaluation of the
//! assembled model happens once per round on the global test set; in async
//! mode clients lend their models to the coordinator at a per-round
//! rendezvous that does not constrain upload arrival order.

use super::{
    evaluate_assembled, ClientState, GktConfig, PlateauScheduler, RoundMetrics, ServerState,
    TrainError,
};
use crate::accounting::TRAIN_FLOP_FACTOR;
use crate::data::Dataset;
use crate::models::{EdgeModel, Model};
use crate::protocol::{
    measure_bytes, InProcessSendHalf, InProcessTransport, Message, ProtocolError,
    PumpedTcpTransport, Transport, DEFAULT_SIZE_CAP,
};
use std::collections::BTreeSet;
use std::net::TcpListener;
use std::sync::mpsc;
use std::time::Instant;

/// Which wire the simulated parties talk over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum TransportKind {
    InProcess,
    Tcp,
}

/// Outcome of a federated run.
#[derive(Debug, Clone)]
pub struct GktRunResult {
    pub metrics: Vec<RoundMetrics>,
    pub final_accuracy: f32,
    /// f32 bytes of uploaded feature maps (the upload term of the
    /// closed-form communication cost).
    pub payload_up_bytes: u64,
    /// f32 bytes of downloaded server logits (the download term).
    pub payload_down_bytes: u64,
    /// Full framed wire traffic, both directions.
    pub wire_up_bytes: u64,
    pub wire_down_bytes: u64,
}

fn model_hash(model: &EdgeModel) -> u64 {
    ((model.feature_channels() as u64) << 32) | model.classes() as u64
}

fn make_pairs(
    kind: TransportKind,
    k: usize,
) -> Result<(Vec<Box<dyn Transport>>, Vec<Box<dyn Transport>>), TrainError> {
    let mut server_ends: Vec<Box<dyn Transport>> = Vec::new();
    let mut client_ends: Vec<Box<dyn Transport>> = Vec::new();
    match kind {
        TransportKind::InProcess => {
            for _ in 0..k {
                let (s, c) = InProcessTransport::pair();
                server_ends.push(Box::new(s));
                client_ends.push(Box::new(c));
            }
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(ProtocolError::Io)?;
            let addr = listener.local_addr().map_err(ProtocolError::Io)?;
            for _ in 0..k {
                let client_stream =
                    std::net::TcpStream::connect(addr).map_err(ProtocolError::Io)?;
                let (server_stream, _) = listener.accept().map_err(ProtocolError::Io)?;
                server_ends.push(Box::new(PumpedTcpTransport::new(
                    server_stream,
                    DEFAULT_SIZE_CAP,
                )?));
                client_ends.push(Box::new(PumpedTcpTransport::new(
                    client_stream,
                    DEFAULT_SIZE_CAP,
                )?));
            }
        }
    }
    Ok((server_ends, client_ends))
}

struct FlopTally {
    edge_fwd: Vec<u64>,
    server_fwd: u64,
    edge_total: u64,
    server_total: u64,
}

impl FlopTally {
    fn new(clients: &[ClientState], server: &ServerState) -> FlopTally {
        let edge_fwd = clients
            .iter()
            .map(|c| c.model.flops(c.data.sample_shape()).0)
            .collect();
        let feature_shape = clients
            .first()
            .map(|c| {
                let (_, h, w) = c.data.sample_shape();
                (c.model.feature_channels(), h, w)
            })
            .unwrap_or((1, 1, 1));
        FlopTally {
            edge_fwd,
            server_fwd: server.model.flops(feature_shape).0,
            edge_total: 0,
            server_total: 0,
        }
    }

    /// Local training epochs plus the extraction pass on client `k`.
    fn tally_client_round(&mut self, k: usize, samples: u64, epochs: u64) {
        self.edge_total += self.edge_fwd[k] * samples * (epochs * TRAIN_FLOP_FACTOR + 1);
    }

    fn tally_server_sweep(&mut self, cached_samples: u64, epochs: u64) {
        self.server_total += self.server_fwd * cached_samples * epochs * TRAIN_FLOP_FACTOR;
    }
}

/// Observe an evaluation; when the plateau triggers, decay every client LR
/// and scale the server LR by the same ratio. Returns the new client LR if
/// it changed.
fn apply_plateau(
    scheduler: &mut Option<PlateauScheduler>,
    accuracy: f32,
    client_lr: &mut f32,
    server: &mut ServerState,
) -> Option<f32> {
    let s = scheduler.as_mut()?;
    let old = *client_lr;
    let new = s.observe(accuracy, old);
    if new == old {
        return None;
    }
    *client_lr = new;
    let ratio = if old > 0.0 { new / old } else { 1.0 };
    let slr = server.opt.spec.lr() * ratio;
    server.opt.spec.set_lr(slr);
    Some(new)
}

/// Mean assembled-model accuracy over clients.
fn central_eval(
    clients: &mut [&mut ClientState],
    server: &mut ServerState,
    test: &Dataset,
    eval_batch: usize,
) -> Result<f32, TrainError> {
    let mut acc = 0f64;
    let n = clients.len();
    for c in clients.iter_mut() {
        acc += evaluate_assembled(&mut c.model, &mut server.model, test, eval_batch)? as f64;
    }
    Ok((acc / n as f64) as f32)
}

/// Synchronous run: one upload and one download per client per round, the
/// server barriers on all clients, everything driven sequentially through
/// real transports.
pub fn run_gkt(
    cfg: &GktConfig,
    mut clients: Vec<ClientState>,
    mut server: ServerState,
    test: &Dataset,
    kind: TransportKind,
) -> Result<(GktRunResult, Vec<ClientState>, ServerState), TrainError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(TrainError::Config("at least one client required".into()));
    }
    let k = clients.len();
    let (mut server_ends, mut client_ends) = make_pairs(kind, k)?;

    for (i, c) in clients.iter().enumerate() {
        client_ends[i].send(&Message::Hello {
            client_id: c.id,
            model_hash: model_hash(&c.model),
        })?;
    }
    let mut seen = BTreeSet::new();
    for end in server_ends.iter_mut() {
        match end.recv()? {
            Message::Hello { client_id, .. } => {
                if !seen.insert(client_id) {
                    return Err(TrainError::Desync(format!(
                        "duplicate client id {client_id}"
                    )));
                }
            }
            other => return Err(TrainError::Desync(format!("expected hello, got {other:?}"))),
        }
    }

    let mut tally = FlopTally::new(&clients, &server);
    let mut scheduler = cfg.plateau.map(PlateauScheduler::new);
    let mut client_lr = cfg.client_opt.lr();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut payload_up = 0u64;
    let mut payload_down = 0u64;
    let mut accuracy = 0f32;
    for round in 1..=cfg.rounds as u32 {
        let start = Instant::now();
        let up_before: u64 = server_ends.iter().map(|t| t.bytes_received()).sum();
        let down_before: u64 = server_ends.iter().map(|t| t.bytes_sent()).sum();

        let mut ce_sum = 0f64;
        let mut kd_sum = 0f64;
        for i in 0..k {
            server_ends[i].send(&Message::RoundBegin {
                round,
                shuffle_seed: cfg.seed,
            })?;
            let shuffle_seed = match client_ends[i].recv()? {
                Message::RoundBegin { round: r, shuffle_seed } if r == round => shuffle_seed,
                other => {
                    return Err(TrainError::Desync(format!(
                        "expected round_begin {round}, got {other:?}"
                    )))
                }
            };
            let (upload, ce, kd) = clients[i].local_round(round, shuffle_seed, cfg)?;
            payload_up += upload.feature_payload_bytes();
            tally.tally_client_round(i, clients[i].data.len() as u64, cfg.edge_epochs as u64);
            ce_sum += ce as f64;
            kd_sum += kd as f64;
            client_ends[i].send(&Message::Upload(upload))?;
        }
        for end in server_ends.iter_mut() {
            match end.recv()? {
                Message::Upload(u) => {
                    if u.round != round {
                        return Err(TrainError::Desync(format!(
                            "upload for round {} during round {round}",
                            u.round
                        )));
                    }
                    server.accept_upload(u)?;
                }
                other => {
                    return Err(TrainError::Desync(format!(
                        "expected upload, got {other:?}"
                    )))
                }
            }
        }

        tally.tally_server_sweep(server.cached_samples() as u64, cfg.server_epochs as u64);
        let (mut downloads, server_loss) = server.sweep(round, cfg)?;
        for (i, c) in clients.iter().enumerate() {
            let d = downloads.remove(&c.id).ok_or_else(|| {
                TrainError::Desync(format!("no download produced for client {}", c.id))
            })?;
            payload_down += d.payload_bytes();
            server_ends[i].send(&Message::Download(d))?;
        }
        for (i, c) in clients.iter_mut().enumerate() {
            match client_ends[i].recv()? {
                Message::Download(d) => c.store_download(&d, round)?,
                other => {
                    return Err(TrainError::Desync(format!(
                        "expected download, got {other:?}"
                    )))
                }
            }
        }

        let mut refs: Vec<&mut ClientState> = clients.iter_mut().collect();
        accuracy = central_eval(&mut refs, &mut server, test, cfg.eval_batch)?;
        if let Some(new_lr) = apply_plateau(&mut scheduler, accuracy, &mut client_lr, &mut server)
        {
            for c in clients.iter_mut() {
                c.opt.spec.set_lr(new_lr);
            }
        }

        let up: u64 = server_ends.iter().map(|t| t.bytes_received()).sum::<u64>() - up_before;
        let down: u64 = server_ends.iter().map(|t| t.bytes_sent()).sum::<u64>() - down_before;
        metrics.push(RoundMetrics {
            round: round as usize,
            test_acc: accuracy,
            server_loss,
            mean_client_ce: (ce_sum / k as f64) as f32,
            mean_client_kd: (kd_sum / k as f64) as f32,
            bytes_up: up,
            bytes_down: down,
            flops_edge: tally.edge_total,
            flops_server: tally.server_total,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }

    for end in server_ends.iter_mut() {
        end.send(&Message::Bye)?;
    }
    for end in client_ends.iter_mut() {
        match end.recv()? {
            Message::Bye => {}
            other => return Err(TrainError::Desync(format!("expected bye, got {other:?}"))),
        }
    }

    let wire_up_bytes: u64 = server_ends.iter().map(|t| t.bytes_received()).sum();
    let wire_down_bytes: u64 = server_ends.iter().map(|t| t.bytes_sent()).sum();
    Ok((
        GktRunResult {
            metrics,
            final_accuracy: accuracy,
            payload_up_bytes: payload_up,
            payload_down_bytes: payload_down,
            wire_up_bytes,
            wire_down_bytes,
        },
        clients,
        server,
    ))
}

// ---- async mode ----

enum Event {
    Wire(usize, Result<Message, ProtocolError>),
    Eval {
        slot: usize,
        state: Box<ClientState>,
        ce: f32,
        kd: f32,
        payload_up: u64,
    },
}

struct AsyncClientChannels {
    /// Returns the lent model (plus a new LR when the plateau fired).
    ret_tx: mpsc::Sender<(Box<ClientState>, Option<f32>)>,
}

fn async_client_thread(
    slot: usize,
    mut state: ClientState,
    mut transport: InProcessTransport,
    cfg: GktConfig,
    delay_ms: u64,
    event_tx: mpsc::Sender<Event>,
    ret_rx: mpsc::Receiver<(Box<ClientState>, Option<f32>)>,
) -> Result<ClientState, TrainError> {
    transport.send(&Message::Hello {
        client_id: state.id,
        model_hash: model_hash(&state.model),
    })?;
    for round in 1..=cfg.rounds as u32 {
        let shuffle_seed = match transport.recv()? {
            Message::RoundBegin { round: r, shuffle_seed } if r == round => shuffle_seed,
            other => {
                return Err(TrainError::Desync(format!(
                    "expected round_begin {round}, got {other:?}"
                )))
            }
        };
        let (upload, ce, kd) = state.local_round(round, shuffle_seed, &cfg)?;
        let payload_up = upload.feature_payload_bytes();
        if delay_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(delay_ms));
        }
        transport.send(&Message::Upload(upload))?;
        match transport.recv()? {
            Message::Download(d) => state.store_download(&d, round)?,
            other => {
                return Err(TrainError::Desync(format!(
                    "expected download, got {other:?}"
                )))
            }
        }
        event_tx
            .send(Event::Eval {
                slot,
                state: Box::new(state),
                ce,
                kd,
                payload_up,
            })
            .map_err(|_| TrainError::WorkerPanic)?;
        let (returned, new_lr) = ret_rx.recv().map_err(|_| TrainError::WorkerPanic)?;
        state = *returned;
        if let Some(lr) = new_lr {
            state.opt.spec.set_lr(lr);
        }
    }
    match transport.recv()? {
        Message::Bye => Ok(state),
        other => Err(TrainError::Desync(format!("expected bye, got {other:?}"))),
    }
}

/// Asynchronous run: clients train in independent threads; the server
/// trains a full sweep on its current upload cache the moment any upload
/// arrives and answers that client immediately, never waiting for the
/// rest. `delay_ms[k]` injects an artificial pre-upload delay per client
/// to stress arrival orders (empty slice = no delays).
pub fn run_gkt_async(
    cfg: &GktConfig,
    clients: Vec<ClientState>,
    mut server: ServerState,
    test: &Dataset,
    delay_ms: &[u64],
) -> Result<(GktRunResult, Vec<ClientState>, ServerState), TrainError> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(TrainError::Config("at least one client required".into()));
    }
    let k = clients.len();
    let rounds = cfg.rounds as u32;
    let data_sizes: Vec<u64> = clients.iter().map(|c| c.data.len() as u64).collect();
    let mut tally = FlopTally::new(&clients, &server);

    let (event_tx, event_rx) = mpsc::channel::<Event>();
    let mut send_halves: Vec<InProcessSendHalf> = Vec::with_capacity(k);
    let mut handles = Vec::with_capacity(k);
    let mut channels: Vec<AsyncClientChannels> = Vec::with_capacity(k);
    for (slot, state) in clients.into_iter().enumerate() {
        let (server_end, client_end) = InProcessTransport::pair();
        let (send_half, mut recv_half) = server_end.split();
        send_halves.push(send_half);
        let tx = event_tx.clone();
        std::thread::spawn(move || loop {
            let res = recv_half.recv();
            let stop = res.is_err();
            if tx.send(Event::Wire(slot, res)).is_err() || stop {
                break;
            }
        });
        let (ret_tx, ret_rx) = mpsc::channel();
        channels.push(AsyncClientChannels { ret_tx });
        let cfg_cloned = cfg.clone();
        let delay = delay_ms.get(slot).copied().unwrap_or(0);
        let tx = event_tx.clone();
        handles.push(std::thread::spawn(move || {
            async_client_thread(slot, state, client_end, cfg_cloned, delay, tx, ret_rx)
        }));
    }
    drop(event_tx);

    let mut scheduler = cfg.plateau.map(PlateauScheduler::new);
    let mut client_lr = cfg.client_opt.lr();
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut payload_up = 0u64;
    let mut payload_down = 0u64;
    let mut wire_up_total = 0u64;
    let mut wire_down_total = 0u64;
    // per-round accumulators (the round_begin for round r is attributed to
    // round r no matter when it is sent)
    let mut round_up = vec![0u64; cfg.rounds + 1];
    let mut round_down = vec![0u64; cfg.rounds + 1];
    let mut server_loss_by_round = vec![0f32; cfg.rounds + 1];
    let mut stash: Vec<Option<(Box<ClientState>, f32, f32)>> = (0..k).map(|_| None).collect();
    let mut stashed = 0usize;
    let mut hellos = BTreeSet::new();
    let mut round = 1u32;
    let mut accuracy = 0f32;
    let mut round_start = Instant::now();

    let outcome: Result<(), TrainError> = (|| {
        while round <= rounds {
            let event = event_rx.recv().map_err(|_| TrainError::WorkerPanic)?;
            match event {
                Event::Wire(slot, res) => {
                    let m = res?;
                    let size = measure_bytes(&m);
                    match m {
                        Message::Hello { client_id, .. } => {
                            if !hellos.insert(client_id) {
                                return Err(TrainError::Desync(format!(
                                    "duplicate client id {client_id}"
                                )));
                            }
                            wire_up_total += size;
                            let rb = Message::RoundBegin {
                                round: 1,
                                shuffle_seed: cfg.seed,
                            };
                            round_down[1] += measure_bytes(&rb);
                            wire_down_total += measure_bytes(&rb);
                            send_halves[slot]
                                .send(&rb)
                                .map_err(TrainError::Protocol)?;
                        }
                        Message::Upload(u) => {
                            let r = u.round as usize;
                            if u.round != round {
                                return Err(TrainError::Desync(format!(
                                    "upload for round {} during round {round}",
                                    u.round
                                )));
                            }
                            round_up[r] += size;
                            wire_up_total += size;
                            let client_id = u.client_id;
                            tally.tally_client_round(
                                slot,
                                data_sizes[slot],
                                cfg.edge_epochs as u64,
                            );
                            server.accept_upload(u)?;
                            tally.tally_server_sweep(
                                server.cached_samples() as u64,
                                cfg.server_epochs as u64,
                            );
                            let (mut downloads, loss) = server.sweep(u32::from(round), cfg)?;
                            server_loss_by_round[r] = loss;
                            let d = downloads.remove(&client_id).ok_or_else(|| {
                                TrainError::Desync(format!(
                                    "no download produced for client {client_id}"
                                ))
                            })?;
                            payload_down += d.payload_bytes();
                            let dm = Message::Download(d);
                            round_down[r] += measure_bytes(&dm);
                            wire_down_total += measure_bytes(&dm);
                            send_halves[slot]
                                .send(&dm)
                                .map_err(TrainError::Protocol)?;
                        }
                        other => {
                            return Err(TrainError::Desync(format!(
                                "unexpected message {other:?}"
                            )))
                        }
                    }
                }
                Event::Eval {
                    slot,
                    state,
                    ce,
                    kd,
                    payload_up: pu,
                } => {
                    payload_up += pu;
                    if stash[slot].replace((state, ce, kd)).is_some() {
                        return Err(TrainError::Desync(format!(
                            "client {slot} evaluated twice in round {round}"
                        )));
                    }
                    stashed += 1;
                    if stashed < k {
                        continue;
                    }
                    // rendezvous: all clients finished this round
                    let mut taken: Vec<(Box<ClientState>, f32, f32)> =
                        stash.iter_mut().map(|s| s.take().unwrap()).collect();
                    stashed = 0;
                    let mut refs: Vec<&mut ClientState> =
                        taken.iter_mut().map(|(s, _, _)| s.as_mut()).collect();
                    accuracy = central_eval(&mut refs, &mut server, test, cfg.eval_batch)?;
                    let new_lr =
                        apply_plateau(&mut scheduler, accuracy, &mut client_lr, &mut server);
                    let r = round as usize;
                    let ce_sum: f64 = taken.iter().map(|(_, ce, _)| *ce as f64).sum();
                    let kd_sum: f64 = taken.iter().map(|(_, _, kd)| *kd as f64).sum();
                    metrics.push(RoundMetrics {
                        round: r,
                        test_acc: accuracy,
                        server_loss: server_loss_by_round[r],
                        mean_client_ce: (ce_sum / k as f64) as f32,
                        mean_client_kd: (kd_sum / k as f64) as f32,
                        bytes_up: round_up[r],
                        bytes_down: round_down[r],
                        flops_edge: tally.edge_total,
                        flops_server: tally.server_total,
                        wall_ms: round_start.elapsed().as_millis() as u64,
                    });
                    round_start = Instant::now();
                    round += 1;
                    for (slot, (state, _, _)) in taken.into_iter().enumerate() {
                        if round <= rounds {
                            let rb = Message::RoundBegin {
                                round,
                                shuffle_seed: cfg.seed,
                            };
                            round_down[round as usize] += measure_bytes(&rb);
                            wire_down_total += measure_bytes(&rb);
                            send_halves[slot].send(&rb).map_err(TrainError::Protocol)?;
                        } else {
                            let bye = Message::Bye;
                            wire_down_total += measure_bytes(&bye);
                            send_halves[slot].send(&bye).map_err(TrainError::Protocol)?;
                        }
                        channels[slot]
                            .ret_tx
                            .send((state, new_lr))
                            .map_err(|_| TrainError::WorkerPanic)?;
                    }
                }
            }
        }
        Ok(())
    })();
    outcome?;

    let mut finals = Vec::with_capacity(k);
    for h in handles {
        finals.push(h.join().map_err(|_| TrainError::WorkerPanic)??);
    }
    Ok((
        GktRunResult {
            metrics,
            final_accuracy: accuracy,
            payload_up_bytes: payload_up,
            payload_down_bytes: payload_down,
            wire_up_bytes: wire_up_total,
            wire_down_bytes: wire_down_total,
        },
        finals,
        server,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{iid_partition, synthetic_dataset};
    use crate::models::{build_edge, build_server, EdgeVariant, ServerDepth};
    use crate::tensor::Optimizer;

    fn toy_parties(
        cfg: &GktConfig,
        k: usize,
        n: usize,
    ) -> (Vec<ClientState>, ServerState, Dataset) {
        let train = synthetic_dataset(n, 4, 3, 8, 0.3, 11, 1);
        let test = synthetic_dataset(80, 4, 3, 8, 0.3, 11, 2);
        let plan = iid_partition(train.len(), k, cfg.seed);
        let clients = (0..k)
            .map(|i| {
                ClientState::new(
                    i as u32,
                    build_edge(EdgeVariant::Toy { base: 8 }, 4, super::super::derive_seed(cfg.seed, 10, i as u64)),
                    Optimizer::new(cfg.client_opt),
                    train.subset(&plan.assignments[i]),
                    cfg.seed,
                )
            })
            .collect();
        let server = ServerState::new(
            build_server(
                ServerDepth::Toy { blocks_per_stage: 1 },
                8,
                8,
                4,
                super::super::derive_seed(cfg.seed, 11, 0),
            ),
            Optimizer::new(cfg.server_opt),
        );
        (clients, server, test)
    }

    fn quick_cfg(seed: u64) -> GktConfig {
        let mut cfg = GktConfig::toy(seed);
        cfg.rounds = 2;
        cfg.server_epochs = 1;
        cfg.batch_size = 16;
        cfg
    }

    #[test]
    fn sync_run_produces_complete_metrics() {
        let cfg = quick_cfg(0);
        let (clients, server, test) = toy_parties(&cfg, 2, 64);
        let (result, clients, _) =
            run_gkt(&cfg, clients, server, &test, TransportKind::InProcess).unwrap();
        assert_eq!(result.metrics.len(), 2);
        assert_eq!(clients.len(), 2);
        for m in &result.metrics {
            assert!(m.test_acc.is_finite() && (0.0..=1.0).contains(&m.test_acc));
            assert!(m.server_loss.is_finite());
            assert!(m.bytes_up > 0 && m.bytes_down > 0);
            assert!(m.flops_edge > 0 && m.flops_server > 0);
        }
        assert!(result.payload_up_bytes > 0);
        assert!(result.wire_up_bytes > result.payload_up_bytes);
    }

    #[test]
    fn sync_metrics_identical_across_transports() {
        let cfg = quick_cfg(1);
        let (c1, s1, test) = toy_parties(&cfg, 2, 64);
        let (a, _, _) = run_gkt(&cfg, c1, s1, &test, TransportKind::InProcess).unwrap();
        let (c2, s2, test2) = toy_parties(&cfg, 2, 64);
        let (b, _, _) = run_gkt(&cfg, c2, s2, &test2, TransportKind::Tcp).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert!(x.deterministic_eq(y), "{x:?} vs {y:?}");
        }
        assert_eq!(a.wire_up_bytes, b.wire_up_bytes);
        assert_eq!(a.wire_down_bytes, b.wire_down_bytes);
    }

    #[test]
    fn single_client_async_equals_sync() {
        let cfg = quick_cfg(2);
        let (c1, s1, test) = toy_parties(&cfg, 1, 48);
        let (sync, _, _) = run_gkt(&cfg, c1, s1, &test, TransportKind::InProcess).unwrap();
        let (c2, s2, test2) = toy_parties(&cfg, 1, 48);
        let (asy, _, _) = run_gkt_async(&cfg, c2, s2, &test2, &[]).unwrap();
        assert_eq!(sync.metrics.len(), asy.metrics.len());
        for (x, y) in sync.metrics.iter().zip(&asy.metrics) {
            assert!(x.deterministic_eq(y), "{x:?} vs {y:?}");
        }
        assert_eq!(sync.payload_up_bytes, asy.payload_up_bytes);
        assert_eq!(sync.payload_down_bytes, asy.payload_down_bytes);
        assert_eq!(sync.wire_up_bytes, asy.wire_up_bytes);
        assert_eq!(sync.wire_down_bytes, asy.wire_down_bytes);
    }

    #[test]
    fn async_with_random_delays_completes_without_deadlock() {
        let cfg = quick_cfg(3);
        let (clients, server, test) = toy_parties(&cfg, 3, 60);
        let (result, finals, _) =
            run_gkt_async(&cfg, clients, server, &test, &[25, 0, 10]).unwrap();
        assert_eq!(result.metrics.len(), cfg.rounds);
        assert_eq!(finals.len(), 3);
        for m in &result.metrics {
            assert!(m.server_loss.is_finite());
        }
    }

    #[test]
    fn payload_bytes_match_closed_form_prediction() {
        let cfg = quick_cfg(4);
        let (clients, server, test) = toy_parties(&cfg, 2, 64);
        let (result, _, _) =
            run_gkt(&cfg, clients, server, &test, TransportKind::InProcess).unwrap();
        let feature = crate::accounting::feature_bytes((8, 8, 8));
        let logit = crate::accounting::logit_bytes(4);
        let n = 64u64;
        let rounds = cfg.rounds as u64;
        assert_eq!(
            result.payload_up_bytes,
            crate::accounting::comm_cost_gkt(feature, 0, n, rounds)
        );
        assert_eq!(
            result.payload_down_bytes,
            crate::accounting::comm_cost_gkt(0, logit, n, rounds)
        );
        assert_eq!(
            result.payload_up_bytes + result.payload_down_bytes,
            crate::accounting::comm_cost_gkt(feature, logit, n, rounds)
        );
    }
}
