//! Server-side round logic: a cache of the latest upload per client and
//! the multi-epoch training sweep that consumes it, emitting per-client
//! logit downloads recorded on the final epoch.

use super::{GktConfig, TrainError};
use crate::distill::server_loss;
use crate::models::{FwdCtx, Model, ServerModel};
use crate::protocol::{ClientUpload, DownloadBatch, ServerDownload};
use crate::tensor::{Mode, Optimizer, Tape};
use std::collections::BTreeMap;

/// The server's model, optimizer, and per-client upload cache.
pub struct ServerState {
    pub model: ServerModel,
    pub opt: Optimizer,
    cache: BTreeMap<u32, ClientUpload>,
}

impl ServerState {
    pub fn new(model: ServerModel, opt: Optimizer) -> ServerState {
        ServerState {
            model,
            opt,
            cache: BTreeMap::new(),
        }
    }

    pub fn cached_clients(&self) -> Vec<u32> {
        self.cache.keys().copied().collect()
    }

    /// Number of samples currently cached across clients.
    pub fn cached_samples(&self) -> usize {
        self.cache
            .values()
            .flat_map(|u| u.batches.iter())
            .map(|b| b.labels.len())
            .sum()
    }

    /// Replace the cached upload for its client.
    pub fn accept_upload(&mut self, upload: ClientUpload) -> Result<(), TrainError> {
        upload.validate()?;
        for b in &upload.batches {
            let classes = self.model.classes();
            if b.logits.shape()[1] != classes {
                return Err(TrainError::Desync(format!(
                    "client {} batch {}: {} logit columns, server has {classes} classes",
                    upload.client_id,
                    b.b_idx,
                    b.logits.shape()[1]
                )));
            }
            if b.features.shape()[1] != self.model.input_channels() {
                return Err(TrainError::Desync(format!(
                    "client {} batch {}: {} feature channels, server expects {}",
                    upload.client_id,
                    b.b_idx,
                    b.features.shape()[1],
                    self.model.input_channels()
                )));
            }
            for &l in &b.labels {
                if l as usize >= classes {
                    return Err(TrainError::Desync(format!(
                        "client {} batch {}: label {l} out of range",
                        upload.client_id, b.b_idx
                    )));
                }
            }
        }
        self.cache.insert(upload.client_id, upload);
        Ok(())
    }

    /// One training sweep: `server_epochs` passes over every cached
    /// client's batches (clients in ascending id, batches in ascending
    /// `b_idx`), recording server logits on the final epoch. Returns one
    /// download per cached client and the final epoch's mean loss.
    pub fn sweep(
        &mut self,
        round: u32,
        cfg: &GktConfig,
    ) -> Result<(BTreeMap<u32, ServerDownload>, f32), TrainError> {
        if self.cache.is_empty() {
            return Err(TrainError::Config(
                "server sweep requires at least one cached upload".into(),
            ));
        }
        let mut downloads: BTreeMap<u32, ServerDownload> = BTreeMap::new();
        let mut final_loss = 0f64;
        let mut final_samples = 0usize;
        for epoch in 1..=cfg.server_epochs {
            let last = epoch == cfg.server_epochs;
            for (&k, upload) in &self.cache {
                let mut recorded = Vec::new();
                for batch in &upload.batches {
                    let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
                    let mut tape = Tape::new();
                    let mut ctx = FwdCtx::new(&mut tape, Mode::Train);
                    let h = ctx.tape.leaf(batch.features.clone(), false);
                    let z = self.model.forward(&mut ctx, h)?;
                    let parts = server_loss(
                        ctx.tape,
                        z,
                        &batch.logits,
                        &labels,
                        cfg.temperature,
                        cfg.kd_mode,
                    )?;
                    if last {
                        recorded.push(DownloadBatch {
                            b_idx: batch.b_idx,
                            logits: ctx.tape.value(z).clone(),
                        });
                        final_loss +=
                            ctx.tape.value(parts.total).item() as f64 * labels.len() as f64;
                        final_samples += labels.len();
                    }
                    let params = ctx.params;
                    tape.backward(parts.total)?;
                    super::apply_step(&mut self.model, &params, &tape, &mut self.opt)?;
                }
                if last {
                    downloads.insert(
                        k,
                        ServerDownload {
                            client_id: k,
                            round,
                            batches: recorded,
                        },
                    );
                }
            }
        }
        Ok((downloads, (final_loss / final_samples.max(1) as f64) as f32))
    }
}
