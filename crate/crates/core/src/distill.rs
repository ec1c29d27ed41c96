//! Temperature softmax, KL divergence, and the bidirectional distillation
//! losses that couple the edge and server models.
//!
//! Logits travel raw across the wire; softening happens at the consumer.
//! The teacher side of each KL term is always a detached probability
//! tensor, so gradients only reach the student's logits.

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Which knowledge-distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KdMode {
    /// Cross-entropy only on both sides.
    None,
    /// Server trains with CE only; clients still receive server knowledge.
    ServerToEdgeOnly,
    /// Full bidirectional transfer.
    Both,
}

impl KdMode {
    pub fn server_kd(self) -> bool {
        self == KdMode::Both
    }

    pub fn client_kd(self) -> bool {
        self != KdMode::None
    }
}

/// Temperature-softened probability vector for one sample.
#[derive(Debug, Clone)]
pub struct SoftLabel {
    probs: Vec<f32>,
    temperature: f32,
}

impl SoftLabel {
    pub fn from_logits(logits: &[f32], temperature: f32) -> Result<Self, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::NonPositiveTemperature(temperature));
        }
        let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
        let sum: f32 = exps.iter().sum();
        Ok(SoftLabel {
            probs: exps.into_iter().map(|e| e / sum).collect(),
            temperature,
        })
    }

    pub fn probs(&self) -> &[f32] {
        &self.probs
    }

    pub fn temperature(&self) -> f32 {
        self.temperature
    }
}

/// Row-wise softmax of logits/T as a plain (detached) tensor.
pub fn temperature_softmax(logits: &Tensor, temperature: f32) -> Result<Tensor, TensorError> {
    let mut tape = Tape::new();
    let v = tape.leaf(logits.clone(), false);
    let p = tape.softmax_t(v, temperature)?;
    Ok(tape.value(p).clone())
}

/// Mean over the batch of sum_i p_i log(p_i / q_i) for row-stochastic p, q.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f32, TensorError> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "kl_divergence",
            detail: format!("{:?} vs {:?}", p.shape(), q.shape()),
        });
    }
    let n = p.shape()[0];
    let mut acc = 0.0f64;
    for (pi, qi) in p.data().iter().zip(q.data()) {
        if *pi > 0.0 {
            acc += (*pi as f64) * ((*pi as f64).ln() - (*qi as f64).max(f64::MIN_POSITIVE).ln());
        }
    }
    Ok((acc / n as f64) as f32)
}

/// Loss split for metrics reporting.
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub kd: Option<Var>,
}

/// Server-side loss for one client batch: CE against ground truth plus
/// KL(client soft labels || server soft labels). The per-client sum is
/// realized by the training loop visiting each client's batches.
pub fn server_loss(
    tape: &mut Tape,
    server_logits: Var,
    client_logits: &Tensor,
    labels: &[usize],
    temperature: f32,
    kd_mode: KdMode,
) -> Result<LossParts, TensorError> {
    let ce = tape.cross_entropy(server_logits, labels)?;
    if !kd_mode.server_kd() {
        return Ok(LossParts {
            total: ce,
            ce,
            kd: None,
        });
    }
    let teacher = temperature_softmax(client_logits, temperature)?;
    let kd = tape.kl_div_to_student(&teacher, server_logits, temperature)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts {
        total,
        ce,
        kd: Some(kd),
    })
}

/// Client-side loss: CE against ground truth plus KL(server soft labels ||
/// client soft labels). Before the first download exists the loss is CE alone.
pub fn client_loss(
    tape: &mut Tape,
    client_logits: Var,
    server_logits: Option<&Tensor>,
    labels: &[usize],
    temperature: f32,
    kd_mode: KdMode,
) -> Result<LossParts, TensorError> {
    let ce = tape.cross_entropy(client_logits, labels)?;
    let teacher_logits = match server_logits {
        Some(t) if kd_mode.client_kd() => t,
        _ => {
            return Ok(LossParts {
                total: ce,
                ce,
                kd: None,
            })
        }
    };
    let teacher = temperature_softmax(teacher_logits, temperature)?;
    let kd = tape.kl_div_to_student(&teacher, client_logits, temperature)?;
    let total = tape.add(ce, kd)?;
    Ok(LossParts {
        total,
        ce,
        kd: Some(kd),
    })
}
