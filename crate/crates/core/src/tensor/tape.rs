//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value plus whatever the
//! backward rule needs. Nodes are created in execution order, so walking
//! the node list in reverse is a valid reverse topological order.

use super::ops::{self, ConvGeom};
use super::{Tensor, TensorError};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential-moving-average statistics owned by a batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], 1.0),
        }
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        // saved normalized input and per-channel inverse std of the pass
        xhat: Vec<f32>,
        invstd: Vec<f32>,
        mode: Mode,
        count_per_channel: usize,
    },
    Relu {
        input: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        geom: (usize, usize, usize, usize, usize, usize), // n,c,h,w,oh,ow
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: f32,
    },
    Sum {
        input: Var,
    },
    SoftmaxT {
        input: Var,
        temperature: f32,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    /// KL(teacher || softmax_T(student)) with the teacher detached.
    KlDivToStudent {
        student: Var,
        teacher: Vec<f32>,
        temperature: f32,
        student_probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- ops ----

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input rank {} kernel rank {}, expected 4/4", xs.len(), ks.len()),
            });
        }
        if xs[1] != ks[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channels {} != kernel in-channels {}", xs[1], ks[1]),
            });
        }
        let oh = ConvGeom::out_dim(xs[2], ks[2], stride.0, pad.0);
        let ow = ConvGeom::out_dim(xs[3], ks[3], stride.1, pad.1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::NonPositiveOutput {
                    op: "conv2d",
                    detail: format!(
                        "input {}x{}, kernel {}x{}, stride {:?}, pad {:?}",
                        xs[2], xs[3], ks[2], ks[3], stride, pad
                    ),
                })
            }
        };
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            oh,
            ow,
        };
        let cols = ops::im2col(self.value(input).data(), &geom);
        let rows = geom.cin * geom.kh * geom.kw;
        let ncols = geom.n * geom.oh * geom.ow;
        let prod = ops::matmul(self.value(kernel).data(), &cols, geom.cout, rows, ncols);
        let out = ops::conv_gather_output(&prod, &geom);
        let value = Tensor::new(vec![geom.n, geom.cout, oh, ow], out)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(value, rg, Op::Conv2d { input, kernel, geom }))
    }

    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats,
        momentum: f32,
        eps: f32,
        mode: Mode,
    ) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm2d",
                detail: format!("input rank {}, expected 4", xs.len()),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batch_norm2d",
                detail: format!(
                    "gamma/beta length {}/{} != channels {}",
                    self.value(gamma).numel(),
                    self.value(beta).numel(),
                    c
                ),
            });
        }
        let m = n * h * w;
        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(TensorError::BatchTooSmall(m));
                }
                let x = self.value(input).data();
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f32;
                    for ni in 0..n {
                        let base = (ni * c + ch) * h * w;
                        for i in 0..h * w {
                            s += x[base + i];
                        }
                    }
                    mean[ch] = s / m as f32;
                    let mut v = 0.0f32;
                    for ni in 0..n {
                        let base = (ni * c + ch) * h * w;
                        for i in 0..h * w {
                            let d = x[base + i] - mean[ch];
                            v += d * d;
                        }
                    }
                    var[ch] = v / m as f32; // biased, used for normalization
                }
                // running stats track the unbiased variance
                let unbias = m as f32 / (m as f32 - 1.0);
                for ch in 0..c {
                    running.mean.data_mut()[ch] =
                        momentum * running.mean.data()[ch] + (1.0 - momentum) * mean[ch];
                    running.var.data_mut()[ch] =
                        momentum * running.var.data()[ch] + (1.0 - momentum) * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (running.mean.data().to_vec(), running.var.data().to_vec()),
        };
        let invstd: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let x = self.value(input).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0f32; x.len()];
        let mut out = vec![0.0f32; x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * h * w;
                for i in 0..h * w {
                    let xh = (x[base + i] - mean[ch]) * invstd[ch];
                    xhat[base + i] = xh;
                    out[base + i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(input) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                invstd,
                mode,
                count_per_channel: m,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = Tensor::from_fn(self.value(input).shape(), |i| {
            self.value(input).data()[i].max(0.0)
        });
        let rg = self.rg(input);
        self.push(value, rg, Op::Relu { input })
    }

    pub fn max_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "max_pool2d",
                detail: format!("input rank {}, expected 4", xs.len()),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = ConvGeom::out_dim(h, kernel.0, stride.0, pad.0);
        let ow = ConvGeom::out_dim(w, kernel.1, stride.1, pad.1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::NonPositiveOutput {
                    op: "max_pool2d",
                    detail: format!("input {h}x{w}, kernel {kernel:?}, stride {stride:?}"),
                })
            }
        };
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        for ni in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..kernel.0 {
                            let iy = (oy * stride.0 + ky) as isize - pad.0 as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel.1 {
                                let ix = (ox * stride.1 + kx) as isize - pad.1 as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx =
                                    ((ni * c + ch) * h + iy as usize) * w + ix as usize;
                                // strict > keeps the first maximum in scan order
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let o = ((ni * c + ch) * oh + oy) * ow + ox;
                        out[o] = best;
                        argmax[o] = best_idx;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::MaxPool2d { input, argmax }))
    }

    pub fn avg_pool2d(
        &mut self,
        input: Var,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "avg_pool2d",
                detail: format!("input rank {}, expected 4", xs.len()),
            });
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = ConvGeom::out_dim(h, kernel.0, stride.0, 0);
        let ow = ConvGeom::out_dim(w, kernel.1, stride.1, 0);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(TensorError::NonPositiveOutput {
                    op: "avg_pool2d",
                    detail: format!("input {h}x{w}, kernel {kernel:?}"),
                })
            }
        };
        let x = self.value(input).data();
        let area = (kernel.0 * kernel.1) as f32;
        let mut out = vec![0.0f32; n * c * oh * ow];
        for ni in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0f32;
                        for ky in 0..kernel.0 {
                            for kx in 0..kernel.1 {
                                let iy = oy * stride.0 + ky;
                                let ix = ox * stride.1 + kx;
                                s += x[((ni * c + ch) * h + iy) * w + ix];
                            }
                        }
                        out[((ni * c + ch) * oh + oy) * ow + ox] = s / area;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.rg(input);
        Ok(self.push(
            value,
            rg,
            Op::AvgPool2d {
                input,
                kernel,
                stride,
                geom: (n, c, h, w, oh, ow),
            },
        ))
    }

    /// Global average pool followed by a flatten to [N, C].
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let pooled = self.avg_pool2d(input, (xs[2], xs[3]), (1, 1))?;
        Ok(self.flatten(pooled))
    }

    /// y = x W^T + b, with x: [N, in], W: [out, in], b: [out].
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input {:?} weight {:?}", xs, ws),
            });
        }
        let (n, cin, cout) = (xs[0], xs[1], ws[0]);
        if self.value(bias).numel() != cout {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("bias length {} != out {}", self.value(bias).numel(), cout),
            });
        }
        let x = self.value(input).data();
        let w = self.value(weight).data();
        let b = self.value(bias).data();
        // x [n, cin] · w^T [cin, cout]: transpose w once
        let mut wt = vec![0.0f32; cin * cout];
        for o in 0..cout {
            for i in 0..cin {
                wt[i * cout + o] = w[o * cin + i];
            }
        }
        let mut y = ops::matmul(x, &wt, n, cin, cout);
        for r in 0..n {
            for o in 0..cout {
                y[r * cout + o] += b[o];
            }
        }
        let value = Tensor::new(vec![n, cout], y)?;
        let rg = self.rg(input) || self.rg(weight) || self.rg(bias);
        Ok(self.push(value, rg, Op::Linear { input, weight, bias }))
    }

    /// Collapse all trailing dimensions: [N, ...] -> [N, prod(...)].
    pub fn flatten(&mut self, input: Var) -> Var {
        let xs = self.value(input).shape().to_vec();
        let rest: usize = xs[1..].iter().product();
        let value = self
            .value(input)
            .reshaped(vec![xs[0], rest])
            .expect("flatten preserves element count");
        let rg = self.rg(input);
        self.push(value, rg, Op::Reshape { input })
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            });
        }
        let value = Tensor::from_fn(self.value(lhs).shape(), |i| {
            self.value(lhs).data()[i] + self.value(rhs).data()[i]
        });
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(value, rg, Op::Add { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, TensorError> {
        if self.value(lhs).shape() != self.value(rhs).shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mul",
                detail: format!(
                    "{:?} vs {:?}",
                    self.value(lhs).shape(),
                    self.value(rhs).shape()
                ),
            });
        }
        let value = Tensor::from_fn(self.value(lhs).shape(), |i| {
            self.value(lhs).data()[i] * self.value(rhs).data()[i]
        });
        let rg = self.rg(lhs) || self.rg(rhs);
        Ok(self.push(value, rg, Op::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        let value = Tensor::from_fn(self.value(input).shape(), |i| {
            self.value(input).data()[i] * factor
        });
        let rg = self.rg(input);
        self.push(value, rg, Op::Scale { input, factor })
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f32 = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Row-wise softmax of logits/T over a [N, C] tensor.
    pub fn softmax_t(&mut self, input: Var, temperature: f32) -> Result<Var, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::NonPositiveTemperature(temperature));
        }
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_t",
                detail: format!("input rank {}, expected 2", xs.len()),
            });
        }
        let mut out = vec![0.0f32; xs[0] * xs[1]];
        ops::softmax_rows(self.value(input).data(), xs[0], xs[1], temperature, &mut out);
        let value = Tensor::new(xs, out)?;
        let rg = self.rg(input);
        Ok(self.push(value, rg, Op::SoftmaxT { input, temperature }))
    }

    /// Mean negative log softmax probability of the true class (T = 1).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let xs = self.value(logits).shape().to_vec();
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {:?} vs {} labels", xs, labels.len()),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        for &l in labels {
            if l >= c {
                return Err(TensorError::LabelOutOfRange { label: l, classes: c });
            }
        }
        let mut probs = vec![0.0f32; n * c];
        ops::softmax_rows(self.value(logits).data(), n, c, 1.0, &mut probs);
        let mut loss = 0.0f32;
        for (r, &l) in labels.iter().enumerate() {
            loss -= probs[r * c + l].max(f32::MIN_POSITIVE).ln();
        }
        loss /= n as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean KL(teacher || softmax_T(student)). The teacher is a detached
    /// row-stochastic [N, C] tensor; gradient flows only into the student.
    pub fn kl_div_to_student(
        &mut self,
        teacher: &Tensor,
        student: Var,
        temperature: f32,
    ) -> Result<Var, TensorError> {
        if temperature <= 0.0 {
            return Err(TensorError::NonPositiveTemperature(temperature));
        }
        let xs = self.value(student).shape().to_vec();
        if teacher.shape() != xs.as_slice() || xs.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div_to_student",
                detail: format!("teacher {:?} vs student {:?}", teacher.shape(), xs),
            });
        }
        let (n, c) = (xs[0], xs[1]);
        let mut sp = vec![0.0f32; n * c];
        ops::softmax_rows(self.value(student).data(), n, c, temperature, &mut sp);
        let t = teacher.data();
        let mut loss = 0.0f32;
        for i in 0..n * c {
            if t[i] > 0.0 {
                loss += t[i] * (t[i].ln() - sp[i].max(f32::MIN_POSITIVE).ln());
            }
        }
        loss /= n as f32;
        let rg = self.rg(student);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::KlDivToStudent {
                student,
                teacher: t.to_vec(),
                temperature,
                student_probs: sp,
            },
        ))
    }

    // ---- backward ----

    fn grad_mut(&mut self, v: Var) -> &mut Vec<f32> {
        let len = self.nodes[v.0].value.numel();
        self.nodes[v.0].grad.get_or_insert_with(|| vec![0.0; len])
    }

    /// Replay the tape backward from a scalar loss, accumulating gradients
    /// into every node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::ShapeMismatch {
                op: "backward",
                detail: "loss is not on this tape".into(),
            });
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.nodes[loss.0].value.shape().to_vec(),
            });
        }
        *self.grad_mut(loss) = vec![1.0];
        for idx in (0..=loss.0).rev() {
            let gout = match &self.nodes[idx].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // take the op out to appease the borrow checker, put it back after
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_node(&op, idx, &gout);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backprop_node(&mut self, op: &Op, idx: usize, gout: &[f32]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom } => {
                let g = *geom;
                let rows = g.cin * g.kh * g.kw;
                let ncols = g.n * g.oh * g.ow;
                let gmat = ops::conv_scatter_out_grad(gout, &g); // [cout, ncols]
                // dW = gmat · cols^T  (cols rebuilt from the saved input value)
                let cols = ops::im2col(self.value(*input).data(), &g);
                let mut colst = vec![0.0f32; ncols * rows];
                for r in 0..rows {
                    for cl in 0..ncols {
                        colst[cl * rows + r] = cols[r * ncols + cl];
                    }
                }
                let dw = ops::matmul(&gmat, &colst, g.cout, ncols, rows);
                let kgrad = self.grad_mut(*kernel);
                for i in 0..dw.len() {
                    kgrad[i] += dw[i];
                }
                // dcols = W^T · gmat, then scatter back to input layout
                let w = self.value(*kernel).data().to_vec();
                let mut wt = vec![0.0f32; rows * g.cout];
                for co in 0..g.cout {
                    for r in 0..rows {
                        wt[r * g.cout + co] = w[co * rows + r];
                    }
                }
                let dcols = ops::matmul(&wt, &gmat, rows, g.cout, ncols);
                let igrad = self.grad_mut(*input);
                ops::col2im_add(&dcols, &g, igrad);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                invstd,
                mode,
                count_per_channel,
            } => {
                let shape = self.value(*input).shape().to_vec();
                let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let gamma_v = self.value(*gamma).data().to_vec();
                let m = *count_per_channel as f32;
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * h * w;
                        for i in 0..h * w {
                            dgamma[ch] += gout[base + i] * xhat[base + i];
                            dbeta[ch] += gout[base + i];
                        }
                    }
                }
                {
                    let gg = self.grad_mut(*gamma);
                    for ch in 0..c {
                        gg[ch] += dgamma[ch];
                    }
                }
                {
                    let gb = self.grad_mut(*beta);
                    for ch in 0..c {
                        gb[ch] += dbeta[ch];
                    }
                }
                let igrad = self.grad_mut(*input);
                match mode {
                    Mode::Train => {
                        // dx = gamma*invstd/m * (m*dy - sum(dy) - xhat*sum(dy*xhat))
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * h * w;
                                let k = gamma_v[ch] * invstd[ch] / m;
                                for i in 0..h * w {
                                    igrad[base + i] += k
                                        * (m * gout[base + i]
                                            - dbeta[ch]
                                            - xhat[base + i] * dgamma[ch]);
                                }
                            }
                        }
                    }
                    Mode::Eval => {
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * h * w;
                                let k = gamma_v[ch] * invstd[ch];
                                for i in 0..h * w {
                                    igrad[base + i] += k * gout[base + i];
                                }
                            }
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let mask: Vec<bool> = self
                    .value(*input)
                    .data()
                    .iter()
                    .map(|&v| v > 0.0)
                    .collect();
                let igrad = self.grad_mut(*input);
                for i in 0..gout.len() {
                    if mask[i] {
                        igrad[i] += gout[i];
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let igrad = self.grad_mut(*input);
                for (o, &src) in argmax.iter().enumerate() {
                    igrad[src] += gout[o];
                }
            }
            Op::AvgPool2d {
                input,
                kernel,
                stride,
                geom,
            } => {
                let (n, c, h, w, oh, ow) = *geom;
                let area = (kernel.0 * kernel.1) as f32;
                let igrad = self.grad_mut(*input);
                for ni in 0..n {
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = gout[((ni * c + ch) * oh + oy) * ow + ox] / area;
                                for ky in 0..kernel.0 {
                                    for kx in 0..kernel.1 {
                                        let iy = oy * stride.0 + ky;
                                        let ix = ox * stride.1 + kx;
                                        igrad[((ni * c + ch) * h + iy) * w + ix] += g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.value(*input).shape().to_vec();
                let (n, cin) = (xs[0], xs[1]);
                let cout = self.value(*weight).shape()[0];
                let x = self.value(*input).data().to_vec();
                let w = self.value(*weight).data().to_vec();
                // dW = dy^T · x
                let mut dyt = vec![0.0f32; cout * n];
                for r in 0..n {
                    for o in 0..cout {
                        dyt[o * n + r] = gout[r * cout + o];
                    }
                }
                let dw = ops::matmul(&dyt, &x, cout, n, cin);
                {
                    let wg = self.grad_mut(*weight);
                    for i in 0..dw.len() {
                        wg[i] += dw[i];
                    }
                }
                {
                    let bg = self.grad_mut(*bias);
                    for r in 0..n {
                        for o in 0..cout {
                            bg[o] += gout[r * cout + o];
                        }
                    }
                }
                // dx = dy · W
                let dx = ops::matmul(gout, &w, n, cout, cin);
                let ig = self.grad_mut(*input);
                for i in 0..dx.len() {
                    ig[i] += dx[i];
                }
            }
            Op::Reshape { input } => {
                let ig = self.grad_mut(*input);
                for i in 0..gout.len() {
                    ig[i] += gout[i];
                }
            }
            Op::Add { lhs, rhs } => {
                {
                    let lg = self.grad_mut(*lhs);
                    for i in 0..gout.len() {
                        lg[i] += gout[i];
                    }
                }
                let rg = self.grad_mut(*rhs);
                for i in 0..gout.len() {
                    rg[i] += gout[i];
                }
            }
            Op::Mul { lhs, rhs } => {
                let l = self.value(*lhs).data().to_vec();
                let r = self.value(*rhs).data().to_vec();
                {
                    let lg = self.grad_mut(*lhs);
                    for i in 0..gout.len() {
                        lg[i] += gout[i] * r[i];
                    }
                }
                let rg = self.grad_mut(*rhs);
                for i in 0..gout.len() {
                    rg[i] += gout[i] * l[i];
                }
            }
            Op::Scale { input, factor } => {
                let ig = self.grad_mut(*input);
                for i in 0..gout.len() {
                    ig[i] += gout[i] * factor;
                }
            }
            Op::Sum { input } => {
                let ig = self.grad_mut(*input);
                for g in ig.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::SoftmaxT { input, temperature } => {
                let xs = self.value(idx_var(idx)).shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let p = self.value(idx_var(idx)).data().to_vec();
                let ig = self.grad_mut(*input);
                for r in 0..n {
                    let mut dot = 0.0f32;
                    for j in 0..c {
                        dot += gout[r * c + j] * p[r * c + j];
                    }
                    for j in 0..c {
                        ig[r * c + j] +=
                            p[r * c + j] * (gout[r * c + j] - dot) / temperature;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let ig = self.grad_mut(*logits);
                let scale = gout[0] / n as f32;
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        ig[r * c + j] += scale * (probs[r * c + j] - onehot);
                    }
                }
            }
            Op::KlDivToStudent {
                student,
                teacher,
                temperature,
                student_probs,
            } => {
                let xs = self.value(*student).shape().to_vec();
                let (n, c) = (xs[0], xs[1]);
                let ig = self.grad_mut(*student);
                let scale = gout[0] / (temperature * n as f32);
                for i in 0..n * c {
                    ig[i] += scale * (student_probs[i] - teacher[i]);
                }
            }
        }
    }
}

fn idx_var(idx: usize) -> Var {
    Var(idx)
}
