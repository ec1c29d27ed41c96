//! Raw forward/backward kernels shared by the tape operations.
//!
//! Convolution goes through im2col + a single matrix multiply; the column
//! matrix is rebuilt during backward instead of being saved on the tape.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_dim + 2 * pad;
        if padded < k {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// Column matrix: rows = cin*kh*kw, cols = n*oh*ow (column index (n, oh, ow)).
pub(crate) fn im2col(input: &[f32], g: &ConvGeom) -> Vec<f32> {
    let rows = g.cin * g.kh * g.kw;
    let cols = g.n * g.oh * g.ow;
    let mut out = vec![0.0f32; rows * cols];
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let col = (n * g.oh + oy) * g.ow + ox;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let row = (c * g.kh + ky) * g.kw + kx;
                            let src = ((n * g.cin + c) * g.h + iy as usize) * g.w + ix as usize;
                            out[row * cols + col] = input[src];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add a column matrix back into input layout (inverse of im2col).
pub(crate) fn col2im_add(cols_mat: &[f32], g: &ConvGeom, input_grad: &mut [f32]) {
    let cols = g.n * g.oh * g.ow;
    for n in 0..g.n {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let col = (n * g.oh + oy) * g.ow + ox;
                for c in 0..g.cin {
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride.0 + ky) as isize - g.pad.0 as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride.1 + kx) as isize - g.pad.1 as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let row = (c * g.kh + ky) * g.kw + kx;
                            let dst = ((n * g.cin + c) * g.h + iy as usize) * g.w + ix as usize;
                            input_grad[dst] += cols_mat[row * cols + col];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let av = ArrayView2::from_shape((m, k), a).expect("matmul lhs shape");
    let bv = ArrayView2::from_shape((k, n), b).expect("matmul rhs shape");
    let c: Array2<f32> = av.dot(&bv);
    c.into_raw_vec()
}

/// out[n, co, oy, ox] from product matrix [co, n*oh*ow].
pub(crate) fn conv_gather_output(prod: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.n * g.oh * g.ow;
    let mut out = vec![0.0f32; g.n * g.cout * g.oh * g.ow];
    for n in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let col = (n * g.oh + oy) * g.ow + ox;
                    out[((n * g.cout + co) * g.oh + oy) * g.ow + ox] = prod[co * cols + col];
                }
            }
        }
    }
    out
}

/// Inverse gather: [n, co, oy, ox] grad into matrix [co, n*oh*ow].
pub(crate) fn conv_scatter_out_grad(grad: &[f32], g: &ConvGeom) -> Vec<f32> {
    let cols = g.n * g.oh * g.ow;
    let mut mat = vec![0.0f32; g.cout * cols];
    for n in 0..g.n {
        for co in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let col = (n * g.oh + oy) * g.ow + ox;
                    mat[co * cols + col] = grad[((n * g.cout + co) * g.oh + oy) * g.ow + ox];
                }
            }
        }
    }
    mat
}

/// Row-wise softmax of logits/T with max-subtraction. `out` has the same layout.
pub(crate) fn softmax_rows(logits: &[f32], rows: usize, cols: usize, t: f32, out: &mut [f32]) {
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0f32;
        for c in 0..cols {
            let e = ((row[c] - max) / t).exp();
            out[r * cols + c] = e;
            sum += e;
        }
        for c in 0..cols {
            out[r * cols + c] /= sum;
        }
    }
}
