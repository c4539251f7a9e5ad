//! Dense row-major kernels shared by the forward and backward passes.

/// `c[m×p] += a[m×n] · b[n×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// `c[m×p] += a[m×n] · b[p×n]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            c[i * p + j] += dot;
        }
    }
}

/// `c[n×p] += a[m×n]ᵀ · b[m×p]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for k in 0..m {
        let b_row = &b[k * p..(k + 1) * p];
        for i in 0..n {
            let aki = a[k * n + i];
            if aki == 0.0 {
                continue;
            }
            let c_row = &mut c[i * p..(i + 1) * p];
            for (cj, bj) in c_row.iter_mut().zip(b_row) {
                *cj += aki * bj;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Input row/column for output position `o` and kernel tap `t`, or `None`
    /// when the tap falls in the zero padding.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(input: &[f64], kernel: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.out_ch * g.out_h * g.out_w];
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    for b in 0..g.batch {
        for o in 0..g.out_ch {
            let out_base = (b * g.out_ch + o) * out_plane;
            for c in 0..g.in_ch {
                let in_base = (b * g.in_ch + c) * in_plane;
                let k_base = (o * g.in_ch + c) * g.kh * g.kw;
                for i in 0..g.kh {
                    for j in 0..g.kw {
                        let kv = kernel[k_base + i * g.kw + j];
                        if kv == 0.0 {
                            continue;
                        }
                        for y in 0..g.out_h {
                            let Some(sy) = g.source(y, i, g.height) else {
                                continue;
                            };
                            for x in 0..g.out_w {
                                if let Some(sx) = g.source(x, j, g.width) {
                                    out[out_base + y * g.out_w + x] +=
                                        kv * input[in_base + sy * g.width + sx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input and kernel gradients for a convolution given the
/// upstream gradient `dout`.
pub(crate) fn conv2d_backward(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    g: &ConvGeometry,
    dinput: Option<&mut [f64]>,
    dkernel: Option<&mut [f64]>,
) {
    let in_plane = g.height * g.width;
    let out_plane = g.out_h * g.out_w;
    if let Some(din) = dinput {
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                let out_base = (b * g.out_ch + o) * out_plane;
                for c in 0..g.in_ch {
                    let in_base = (b * g.in_ch + c) * in_plane;
                    let k_base = (o * g.in_ch + c) * g.kh * g.kw;
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let kv = kernel[k_base + i * g.kw + j];
                            for y in 0..g.out_h {
                                let Some(sy) = g.source(y, i, g.height) else {
                                    continue;
                                };
                                for x in 0..g.out_w {
                                    if let Some(sx) = g.source(x, j, g.width) {
                                        din[in_base + sy * g.width + sx] +=
                                            kv * dout[out_base + y * g.out_w + x];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(dk) = dkernel {
        for b in 0..g.batch {
            for o in 0..g.out_ch {
                let out_base = (b * g.out_ch + o) * out_plane;
                for c in 0..g.in_ch {
                    let in_base = (b * g.in_ch + c) * in_plane;
                    let k_base = (o * g.in_ch + c) * g.kh * g.kw;
                    for i in 0..g.kh {
                        for j in 0..g.kw {
                            let mut acc = 0.0;
                            for y in 0..g.out_h {
                                let Some(sy) = g.source(y, i, g.height) else {
                                    continue;
                                };
                                for x in 0..g.out_w {
                                    if let Some(sx) = g.source(x, j, g.width) {
                                        acc += input[in_base + sy * g.width + sx]
                                            * dout[out_base + y * g.out_w + x];
                                    }
                                }
                            }
                            dk[k_base + i * g.kw + j] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable `ln Σ exp(row)`.
pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
