//! Raw convolution and pooling kernels over row-major buffers.

use crate::error::{dim_err, Result};
use crate::tensor::Real;

/// Geometry of a 3-D convolution applied to a `[C, T, H, W]` buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 {
                return Err(dim_err!("stride must be >= 1, got {stride:?}"));
            }
            let padded = input[a] + 2 * padding[a];
            if kernel[a] == 0 || kernel[a] > padded {
                return Err(dim_err!(
                    "kernel {kernel:?} does not fit input {input:?} with padding {padding:?}"
                ));
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(ConvGeom { channels, input, kernel, stride, padding, output })
    }

    /// Rows of the unfolded matrix: `channels * kt * kh * kw`.
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.iter().product::<usize>()
    }

    pub fn out_positions(&self) -> usize {
        self.output.iter().product()
    }

    pub fn in_positions(&self) -> usize {
        self.input.iter().product()
    }
}

/// Unfolds `input` (`[C, T, H, W]`) into `col` (`[C*kt*kh*kw, To*Ho*Wo]`).
pub fn im2col<F: Real>(g: &ConvGeom, input: &[F], col: &mut [F]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ot, oh, ow] = g.output;
    let p = ot * oh * ow;
    debug_assert_eq!(col.len(), g.col_rows() * p);
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &input[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zt in 0..ot {
                        let t = (zt * st + dt) as isize - pt as isize;
                        for zh in 0..oh {
                            let h = (zh * sh + dh) as isize - ph as isize;
                            let line = &mut dst[idx..idx + ow];
                            idx += ow;
                            if t < 0 || t >= it as isize || h < 0 || h >= ih as isize {
                                line.iter_mut().for_each(|v| *v = F::zero());
                                continue;
                            }
                            let src = &plane[(t as usize * ih + h as usize) * iw..][..iw];
                            for (zw, v) in line.iter_mut().enumerate() {
                                let w = (zw * sw + dw) as isize - pw as isize;
                                *v = if w < 0 || w >= iw as isize { F::zero() } else { src[w as usize] };
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back, accumulating into `out`.
pub fn col2im<F: Real>(g: &ConvGeom, col: &[F], out: &mut [F]) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [pt, ph, pw] = g.padding;
    let [ot, oh, ow] = g.output;
    let p = ot * oh * ow;
    let mut row = 0;
    for c in 0..g.channels {
        let plane = &mut out[c * it * ih * iw..(c + 1) * it * ih * iw];
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let src = &col[row * p..(row + 1) * p];
                    let mut idx = 0;
                    for zt in 0..ot {
                        let t = (zt * st + dt) as isize - pt as isize;
                        for zh in 0..oh {
                            let h = (zh * sh + dh) as isize - ph as isize;
                            let line = &src[idx..idx + ow];
                            idx += ow;
                            if t < 0 || t >= it as isize || h < 0 || h >= ih as isize {
                                continue;
                            }
                            let dst = &mut plane[(t as usize * ih + h as usize) * iw..][..iw];
                            for (zw, &v) in line.iter().enumerate() {
                                let w = (zw * sw + dw) as isize - pw as isize;
                                if w >= 0 && w < iw as isize {
                                    dst[w as usize] = dst[w as usize] + v;
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// `out[co, p] = sum_k weight[co, k] * col[k, p] + bias[co]`.
pub fn conv_forward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    c_out: usize,
) -> Vec<F> {
    let k = g.col_rows();
    let p = g.out_positions();
    let mut col = vec![F::zero(); k * p];
    im2col(g, input, &mut col);
    let mut out = vec![F::zero(); c_out * p];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if bias.is_some() { F::one() } else { F::zero() };
    F::gemm(c_out, k, p, F::one(), weight, k as isize, 1, &col, p as isize, 1, beta, &mut out, p as isize, 1);
    out
}

/// Gradients of [`conv_forward`]: returns (d_input, d_weight, d_bias) for the
/// requested outputs.
pub fn conv_backward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    c_out: usize,
    need: [bool; 3],
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let k = g.col_rows();
    let p = g.out_positions();
    let d_weight = need[1].then(|| {
        let mut col = vec![F::zero(); k * p];
        im2col(g, input, &mut col);
        let mut dw = vec![F::zero(); c_out * k];
        // dW[co, k] = dOut[co, p] * col[k, p]^T
        F::gemm(c_out, p, k, F::one(), grad_out, p as isize, 1, &col, 1, p as isize, F::zero(), &mut dw, k as isize, 1);
        dw
    });
    let d_input = need[0].then(|| {
        let mut dcol = vec![F::zero(); k * p];
        // dcol[k, p] = W[co, k]^T * dOut[co, p]
        F::gemm(k, c_out, p, F::one(), weight, 1, k as isize, grad_out, p as isize, 1, F::zero(), &mut dcol, p as isize, 1);
        let mut di = vec![F::zero(); g.channels * g.in_positions()];
        col2im(g, &dcol, &mut di);
        di
    });
    let d_bias = need[2].then(|| grad_out.chunks(p).map(|c| c.iter().copied().sum()).collect());
    (d_input, d_weight, d_bias)
}

/// Transposed convolution. `g` describes the *forward* convolution that maps
/// the transposed-conv output (`g.input`, `g.channels` = C_out) back to its
/// input (`g.output`, C_in channels). Weight layout is `[C_in, C_out, k...]`.
pub fn conv_transpose_forward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    c_in: usize,
) -> Vec<F> {
    let k = g.col_rows();
    let p = g.out_positions();
    let mut col = vec![F::zero(); k * p];
    // col[k, p] = W[ci, k]^T * x[ci, p]
    F::gemm(k, c_in, p, F::one(), weight, 1, k as isize, input, p as isize, 1, F::zero(), &mut col, p as isize, 1);
    let n_out = g.in_positions();
    let mut out = vec![F::zero(); g.channels * n_out];
    col2im(g, &col, &mut out);
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(n_out).enumerate() {
            chunk.iter_mut().for_each(|v| *v = *v + b[co]);
        }
    }
    out
}

pub fn conv_transpose_backward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    weight: &[F],
    grad_out: &[F],
    c_in: usize,
    need: [bool; 3],
) -> (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>) {
    let k = g.col_rows();
    let p = g.out_positions();
    let n_out = g.in_positions();
    let dcol = (need[0] || need[1]).then(|| {
        let mut dcol = vec![F::zero(); k * p];
        im2col(g, grad_out, &mut dcol);
        dcol
    });
    let d_input = need[0].then(|| {
        let dcol = dcol.as_ref().unwrap();
        let mut di = vec![F::zero(); c_in * p];
        F::gemm(c_in, k, p, F::one(), weight, k as isize, 1, dcol, p as isize, 1, F::zero(), &mut di, p as isize, 1);
        di
    });
    let d_weight = need[1].then(|| {
        let dcol = dcol.as_ref().unwrap();
        let mut dw = vec![F::zero(); c_in * k];
        // dW[ci, k] = x[ci, p] * dcol[k, p]^T
        F::gemm(c_in, p, k, F::one(), input, p as isize, 1, dcol, 1, p as isize, F::zero(), &mut dw, k as isize, 1);
        dw
    });
    let d_bias = need[2].then(|| grad_out.chunks(n_out).map(|c| c.iter().copied().sum()).collect());
    (d_input, d_weight, d_bias)
}

/// Non-overlapping or strided max-pooling over `[C, T, H, W]`, no padding.
/// Returns pooled values and the flat argmax index of each output.
pub fn maxpool_forward<F: Real>(g: &ConvGeom, input: &[F]) -> (Vec<F>, Vec<usize>) {
    let [it, ih, iw] = g.input;
    let [kt, kh, kw] = g.kernel;
    let [st, sh, sw] = g.stride;
    let [ot, oh, ow] = g.output;
    let n = g.channels * ot * oh * ow;
    let mut vals = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for c in 0..g.channels {
        let base = c * it * ih * iw;
        for zt in 0..ot {
            for zh in 0..oh {
                for zw in 0..ow {
                    let mut best = F::neg_infinity();
                    let mut best_i = base + (zt * st * ih + zh * sh) * iw + zw * sw;
                    for dt in 0..kt {
                        for dh in 0..kh {
                            for dw in 0..kw {
                                let i = base + ((zt * st + dt) * ih + zh * sh + dh) * iw + zw * sw + dw;
                                if input[i] > best {
                                    best = input[i];
                                    best_i = i;
                                }
                            }
                        }
                    }
                    vals.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    (vals, arg)
}
