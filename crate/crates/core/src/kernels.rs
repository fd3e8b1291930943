//! Raw numeric kernels shared by the graph's forward and backward passes.
//!
//! All buffers are row-major. Convolution weights are laid out as
//! `[kernel, c_in, c_out]`; feature maps as `[frames, channels]`.

use crate::resolution::conv_out_len;

/// `out[m x n] += a[m x k] * b[k x n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k x n] += a[m x k]^T * b[m x n]`
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += a[m x n] * b[k x n]^T`
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            out[i * k + p] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// Geometry of a 1-D convolution over `[frames, channels]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    /// Zero frames added on both ends.
    pub pad: usize,
    pub c_in: usize,
    pub c_out: usize,
}

impl ConvGeom {
    pub fn out_len(&self, in_len: usize) -> usize {
        conv_out_len(in_len + 2 * self.pad, self.kernel, self.stride)
    }

    pub fn transpose_out_len(&self, in_len: usize) -> usize {
        if in_len == 0 {
            0
        } else {
            (in_len - 1) * self.stride + self.kernel
        }
    }
}

/// Valid cross-correlation with optional symmetric zero padding.
pub fn conv1d_forward(x: &[f64], t_in: usize, w: &[f64], g: ConvGeom, out: &mut [f64]) {
    let t_out = g.out_len(t_in);
    let (ci, co) = (g.c_in, g.c_out);
    for t in 0..t_out {
        let out_row = &mut out[t * co..(t + 1) * co];
        for j in 0..g.kernel {
            let src = (t * g.stride + j) as isize - g.pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let x_row = &x[src as usize * ci..(src as usize + 1) * ci];
            let w_tap = &w[j * ci * co..(j + 1) * ci * co];
            for (c, &xv) in x_row.iter().enumerate() {
                let w_row = &w_tap[c * co..(c + 1) * co];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

/// Accumulates input and weight gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward(
    x: &[f64],
    t_in: usize,
    w: &[f64],
    g: ConvGeom,
    d_out: &[f64],
    mut d_x: Option<&mut [f64]>,
    mut d_w: Option<&mut [f64]>,
) {
    let t_out = g.out_len(t_in);
    let (ci, co) = (g.c_in, g.c_out);
    for t in 0..t_out {
        let dy = &d_out[t * co..(t + 1) * co];
        for j in 0..g.kernel {
            let src = (t * g.stride + j) as isize - g.pad as isize;
            if src < 0 || src as usize >= t_in {
                continue;
            }
            let src = src as usize;
            let tap = j * ci * co;
            if let Some(dx) = d_x.as_deref_mut() {
                let dx_row = &mut dx[src * ci..(src + 1) * ci];
                for (c, dxv) in dx_row.iter_mut().enumerate() {
                    let w_row = &w[tap + c * co..tap + (c + 1) * co];
                    *dxv += w_row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(dw) = d_w.as_deref_mut() {
                let x_row = &x[src * ci..(src + 1) * ci];
                for (c, &xv) in x_row.iter().enumerate() {
                    let dw_row = &mut dw[tap + c * co..tap + (c + 1) * co];
                    for (d, &gv) in dw_row.iter_mut().zip(dy) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

/// Transposed convolution (no padding): the adjoint of [`conv1d_forward`]
/// with the same geometry, mapping `c_in` to `c_out` channels.
pub fn conv1d_transpose_forward(x: &[f64], t_in: usize, w: &[f64], g: ConvGeom, out: &mut [f64]) {
    let (ci, co) = (g.c_in, g.c_out);
    for t in 0..t_in {
        let x_row = &x[t * ci..(t + 1) * ci];
        for j in 0..g.kernel {
            let dst = t * g.stride + j;
            let out_row = &mut out[dst * co..(dst + 1) * co];
            let w_tap = &w[j * ci * co..(j + 1) * ci * co];
            for (c, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &w_tap[c * co..(c + 1) * co];
                for (o, &wv) in out_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_transpose_backward(
    x: &[f64],
    t_in: usize,
    w: &[f64],
    g: ConvGeom,
    d_out: &[f64],
    mut d_x: Option<&mut [f64]>,
    mut d_w: Option<&mut [f64]>,
) {
    let (ci, co) = (g.c_in, g.c_out);
    for t in 0..t_in {
        for j in 0..g.kernel {
            let dst = t * g.stride + j;
            let dy = &d_out[dst * co..(dst + 1) * co];
            let tap = j * ci * co;
            if let Some(dx) = d_x.as_deref_mut() {
                let dx_row = &mut dx[t * ci..(t + 1) * ci];
                for (c, dxv) in dx_row.iter_mut().enumerate() {
                    let w_row = &w[tap + c * co..tap + (c + 1) * co];
                    *dxv += w_row.iter().zip(dy).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(dw) = d_w.as_deref_mut() {
                let x_row = &x[t * ci..(t + 1) * ci];
                for (c, &xv) in x_row.iter().enumerate() {
                    let dw_row = &mut dw[tap + c * co..tap + (c + 1) * co];
                    for (d, &gv) in dw_row.iter_mut().zip(dy) {
                        *d += xv * gv;
                    }
                }
            }
        }
    }
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `ln(sum(exp(v)))` without overflow. Returns `-inf` for an all `-inf` slice.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
