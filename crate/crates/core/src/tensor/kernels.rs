//! Raw array kernels shared by the tape's forward and backward passes.
//!
//! All buffers are row-major `&[f64]`. Shapes are passed as plain extents so
//! the kernels stay independent of the tape bookkeeping.

use std::f64::consts::PI;

/// C[m,n] += A[m,k] * B[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// dA[m,k] += dY[m,n] * B[k,n]^T  (dot of rows, both contiguous)
pub fn matmul_grad_lhs(dy: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dy_row = &dy[i * n..(i + 1) * n];
        let da_row = &mut da[i * k..(i + 1) * k];
        for (p, da_ip) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (dy_j, b_j) in dy_row.iter().zip(b_row) {
                acc += dy_j * b_j;
            }
            *da_ip += acc;
        }
    }
}

/// dB[k,n] += A[m,k]^T * dY[m,n]
pub fn matmul_grad_rhs(a: &[f64], dy: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let dy_row = &dy[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let db_row = &mut db[p * n..(p + 1) * n];
            for (d, &dy_j) in db_row.iter_mut().zip(dy_row) {
                *d += a_ip * dy_j;
            }
        }
    }
}

/// Output spatial extent of a convolution: floor((in + 2*pad - k)/stride) + 1.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Cross-correlation (no kernel flip) with zero padding.
/// input: [h, w, cin], kernel: [k, k, cin, cout], out: [oh, ow, cout].
pub fn conv2d(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    (h, w, cin): (usize, usize, usize),
    (k, cout): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    debug_assert_eq!(out.len(), oh * ow * cout);
    for oy in 0..oh {
        for ox in 0..ow {
            let out_px = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_px = &input[(iy as usize * w + ix as usize) * cin..][..cin];
                    let k_base = ((ky * k + kx) * cin) * cout;
                    for (ci, &x) in in_px.iter().enumerate() {
                        if x == 0.0 {
                            continue;
                        }
                        let k_row = &kernel[k_base + ci * cout..][..cout];
                        for (o, &kv) in out_px.iter_mut().zip(k_row) {
                            *o += x * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates conv gradients. Either grad buffer may be absent.
pub fn conv2d_grad(
    input: &[f64],
    kernel: &[f64],
    dout: &[f64],
    mut dinput: Option<&mut [f64]>,
    mut dkernel: Option<&mut [f64]>,
    (h, w, cin): (usize, usize, usize),
    (k, cout): (usize, usize),
    stride: usize,
    pad: usize,
) {
    let oh = conv_out_extent(h, k, stride, pad);
    let ow = conv_out_extent(w, k, stride, pad);
    for oy in 0..oh {
        for ox in 0..ow {
            let dout_px = &dout[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..k {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = (iy as usize * w + ix as usize) * cin;
                    let k_base = ((ky * k + kx) * cin) * cout;
                    if let Some(dk) = dkernel.as_deref_mut() {
                        let in_px = &input[px..px + cin];
                        for (ci, &x) in in_px.iter().enumerate() {
                            if x == 0.0 {
                                continue;
                            }
                            let dk_row = &mut dk[k_base + ci * cout..][..cout];
                            for (d, &g) in dk_row.iter_mut().zip(dout_px) {
                                *d += x * g;
                            }
                        }
                    }
                    if let Some(dx) = dinput.as_deref_mut() {
                        let dx_px = &mut dx[px..px + cin];
                        for (ci, d) in dx_px.iter_mut().enumerate() {
                            let k_row = &kernel[k_base + ci * cout..][..cout];
                            let mut acc = 0.0;
                            for (&kv, &g) in k_row.iter().zip(dout_px) {
                                acc += kv * g;
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Exact GELU: x * Phi(x) with Phi the standard normal CDF.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx GELU = Phi(x) + x * phi(x).
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Per-row normalization over the last axis, then affine with gain/bias.
/// x: [rows, c] flattened; var uses the biased 1/c estimator.
pub fn layer_norm(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    out: &mut [f64],
    rows: usize,
    c: usize,
    eps: f64,
) {
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let out_row = &mut out[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        for i in 0..c {
            out_row[i] = (row[i] - mean) * inv_std * gain[i] + bias[i];
        }
    }
}

pub fn layer_norm_grad(
    x: &[f64],
    gain: &[f64],
    dout: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dgain: Option<&mut [f64]>,
    mut dbias: Option<&mut [f64]>,
    rows: usize,
    c: usize,
    eps: f64,
) {
    let cf = c as f64;
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let dy = &dout[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / cf;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
        let inv_std = 1.0 / (var + eps).sqrt();

        if let Some(dg) = dgain.as_deref_mut() {
            for i in 0..c {
                dg[i] += dy[i] * (row[i] - mean) * inv_std;
            }
        }
        if let Some(db) = dbias.as_deref_mut() {
            for i in 0..c {
                db[i] += dy[i];
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            // g = dy * gain; dx = inv_std * (g - mean(g) - xhat * mean(g * xhat))
            let mut g_mean = 0.0;
            let mut gx_mean = 0.0;
            for i in 0..c {
                let g = dy[i] * gain[i];
                let xhat = (row[i] - mean) * inv_std;
                g_mean += g;
                gx_mean += g * xhat;
            }
            g_mean /= cf;
            gx_mean /= cf;
            let dx_row = &mut dx[r * c..(r + 1) * c];
            for i in 0..c {
                let g = dy[i] * gain[i];
                let xhat = (row[i] - mean) * inv_std;
                dx_row[i] += inv_std * (g - g_mean - xhat * gx_mean);
            }
        }
    }
}

/// Max-subtraction stabilized softmax over the last axis.
pub fn softmax_rows(x: &[f64], out: &mut [f64], rows: usize, c: usize) {
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let out_row = &mut out[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
}

/// ds = s * (dy - sum(dy * s)) per row, where s is the softmax output.
pub fn softmax_grad(s: &[f64], dout: &[f64], dx: &mut [f64], rows: usize, c: usize) {
    for r in 0..rows {
        let s_row = &s[r * c..(r + 1) * c];
        let dy = &dout[r * c..(r + 1) * c];
        let dot: f64 = s_row.iter().zip(dy).map(|(&a, &b)| a * b).sum();
        let dx_row = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            dx_row[i] += s_row[i] * (dy[i] - dot);
        }
    }
}

pub fn log_softmax_rows(x: &[f64], out: &mut [f64], rows: usize, c: usize) {
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let out_row = &mut out[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in out_row.iter_mut().zip(row) {
            *o = v - log_sum;
        }
    }
}

/// dx = dy - softmax(x) * sum(dy) per row; `logp` is the forward output.
pub fn log_softmax_grad(logp: &[f64], dout: &[f64], dx: &mut [f64], rows: usize, c: usize) {
    for r in 0..rows {
        let lp = &logp[r * c..(r + 1) * c];
        let dy = &dout[r * c..(r + 1) * c];
        let dy_sum: f64 = dy.iter().sum();
        let dx_row = &mut dx[r * c..(r + 1) * c];
        for i in 0..c {
            dx_row[i] += dy[i] - lp[i].exp() * dy_sum;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_extent_matches_formula() {
        assert_eq!(conv_out_extent(224, 4, 4, 0), 56);
        assert_eq!(conv_out_extent(224, 32, 4, 14), 56);
        assert_eq!(conv_out_extent(32, 8, 4, 2), 8);
    }

    #[test]
    fn gelu_fixes_origin_and_matches_tails() {
        assert_eq!(gelu(0.0), 0.0);
        // Large positive input passes through; large negative dies.
        assert!((gelu(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu(-10.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = [1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        let mut out = [0.0; 6];
        softmax_rows(&x, &mut out, 2, 3);
        for r in 0..2 {
            let sum: f64 = out[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
