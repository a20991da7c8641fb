//! Dense kernels on row-major `f64` slices.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha·x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out[..m * n].fill(0.0);
    matmul_acc(a, b, m, k, n, out);
}

/// `out += a·b` with `a: m×k`, `b: k×n`.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `out = a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    out[..m * n].fill(0.0);
    matmul_bt_acc(a, b, m, k, n, out);
}

/// `out += a·bᵀ` with `a: m×k`, `b: n×k`.
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out += aᵀ·b` with `a: m×k`, `b: m×n`, `out: k×n`.
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let bi = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, bi, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub(crate) fn rmsnorm_forward(x: &[f64], gain: &[f64], d: usize, out: &mut [f64]) {
    for (xr, yr) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let r = inv_rms(xr);
        for ((y, &xi), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *y = g * xi * r;
        }
    }
}

/// Accumulates `∂/∂x` into `dx` and `∂/∂gain` into `dgain`.
pub(crate) fn rmsnorm_backward(x: &[f64], gain: &[f64], dy: &[f64], d: usize, dx: &mut [f64], dgain: &mut [f64]) {
    for ((xr, dyr), dxr) in x.chunks_exact(d).zip(dy.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
        let r = inv_rms(xr);
        let mut s = 0.0;
        for j in 0..d {
            dgain[j] += dyr[j] * xr[j] * r;
            s += gain[j] * dyr[j] * xr[j];
        }
        let c = r * r * r * s / d as f64;
        for j in 0..d {
            dxr[j] += r * gain[j] * dyr[j] - c * xr[j];
        }
    }
}

#[inline]
fn inv_rms(x: &[f64]) -> f64 {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    1.0 / (ms + super::NORM_EPS).sqrt()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Rotary position tables for one sequence length and head size.
pub(crate) struct RopeTable {
    half: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl RopeTable {
    pub(crate) fn new(n: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for t in 0..n {
            for i in 0..half {
                let angle = t as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        RopeTable { half, cos, sin }
    }

    /// Rotate each `(2i, 2i+1)` pair of every head in place; `inverse` applies the transpose.
    pub(crate) fn apply(&self, buf: &mut [f64], batch: usize, n: usize, heads: usize, inverse: bool) {
        let hd = 2 * self.half;
        let d = heads * hd;
        for b in 0..batch {
            for t in 0..n {
                let row = &mut buf[(b * n + t) * d..(b * n + t + 1) * d];
                let (cs, sn) = (&self.cos[t * self.half..], &self.sin[t * self.half..]);
                for head in row.chunks_exact_mut(hd) {
                    for i in 0..self.half {
                        let (c, s) = (cs[i], if inverse { -sn[i] } else { sn[i] });
                        let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                        head[2 * i] = x0 * c - x1 * s;
                        head[2 * i + 1] = x0 * s + x1 * c;
                    }
                }
            }
        }
    }
}
