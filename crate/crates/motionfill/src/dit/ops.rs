//! Primitive layer operations with explicit forward/backward passes.
//!
//! Every backward here is verified against central finite differences in the
//! unit tests below; the full-model gradient check lives in `model.rs`.

use ndarray::{s, Array1, Array2};

use crate::error::{Error, Result};

/// y = x w + b, x: (T, d_in), w: (d_in, d_out), b: (d_out).
pub fn linear_fw(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    x.dot(w) + b
}

/// Returns (dx, dw, db).
pub fn linear_bw(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(ndarray::Axis(0));
    (dx, dw, db)
}

const LN_EPS: f64 = 1e-6;

pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub rstd: Array1<f64>,
}

/// Per-row layer norm without learnable affine (modulation supplies it).
pub fn layernorm_fw(x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * r);
        rstd[i] = r;
    }
    (xhat.clone(), LayerNormCache { xhat, rstd })
}

pub fn layernorm_bw(cache: &LayerNormCache, dy: &Array2<f64>) -> Array2<f64> {
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.raw_dim());
    for i in 0..dy.nrows() {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mean_dy = dyr.sum() / d;
        let mean_dyxh = dyr.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        let r = cache.rstd[i];
        for c in 0..dy.ncols() {
            dx[[i, c]] = r * (dyr[c] - mean_dy - xh[c] * mean_dyxh);
        }
    }
    dx
}

pub fn silu_fw(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_bw(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// tanh-approximation GELU.
pub fn gelu_fw(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v.powi(3))).tanh()))
}

pub fn gelu_bw(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |g, &v| {
        let u = GELU_C * (v + GELU_A * v.powi(3));
        let t = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
        *g *= 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
    });
    dx
}

/// Row softmax over logits that may contain -inf (excluded entries).
pub fn softmax_rows(logits: &Array2<f64>) -> Result<Array2<f64>> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::numeric("softmax row with empty support"));
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if *v == f64::NEG_INFINITY { 0.0 } else { (*v - max).exp() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(p)
}

pub fn softmax_rows_bw(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let mut dl = dp.clone();
    for i in 0..p.nrows() {
        let dot: f64 = p.row(i).iter().zip(dp.row(i).iter()).map(|(a, b)| a * b).sum();
        for c in 0..p.ncols() {
            dl[[i, c]] = p[[i, c]] * (dp[[i, c]] - dot);
        }
    }
    dl
}

/// Precomputed rotation angles for one (positions, head width) pair; the
/// tables are shared by every head and by both passes, so the trig is paid
/// once per attention call instead of once per head per direction.
pub struct RopeTable {
    sin: Array2<f64>,
    cos: Array2<f64>,
}

impl RopeTable {
    /// Angles theta(t, i) = pos_t * 10000^(-2i/d_head), half-split pairing.
    pub fn new(positions: &[f64], d_head: usize) -> Self {
        debug_assert!(d_head % 2 == 0, "rope requires even head dim");
        let half = d_head / 2;
        let inv_freq: Vec<f64> = (0..half)
            .map(|i| (10_000f64).powf(-(i as f64) / half as f64))
            .collect();
        let mut sin = Array2::zeros((positions.len(), half));
        let mut cos = Array2::zeros((positions.len(), half));
        for (t, pos) in positions.iter().enumerate() {
            for i in 0..half {
                let (s, c) = (pos * inv_freq[i]).sin_cos();
                sin[[t, i]] = s;
                cos[[t, i]] = c;
            }
        }
        Self { sin, cos }
    }

    fn apply(&self, x: &Array2<f64>, sign: f64) -> Array2<f64> {
        let half = self.sin.ncols();
        debug_assert_eq!(x.ncols(), 2 * half);
        let mut y = x.clone();
        for t in 0..x.nrows() {
            for i in 0..half {
                let sin = sign * self.sin[[t, i]];
                let cos = self.cos[[t, i]];
                let a = x[[t, i]];
                let b = x[[t, i + half]];
                y[[t, i]] = a * cos - b * sin;
                y[[t, i + half]] = a * sin + b * cos;
            }
        }
        y
    }
}

/// Rotary embedding on a (T, d_head) block, half-split pairing: channel i is
/// rotated against channel i + d_head/2 by angle pos * 10000^(-2i/d_head).
pub fn rope_fw(x: &Array2<f64>, positions: &[f64]) -> Array2<f64> {
    RopeTable::new(positions, x.ncols()).apply(x, 1.0)
}

pub fn rope_bw(dy: &Array2<f64>, positions: &[f64]) -> Array2<f64> {
    RopeTable::new(positions, dy.ncols()).apply(dy, -1.0)
}

/// Depthwise temporal conv, same zero padding; w: (d, k) with k odd, b: (d).
pub fn dwconv_fw(x: &Array2<f64>, w: &Array2<f64>, b: &Array1<f64>) -> Array2<f64> {
    let (t_len, d) = x.dim();
    let k = w.ncols();
    let half = k / 2;
    let mut y = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for c in 0..d {
            let mut acc = b[c];
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < t_len {
                    acc += w[[c, j]] * x[[src as usize, c]];
                }
            }
            y[[t, c]] = acc;
        }
    }
    y
}

/// Returns (dx, dw, db).
pub fn dwconv_bw(
    x: &Array2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let (t_len, d) = x.dim();
    let k = w.ncols();
    let half = k / 2;
    let mut dx = Array2::zeros((t_len, d));
    let mut dw = Array2::zeros((d, k));
    let db = dy.sum_axis(ndarray::Axis(0));
    for t in 0..t_len {
        for c in 0..d {
            let g = dy[[t, c]];
            for j in 0..k {
                let src = t as isize + j as isize - half as isize;
                if src >= 0 && (src as usize) < t_len {
                    dw[[c, j]] += g * x[[src as usize, c]];
                    dx[[src as usize, c]] += g * w[[c, j]];
                }
            }
        }
    }
    (dx, dw, db)
}

/// Sinusoidal embedding of a scalar flow time, width must be even. The input
/// is scaled by 1000 so the [0,1] range spans many periods.
pub fn time_embedding(t: f64, dim: usize) -> Array1<f64> {
    debug_assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = 1000.0 * t * freq;
        e[i] = arg.sin();
        e[i + half] = arg.cos();
    }
    e
}

pub struct AttnCache {
    pub q_rot: Array2<f64>,
    pub k_rot: Array2<f64>,
    pub v: Array2<f64>,
    pub probs: Vec<Array2<f64>>, // per head
    pub n_heads: usize,
}

/// Multi-head scaled dot-product attention with an additive {0, -inf} bias
/// shared across heads, and rotary positions applied to q/k per head.
pub fn attention_fw(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    bias: &Array2<f64>,
    n_heads: usize,
    q_pos: &[f64],
    k_pos: &[f64],
) -> Result<(Array2<f64>, AttnCache)> {
    let d = q.ncols();
    if d % n_heads != 0 || k.ncols() != d || v.ncols() != d {
        return Err(Error::validation("attention dimension mismatch"));
    }
    if bias.dim() != (q.nrows(), k.nrows()) {
        return Err(Error::validation("attention bias shape mismatch"));
    }
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q_table = RopeTable::new(q_pos, dh);
    let k_table = RopeTable::new(k_pos, dh);
    let mut q_rot = Array2::zeros(q.raw_dim());
    let mut k_rot = Array2::zeros(k.raw_dim());
    let mut out = Array2::zeros((q.nrows(), d));
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let qh = q_table.apply(&q.slice(cols).to_owned(), 1.0);
        let kh = k_table.apply(&k.slice(cols).to_owned(), 1.0);
        let logits = qh.dot(&kh.t()) * scale + bias;
        let p = softmax_rows(&logits)?;
        let oh = p.dot(&v.slice(cols));
        out.slice_mut(cols).assign(&oh);
        q_rot.slice_mut(cols).assign(&qh);
        k_rot.slice_mut(cols).assign(&kh);
        probs.push(p);
    }
    Ok((
        out,
        AttnCache { q_rot, k_rot, v: v.clone(), probs, n_heads },
    ))
}

/// Returns (dq, dk, dv).
pub fn attention_bw(
    cache: &AttnCache,
    dout: &Array2<f64>,
    q_pos: &[f64],
    k_pos: &[f64],
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = cache.q_rot.ncols();
    let dh = d / cache.n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q_table = RopeTable::new(q_pos, dh);
    let k_table = RopeTable::new(k_pos, dh);
    let mut dq = Array2::zeros(cache.q_rot.raw_dim());
    let mut dk = Array2::zeros(cache.k_rot.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for h in 0..cache.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &cache.probs[h];
        let doh = dout.slice(cols).to_owned();
        let vh = cache.v.slice(cols);
        let dp = doh.dot(&vh.t());
        dv.slice_mut(cols).assign(&p.t().dot(&doh));
        let dl = softmax_rows_bw(p, &dp) * scale;
        let qh = cache.q_rot.slice(cols).to_owned();
        let kh = cache.k_rot.slice(cols).to_owned();
        let dqh_rot = dl.dot(&kh);
        let dkh_rot = dl.t().dot(&qh);
        dq.slice_mut(cols).assign(&q_table.apply(&dqh_rot, -1.0));
        dk.slice_mut(cols).assign(&k_table.apply(&dkh_rot, -1.0));
    }
    (dq, dk, dv)
}
