//! Flat-slice numeric kernels behind the tape ops.

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(crow, &b[p * n..(p + 1) * n], aip);
        }
    }
    c
}

/// dA += dC · Bᵀ
pub(crate) fn matmul_grad_lhs(dc: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(dcrow, &b[p * n..(p + 1) * n]);
        }
    }
}

/// dB += Aᵀ · dC
pub(crate) fn matmul_grad_rhs(a: &[f64], dc: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let dcrow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            axpy(&mut db[p * n..(p + 1) * n], dcrow, aip);
        }
    }
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

pub(crate) fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn softmax(x: &[f64], outer: usize, len: usize, inner: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let max = (0..len).map(|t| x[at(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (x[at(t)] - max).exp();
                out[at(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[at(t)] /= sum;
            }
        }
    }
    out
}

pub(crate) fn softmax_grad(y: &[f64], g: &[f64], dx: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |t: usize| (o * len + t) * inner + i;
            let s: f64 = (0..len).map(|t| g[at(t)] * y[at(t)]).sum();
            for t in 0..len {
                dx[at(t)] += y[at(t)] * (g[at(t)] - s);
            }
        }
    }
}

/// Returns the normalized rows and the per-row inverse standard deviation.
pub(crate) fn normalize_rows(x: &[f64], h: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let rows = x.len() / h;
    let mut xhat = Vec::with_capacity(x.len());
    let mut inv_std = Vec::with_capacity(rows);
    for row in x.chunks_exact(h) {
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
        let inv = 1.0 / (var + eps).sqrt();
        xhat.extend(row.iter().map(|v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

pub(crate) fn layer_norm_grad_input(
    g: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    dx: &mut [f64],
    h: usize,
) {
    let hf = h as f64;
    let mut dxhat = vec![0.0; h];
    for (r, &inv) in inv_std.iter().enumerate() {
        let span = r * h..(r + 1) * h;
        let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
        for j in 0..h {
            dxhat[j] = gr[j] * gain[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / hf;
        let mean_dx = dot(&dxhat, xr) / hf;
        for (j, d) in dx[span].iter_mut().enumerate() {
            *d += inv * (dxhat[j] - mean_d - xr[j] * mean_dx);
        }
    }
}

pub(crate) struct ConvGeometry {
    pub len: usize,
    pub channels: usize,
    pub filters: usize,
    pub width: usize,
    pub pad_left: usize,
    pub out_len: usize,
}

impl ConvGeometry {
    /// Input row read by output row `t` at tap `j`, if inside the sequence.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        (t + j).checked_sub(self.pad_left).filter(|&s| s < self.len)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d(
    x: &[f64],
    f: &[f64],
    len: usize,
    channels: usize,
    filters: usize,
    width: usize,
    pad_left: usize,
    out_len: usize,
) -> Vec<f64> {
    let geom = ConvGeometry {
        len,
        channels,
        filters,
        width,
        pad_left,
        out_len,
    };
    let c = channels;
    let mut out = vec![0.0; out_len * filters];
    for t in 0..out_len {
        for k in 0..filters {
            let mut acc = 0.0;
            for j in 0..width {
                let Some(s) = geom.source(t, j) else { continue };
                let xs = &x[s * c..(s + 1) * c];
                let fs = &f[(k * width + j) * c..(k * width + j + 1) * c];
                for ch in 0..c {
                    acc += xs[ch] * fs[ch];
                }
            }
            out[t * filters + k] = acc;
        }
    }
    out
}

pub(crate) fn conv1d_grad_input(g: &[f64], f: &[f64], dx: &mut [f64], geom: &ConvGeometry) {
    let c = geom.channels;
    for t in 0..geom.out_len {
        for k in 0..geom.filters {
            let gk = g[t * geom.filters + k];
            if gk == 0.0 {
                continue;
            }
            for j in 0..geom.width {
                let Some(s) = geom.source(t, j) else { continue };
                let fs = &f[(k * geom.width + j) * c..(k * geom.width + j + 1) * c];
                axpy(&mut dx[s * c..(s + 1) * c], fs, gk);
            }
        }
    }
}

pub(crate) fn conv1d_grad_filters(g: &[f64], x: &[f64], df: &mut [f64], geom: &ConvGeometry) {
    let c = geom.channels;
    for t in 0..geom.out_len {
        for k in 0..geom.filters {
            let gk = g[t * geom.filters + k];
            if gk == 0.0 {
                continue;
            }
            for j in 0..geom.width {
                let Some(s) = geom.source(t, j) else { continue };
                let base = (k * geom.width + j) * c;
                axpy(&mut df[base..base + c], &x[s * c..(s + 1) * c], gk);
            }
        }
    }
}
