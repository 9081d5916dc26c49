//! Slow, obvious reference implementations.
//!
//! Nothing here depends on `adaptqa-core`: every routine works on nested
//! `Vec`s with explicit loops so it can serve as an independent check of the
//! optimized paths.

pub type Matrix = Vec<Vec<f64>>;

/// Cross-correlation with an explicitly zero-padded copy of `x`.
///
/// `x` is `[L][C]`, `filters` is `[K][w][C]`; returns `[L'][K]`.
pub fn conv1d(x: &Matrix, filters: &[Matrix], same: bool) -> Matrix {
    let len = x.len();
    let channels = x[0].len();
    let width = filters[0].len();
    let (left, right) = if same {
        ((width - 1) / 2, width - 1 - (width - 1) / 2)
    } else {
        (0, 0)
    };
    let mut padded = vec![vec![0.0; channels]; left];
    padded.extend(x.iter().cloned());
    padded.extend(vec![vec![0.0; channels]; right]);
    let out_len = padded.len() + 1 - width;
    assert!(same || out_len == len + 1 - width);
    let mut out = vec![vec![0.0; filters.len()]; out_len];
    for t in 0..out_len {
        for (k, filter) in filters.iter().enumerate() {
            let mut acc = 0.0;
            for j in 0..width {
                for c in 0..channels {
                    acc += padded[t + j][c] * filter[j][c];
                }
            }
            out[t][k] = acc;
        }
    }
    out
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for row in m.iter_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn relu(m: &mut Matrix) {
    for v in m.iter_mut().flatten() {
        *v = v.max(0.0);
    }
}

fn to_filters(flat: &[f64], k: usize, width: usize, h: usize) -> Vec<Matrix> {
    (0..k)
        .map(|f| {
            (0..width)
                .map(|j| (0..h).map(|c| flat[(f * width + j) * h + c]).collect())
                .collect()
        })
        .collect()
}

/// Context-vector CACNN head, steps 1–5, in plain loops.
pub struct ContextVectorOracle<'a> {
    pub initial_filters: &'a [Matrix],
    pub initial_bias: &'a [f64],
    /// `[m][w_c]`, applied to the context vector as a one-channel signal.
    pub context_filters: &'a Matrix,
    pub context_bias: &'a [f64],
    pub feature_maps: usize,
    pub sample_width: usize,
    pub use_max: bool,
    pub relu_between: bool,
}

impl ContextVectorOracle<'_> {
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let h = x[0].len();
        let mut stage1 = conv1d(x, self.initial_filters, true);
        add_bias(&mut stage1, self.initial_bias);
        if self.relu_between {
            relu(&mut stage1);
        }
        let nf = stage1[0].len();
        let context: Vec<f64> = (0..nf)
            .map(|f| {
                if self.use_max {
                    let mut best = stage1[0][f];
                    for row in &stage1[1..] {
                        if row[f] > best {
                            best = row[f];
                        }
                    }
                    best
                } else {
                    stage1.iter().fold(0.0, |acc, row| acc + row[f])
                }
            })
            .collect();
        let signal: Matrix = context.iter().map(|&v| vec![v]).collect();
        let cfilters: Vec<Matrix> = self
            .context_filters
            .iter()
            .map(|f| f.iter().map(|&v| vec![v]).collect())
            .collect();
        let mut stage2 = conv1d(&signal, &cfilters, false);
        add_bias(&mut stage2, self.context_bias);
        let flat: Vec<f64> = stage2.into_iter().flatten().collect();
        let need = self.feature_maps * self.sample_width * h;
        let tiled: Vec<f64> = (0..need).map(|i| flat[i % flat.len()]).collect();
        let filters = to_filters(&tiled, self.feature_maps, self.sample_width, h);
        conv1d(x, &filters, true)
    }
}

/// Simplified CACNN head: stage-1 maps are flattened and split into filters.
pub fn cacnn_simplified(
    x: &Matrix,
    initial_filters: &[Matrix],
    initial_bias: &[f64],
    feature_maps: usize,
    sample_width: usize,
    relu_between: bool,
) -> Matrix {
    let h = x[0].len();
    let mut stage1 = conv1d(x, initial_filters, true);
    add_bias(&mut stage1, initial_bias);
    if relu_between {
        relu(&mut stage1);
    }
    let flat: Vec<f64> = stage1.into_iter().flatten().collect();
    let need = feature_maps * sample_width * h;
    assert!(flat.len() >= need, "not enough stage-1 values");
    let filters = to_filters(&flat[..need], feature_maps, sample_width, h);
    conv1d(x, &filters, true)
}

/// Per-position affine map `[L][K] → [L][2]`.
pub fn affine_rows(x: &Matrix, weight: &Matrix, bias: &[f64]) -> Matrix {
    x.iter()
        .map(|row| {
            (0..bias.len())
                .map(|o| {
                    let mut acc = 0.0;
                    for (k, v) in row.iter().enumerate() {
                        acc += v * weight[k][o];
                    }
                    acc + bias[o]
                })
                .collect()
        })
        .collect()
}

/// Exhaustive best-span search.
///
/// Returns `(start, end, score)`; `(0, 0)` with the null score when no pair
/// beats it. Earlier starts win ties, then shorter spans.
#[allow(clippy::needless_range_loop)]
pub fn best_span(start: &[f64], end: &[f64], max_answer_len: usize) -> (usize, usize, f64) {
    let n = start.len();
    let mut best: Option<(usize, usize, f64)> = None;
    for s in 1..n {
        for e in s..n {
            if e - s >= max_answer_len {
                continue;
            }
            let score = start[s] + end[e];
            match best {
                Some((_, _, b)) if score <= b => {}
                _ => best = Some((s, e, score)),
            }
        }
    }
    let null = start[0] + end[0];
    match best {
        Some((s, e, b)) if b > null => (s, e, b),
        _ => (0, 0, null),
    }
}

/// Token-overlap F1 computed through explicit position sets.
pub fn span_f1(pred: (usize, usize), gold: (usize, usize)) -> f64 {
    if pred == (0, 0) || gold == (0, 0) {
        return if pred == gold { 1.0 } else { 0.0 };
    }
    let p: std::collections::BTreeSet<usize> = (pred.0..=pred.1).collect();
    let g: std::collections::BTreeSet<usize> = (gold.0..=gold.1).collect();
    let common = p.intersection(&g).count() as f64;
    if common == 0.0 {
        return 0.0;
    }
    let precision = common / p.len() as f64;
    let recall = common / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Central differences of a scalar function.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let plus = f(&probe);
            probe[i] = x[i] - step;
            let minus = f(&probe);
            probe[i] = x[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}
