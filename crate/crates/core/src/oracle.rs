//! Literal reference implementations used by the test suites and by the
//! `selftest` command.
//!
//! Everything here is written as directly from the defining formulas as
//! possible: nested loops, no stabilization tricks, 64-bit arithmetic, and no
//! calls into the optimized code paths it is compared against. Only the
//! tensor accessors are shared.

use crate::convnet::ConvWeights;
use crate::detector::Detection;
use crate::tensor::Tensor3;

/// `(row, column)` of a feature cell.
type Cell = (usize, usize);

/// Nested-loop zero-padded 3×3 convolution, padding = dilation.
pub fn direct_conv3x3(x: &Tensor3, w: &ConvWeights, stride: usize, dilation: usize) -> Tensor3 {
    let (h, wd, cin) = x.shape();
    let ho = h.div_ceil(stride);
    let wo = wd.div_ceil(stride);
    let mut out = Tensor3::zeros(ho, wo, w.out_channels);
    for i in 0..ho {
        for j in 0..wo {
            for o in 0..w.out_channels {
                let mut acc = f64::from(w.bias[o]);
                for c in 0..cin {
                    for u in 0..3 {
                        for v in 0..3 {
                            let r = (i * stride + u * dilation) as isize - dilation as isize;
                            let s = (j * stride + v * dilation) as isize - dilation as isize;
                            if r < 0 || s < 0 || r >= h as isize || s >= wd as isize {
                                continue;
                            }
                            let wt = w.weights[((o * cin + c) * 3 + u) * 3 + v];
                            acc += f64::from(wt) * f64::from(x.get(r as usize, s as usize, c));
                        }
                    }
                }
                out.set(i, j, o, acc as f32);
            }
        }
    }
    out
}

/// Hard detection with two explicit loops and an explicit neighbour list.
pub fn hard_detect_literal(f: &Tensor3) -> Vec<Detection> {
    let (h, w, n) = f.shape();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let mut k = 0;
            for t in 0..n {
                if f.get(i, j, t) > f.get(i, j, k) {
                    k = t;
                }
            }
            let mut is_max = true;
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (r, c) = (i as i64 + di, j as i64 + dj);
                    if r < 0 || c < 0 || r >= h as i64 || c >= w as i64 {
                        continue;
                    }
                    if f.get(r as usize, c as usize, k) >= f.get(i, j, k) {
                        is_max = false;
                    }
                }
            }
            if is_max {
                out.push(Detection { i, j, k });
            }
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct LiteralSoftScores {
    /// `(i * w + j) * n + k`
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `i * w + j`
    pub gamma: Vec<f64>,
    pub scores: Vec<f64>,
}

/// Soft detection scores evaluated straight from their definitions, with
/// unshifted exponentials.
pub fn soft_scores_literal(f: &Tensor3) -> LiteralSoftScores {
    let (h, w, n) = f.shape();
    let d = |i: usize, j: usize, k: usize| f64::from(f.get(i, j, k));
    let mut alpha = vec![0.0; h * w * n];
    let mut beta = vec![0.0; h * w * n];
    let mut gamma = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut max_t = f64::NEG_INFINITY;
            for t in 0..n {
                max_t = max_t.max(d(i, j, t));
            }
            let mut best = f64::NEG_INFINITY;
            for k in 0..n {
                let mut denom = 0.0;
                for r in i.saturating_sub(1)..=(i + 1).min(h - 1) {
                    for c in j.saturating_sub(1)..=(j + 1).min(w - 1) {
                        denom += d(r, c, k).exp();
                    }
                }
                let a = d(i, j, k).exp() / denom;
                let b = d(i, j, k) / max_t;
                alpha[(i * w + j) * n + k] = a;
                beta[(i * w + j) * n + k] = b;
                best = best.max(a * b);
            }
            gamma[i * w + j] = best;
        }
    }
    let total: f64 = gamma.iter().sum();
    let scores = gamma.iter().map(|g| g / total).collect();
    LiteralSoftScores {
        alpha,
        beta,
        gamma,
        scores,
    }
}

fn unit(f: &Tensor3, i: usize, j: usize) -> Vec<f64> {
    let v: Vec<f64> = f.cell(i, j).iter().map(|&x| f64::from(x)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Hardest negative search by exhaustive double loop. Returns
/// `(n(c), N1, N2)` or `None` when one of the images has no candidate.
pub fn hardest_negative_literal(
    f1: &Tensor3,
    f2: &Tensor3,
    a: Cell,
    b: Cell,
    k: usize,
) -> Option<(f64, Cell, Cell)> {
    let da = unit(f1, a.0, a.1);
    let db = unit(f2, b.0, b.1);
    let cheb = |p: Cell, q: Cell| {
        (p.0 as i64 - q.0 as i64).abs().max((p.1 as i64 - q.1 as i64).abs()) as usize
    };
    let mut n1: Option<(Cell, f64)> = None;
    for i in 0..f1.height() {
        for j in 0..f1.width() {
            if cheb((i, j), a) <= k {
                continue;
            }
            let dd = dist(&unit(f1, i, j), &db);
            if n1.is_none_or(|(_, best)| dd < best) {
                n1 = Some(((i, j), dd));
            }
        }
    }
    let mut n2: Option<(Cell, f64)> = None;
    for i in 0..f2.height() {
        for j in 0..f2.width() {
            if cheb((i, j), b) <= k {
                continue;
            }
            let dd = dist(&da, &unit(f2, i, j));
            if n2.is_none_or(|(_, best)| dd < best) {
                n2 = Some(((i, j), dd));
            }
        }
    }
    let ((p1, d1), (p2, d2)) = (n1?, n2?);
    Some((d1.min(d2), p1, p2))
}

/// The detection-weighted margin loss written out in one function:
/// soft scores on both maps, positive and hardest-negative distances,
/// hinge, and the score-weighted average.
pub fn d2_loss_literal(
    f1: &Tensor3,
    f2: &Tensor3,
    correspondences: &[(Cell, Cell)],
    safe_radius: usize,
    margin: f64,
) -> Option<f64> {
    let s1 = soft_scores_literal(f1).scores;
    let s2 = soft_scores_literal(f2).scores;
    let mut weighted = 0.0;
    let mut total_weight = 0.0;
    for &(a, b) in correspondences {
        let p = dist(&unit(f1, a.0, a.1), &unit(f2, b.0, b.1));
        let (n, _, _) = hardest_negative_literal(f1, f2, a, b, safe_radius)?;
        let m = (margin + p * p - n * n).max(0.0);
        let wgt = s1[a.0 * f1.width() + a.1] * s2[b.0 * f2.width() + b.1];
        weighted += wgt * m;
        total_weight += wgt;
    }
    Some(weighted / total_weight)
}

/// Mutual nearest neighbours by two independent argmin tables over squared
/// Euclidean distances. Ties go to the lowest index.
pub fn mutual_nn_literal(a: &[Vec<f32>], b: &[Vec<f32>]) -> Vec<(usize, usize)> {
    let d = |x: &[f32], y: &[f32]| -> f64 {
        x.iter()
            .zip(y)
            .map(|(p, q)| (f64::from(*p) - f64::from(*q)).powi(2))
            .sum()
    };
    let argmin = |row: Vec<f64>| -> usize {
        let mut best = 0;
        for (idx, &v) in row.iter().enumerate() {
            if v < row[best] {
                best = idx;
            }
        }
        best
    };
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let ab: Vec<usize> = a
        .iter()
        .map(|x| argmin(b.iter().map(|y| d(x, y)).collect()))
        .collect();
    let ba: Vec<usize> = b
        .iter()
        .map(|y| argmin(a.iter().map(|x| d(x, y)).collect()))
        .collect();
    (0..a.len()).filter(|&i| ba[ab[i]] == i).map(|i| (i, ab[i])).collect()
}
