//! Detection-weighted triplet margin loss with in-pair hardest-negative
//! mining, its analytic gradient, and a finite-difference checker.
//!
//! For a correspondence `c: A ↔ B`,
//!
//! ```text
//! p(c) = |d̂¹_A − d̂²_B|
//! n(c) = min(|d̂¹_A − d̂²_N2|, |d̂¹_N1 − d̂²_B|)     N1, N2 outside an L∞ ball of radius K
//! m(c) = max(0, M + p(c)² − n(c)²)
//! L    = Σ_c s¹_c s²_c m(c) / Σ_q s¹_q s²_q
//! ```
//!
//! Everything is evaluated in `f64` from the raw `f32` maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::detector::{channel_argmax, neighbourhood, soft_scores, BETA_EPS};
use crate::error::{D2Error, Result};
use crate::geometry::Correspondence;
use crate::tensor::Tensor3;

pub type Cell = (usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossConfig {
    /// Margin `M`.
    pub margin: f64,
    /// Safe radius `K` (feature cells) around a correspondence inside which
    /// negatives are not mined.
    pub safe_radius: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            safe_radius: 4,
        }
    }
}

/// A correspondence between feature-map cells, `(row, col)` in each map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct CellPair {
    pub a: Cell,
    pub b: Cell,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HardNegative {
    /// `n(c)`.
    pub distance: f64,
    /// Hardest negative in image 1 for `d̂²_B`.
    pub n1: Cell,
    pub dist_n1: f64,
    /// Hardest negative in image 2 for `d̂¹_A`.
    pub n2: Cell,
    pub dist_n2: f64,
}

impl HardNegative {
    /// True when the image-2 negative attains the minimum (ties go to it).
    fn uses_n2(&self) -> bool {
        self.dist_n2 <= self.dist_n1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CorrespondenceTerms {
    pub pair: CellPair,
    pub positive: f64,
    pub negative: HardNegative,
    pub margin_term: f64,
    pub score_a: f64,
    pub score_b: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<CorrespondenceTerms>,
}

/// Unit descriptors of a map in `f64`, with the original norms.
struct UnitMap {
    height: usize,
    width: usize,
    channels: usize,
    unit: Vec<f64>,
    norms: Vec<f64>,
}

impl UnitMap {
    fn new(f: &Tensor3) -> Self {
        let (h, w, n) = f.shape();
        let mut unit = Vec::with_capacity(h * w * n);
        let mut norms = Vec::with_capacity(h * w);
        for cell in f.data().chunks_exact(n) {
            let norm = cell.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            norms.push(norm);
            if norm < crate::tensor::ZERO_NORM_EPS {
                unit.push(1.0);
                unit.extend(std::iter::repeat_n(0.0, n - 1));
            } else {
                unit.extend(cell.iter().map(|&v| f64::from(v) / norm));
            }
        }
        Self {
            height: h,
            width: w,
            channels: n,
            unit,
            norms,
        }
    }

    fn at(&self, c: Cell) -> &[f64] {
        let start = (c.0 * self.width + c.1) * self.channels;
        &self.unit[start..start + self.channels]
    }

    fn contains(&self, c: Cell) -> bool {
        c.0 < self.height && c.1 < self.width
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn chebyshev(p: Cell, q: Cell) -> usize {
    p.0.abs_diff(q.0).max(p.1.abs_diff(q.1))
}

/// Closest descriptor to `query` among cells of `map` farther than `k`
/// (L∞) from `anchor`; first in row-major order on ties.
fn nearest_outside(map: &UnitMap, query: &[f64], anchor: Cell, k: usize) -> Option<(Cell, f64)> {
    let mut best: Option<(Cell, f64)> = None;
    for i in 0..map.height {
        for j in 0..map.width {
            if chebyshev((i, j), anchor) <= k {
                continue;
            }
            let d = sq_dist(map.at((i, j)), query);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((i, j), d));
            }
        }
    }
    best.map(|(c, d)| (c, d.sqrt()))
}

fn check_pair(m1: &UnitMap, m2: &UnitMap, pair: CellPair) -> Result<()> {
    if m1.channels != m2.channels {
        return Err(D2Error::DimMismatch(m1.channels, m2.channels));
    }
    if !m1.contains(pair.a) {
        return Err(D2Error::OutOfBounds(pair.a.0, pair.a.1));
    }
    if !m2.contains(pair.b) {
        return Err(D2Error::OutOfBounds(pair.b.0, pair.b.1));
    }
    Ok(())
}

fn positive_unit(m1: &UnitMap, m2: &UnitMap, pair: CellPair) -> f64 {
    sq_dist(m1.at(pair.a), m2.at(pair.b)).sqrt()
}

fn hardest_negative_unit(m1: &UnitMap, m2: &UnitMap, pair: CellPair, k: usize) -> Result<HardNegative> {
    let (n1, dist_n1) =
        nearest_outside(m1, m2.at(pair.b), pair.a, k).ok_or(D2Error::NoNegativeCandidates(k))?;
    let (n2, dist_n2) =
        nearest_outside(m2, m1.at(pair.a), pair.b, k).ok_or(D2Error::NoNegativeCandidates(k))?;
    Ok(HardNegative {
        distance: dist_n1.min(dist_n2),
        n1,
        dist_n1,
        n2,
        dist_n2,
    })
}

/// `p(c)` on L2-normalized maps.
pub fn positive_distance(f1n: &Tensor3, f2n: &Tensor3, pair: CellPair) -> Result<f64> {
    let (m1, m2) = (UnitMap::new(f1n), UnitMap::new(f2n));
    check_pair(&m1, &m2, pair)?;
    Ok(positive_unit(&m1, &m2, pair))
}

/// `n(c)` with the mined negatives `N1` (in image 1) and `N2` (in image 2).
pub fn hardest_negative(f1n: &Tensor3, f2n: &Tensor3, pair: CellPair, k: usize) -> Result<HardNegative> {
    let (m1, m2) = (UnitMap::new(f1n), UnitMap::new(f2n));
    check_pair(&m1, &m2, pair)?;
    hardest_negative_unit(&m1, &m2, pair, k)
}

/// `m(c) = max(0, M + p² − n²)`.
#[inline]
pub fn margin_term(positive: f64, negative: f64, margin: f64) -> f64 {
    (margin + (positive * positive - negative * negative)).max(0.0)
}

/// Evaluates the loss on raw feature maps.
pub fn d2_loss(f1: &Tensor3, f2: &Tensor3, pairs: &[CellPair], cfg: &LossConfig) -> Result<LossBreakdown> {
    if pairs.is_empty() {
        return Err(D2Error::EmptyInput("no correspondences"));
    }
    let (m1, m2) = (UnitMap::new(f1), UnitMap::new(f2));
    for &p in pairs {
        check_pair(&m1, &m2, p)?;
    }
    let s1 = soft_scores(f1)?;
    let s2 = soft_scores(f2)?;
    let mut terms = Vec::with_capacity(pairs.len());
    for &pair in pairs {
        let positive = positive_unit(&m1, &m2, pair);
        let negative = hardest_negative_unit(&m1, &m2, pair, cfg.safe_radius)?;
        terms.push(CorrespondenceTerms {
            pair,
            positive,
            negative,
            margin_term: margin_term(positive, negative.distance, cfg.margin),
            score_a: s1.score(pair.a.0, pair.a.1),
            score_b: s2.score(pair.b.0, pair.b.1),
            weight: 0.0,
        });
    }
    let z: f64 = terms.iter().map(|t| t.score_a * t.score_b).sum();
    if !(z > 0.0) {
        return Err(D2Error::DegenerateMap(z));
    }
    let mut total = 0.0;
    for t in &mut terms {
        t.weight = t.score_a * t.score_b / z;
        total += t.weight * t.margin_term;
    }
    Ok(LossBreakdown { total, terms })
}

/// Gradient of the loss with respect to every entry of both raw maps,
/// laid out like the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub d_f1: Vec<f64>,
    pub d_f2: Vec<f64>,
}

/// Accumulates `∂L/∂γ_ij` into `∂L/∂D`, holding the channel choices of
/// `γ = max_k αβ` and of `max_t D` fixed.
fn backprop_gamma(f: &Tensor3, i: usize, j: usize, d_gamma: f64, grad: &mut [f64]) {
    let (h, w, n) = f.shape();
    let cell = f.cell(i, j);
    let t_star = channel_argmax(cell);
    let max_d = f64::from(cell[t_star]);
    if max_d.abs() < BETA_EPS {
        return;
    }
    let d = |r: usize, c: usize, k: usize| f64::from(f.get(r, c, k));
    // Find k* and its α, β exactly as the forward pass does.
    let mut best = (f64::NEG_INFINITY, 0, 0.0, 0.0);
    for k in 0..n {
        let local_max = neighbourhood(i, j, h, w)
            .map(|(r, c)| d(r, c, k))
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = neighbourhood(i, j, h, w)
            .map(|(r, c)| (d(r, c, k) - local_max).exp())
            .sum();
        let alpha = (d(i, j, k) - local_max).exp() / denom;
        let beta = d(i, j, k) / max_d;
        if alpha * beta > best.0 {
            best = (alpha * beta, k, alpha, beta);
        }
    }
    let (_, k, alpha, beta) = best;
    let local_max = neighbourhood(i, j, h, w)
        .map(|(r, c)| d(r, c, k))
        .fold(f64::NEG_INFINITY, f64::max);
    let denom: f64 = neighbourhood(i, j, h, w)
        .map(|(r, c)| (d(r, c, k) - local_max).exp())
        .sum();

    // through α (softmax over the neighbourhood on channel k)
    let d_alpha = d_gamma * beta;
    for (r, c) in neighbourhood(i, j, h, w) {
        let sigma = (d(r, c, k) - local_max).exp() / denom;
        let da_dd = if (r, c) == (i, j) {
            alpha * (1.0 - alpha)
        } else {
            -alpha * sigma
        };
        grad[(r * w + c) * n + k] += d_alpha * da_dd;
    }
    // through β = D^k / D^t*; identically one when k = t*
    if k != t_star {
        let d_beta = d_gamma * alpha;
        grad[(i * w + j) * n + k] += d_beta / max_d;
        grad[(i * w + j) * n + t_star] -= d_beta * d(i, j, k) / (max_d * max_d);
    }
}

/// Pushes a gradient with respect to `x̂ = x / |x|` back to `x`.
fn backprop_unit(unit: &[f64], norm: f64, g_unit: &[f64], out: &mut [f64]) {
    if norm < crate::tensor::ZERO_NORM_EPS {
        return;
    }
    let proj: f64 = unit.iter().zip(g_unit).map(|(u, g)| u * g).sum();
    for ((o, u), g) in out.iter_mut().zip(unit).zip(g_unit) {
        *o += (g - u * proj) / norm;
    }
}

/// Gradient of `|x̂ − ŷ|²` with respect to raw `x` (exposed for testing the
/// normalization Jacobian in isolation).
pub fn squared_unit_distance_grad(x: &[f64], y: &[f64]) -> Vec<f64> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ux: Vec<f64> = x.iter().map(|v| v / nx).collect();
    let g: Vec<f64> = ux.iter().zip(y).map(|(a, b)| 2.0 * (a - b / ny)).collect();
    let mut out = vec![0.0; x.len()];
    backprop_unit(&ux, nx, &g, &mut out);
    out
}

/// Loss and its analytic gradient. Mining choices, the `min` in `n(c)`,
/// the channel maxima and the hinge are held at their active branch.
pub fn d2_loss_with_gradient(
    f1: &Tensor3,
    f2: &Tensor3,
    pairs: &[CellPair],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LossGradient)> {
    let breakdown = d2_loss(f1, f2, pairs, cfg)?;
    let (m1, m2) = (UnitMap::new(f1), UnitMap::new(f2));
    let n = m1.channels;
    let mut gu1 = vec![0.0; f1.data().len()];
    let mut gu2 = vec![0.0; f2.data().len()];
    let mut d_f1 = vec![0.0; f1.data().len()];
    let mut d_f2 = vec![0.0; f2.data().len()];

    let g1 = gamma_values(f1, pairs.iter().map(|p| p.a));
    let g2 = gamma_values(f2, pairs.iter().map(|p| p.b));
    let u: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a * b).collect();
    let u_sum: f64 = u.iter().sum();
    let total = breakdown.total;

    let off1 = |c: Cell| (c.0 * m1.width + c.1) * n;
    let off2 = |c: Cell| (c.0 * m2.width + c.1) * n;

    for (idx, t) in breakdown.terms.iter().enumerate() {
        let (a, b) = (t.pair.a, t.pair.b);
        // weight path: L = Σ u_c m_c / Σ u_q, u_c = γ¹_A γ²_B
        let d_u = (t.margin_term - total) / u_sum;
        backprop_gamma(f1, a.0, a.1, d_u * g2[idx], &mut d_f1);
        backprop_gamma(f2, b.0, b.1, d_u * g1[idx], &mut d_f2);

        if t.margin_term <= 0.0 {
            continue;
        }
        let w = u[idx] / u_sum;
        // + w · |d̂¹_A − d̂²_B|²
        for k in 0..n {
            let diff = m1.at(a)[k] - m2.at(b)[k];
            gu1[off1(a) + k] += 2.0 * w * diff;
            gu2[off2(b) + k] -= 2.0 * w * diff;
        }
        // − w · n(c)²
        if t.negative.uses_n2() {
            let n2 = t.negative.n2;
            for k in 0..n {
                let diff = m1.at(a)[k] - m2.at(n2)[k];
                gu1[off1(a) + k] -= 2.0 * w * diff;
                gu2[off2(n2) + k] += 2.0 * w * diff;
            }
        } else {
            let n1 = t.negative.n1;
            for k in 0..n {
                let diff = m1.at(n1)[k] - m2.at(b)[k];
                gu1[off1(n1) + k] -= 2.0 * w * diff;
                gu2[off2(b) + k] += 2.0 * w * diff;
            }
        }
    }
    for (map, gu, out) in [(&m1, &gu1, &mut d_f1), (&m2, &gu2, &mut d_f2)] {
        for cell in 0..map.height * map.width {
            let r = cell * n..(cell + 1) * n;
            if gu[r.clone()].iter().any(|&g| g != 0.0) {
                backprop_unit(&map.unit[r.clone()], map.norms[cell], &gu[r.clone()], &mut out[r]);
            }
        }
    }
    Ok((breakdown, LossGradient { d_f1, d_f2 }))
}

fn gamma_values(f: &Tensor3, cells: impl Iterator<Item = Cell>) -> Vec<f64> {
    cells
        .map(|(i, j)| crate::detector::cell_gamma(f, i, j).0)
        .collect()
}

/// Discrete choices made during the forward pass. Finite differences are
/// only meaningful when a perturbation leaves these unchanged.
#[derive(Debug, Clone, PartialEq, Eq)]
struct ActiveBranches {
    per_pair: Vec<(Cell, Cell, bool, bool)>,
    channels: Vec<(usize, usize)>,
}

fn active_branches(f1: &Tensor3, f2: &Tensor3, pairs: &[CellPair], cfg: &LossConfig) -> Result<ActiveBranches> {
    let b = d2_loss(f1, f2, pairs, cfg)?;
    let per_pair = b
        .terms
        .iter()
        .map(|t| {
            (
                t.negative.n1,
                t.negative.n2,
                t.negative.uses_n2(),
                cfg.margin + t.positive.powi(2) - t.negative.distance.powi(2) > 0.0,
            )
        })
        .collect();
    let mut channels = Vec::new();
    for (f, cells) in [
        (f1, pairs.iter().map(|p| p.a).collect::<Vec<_>>()),
        (f2, pairs.iter().map(|p| p.b).collect::<Vec<_>>()),
    ] {
        for (i, j) in cells {
            channels.push((crate::detector::cell_gamma(f, i, j).1, channel_argmax(f.cell(i, j))));
        }
    }
    Ok(ActiveBranches { per_pair, channels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientCheckConfig {
    pub probes: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for GradientCheckConfig {
    fn default() -> Self {
        Self {
            probes: 64,
            eps: 1e-3,
            tolerance: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeResult {
    /// 1 or 2: which map was perturbed.
    pub map: u8,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientReport {
    pub probes: usize,
    /// Probes redrawn because the perturbation crossed a branch boundary.
    pub resampled: usize,
    pub max_rel_error: f64,
    pub worst: Option<ProbeResult>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient with central differences at randomly
/// chosen entries. Relative error uses `max(|a|, |fd|, 1e-8)`.
pub fn gradient_check(
    f1: &Tensor3,
    f2: &Tensor3,
    pairs: &[CellPair],
    cfg: &LossConfig,
    check: &GradientCheckConfig,
) -> Result<GradientReport> {
    let (_, grad) = d2_loss_with_gradient(f1, f2, pairs, cfg)?;
    let base = active_branches(f1, f2, pairs, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let n1 = f1.data().len();
    let total_entries = n1 + f2.data().len();
    let max_attempts = check.probes.saturating_mul(50).max(100);

    let mut done = 0;
    let mut resampled = 0;
    let mut worst: Option<ProbeResult> = None;
    let mut attempts = 0;
    while done < check.probes && attempts < max_attempts {
        attempts += 1;
        let flat = rng.gen_range(0..total_entries);
        let (map, index) = if flat < n1 { (1u8, flat) } else { (2u8, flat - n1) };
        let perturbed = |delta: f64| -> (Tensor3, Tensor3, f32) {
            let (mut a, mut b) = (f1.clone(), f2.clone());
            let target = if map == 1 { &mut a } else { &mut b };
            let v = &mut target.data_mut()[index];
            *v = (f64::from(*v) + delta) as f32;
            let stored = *v;
            (a, b, stored)
        };
        let (p1, p2, hi) = perturbed(check.eps);
        let (m1, m2, lo) = perturbed(-check.eps);
        if active_branches(&p1, &p2, pairs, cfg)? != base || active_branches(&m1, &m2, pairs, cfg)? != base {
            resampled += 1;
            continue;
        }
        let step = f64::from(hi) - f64::from(lo);
        let numeric = (d2_loss(&p1, &p2, pairs, cfg)?.total - d2_loss(&m1, &m2, pairs, cfg)?.total) / step;
        let analytic = if map == 1 { grad.d_f1[index] } else { grad.d_f2[index] };
        let rel_error = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        let probe = ProbeResult {
            map,
            index,
            analytic,
            numeric,
            rel_error,
        };
        if worst.is_none_or(|w| rel_error > w.rel_error) {
            worst = Some(probe);
        }
        done += 1;
    }
    let max_rel_error = worst.map_or(0.0, |w| w.rel_error);
    Ok(GradientReport {
        probes: done,
        resampled,
        max_rel_error,
        worst,
        tolerance: check.tolerance,
        passed: done == check.probes && max_rel_error < check.tolerance,
    })
}

/// Converts pixel correspondences to feature cells by dividing by the
/// output stride and rounding. A correspondence whose image-1 or image-2
/// cell was already taken is dropped, so every cell is used at most once.
pub fn to_feature_cells(
    corr: &[Correspondence],
    stride: usize,
    dims1: (usize, usize),
    dims2: (usize, usize),
) -> Vec<CellPair> {
    let mut used_a = std::collections::HashSet::new();
    let mut used_b = std::collections::HashSet::new();
    let s = stride as f64;
    let cell = |p: (f64, f64), dims: (usize, usize)| -> Option<Cell> {
        let (i, j) = ((p.1 / s).round(), (p.0 / s).round());
        (i >= 0.0 && j >= 0.0 && (i as usize) < dims.0 && (j as usize) < dims.1)
            .then_some((i as usize, j as usize))
    };
    corr.iter()
        .filter_map(|c| {
            let a = cell(c.point_a, dims1)?;
            let b = cell(c.point_b, dims2)?;
            (!used_a.contains(&a) && !used_b.contains(&b)).then(|| {
                used_a.insert(a);
                used_b.insert(b);
                CellPair { a, b }
            })
        })
        .collect()
}

/// Plain gradient descent on both maps; returns the loss before each step
/// and after the last one.
pub fn descent_demo(
    f1: &Tensor3,
    f2: &Tensor3,
    pairs: &[CellPair],
    cfg: &LossConfig,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>> {
    let (mut a, mut b) = (f1.clone(), f2.clone());
    let mut history = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grad) = d2_loss_with_gradient(&a, &b, pairs, cfg)?;
        history.push(loss.total);
        for (v, g) in a.data_mut().iter_mut().zip(&grad.d_f1) {
            *v = (f64::from(*v) - learning_rate * g) as f32;
        }
        for (v, g) in b.data_mut().iter_mut().zip(&grad.d_f2) {
            *v = (f64::from(*v) - learning_rate * g) as f32;
        }
    }
    history.push(d2_loss(&a, &b, pairs, cfg)?.total);
    Ok(history)
}
