//! Keypoint detection on dense feature maps.
//!
//! Every channel `D^k` of the feature tensor is a detector response. A cell
//! is a keypoint when its strongest channel has a strict spatial local
//! maximum there. The soft version of the same test (`α`, `β`, `γ`, `s`)
//! is differentiable and is used by the training loss; at test time `γ`
//! at the detection cell serves as the keypoint score.
//!
//! Detection and scoring operate on raw feature values; descriptors are
//! sampled from the L2-normalized map.

use crate::error::{D2Error, Result};
use crate::keypoints::Keypoint;
use crate::tensor::{bilinear_resize, bilinear_sample, l2_normalize_descriptors, Tensor3};

/// Below this the channel maximum at a cell is treated as zero and `β` is 0.
pub const BETA_EPS: f64 = 1e-12;
/// Minimum soft-score mass before normalization.
pub const DEGENERATE_MASS: f64 = 1e-12;
/// Hessian determinants at or below this disable sub-cell refinement.
pub const SINGULAR_DET: f64 = 1e-12;

/// A hard detection: cell `(i, j)` on channel `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Detection {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

/// Feature-cell to image-pixel mapping: `pixel = stride · cell + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellToImage {
    pub stride: usize,
    pub offset: f64,
}

impl CellToImage {
    pub fn new(stride: usize) -> Self {
        Self { stride, offset: 0.0 }
    }

    /// Places pixel coordinates at the centre of each stride × stride block.
    pub fn centered(stride: usize) -> Self {
        Self {
            stride,
            offset: (stride as f64 - 1.0) / 2.0,
        }
    }

    #[inline]
    pub fn map(&self, cell: f64) -> f64 {
        self.stride as f64 * cell + self.offset
    }
}

/// Lowest-index argmax over a descriptor.
#[inline]
pub fn channel_argmax(cell: &[f32]) -> usize {
    let mut best = 0;
    for (k, &v) in cell.iter().enumerate().skip(1) {
        if v > cell[best] {
            best = k;
        }
    }
    best
}

/// In-bounds 3×3 neighbourhood of `(i, j)`, centre included.
#[inline]
pub(crate) fn neighbourhood(
    i: usize,
    j: usize,
    h: usize,
    w: usize,
) -> impl Iterator<Item = (usize, usize)> {
    let rows = i.saturating_sub(1)..=(i + 1).min(h - 1);
    rows.flat_map(move |r| {
        let cols = j.saturating_sub(1)..=(j + 1).min(w - 1);
        cols.map(move |c| (r, c))
    })
}

/// Hard detection: `(i, j)` is reported iff `D^k_ij` with
/// `k = argmax_t D^t_ij` is strictly greater than every in-bounds
/// 8-neighbour on channel `k`. Results are in row-major order.
pub fn hard_detect(f: &Tensor3) -> Vec<Detection> {
    let (h, w, _) = f.shape();
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let k = channel_argmax(f.cell(i, j));
            let v = f.get(i, j, k);
            let is_max = neighbourhood(i, j, h, w)
                .filter(|&(r, c)| (r, c) != (i, j))
                .all(|(r, c)| v > f.get(r, c, k));
            if is_max {
                out.push(Detection { i, j, k });
            }
        }
    }
    out
}

/// `γ_ij = max_k α^k_ij β^k_ij` at one cell, with the maximizing channel.
pub fn cell_gamma(f: &Tensor3, i: usize, j: usize) -> (f64, usize) {
    let (h, w, _) = f.shape();
    let cell = f.cell(i, j);
    let max_d = f64::from(cell[channel_argmax(cell)]);
    if max_d.abs() < BETA_EPS {
        return (0.0, 0);
    }
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &value) in cell.iter().enumerate() {
        let centre = f64::from(value);
        let local_max = neighbourhood(i, j, h, w)
            .map(|(r, c)| f64::from(f.get(r, c, k)))
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = neighbourhood(i, j, h, w)
            .map(|(r, c)| (f64::from(f.get(r, c, k)) - local_max).exp())
            .sum();
        let alpha = (centre - local_max).exp() / denom;
        let beta = centre / max_d;
        let ab = alpha * beta;
        if ab > best.0 {
            best = (ab, k);
        }
    }
    best
}

/// Soft detection scores with the intermediate maps.
#[derive(Debug, Clone)]
pub struct SoftScoreMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `s_ij`, row-major `h × w`, sums to one.
    pub scores: Vec<f64>,
    /// `γ_ij`, row-major `h × w`.
    pub gamma: Vec<f64>,
    /// `α^k_ij`, laid out like the feature tensor. Only kept on request.
    pub alpha: Option<Vec<f64>>,
    /// `β^k_ij`, laid out like the feature tensor. Only kept on request.
    pub beta: Option<Vec<f64>>,
}

impl SoftScoreMap {
    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.width + j]
    }

    pub fn gamma_at(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.width + j]
    }
}

/// Soft local-max / ratio-to-max scores, without intermediates.
pub fn soft_scores(f: &Tensor3) -> Result<SoftScoreMap> {
    soft_scores_impl(f, false)
}

/// Soft scores keeping the full `α` and `β` volumes.
pub fn soft_scores_detailed(f: &Tensor3) -> Result<SoftScoreMap> {
    soft_scores_impl(f, true)
}

fn soft_scores_impl(f: &Tensor3, keep: bool) -> Result<SoftScoreMap> {
    let (h, w, n) = f.shape();
    let mut alpha = keep.then(|| vec![0.0; h * w * n]);
    let mut beta = keep.then(|| vec![0.0; h * w * n]);

    // Per channel: the 3×3 softmax denominator, stabilized by the local max.
    let mut gamma = vec![f64::NEG_INFINITY; h * w];
    let max_d: Vec<f64> = (0..h * w)
        .map(|idx| {
            let cell = f.cell(idx / w, idx % w);
            f64::from(cell[channel_argmax(cell)])
        })
        .collect();
    let mut plane = vec![0.0f64; h * w];
    for k in 0..n {
        for (idx, p) in plane.iter_mut().enumerate() {
            *p = f64::from(f.get(idx / w, idx % w, k));
        }
        for i in 0..h {
            for j in 0..w {
                let idx = i * w + j;
                let local_max = neighbourhood(i, j, h, w)
                    .map(|(r, c)| plane[r * w + c])
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = neighbourhood(i, j, h, w)
                    .map(|(r, c)| (plane[r * w + c] - local_max).exp())
                    .sum();
                let a = (plane[idx] - local_max).exp() / denom;
                let b = if max_d[idx].abs() < BETA_EPS {
                    0.0
                } else {
                    plane[idx] / max_d[idx]
                };
                if let (Some(al), Some(be)) = (alpha.as_mut(), beta.as_mut()) {
                    al[idx * n + k] = a;
                    be[idx * n + k] = b;
                }
                if a * b > gamma[idx] {
                    gamma[idx] = a * b;
                }
            }
        }
    }
    let mass: f64 = gamma.iter().sum();
    if !(mass >= DEGENERATE_MASS) {
        return Err(D2Error::DegenerateMap(mass));
    }
    let scores = gamma.iter().map(|g| g / mass).collect();
    Ok(SoftScoreMap {
        height: h,
        width: w,
        channels: n,
        scores,
        gamma,
        alpha,
        beta,
    })
}

/// SIFT-style quadratic refinement of a detection on its channel.
///
/// Returns the sub-cell offset `(δ_i, δ_j) = −H⁻¹ g`, clamped to
/// `[−0.5, 0.5]`. Border cells, singular Hessians and non-peaks give zero.
pub fn refine_offset(f: &Tensor3, i: usize, j: usize, k: usize) -> (f64, f64) {
    let (h, w, _) = f.shape();
    if i == 0 || j == 0 || i + 1 >= h || j + 1 >= w {
        return (0.0, 0.0);
    }
    let d = |r: usize, c: usize| f64::from(f.get(r, c, k));
    let centre = d(i, j);
    let gi = (d(i + 1, j) - d(i - 1, j)) / 2.0;
    let gj = (d(i, j + 1) - d(i, j - 1)) / 2.0;
    let hii = d(i + 1, j) - 2.0 * centre + d(i - 1, j);
    let hjj = d(i, j + 1) - 2.0 * centre + d(i, j - 1);
    let hij = (d(i + 1, j + 1) - d(i + 1, j - 1) - d(i - 1, j + 1) + d(i - 1, j - 1)) / 4.0;
    let det = hii * hjj - hij * hij;
    if det <= SINGULAR_DET || hii >= 0.0 {
        return (0.0, 0.0);
    }
    let di = -(hjj * gi - hij * gj) / det;
    let dj = -(hii * gj - hij * gi) / det;
    (di.clamp(-0.5, 0.5), dj.clamp(-0.5, 0.5))
}

/// Refines detections, scores them with `γ` and samples descriptors from
/// the normalized map at the refined positions.
///
/// Keypoint coordinates are in the frame of the image that produced `f`.
/// Detections whose `γ` is zero (all-zero cells) are dropped.
pub fn refine_and_describe(
    f: &Tensor3,
    detections: &[Detection],
    mapping: CellToImage,
) -> Vec<Keypoint> {
    if detections.is_empty() {
        return Vec::new();
    }
    let normalized = l2_normalize_descriptors(f);
    detections
        .iter()
        .filter_map(|det| {
            let (score, _) = cell_gamma(f, det.i, det.j);
            if !(score > 0.0) {
                return None;
            }
            let (di, dj) = refine_offset(f, det.i, det.j, det.k);
            let (y, x) = (det.i as f64 + di, det.j as f64 + dj);
            let mut descriptor = bilinear_sample(&normalized, y, x);
            let norm = descriptor
                .iter()
                .map(|&v| f64::from(v).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm > 0.0 {
                descriptor
                    .iter_mut()
                    .for_each(|v| *v = (f64::from(*v) / norm) as f32);
            }
            Some(Keypoint {
                x: mapping.map(x) as f32,
                y: mapping.map(y) as f32,
                scale: 1.0,
                score: score as f32,
                channel: det.k,
                descriptor,
            })
        })
        .collect()
}

/// Single-scale detection: hard detection, refinement and description.
pub fn detect(f: &Tensor3, mapping: CellToImage) -> Vec<Keypoint> {
    refine_and_describe(f, &hard_detect(f), mapping)
}

/// Backbone output for one pyramid level.
#[derive(Debug, Clone)]
pub struct ScaleFeatures {
    pub scale: f32,
    pub features: Tensor3,
}

/// Nearest-neighbour upsampling of a boolean mask.
fn upsample_mask(mask: &[bool], h: usize, w: usize, nh: usize, nw: usize) -> Vec<bool> {
    let mut out = vec![false; nh * nw];
    for i in 0..nh {
        let si = (i * h / nh).min(h - 1);
        for j in 0..nw {
            let sj = (j * w / nw).min(w - 1);
            out[i * nw + j] = mask[si * w + sj];
        }
    }
    out
}

/// Fuses coarser maps into each level: `F̃^ρ = F^ρ + Σ_{σ<ρ} up(F^σ)`.
pub fn fuse_levels(levels: &[ScaleFeatures]) -> Result<Vec<Tensor3>> {
    let mut fused = Vec::with_capacity(levels.len());
    for (l, level) in levels.iter().enumerate() {
        let (h, w, n) = level.features.shape();
        let mut acc = level.features.clone();
        for coarser in &levels[..l] {
            if coarser.features.channels() != n {
                return Err(D2Error::ShapeMismatch(format!(
                    "pyramid levels have {} and {n} channels",
                    coarser.features.channels()
                )));
            }
            acc = acc.add(&bilinear_resize(&coarser.features, h, w)?)?;
        }
        fused.push(acc);
    }
    Ok(fused)
}

/// Multiscale detection with coarse-to-fine response gating.
///
/// Levels must be ordered by strictly increasing scale. Each level is
/// detected on its fused map; detections inside the (nearest-neighbour
/// upsampled) mask of earlier detections are dropped, and surviving ones
/// are added to the mask. Coordinates are returned in the scale-1 frame.
pub fn multiscale_detect(levels: &[ScaleFeatures], mapping: CellToImage) -> Result<Vec<Keypoint>> {
    if levels.is_empty() {
        return Err(D2Error::EmptyInput("no pyramid levels"));
    }
    if levels.windows(2).any(|p| p[0].scale >= p[1].scale) {
        return Err(D2Error::InvalidArgument(
            "pyramid levels must be ordered coarse to fine".into(),
        ));
    }
    let fused = fuse_levels(levels)?;
    // Gating only changes the outcome from the second level on.
    let mut mask: Option<(Vec<bool>, usize, usize)> = None;
    let mut keypoints = Vec::new();
    for (level, fmap) in levels.iter().zip(&fused) {
        let (h, w, _) = fmap.shape();
        let mut current = match &mask {
            Some((m, mh, mw)) => upsample_mask(m, *mh, *mw, h, w),
            None => vec![false; h * w],
        };
        let kept: Vec<Detection> = hard_detect(fmap)
            .into_iter()
            .filter(|d| !current[d.i * w + d.j])
            .collect();
        for d in &kept {
            current[d.i * w + d.j] = true;
        }
        mask = Some((current, h, w));
        let rho = level.scale;
        keypoints.extend(refine_and_describe(fmap, &kept, mapping).into_iter().map(|mut k| {
            if rho != 1.0 {
                k.x /= rho;
                k.y /= rho;
            }
            k.scale = rho;
            k
        }));
    }
    Ok(keypoints)
}
