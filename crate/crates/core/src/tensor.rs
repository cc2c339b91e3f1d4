//! Dense `h × w × n` feature volumes.
//!
//! Storage is row-major over `(i, j, k)` with the channel index fastest, so
//! the descriptor at a cell is a contiguous slice and a detection map `D^k`
//! is a strided view.

use log::warn;

use crate::error::{D2Error, Result};

/// Norms below this are treated as degenerate by [`l2_normalize_descriptors`].
pub const ZERO_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(D2Error::ShapeMismatch(format!(
                "tensor dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(D2Error::ShapeMismatch(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(D2Error::Format("tensor contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "empty tensor");
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    /// Builds a tensor by evaluating `f(i, j, k)` at every entry.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut t = Self::zeros(height, width, channels);
        for i in 0..height {
            for j in 0..width {
                for k in 0..channels {
                    t.data[(i * width + j) * channels + k] = f(i, j, k);
                }
            }
        }
        t
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.height && j < self.width && k < self.channels);
        (i * self.width + j) * self.channels + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, value: f32) {
        let idx = self.index(i, j, k);
        self.data[idx] = value;
    }

    /// The descriptor `d_ij`: all channels at one cell.
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> &[f32] {
        let start = (i * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let start = (i * self.width + j) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Copies out the detection map `D^k` as a row-major `h × w` plane.
    pub fn channel_plane(&self, k: usize) -> Vec<f32> {
        self.data
            .iter()
            .skip(k)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn scale(&self, factor: f32) -> Tensor3 {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= factor);
        out
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Tensor3) -> Result<Tensor3> {
        if self.shape() != other.shape() {
            return Err(D2Error::ShapeMismatch(format!(
                "cannot add {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Divides every per-cell descriptor by its Euclidean norm.
///
/// Cells whose norm is below [`ZERO_NORM_EPS`] are replaced by the unit
/// vector `e_1` and reported with a warning; constant-padded borders can
/// legitimately produce such cells.
pub fn l2_normalize_descriptors(t: &Tensor3) -> Tensor3 {
    let (out, zeros) = l2_normalize_counting(t);
    if zeros > 0 {
        warn!("l2 normalization: {zeros} zero-norm descriptor(s) replaced by e_1");
    }
    out
}

/// Same as [`l2_normalize_descriptors`] but returns the number of
/// zero-norm cells instead of logging.
pub fn l2_normalize_counting(t: &Tensor3) -> (Tensor3, usize) {
    let mut out = t.clone();
    let mut zeros = 0;
    for cell in out.data.chunks_exact_mut(t.channels) {
        let norm = cell
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        if norm < ZERO_NORM_EPS {
            zeros += 1;
            cell.iter_mut().for_each(|v| *v = 0.0);
            cell[0] = 1.0;
        } else {
            cell.iter_mut()
                .for_each(|v| *v = (f64::from(*v) / norm) as f32);
        }
    }
    (out, zeros)
}

/// Source coordinate for destination index `dst` under align-corners mapping.
#[inline]
pub(crate) fn align_corners_src(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    if dst_len == 1 {
        (src_len as f64 - 1.0) / 2.0
    } else {
        dst as f64 * (src_len as f64 - 1.0) / (dst_len as f64 - 1.0)
    }
}

/// Bilinear resampling with align-corners coordinates.
///
/// Resizing to the source size is the identity; constants stay constant.
pub fn bilinear_resize(t: &Tensor3, new_h: usize, new_w: usize) -> Result<Tensor3> {
    if new_h == 0 || new_w == 0 {
        return Err(D2Error::ShapeMismatch(format!(
            "resize target must be at least 1x1, got {new_h}x{new_w}"
        )));
    }
    if (new_h, new_w) == (t.height, t.width) {
        return Ok(t.clone());
    }
    let n = t.channels;
    let mut out = Tensor3::zeros(new_h, new_w, n);
    let cols: Vec<(usize, usize, f64)> = (0..new_w)
        .map(|j| lerp_taps(align_corners_src(j, t.width, new_w), t.width))
        .collect();
    for i in 0..new_h {
        let (i0, i1, fi) = lerp_taps(align_corners_src(i, t.height, new_h), t.height);
        for (j, &(j0, j1, fj)) in cols.iter().enumerate() {
            let dst = out.cell_mut(i, j);
            let (a, b, c, d) = (t.cell(i0, j0), t.cell(i0, j1), t.cell(i1, j0), t.cell(i1, j1));
            for k in 0..n {
                let top = f64::from(a[k]) * (1.0 - fj) + f64::from(b[k]) * fj;
                let bot = f64::from(c[k]) * (1.0 - fj) + f64::from(d[k]) * fj;
                dst[k] = (top * (1.0 - fi) + bot * fi) as f32;
            }
        }
    }
    Ok(out)
}

/// Splits a real source coordinate into the two neighbouring indices and the
/// fractional weight of the upper one.
#[inline]
pub(crate) fn lerp_taps(src: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let src = src.clamp(0.0, max);
    let lo = src.floor() as usize;
    let hi = (lo + 1).min(len - 1);
    (lo, hi, src - lo as f64)
}

/// Bilinear sample of the descriptor at real-valued cell coordinates
/// `(y, x)`; coordinates are clamped to the grid.
pub fn bilinear_sample(t: &Tensor3, y: f64, x: f64) -> Vec<f32> {
    let (i0, i1, fi) = lerp_taps(y, t.height);
    let (j0, j1, fj) = lerp_taps(x, t.width);
    let (a, b, c, d) = (t.cell(i0, j0), t.cell(i0, j1), t.cell(i1, j0), t.cell(i1, j1));
    (0..t.channels)
        .map(|k| {
            let top = f64::from(a[k]) * (1.0 - fj) + f64::from(b[k]) * fj;
            let bot = f64::from(c[k]) * (1.0 - fj) + f64::from(d[k]) * fj;
            (top * (1.0 - fi) + bot * fi) as f32
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn norm(v: &[f32]) -> f64 {
        v.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt()
    }

    fn random_tensor(h: usize, w: usize, n: usize, seed: u64) -> Tensor3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor3::from_fn(h, w, n, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor3::new(2, 2, 2, vec![0.0; 7]),
            Err(D2Error::ShapeMismatch(_))
        ));
        assert!(Tensor3::new(2, 2, 2, vec![f32::NAN; 8]).is_err());
    }

    #[test]
    fn normalize_three_four_five() {
        let t = Tensor3::new(1, 1, 2, vec![3.0, 4.0]).unwrap();
        let n = l2_normalize_descriptors(&t);
        assert!((n.get(0, 0, 0) - 0.6).abs() < 1e-7);
        assert!((n.get(0, 0, 1) - 0.8).abs() < 1e-7);
    }

    #[test]
    fn normalize_unit_vector_is_fixed_point() {
        let t = Tensor3::new(1, 1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(l2_normalize_descriptors(&t), t);
    }

    #[test]
    fn normalize_random_gives_unit_norms() {
        let t = random_tensor(8, 8, 16, 7);
        let n = l2_normalize_descriptors(&t);
        for i in 0..8 {
            for j in 0..8 {
                assert!((norm(n.cell(i, j)) - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn normalize_zero_vector_becomes_e1() {
        let t = Tensor3::zeros(2, 1, 3);
        let (n, zeros) = l2_normalize_counting(&t);
        assert_eq!(zeros, 2);
        assert_eq!(n.cell(0, 0), &[1.0, 0.0, 0.0]);
        assert_eq!(n.cell(1, 0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Tensor3::filled(3, 5, 2, 0.37);
        let r = bilinear_resize(&c, 7, 2).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.37));
        let t = random_tensor(4, 6, 3, 1);
        assert_eq!(bilinear_resize(&t, 4, 6).unwrap(), t);
        assert!(bilinear_resize(&t, 0, 3).is_err());
    }

    #[test]
    fn resize_two_by_two_center() {
        let t = Tensor3::new(2, 2, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let r = bilinear_resize(&t, 3, 3).unwrap();
        // align corners: dst (1, 1) maps to src (0.5, 0.5), the mean of all four.
        assert!((r.get(1, 1, 0) - 1.5).abs() < 1e-7);
        assert_eq!(r.get(0, 0, 0), 0.0);
        assert_eq!(r.get(2, 2, 0), 3.0);
        assert!((r.get(0, 1, 0) - 0.5).abs() < 1e-7);
    }

    #[test]
    fn resize_to_single_cell_takes_center() {
        let t = Tensor3::new(1, 3, 1, vec![1.0, 2.0, 4.0]).unwrap();
        let r = bilinear_resize(&t, 1, 1).unwrap();
        assert_eq!(r.get(0, 0, 0), 2.0);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(seed in 0u64..1000, h in 1usize..6, w in 1usize..6, n in 1usize..9) {
            let t = random_tensor(h, w, n, seed);
            let once = l2_normalize_descriptors(&t);
            let twice = l2_normalize_descriptors(&once);
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }

        #[test]
        fn resize_outputs_stay_within_input_range(seed in 0u64..1000, nh in 1usize..12, nw in 1usize..12) {
            let t = random_tensor(5, 4, 2, seed);
            let r = bilinear_resize(&t, nh, nw).unwrap();
            let lo = t.data().iter().cloned().fold(f32::INFINITY, f32::min);
            let hi = t.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            prop_assert!(r.is_finite());
            prop_assert!(r.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }
    }
}
