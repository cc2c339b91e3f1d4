//! Mean matching accuracy under a known homography, and ratio-test
//! statistics split by reprojection error.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{D2Error, Result};
use crate::geometry::{reprojection_error, Homography};
use crate::keypoints::Keypoint;
use crate::matcher::MatchRecord;

/// Reprojection error below this is a correct match for the ratio analysis.
pub const CORRECT_PX: f64 = 4.0;
/// Reprojection error above this is an incorrect match; in between is discarded.
pub const INCORRECT_PX: f64 = 20.0;

/// A match expressed in image coordinates, `(x, y)` in each image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PointMatch {
    pub point_a: (f64, f64),
    pub point_b: (f64, f64),
}

/// Looks up the keypoint coordinates of each match.
pub fn point_matches(matches: &[MatchRecord], kps_a: &[Keypoint], kps_b: &[Keypoint]) -> Result<Vec<PointMatch>> {
    matches
        .iter()
        .map(|m| {
            let a = kps_a.get(m.index_a).ok_or(D2Error::OutOfBounds(m.index_a, kps_a.len()))?;
            let b = kps_b.get(m.index_b).ok_or(D2Error::OutOfBounds(m.index_b, kps_b.len()))?;
            Ok(PointMatch {
                point_a: (f64::from(a.x), f64::from(a.y)),
                point_b: (f64::from(b.x), f64::from(b.y)),
            })
        })
        .collect()
}

/// 1, 1.5, …, 10 pixels.
pub fn default_thresholds() -> Vec<f64> {
    (0..19).map(|i| 1.0 + 0.5 * f64::from(i)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairAccuracy {
    /// Keypoints detected in the first image (informational).
    pub features: usize,
    pub matches: usize,
    /// Correct matches per threshold.
    pub correct: Vec<usize>,
    /// `correct / matches` per threshold; 0 when there are no matches.
    pub fractions: Vec<f64>,
}

/// Reprojection error of every match; a point mapped to infinity gets an
/// infinite error and is never correct.
pub fn match_errors(matches: &[PointMatch], h: &Homography) -> Vec<f64> {
    matches
        .iter()
        .map(|m| reprojection_error(h, m.point_a, m.point_b).unwrap_or(f64::INFINITY))
        .collect()
}

/// Per-threshold fraction of matches with reprojection error `< t`.
pub fn mma_for_pair(matches: &[PointMatch], h: &Homography, thresholds: &[f64], features: usize) -> PairAccuracy {
    accuracy_from_errors(&match_errors(matches, h), thresholds, features)
}

pub fn accuracy_from_errors(errors: &[f64], thresholds: &[f64], features: usize) -> PairAccuracy {
    let correct: Vec<usize> = thresholds
        .iter()
        .map(|&t| errors.iter().filter(|&&e| e < t).count())
        .collect();
    let fractions = correct
        .iter()
        .map(|&c| if errors.is_empty() { 0.0 } else { c as f64 / errors.len() as f64 })
        .collect();
    PairAccuracy {
        features,
        matches: errors.len(),
        correct,
        fractions,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MMACurve {
    pub thresholds: Vec<f64>,
    pub mma: Vec<f64>,
    pub pairs: Vec<PairAccuracy>,
}

impl MMACurve {
    /// `threshold,mma` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,mma\n");
        for (t, m) in self.thresholds.iter().zip(&self.mma) {
            let _ = writeln!(s, "{t},{m}");
        }
        s
    }
}

/// Unweighted mean of the per-pair fractions at each threshold.
pub fn mma_aggregate(thresholds: &[f64], pairs: Vec<PairAccuracy>) -> Result<MMACurve> {
    if pairs.is_empty() {
        return Err(D2Error::EmptyInput("no image pairs"));
    }
    if let Some(p) = pairs.iter().find(|p| p.fractions.len() != thresholds.len()) {
        return Err(D2Error::DimMismatch(thresholds.len(), p.fractions.len()));
    }
    let n = pairs.len() as f64;
    let mma = (0..thresholds.len())
        .map(|t| pairs.iter().map(|p| p.fractions[t]).sum::<f64>() / n)
        .collect();
    Ok(MMACurve {
        thresholds: thresholds.to_vec(),
        mma,
        pairs,
    })
}

/// A match's reprojection error together with its ratio-test value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RatedMatch {
    pub error: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchClass {
    Correct,
    Discarded,
    Incorrect,
}

pub fn classify_error(error: f64) -> MatchClass {
    if error < CORRECT_PX {
        MatchClass::Correct
    } else if error > INCORRECT_PX {
        MatchClass::Incorrect
    } else {
        MatchClass::Discarded
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioPDF {
    /// `bins + 1` edges over `[0, 1]`.
    pub edges: Vec<f64>,
    /// Unit-mass histogram of correct-match ratios (all zeros when empty).
    pub correct: Vec<f64>,
    pub incorrect: Vec<f64>,
    pub correct_empty: bool,
    pub incorrect_empty: bool,
    pub correct_count: usize,
    pub discarded_count: usize,
    pub incorrect_count: usize,
    pub ratio_threshold: f64,
    /// Share of incorrect matches the ratio test removes; `None` without any.
    pub incorrect_filtered: Option<f64>,
    /// Share of correct matches the ratio test removes; `None` without any.
    pub correct_lost: Option<f64>,
}

impl RatioPDF {
    /// `bin_low,bin_high,correct,incorrect` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_low,bin_high,correct,incorrect\n");
        for (b, w) in self.edges.windows(2).enumerate() {
            let _ = writeln!(s, "{},{},{},{}", w[0], w[1], self.correct[b], self.incorrect[b]);
        }
        s
    }
}

fn unit_histogram(ratios: &[f64], bins: usize) -> (Vec<f64>, bool) {
    let mut h = vec![0.0; bins];
    for &r in ratios {
        let b = ((r.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    if ratios.is_empty() {
        return (h, true);
    }
    let n = ratios.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    (h, false)
}

/// Ratio histograms of correct (`< 4` px) and incorrect (`> 20` px) matches,
/// plus what a ratio test at `ratio_threshold` would do to each group. A match
/// is removed by the test when its ratio exceeds the threshold.
pub fn ratio_pdf(matches: &[RatedMatch], bins: usize, ratio_threshold: f64) -> Result<RatioPDF> {
    if bins < 2 {
        return Err(D2Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    let mut discarded = 0;
    for m in matches {
        match classify_error(m.error) {
            MatchClass::Correct => correct.push(m.ratio),
            MatchClass::Incorrect => incorrect.push(m.ratio),
            MatchClass::Discarded => discarded += 1,
        }
    }
    let removed = |rs: &[f64]| -> Option<f64> {
        (!rs.is_empty()).then(|| rs.iter().filter(|&&r| r > ratio_threshold).count() as f64 / rs.len() as f64)
    };
    let (hc, ce) = unit_histogram(&correct, bins);
    let (hi, ie) = unit_histogram(&incorrect, bins);
    Ok(RatioPDF {
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        correct: hc,
        incorrect: hi,
        correct_empty: ce,
        incorrect_empty: ie,
        correct_count: correct.len(),
        discarded_count: discarded,
        incorrect_count: incorrect.len(),
        ratio_threshold,
        incorrect_filtered: removed(&incorrect),
        correct_lost: removed(&correct),
    })
}

/// Pairs each match with its reprojection error. Matches without a ratio
/// (second neighbour missing) are skipped.
pub fn rate_matches(records: &[MatchRecord], points: &[PointMatch], h: &Homography) -> Vec<RatedMatch> {
    records
        .iter()
        .zip(match_errors(points, h))
        .filter_map(|(r, error)| r.ratio.map(|ratio| RatedMatch { error, ratio }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pm(a: (f64, f64), b: (f64, f64)) -> PointMatch {
        PointMatch { point_a: a, point_b: b }
    }

    #[test]
    fn thresholds_grid() {
        let t = default_thresholds();
        assert_eq!(t.len(), 19);
        assert_eq!((t[0], t[18]), (1.0, 10.0));
    }

    #[test]
    fn identity_coincident_is_perfect() {
        let ms: Vec<_> = (0..5).map(|i| pm((i as f64, 2.0), (i as f64, 2.0))).collect();
        let acc = mma_for_pair(&ms, &Homography::identity(), &default_thresholds(), 5);
        assert!(acc.fractions.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn half_correct_at_one_pixel() {
        let ms = [pm((0.0, 0.0), (0.5, 0.0)), pm((0.0, 0.0), (0.0, 5.0))];
        let acc = mma_for_pair(&ms, &Homography::identity(), &[1.0], 2);
        assert_eq!(acc.fractions, vec![0.5]);
    }

    #[test]
    fn empty_pair_scores_zero() {
        let acc = mma_for_pair(&[], &Homography::identity(), &[1.0, 2.0], 0);
        assert_eq!(acc.fractions, vec![0.0, 0.0]);
    }

    #[test]
    fn point_at_infinity_is_incorrect() {
        let h = Homography::from_row_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        let acc = mma_for_pair(&[pm((-1.0, 0.0), (0.0, 0.0))], &h, &[10.0], 1);
        assert_eq!(acc.fractions, vec![0.0]);
    }

    #[test]
    fn curve_matches_empirical_cdf() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let errors: Vec<f64> = (0..500).map(|_| rng.gen_range(0.0..10.0)).collect();
        let ms: Vec<_> = errors.iter().map(|&e| pm((0.0, 0.0), (e, 0.0))).collect();
        let t = default_thresholds();
        let acc = mma_for_pair(&ms, &Homography::identity(), &t, 500);
        for (ti, f) in t.iter().zip(&acc.fractions) {
            let cdf = errors.iter().filter(|&&e| e < *ti).count() as f64 / 500.0;
            assert!((cdf - f).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_examples() {
        let t = [1.0];
        let p0 = accuracy_from_errors(&[5.0], &t, 1);
        let p1 = accuracy_from_errors(&[0.1], &t, 1);
        let single = mma_aggregate(&t, vec![p1.clone()]).unwrap();
        assert_eq!(single.mma, p1.fractions);
        assert_eq!(mma_aggregate(&t, vec![p0, p1]).unwrap().mma, vec![0.5]);
        assert!(matches!(mma_aggregate(&t, vec![]), Err(D2Error::EmptyInput(_))));
    }

    #[test]
    fn aggregate_equals_hand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = default_thresholds();
        let pairs: Vec<_> = (0..10)
            .map(|_| {
                let n = rng.gen_range(0..30);
                let errs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..12.0)).collect();
                accuracy_from_errors(&errs, &t, n)
            })
            .collect();
        let curve = mma_aggregate(&t, pairs.clone()).unwrap();
        for ti in 0..t.len() {
            let mut sum = 0.0;
            for p in &pairs {
                sum += p.fractions[ti];
            }
            assert!((curve.mma[ti] - sum / 10.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ratio_pdf_all_correct() {
        let ms = vec![RatedMatch { error: 1.0, ratio: 0.5 }; 10];
        let pdf = ratio_pdf(&ms, 10, 0.9).unwrap();
        assert_eq!(pdf.incorrect_filtered, None);
        assert_eq!(pdf.correct_lost, Some(0.0));
        assert!(pdf.incorrect_empty && !pdf.correct_empty);
        assert!((pdf.correct.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pdf.correct[5], 1.0);
    }

    #[test]
    fn ratio_pdf_uniform_incorrect() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ms: Vec<_> = (0..20_000)
            .map(|_| RatedMatch { error: 50.0, ratio: rng.gen_range(0.8..1.0) })
            .collect();
        let pdf = ratio_pdf(&ms, 20, 0.9).unwrap();
        assert!((pdf.incorrect_filtered.unwrap() - 0.5).abs() < 0.02);
        assert!(ratio_pdf(&ms, 1, 0.9).is_err());
    }

    #[test]
    fn bands_partition_matches() {
        assert_eq!(classify_error(3.99), MatchClass::Correct);
        assert_eq!(classify_error(4.0), MatchClass::Discarded);
        assert_eq!(classify_error(20.0), MatchClass::Discarded);
        assert_eq!(classify_error(20.01), MatchClass::Incorrect);
        assert_eq!(classify_error(f64::INFINITY), MatchClass::Incorrect);
    }

    proptest! {
        #[test]
        fn mma_is_monotone(errors in prop::collection::vec(0.0f64..15.0, 0..40)) {
            let acc = accuracy_from_errors(&errors, &default_thresholds(), errors.len());
            prop_assert!(acc.fractions.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(acc.fractions.iter().all(|f| (0.0..=1.0).contains(f)));
        }

        #[test]
        fn aggregate_is_permutation_invariant(
            sets in prop::collection::vec(prop::collection::vec(0.0f64..12.0, 0..10), 1..8),
            rot in 0usize..8,
        ) {
            let t = default_thresholds();
            let pairs: Vec<_> = sets.iter().map(|e| accuracy_from_errors(e, &t, e.len())).collect();
            let mut rotated = pairs.clone();
            let len = rotated.len();
            rotated.rotate_left(rot % len);
            let a = mma_aggregate(&t, pairs).unwrap().mma;
            let b = mma_aggregate(&t, rotated).unwrap().mma;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ratio_pdf_conserves_mass(
            ms in prop::collection::vec((0.0f64..40.0, 0.0f64..=1.0), 0..60),
        ) {
            let rated: Vec<_> = ms.iter().map(|&(error, ratio)| RatedMatch { error, ratio }).collect();
            let pdf = ratio_pdf(&rated, 8, 0.9).unwrap();
            prop_assert_eq!(pdf.correct_count + pdf.discarded_count + pdf.incorrect_count, rated.len());
            for (h, empty) in [(&pdf.correct, pdf.correct_empty), (&pdf.incorrect, pdf.incorrect_empty)] {
                let mass: f64 = h.iter().sum();
                let ok = if empty { mass == 0.0 } else { (mass - 1.0).abs() < 1e-6 };
                prop_assert!(ok);
            }
        }
    }
}
