//! Exhaustive mutual nearest-neighbour matching with an optional ratio test.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{D2Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchRecord {
    pub index_a: usize,
    pub index_b: usize,
    /// Euclidean distance between the two unit descriptors, in `[0, 2]`.
    pub distance: f64,
    /// First- to second-nearest distance from `a` into B; absent when B has
    /// a single element.
    pub ratio: Option<f64>,
}

/// `sqrt(2 − 2·a·b)` for unit vectors, clamped to `[0, 4]` under the root.
#[inline]
pub fn unit_distance(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
    (2.0 - 2.0 * dot).clamp(0.0, 4.0).sqrt()
}

/// Nearest and second-nearest neighbour of `q` in `set`; lowest index on ties.
fn two_nearest(q: &[f32], set: &[Vec<f32>]) -> (usize, f64, Option<f64>) {
    let mut best = (0, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (idx, d) in set.iter().map(|s| unit_distance(q, s)).enumerate() {
        if d < best.1 {
            second = best.1;
            best = (idx, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0, best.1, (set.len() >= 2).then_some(second))
}

fn check_dims(a: &[Vec<f32>], b: &[Vec<f32>]) -> Result<()> {
    let dim = a.first().or(b.first()).map_or(0, Vec::len);
    for d in a.iter().chain(b) {
        if d.len() != dim {
            return Err(D2Error::DimMismatch(dim, d.len()));
        }
    }
    Ok(())
}

/// Keeps `(a, b)` iff each is the other's nearest neighbour.
///
/// Output is ordered by `index_a`.
pub fn mutual_nn_match(desc_a: &[Vec<f32>], desc_b: &[Vec<f32>]) -> Result<Vec<MatchRecord>> {
    check_dims(desc_a, desc_b)?;
    if desc_a.is_empty() || desc_b.is_empty() {
        return Ok(Vec::new());
    }
    let b_to_a: Vec<usize> = desc_b
        .par_iter()
        .map(|b| two_nearest(b, desc_a).0)
        .collect();
    let matches = desc_a
        .par_iter()
        .enumerate()
        .filter_map(|(ia, a)| {
            let (ib, d1, d2) = two_nearest(a, desc_b);
            (b_to_a[ib] == ia).then(|| MatchRecord {
                index_a: ia,
                index_b: ib,
                distance: d1,
                ratio: d2.map(|d2| if d2 > 0.0 { d1 / d2 } else { 1.0 }),
            })
        })
        .collect();
    Ok(matches)
}

/// Lowe ratio test. Matches without a ratio are kept.
pub fn ratio_filter(matches: &[MatchRecord], threshold: f64) -> Vec<MatchRecord> {
    matches
        .iter()
        .filter(|m| m.ratio.is_none_or(|r| r <= threshold))
        .copied()
        .collect()
}

/// `index_a,index_b,distance,ratio`; an absent ratio is an empty field.
pub fn matches_csv(matches: &[MatchRecord]) -> String {
    let mut s = String::from("index_a,index_b,distance,ratio\n");
    for m in matches {
        let ratio = m.ratio.map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", m.index_a, m.index_b, m.distance, ratio);
    }
    s
}
