//! Keypoints and the `.d2f` feature file.
//!
//! ```text
//! "D2FK" | u32 version = 1 | u32 count | u32 desc_dim
//! per keypoint: f32 x | f32 y | f32 scale | f32 score | u16 channel | desc_dim × f32
//! ```
//! All fields little-endian.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{D2Error, Result};

pub const D2F_MAGIC: [u8; 4] = *b"D2FK";
pub const D2F_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Column in the input-image frame, pixels.
    pub x: f32,
    /// Row in the input-image frame, pixels.
    pub y: f32,
    /// Pyramid factor of the level the keypoint was detected at.
    pub scale: f32,
    pub score: f32,
    /// Index of the winning detection map.
    pub channel: usize,
    pub descriptor: Vec<f32>,
}

/// Sorts by score (descending), ties by `(y, x)` ascending, and keeps the first `k`.
pub fn top_k(mut keypoints: Vec<Keypoint>, k: usize) -> Vec<Keypoint> {
    keypoints.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.y.total_cmp(&b.y))
            .then(a.x.total_cmp(&b.x))
    });
    keypoints.truncate(k);
    keypoints
}

/// Descriptor dimension shared by all keypoints, or 0 for an empty set.
fn descriptor_dim(keypoints: &[Keypoint]) -> Result<usize> {
    let dim = keypoints.first().map_or(0, |k| k.descriptor.len());
    if let Some(bad) = keypoints.iter().find(|k| k.descriptor.len() != dim) {
        return Err(D2Error::DimMismatch(dim, bad.descriptor.len()));
    }
    Ok(dim)
}

pub fn encode_d2f(keypoints: &[Keypoint], desc_dim: Option<usize>) -> Result<Vec<u8>> {
    let dim = match (descriptor_dim(keypoints)?, desc_dim) {
        (0, Some(d)) if keypoints.is_empty() => d,
        (d, Some(want)) if d != want => return Err(D2Error::DimMismatch(want, d)),
        (d, _) => d,
    };
    let mut out = Vec::with_capacity(16 + keypoints.len() * (18 + 4 * dim));
    out.extend_from_slice(&D2F_MAGIC);
    out.extend_from_slice(&D2F_VERSION.to_le_bytes());
    out.extend_from_slice(&(keypoints.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for k in keypoints {
        for v in [k.x, k.y, k.scale, k.score] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let channel = u16::try_from(k.channel)
            .map_err(|_| D2Error::Format(format!("channel {} does not fit u16", k.channel)))?;
        out.extend_from_slice(&channel.to_le_bytes());
        for v in &k.descriptor {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a feature file; returns the keypoints and the declared descriptor dimension.
pub fn decode_d2f(bytes: &[u8]) -> Result<(Vec<Keypoint>, usize)> {
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or(D2Error::TruncatedFile)?;
        *pos += n;
        Ok(s)
    };
    let u32_at = |pos: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let f32_at = |pos: &mut usize| -> Result<f32> {
        Ok(f32::from_le_bytes(take(pos, 4)?.try_into().unwrap()))
    };
    let mut pos = 0;
    let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
    if magic != D2F_MAGIC {
        return Err(D2Error::BadMagic {
            expected: D2F_MAGIC,
            found: magic,
        });
    }
    let version = u32_at(&mut pos)?;
    if version != D2F_VERSION {
        return Err(D2Error::VersionUnsupported(version));
    }
    let count = u32_at(&mut pos)? as usize;
    let dim = u32_at(&mut pos)? as usize;
    let mut keypoints = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let x = f32_at(&mut pos)?;
        let y = f32_at(&mut pos)?;
        let scale = f32_at(&mut pos)?;
        let score = f32_at(&mut pos)?;
        let channel = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let descriptor = take(&mut pos, 4 * dim)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        keypoints.push(Keypoint {
            x,
            y,
            scale,
            score,
            channel,
            descriptor,
        });
    }
    if pos != bytes.len() {
        return Err(D2Error::Format(format!(
            "{} trailing bytes after {count} keypoints",
            bytes.len() - pos
        )));
    }
    Ok((keypoints, dim))
}

pub fn read_d2f(path: impl AsRef<Path>) -> Result<Vec<Keypoint>> {
    Ok(decode_d2f(&fs::read(path.as_ref())?)?.0)
}

pub fn write_d2f(keypoints: &[Keypoint], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), encode_d2f(keypoints, None)?)?;
    Ok(())
}

/// `x,y,scale,score` rows for plotting.
pub fn keypoints_csv(keypoints: &[Keypoint]) -> String {
    let mut s = String::from("x,y,scale,score\n");
    for k in keypoints {
        let _ = writeln!(s, "{},{},{},{}", k.x, k.y, k.scale, k.score);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn kp(score: f32, x: f32, y: f32) -> Keypoint {
        Keypoint {
            x,
            y,
            scale: 1.0,
            score,
            channel: 3,
            descriptor: vec![1.0, 0.0],
        }
    }

    #[test]
    fn top_k_examples() {
        let pts = vec![kp(0.5, 1.0, 1.0), kp(0.2, 2.0, 2.0), kp(0.9, 3.0, 3.0)];
        assert!(top_k(pts.clone(), 0).is_empty());
        let all = top_k(pts.clone(), 10);
        assert_eq!(all.iter().map(|k| k.score).collect::<Vec<_>>(), vec![0.9, 0.5, 0.2]);
        let two = top_k(pts, 2);
        assert_eq!(two.iter().map(|k| k.score).collect::<Vec<_>>(), vec![0.9, 0.5]);
    }

    #[test]
    fn top_k_tie_break_by_row_then_column() {
        let pts = vec![kp(0.5, 4.0, 2.0), kp(0.5, 1.0, 2.0), kp(0.5, 9.0, 1.0)];
        let sorted = top_k(pts, 3);
        let xy: Vec<_> = sorted.iter().map(|k| (k.y, k.x)).collect();
        assert_eq!(xy, vec![(1.0, 9.0), (2.0, 1.0), (2.0, 4.0)]);
    }

    #[test]
    fn d2f_errors() {
        let bytes = encode_d2f(&[kp(0.1, 0.0, 0.0)], None).unwrap();
        assert_eq!(bytes.len(), 16 + 18 + 8);
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(decode_d2f(&bad), Err(D2Error::BadMagic { .. })));
        assert!(matches!(decode_d2f(&bytes[..bytes.len() - 1]), Err(D2Error::TruncatedFile)));
        let empty = encode_d2f(&[], Some(64)).unwrap();
        assert_eq!(decode_d2f(&empty).unwrap(), (vec![], 64));
    }

    proptest! {
        #[test]
        fn d2f_round_trip(n in 0usize..6, dim in 1usize..9, seed in any::<u32>()) {
            let pts: Vec<Keypoint> = (0..n)
                .map(|i| Keypoint {
                    x: i as f32 * 1.5,
                    y: seed as f32,
                    scale: 0.5,
                    score: 1.0 / (i + 1) as f32,
                    channel: i * 7,
                    descriptor: (0..dim).map(|d| (d + i) as f32).collect(),
                })
                .collect();
            let (back, d) = decode_d2f(&encode_d2f(&pts, Some(dim)).unwrap()).unwrap();
            prop_assert_eq!(d, dim);
            prop_assert_eq!(back, pts);
        }
    }
}
