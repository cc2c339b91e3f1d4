//! Pinhole cameras, ground-truth correspondences from posed depth maps, and
//! homography reprojection error.
//!
//! Pixel centres sit at integer coordinates: `x` is the column index and
//! `y` the row index.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Container, DATA_ENTRY};
use crate::error::{D2Error, Result};

/// Default relative depth tolerance of the occlusion check.
pub const DEFAULT_DEPTH_TOLERANCE: f64 = 0.05;

/// Round-off allowance when testing whether a projection is inside the image.
const EDGE_SLACK: f64 = 1e-9;
const MIN_DEPTH: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation.
    pub rotation: Matrix3<f64>,
    /// Translation in the camera frame: `p_cam = R · X + t`.
    pub translation: Vector3<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl PinholeCamera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(D2Error::InvalidArgument(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(D2Error::InvalidArgument(format!(
                "R is not a rotation (|RᵀR − I| = {ortho:e}, det = {det})"
            )));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
        })
    }

    /// Identity pose with the given intrinsics.
    pub fn at_origin(fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Self::new(fx, fy, cx, cy, Matrix3::identity(), Vector3::zeros()).unwrap()
    }

    /// Pose from a camera centre `c` in world coordinates: `t = −R·c`.
    pub fn with_center(mut self, rotation: Matrix3<f64>, center: Vector3<f64>) -> Result<Self> {
        let t = -(rotation * center);
        self = Self::new(self.fx, self.fy, self.cx, self.cy, rotation, t)?;
        Ok(self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let j: CameraJson =
            serde_json::from_str(s).map_err(|e| D2Error::Format(format!("camera JSON: {e}")))?;
        Self::new(
            j.fx,
            j.fy,
            j.cx,
            j.cy,
            Matrix3::from_row_slice(&j.r),
            Vector3::from_column_slice(&j.t),
        )
    }

    pub fn to_json(&self) -> String {
        let mut r = [0.0; 9];
        for row in 0..3 {
            for col in 0..3 {
                r[row * 3 + col] = self.rotation[(row, col)];
            }
        }
        let j = CameraJson {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            r,
            t: [self.translation.x, self.translation.y, self.translation.z],
        };
        serde_json::to_string_pretty(&j).expect("camera serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path.as_ref())?)
    }

    /// Projects a world point; returns `(x, y, depth)`.
    pub fn project(&self, world: &Vector3<f64>) -> Result<(f64, f64, f64)> {
        let p = self.rotation * world + self.translation;
        if p.z <= MIN_DEPTH {
            return Err(D2Error::BehindCamera(p.z));
        }
        Ok((
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
            p.z,
        ))
    }

    /// World point seen at pixel `(x, y)` with camera-frame depth `depth`.
    pub fn back_project(&self, x: f64, y: f64, depth: f64) -> Vector3<f64> {
        let p = Vector3::new(
            (x - self.cx) * depth / self.fx,
            (y - self.cy) * depth / self.fy,
            depth,
        );
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Free-function form of [`PinholeCamera::project`].
pub fn project(cam: &PinholeCamera, world: &Vector3<f64>) -> Result<(f64, f64, f64)> {
    cam.project(world)
}

/// Per-pixel depth in metres; zero or negative marks a missing value.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width || height == 0 || width == 0 {
            return Err(D2Error::ShapeMismatch(format!(
                "{height}x{width} depth map needs {} values, got {}",
                height * width,
                depth.len()
            )));
        }
        if depth.iter().any(|d| !d.is_finite()) {
            return Err(D2Error::Format("depth map contains non-finite values".into()));
        }
        Ok(Self {
            height,
            width,
            depth,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let depth = (0..height * width).map(|idx| f(idx / width, idx % width)).collect();
        Self::new(height, width, depth).expect("finite depth")
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    #[inline]
    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.at(y, x) > 0.0
    }

    /// Reads the `"data"` entry of a `D2WB` container.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t = Container::load(path)?.tensor(DATA_ENTRY)?;
        if t.channels() != 1 {
            return Err(D2Error::ShapeMismatch(format!(
                "depth map must have one channel, has {}",
                t.channels()
            )));
        }
        Self::new(
            t.height(),
            t.width(),
            t.data().iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.insert(
            DATA_ENTRY,
            crate::container::Entry {
                dims: vec![self.height, self.width],
                data: self.depth.iter().map(|&d| d as f32).collect(),
            },
        );
        c
    }
}

/// A posed view: camera plus its aligned depth map.
#[derive(Debug, Clone)]
pub struct View {
    pub camera: PinholeCamera,
    pub depth: DepthMap,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Correspondence {
    /// `(x, y)` in image 1 (real-valued projection).
    pub point_a: (f64, f64),
    /// `(x, y)` in image 2 (source pixel centre).
    pub point_b: (f64, f64),
}

/// Maps pixel `(x, y)` of view 2 into view 1 and applies the depth check.
/// Returns the projected point when the pixel survives.
fn transfer(view1: &View, view2: &View, x: usize, y: usize, tolerance: f64) -> Option<(f64, f64)> {
    let z2 = view2.depth.at(y, x);
    if z2 <= 0.0 {
        return None;
    }
    let world = view2.camera.back_project(x as f64, y as f64, z2);
    let (u, v, z) = view1.camera.project(&world).ok()?;
    let (w1, h1) = (view1.depth.width as f64, view1.depth.height as f64);
    if !(u >= -EDGE_SLACK && v >= -EDGE_SLACK && u <= w1 - 1.0 + EDGE_SLACK && v <= h1 - 1.0 + EDGE_SLACK) {
        return None;
    }
    let px = (u.round().max(0.0) as usize).min(view1.depth.width - 1);
    let py = (v.round().max(0.0) as usize).min(view1.depth.height - 1);
    let z1 = view1.depth.at(py, px);
    if z1 <= 0.0 || (z - z1).abs() / z1 > tolerance {
        return None;
    }
    Some((u, v))
}

/// Ground-truth correspondences from image 2 into image 1, row-major over
/// image 2. A pixel is kept when its projection lands inside image 1, in
/// front of the camera, on a valid depth, and within the relative depth
/// tolerance of the nearest image-1 depth sample.
pub fn generate_correspondences(view1: &View, view2: &View, depth_tolerance: f64) -> Vec<Correspondence> {
    let (h, w) = (view2.depth.height, view2.depth.width);
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if let Some(a) = transfer(view1, view2, x, y, depth_tolerance) {
                out.push(Correspondence {
                    point_a: a,
                    point_b: (x as f64, y as f64),
                });
            }
        }
    }
    out
}

/// Fraction of a uniform sample of valid-depth image-2 pixels that survive
/// the correspondence filter. Sampling is with replacement and seeded.
pub fn overlap_fraction(
    view1: &View,
    view2: &View,
    samples: usize,
    depth_tolerance: f64,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(D2Error::InvalidArgument("samples must be at least 1".into()));
    }
    let valid: Vec<(usize, usize)> = (0..view2.depth.height)
        .flat_map(|y| (0..view2.depth.width).map(move |x| (x, y)))
        .filter(|&(x, y)| view2.depth.is_valid(y, x))
        .collect();
    if valid.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kept = (0..samples)
        .filter(|_| {
            let (x, y) = valid[rng.gen_range(0..valid.len())];
            transfer(view1, view2, x, y, depth_tolerance).is_some()
        })
        .count();
    Ok(kept as f64 / samples as f64)
}

/// `x1,y1,x2,y2` rows.
pub fn correspondences_csv(corr: &[Correspondence]) -> String {
    let mut s = String::from("x1,y1,x2,y2\n");
    for c in corr {
        let _ = writeln!(s, "{},{},{},{}", c.point_a.0, c.point_a.1, c.point_b.0, c.point_b.1);
    }
    s
}

/// A planar homography, scaled so that `H[2][2] = 1` when that entry is nonzero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(D2Error::Format("homography has non-finite entries".into()));
        }
        let m = if m[(2, 2)] != 0.0 { m / m[(2, 2)] } else { m };
        let det = m.determinant();
        if det.abs() <= 1e-12 {
            return Err(D2Error::InvalidArgument(format!(
                "homography is singular (det = {det:e})"
            )));
        }
        Ok(Self(m))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn from_row_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(D2Error::Format(format!(
                "homography needs 9 values, got {}",
                v.len()
            )));
        }
        Self::new(Matrix3::from_row_slice(v))
    }

    /// Parses nine whitespace-separated reals, row-major.
    pub fn parse(text: &str) -> Result<Self> {
        let vals = text
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| D2Error::Format(format!("bad homography entry {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_row_slice(&vals)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path.as_ref())?)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn inverse(&self) -> Self {
        Self::new(self.0.try_inverse().expect("checked invertible")).expect("inverse is invertible")
    }

    pub fn apply(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let q = self.0 * Vector3::new(p.0, p.1, 1.0);
        if q.z.abs() < 1e-12 {
            return Err(D2Error::PointAtInfinity(q.z.abs()));
        }
        Ok((q.x / q.z, q.y / q.z))
    }
}

/// Pixel distance between `H · a` and `b`.
pub fn reprojection_error(h: &Homography, point_a: (f64, f64), point_b: (f64, f64)) -> Result<f64> {
    let (x, y) = h.apply(point_a)?;
    Ok(((x - point_b.0).powi(2) + (y - point_b.1).powi(2)).sqrt())
}
