//! Input images, binary PGM/PPM I/O and the three-level image pyramid.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{D2Error, Result};
use crate::tensor::{bilinear_resize, Tensor3};

/// Pyramid resolutions, coarse to fine.
pub const PYRAMID_SCALES: [f32; 3] = [0.5, 1.0, 2.0];

/// Smallest side accepted by [`build_pyramid`].
pub const MIN_PYRAMID_INPUT: usize = 8;
const MIN_PYRAMID_LEVEL: usize = 4;

/// A grayscale (1 channel) or color (3 channel) image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pixels: Tensor3,
}

impl Image {
    /// Wraps an `h × w × c` tensor, clamping values to `[0, 1]`.
    pub fn from_tensor(mut pixels: Tensor3) -> Result<Self> {
        if pixels.channels() != 1 && pixels.channels() != 3 {
            return Err(D2Error::ShapeMismatch(format!(
                "images have 1 or 3 channels, got {}",
                pixels.channels()
            )));
        }
        pixels
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(Self { pixels })
    }

    pub fn gray(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor3::new(height, width, 1, data)?)
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self {
            pixels: Tensor3::filled(height, width, 1, value.clamp(0.0, 1.0)),
        }
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn channels(&self) -> usize {
        self.pixels.channels()
    }

    pub fn is_color(&self) -> bool {
        self.pixels.channels() == 3
    }

    pub fn as_tensor(&self) -> &Tensor3 {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels.get(y, x, c)
    }

    /// Bilinear resample to `new_h × new_w`.
    pub fn resized(&self, new_h: usize, new_w: usize) -> Result<Image> {
        Image::from_tensor(bilinear_resize(&self.pixels, new_h, new_w)?)
    }

    /// Replicates a grayscale image into `channels` identical planes.
    pub fn expand_channels(&self, channels: usize) -> Result<Tensor3> {
        match (self.channels(), channels) {
            (a, b) if a == b => Ok(self.pixels.clone()),
            (1, n) => Ok(Tensor3::from_fn(self.height(), self.width(), n, |i, j, _| {
                self.pixels.get(i, j, 0)
            })),
            (a, b) => Err(D2Error::ShapeMismatch(format!(
                "cannot feed a {a}-channel image to a {b}-channel network"
            ))),
        }
    }

    /// Shrinks the image so that its longer edge is at most `max_edge` pixels.
    pub fn limit_edge(&self, max_edge: usize) -> Result<Image> {
        let long = self.height().max(self.width());
        if long <= max_edge {
            return Ok(self.clone());
        }
        let f = max_edge as f64 / long as f64;
        let h = round_dim(self.height(), f);
        let w = round_dim(self.width(), f);
        self.resized(h, w)
    }

    /// Integer translation by `(dy, dx)`, with edge pixels replicated.
    pub fn translated(&self, dy: isize, dx: isize) -> Image {
        let (h, w) = (self.height() as isize, self.width() as isize);
        let t = Tensor3::from_fn(self.height(), self.width(), self.channels(), |i, j, c| {
            let si = (i as isize - dy).clamp(0, h - 1) as usize;
            let sj = (j as isize - dx).clamp(0, w - 1) as usize;
            self.pixels.get(si, sj, c)
        });
        Image { pixels: t }
    }
}

/// Round-half-up with a floor of one.
pub fn round_dim(len: usize, factor: f64) -> usize {
    ((len as f64 * factor + 0.5).floor() as usize).max(1)
}

/// One level of the multiscale pyramid.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    pub scale: f32,
    pub image: Image,
    /// Backbone output for this level, once extracted.
    pub features: Option<Tensor3>,
}

/// Builds the 0.5× / 1× / 2× pyramid, ordered coarse to fine.
pub fn build_pyramid(img: &Image) -> Result<Vec<PyramidLevel>> {
    let (h, w) = (img.height(), img.width());
    if h < MIN_PYRAMID_INPUT || w < MIN_PYRAMID_INPUT {
        return Err(D2Error::ImageTooSmall {
            height: h,
            width: w,
            min: MIN_PYRAMID_INPUT,
        });
    }
    let coarse = (round_dim(h, 0.5), round_dim(w, 0.5));
    if coarse.0 < MIN_PYRAMID_LEVEL || coarse.1 < MIN_PYRAMID_LEVEL {
        return Err(D2Error::ImageTooSmall {
            height: h,
            width: w,
            min: MIN_PYRAMID_INPUT,
        });
    }
    PYRAMID_SCALES
        .iter()
        .map(|&scale| {
            let image = if scale == 1.0 {
                img.clone()
            } else {
                img.resized(
                    round_dim(h, f64::from(scale)),
                    round_dim(w, f64::from(scale)),
                )?
            };
            Ok(PyramidLevel {
                scale,
                image,
                features: None,
            })
        })
        .collect()
}

/// Reads an 8-bit binary PGM (`P5`) or PPM (`P6`) file.
pub fn read_pnm(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path.as_ref())?;
    decode_pnm(&bytes)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(D2Error::Format(format!("unsupported PNM magic {other:?}"))),
    };
    let width: usize = parse_header_num(bytes, &mut pos)?;
    let height: usize = parse_header_num(bytes, &mut pos)?;
    let maxval: usize = parse_header_num(bytes, &mut pos)?;
    if maxval == 0 || maxval > 255 {
        return Err(D2Error::Format(format!(
            "only 8-bit PNM is supported (maxval {maxval})"
        )));
    }
    if width == 0 || height == 0 {
        return Err(D2Error::Format("PNM image has zero size".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or(D2Error::TruncatedFile)?;
    let maxval = maxval as f32;
    let data = raster.iter().map(|&b| f32::from(b) / maxval).collect();
    Image::from_tensor(Tensor3::new(height, width, channels, data)?)
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(D2Error::TruncatedFile),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn parse_header_num(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    tok.parse()
        .map_err(|_| D2Error::Format(format!("bad PNM header field {tok:?}")))
}

/// Encodes as `P5` (grayscale) or `P6` (color).
pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.is_color() { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(
        img.as_tensor()
            .data()
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

pub fn write_pnm(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path.as_ref())?;
    f.write_all(&encode_pnm(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_sizes() {
        let levels = build_pyramid(&Image::constant(100, 100, 0.5)).unwrap();
        let dims: Vec<_> = levels
            .iter()
            .map(|l| (l.image.height(), l.image.width()))
            .collect();
        assert_eq!(dims, vec![(50, 50), (100, 100), (200, 200)]);
        let scales: Vec<_> = levels.iter().map(|l| l.scale).collect();
        assert_eq!(scales, vec![0.5, 1.0, 2.0]);
    }

    #[test]
    fn pyramid_rounds_half_up() {
        let levels = build_pyramid(&Image::constant(101, 101, 0.5)).unwrap();
        assert_eq!(levels[0].image.height(), 51);
        assert_eq!(levels[0].image.width(), 51);
        assert_eq!(levels[2].image.height(), 202);
    }

    #[test]
    fn pyramid_of_constant_is_constant() {
        let levels = build_pyramid(&Image::constant(20, 30, 0.25)).unwrap();
        for l in &levels {
            assert!(l.image.as_tensor().data().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn pyramid_rejects_tiny_input() {
        assert!(matches!(
            build_pyramid(&Image::constant(7, 30, 0.1)),
            Err(D2Error::ImageTooSmall { .. })
        ));
        assert!(build_pyramid(&Image::constant(8, 8, 0.1)).is_ok());
    }

    #[test]
    fn pixels_are_clamped() {
        let img = Image::gray(1, 2, vec![-0.5, 1.5]).unwrap();
        assert_eq!(img.as_tensor().data(), &[0.0, 1.0]);
    }

    #[test]
    fn pnm_round_trip_and_errors() {
        let data: Vec<f32> = (0..12).map(|v| v as f32 / 255.0).collect();
        let img = Image::from_tensor(Tensor3::new(2, 2, 3, data).unwrap()).unwrap();
        let bytes = encode_pnm(&img);
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode_pnm(&bytes).unwrap(), img);

        let with_comment = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let g = decode_pnm(with_comment).unwrap();
        assert_eq!(g.as_tensor().data(), &[0.0, 1.0]);

        assert!(matches!(decode_pnm(b"P5\n4 4\n255\nabc"), Err(D2Error::TruncatedFile)));
        assert!(matches!(decode_pnm(b"P3\n1 1\n255\n0"), Err(D2Error::Format(_))));
    }

    #[test]
    fn expand_gray_to_color() {
        let img = Image::gray(1, 2, vec![0.2, 0.4]).unwrap();
        let t = img.expand_channels(3).unwrap();
        assert_eq!(t.cell(0, 1), &[0.4, 0.4, 0.4]);
        let color = Image::from_tensor(Tensor3::zeros(1, 1, 3)).unwrap();
        assert!(color.expand_channels(1).is_err());
    }
}
