//! A small CPU inference engine for the truncated VGG16 backbone.
//!
//! Two layouts of the same weights are supported: the training layout
//! (output at 1/8 resolution) and the test layout, where `pool3` becomes a
//! stride-1 average pool and `conv4_*` are dilated by 2 so the output is at
//! 1/4 resolution with the same receptive field.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::{Container, Entry};
use crate::error::{D2Error, Result};
use crate::image::Image;
use crate::tensor::Tensor3;

/// Smallest image side accepted by [`forward`].
pub const MIN_INPUT_SIDE: usize = 16;

pub const NORM_ENTRY: &str = "__norm__";
pub const FINAL_RELU_ENTRY: &str = "__final_relu__";

/// Channel widths of the four VGG16 blocks up to `conv4_3`.
pub const VGG16_WIDTHS: [usize; 4] = [64, 128, 256, 512];

const VGG16_BLOCKS: [&[&str]; 4] = [
    &["conv1_1", "conv1_2"],
    &["conv2_1", "conv2_2"],
    &["conv3_1", "conv3_2", "conv3_3"],
    &["conv4_1", "conv4_2", "conv4_3"],
];

/// All conv layer names in network order.
pub fn vgg16_conv_names() -> impl Iterator<Item = &'static str> {
    VGG16_BLOCKS.iter().flat_map(|b| b.iter().copied())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Train,
    Test,
}

impl std::str::FromStr for Variant {
    type Err = D2Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Variant::Train),
            "test" => Ok(Variant::Test),
            other => Err(D2Error::InvalidArgument(format!(
                "variant must be train or test, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv3x3,
    Relu,
    Pool(PoolKind),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub dilation: usize,
    pub name: String,
}

impl LayerSpec {
    fn conv(name: &str, cin: usize, cout: usize, dilation: usize) -> Self {
        Self {
            kind: LayerKind::Conv3x3,
            in_channels: cin,
            out_channels: cout,
            stride: 1,
            dilation,
            name: name.to_string(),
        }
    }

    fn relu(after: &str, c: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            in_channels: c,
            out_channels: c,
            stride: 1,
            dilation: 1,
            name: format!("relu{}", &after[4..]),
        }
    }

    fn pool(name: &str, kind: PoolKind, c: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::Pool(kind),
            in_channels: c,
            out_channels: c,
            stride,
            dilation: 1,
            name: name.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub layers: Vec<LayerSpec>,
    pub variant: Variant,
    pub output_stride: usize,
    pub final_relu: bool,
}

impl ArchitectureSpec {
    /// VGG16 up to `conv4_3` with the standard widths and RGB input.
    pub fn vgg16(variant: Variant, final_relu: bool) -> Self {
        Self::vgg16_with_widths(variant, 3, VGG16_WIDTHS, final_relu)
    }

    /// The VGG16 topology with arbitrary block widths; used for small test
    /// and demo networks.
    pub fn vgg16_with_widths(
        variant: Variant,
        input_channels: usize,
        widths: [usize; 4],
        final_relu: bool,
    ) -> Self {
        let mut layers = Vec::new();
        let mut cin = input_channels;
        for (block, names) in VGG16_BLOCKS.iter().enumerate() {
            let cout = widths[block];
            let dilation = if block == 3 && variant == Variant::Test { 2 } else { 1 };
            for (idx, name) in names.iter().enumerate() {
                layers.push(LayerSpec::conv(name, cin, cout, dilation));
                cin = cout;
                let last = block == 3 && idx == names.len() - 1;
                if !last || final_relu {
                    layers.push(LayerSpec::relu(name, cout));
                }
            }
            if block < 3 {
                let pool_name = format!("pool{}", block + 1);
                let spec = if block == 2 && variant == Variant::Test {
                    LayerSpec::pool(&pool_name, PoolKind::Avg, cout, 1)
                } else {
                    LayerSpec::pool(&pool_name, PoolKind::Max, cout, 2)
                };
                layers.push(spec);
            }
        }
        let output_stride = match variant {
            Variant::Train => 8,
            Variant::Test => 4,
        };
        Self {
            layers,
            variant,
            output_stride,
            final_relu,
        }
    }

    /// Derives the block widths from the conv shapes stored in `bank`.
    /// `final_relu = None` defers to the bank's metadata flag (default off).
    pub fn for_bank(variant: Variant, bank: &WeightBank, final_relu: Option<bool>) -> Result<Self> {
        let head = bank.conv("conv1_1")?;
        let mut widths = [0; 4];
        for (block, names) in VGG16_BLOCKS.iter().enumerate() {
            widths[block] = bank.conv(names[0])?.out_channels;
        }
        let relu = final_relu.or(bank.final_relu).unwrap_or(false);
        let arch = Self::vgg16_with_widths(variant, head.in_channels, widths, relu);
        bank.check(&arch)?;
        Ok(arch)
    }

    pub fn input_channels(&self) -> usize {
        self.layers[0].in_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers.last().map(|l| l.out_channels).unwrap_or(0)
    }

    pub fn conv_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Conv3x3)
    }
}

/// Weights for one 3×3 convolution, laid out `(out, in, 3, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub out_channels: usize,
    pub in_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvWeights {
    pub fn new(out_channels: usize, in_channels: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != out_channels * in_channels * 9 || bias.len() != out_channels {
            return Err(D2Error::ShapeMismatch(format!(
                "conv ({out_channels}, {in_channels}, 3, 3) needs {} weights and {out_channels} biases, got {} and {}",
                out_channels * in_channels * 9,
                weights.len(),
                bias.len()
            )));
        }
        Ok(Self {
            out_channels,
            in_channels,
            weights,
            bias,
        })
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, u: usize, v: usize) -> f32 {
        self.weights[((o * self.in_channels + c) * 3 + u) * 3 + v]
    }
}

/// Per-channel input normalization, `x' = (x - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn imagenet() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightBank {
    pub convs: BTreeMap<String, ConvWeights>,
    pub norm: Normalization,
    /// Metadata flag written by the converter for fine-tuned weights.
    pub final_relu: Option<bool>,
    /// Entries the engine does not interpret (reference fixtures, provenance).
    pub extras: BTreeMap<String, Entry>,
}

impl WeightBank {
    pub fn conv(&self, name: &str) -> Result<&ConvWeights> {
        self.convs
            .get(name)
            .ok_or_else(|| D2Error::MissingWeights(name.to_string()))
    }

    /// Verifies that every conv layer of `arch` has weights of the right shape.
    pub fn check(&self, arch: &ArchitectureSpec) -> Result<()> {
        for layer in arch.conv_layers() {
            let w = self.conv(&layer.name)?;
            if w.in_channels != layer.in_channels || w.out_channels != layer.out_channels {
                return Err(D2Error::ShapeMismatch(format!(
                    "layer {} expects ({}, {}, 3, 3), weights are ({}, {}, 3, 3)",
                    layer.name, layer.out_channels, layer.in_channels, w.out_channels, w.in_channels
                )));
            }
        }
        let c = arch.input_channels();
        if self.norm.mean.len() != c || self.norm.std.len() != c {
            return Err(D2Error::ShapeMismatch(format!(
                "normalization has {} channels, network input has {c}",
                self.norm.mean.len()
            )));
        }
        Ok(())
    }

    /// He-uniform random weights for `arch`, fully determined by `seed`.
    pub fn random(arch: &ArchitectureSpec, norm: Normalization, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = BTreeMap::new();
        for layer in arch.conv_layers() {
            let fan_in = (layer.in_channels * 9) as f32;
            let bound = (6.0 / fan_in).sqrt();
            let n = layer.out_channels * layer.in_channels * 9;
            let weights = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            let bias = (0..layer.out_channels)
                .map(|_| rng.gen_range(-0.05..0.05))
                .collect();
            convs.insert(
                layer.name.clone(),
                ConvWeights {
                    out_channels: layer.out_channels,
                    in_channels: layer.in_channels,
                    weights,
                    bias,
                },
            );
        }
        Self {
            convs,
            norm,
            final_relu: None,
            extras: BTreeMap::new(),
        }
    }

    /// The small deterministic bank used by the CLI when no weight file is
    /// given, and by the self-test.
    pub fn bundled_tiny() -> Self {
        let arch = tiny_architecture(Variant::Test, false);
        Self::random(&arch, Normalization::imagenet(), 0x0D2F_EA70)
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        for (name, w) in &self.convs {
            c.insert(
                format!("{name}.weight"),
                Entry::new(vec![w.out_channels, w.in_channels, 3, 3], w.weights.clone())?,
            );
            c.insert(format!("{name}.bias"), Entry::new(vec![w.out_channels], w.bias.clone())?);
        }
        let mut norm = self.norm.mean.clone();
        norm.extend_from_slice(&self.norm.std);
        c.insert(NORM_ENTRY, Entry::new(vec![norm.len()], norm)?);
        if let Some(flag) = self.final_relu {
            c.insert(FINAL_RELU_ENTRY, Entry::new(vec![1], vec![f32::from(u8::from(flag))])?);
        }
        for (name, e) in &self.extras {
            c.insert(name.clone(), e.clone());
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut convs = BTreeMap::new();
        let mut extras = BTreeMap::new();
        let mut norm = None;
        let mut final_relu = None;
        for (name, e) in &c.entries {
            if let Some(layer) = name.strip_suffix(".weight") {
                let &[o, i, 3, 3] = e.dims.as_slice() else {
                    return Err(D2Error::ShapeMismatch(format!(
                        "{name}: expected (out, in, 3, 3), got {:?}",
                        e.dims
                    )));
                };
                let bias_name = format!("{layer}.bias");
                let bias = c
                    .get(&bias_name)
                    .ok_or_else(|| D2Error::MissingWeights(bias_name.clone()))?;
                convs.insert(
                    layer.to_string(),
                    ConvWeights::new(o, i, e.data.clone(), bias.data.clone())
                        .map_err(|err| D2Error::ShapeMismatch(format!("{layer}: {err}")))?,
                );
            } else if name.ends_with(".bias") {
                continue;
            } else if name == NORM_ENTRY {
                if e.data.len() % 2 != 0 || e.data.is_empty() {
                    return Err(D2Error::Format(format!(
                        "{NORM_ENTRY} must hold 2 x C values, has {}",
                        e.data.len()
                    )));
                }
                let half = e.data.len() / 2;
                norm = Some(Normalization {
                    mean: e.data[..half].to_vec(),
                    std: e.data[half..].to_vec(),
                });
            } else if name == FINAL_RELU_ENTRY {
                final_relu = e.data.first().map(|&v| v != 0.0);
            } else {
                extras.insert(name.clone(), e.clone());
            }
        }
        let norm = match norm {
            Some(n) => n,
            None => {
                let c = convs.get("conv1_1").map(|w| w.in_channels).unwrap_or(3);
                Normalization::identity(c)
            }
        };
        if norm.std.contains(&0.0) {
            return Err(D2Error::Format("normalization std contains zero".into()));
        }
        Ok(Self {
            convs,
            norm,
            final_relu,
            extras,
        })
    }
}

/// The architecture of [`WeightBank::bundled_tiny`].
pub fn tiny_architecture(variant: Variant, final_relu: bool) -> ArchitectureSpec {
    ArchitectureSpec::vgg16_with_widths(variant, 3, [8, 16, 32, 64], final_relu)
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightBank> {
    WeightBank::from_container(&Container::load(path)?)
}

pub fn save_weights(bank: &WeightBank, path: impl AsRef<Path>) -> Result<()> {
    bank.to_container()?.save(path)
}

/// Splits an `h × w × c` tensor into `c` row-major planes.
fn to_planes(t: &Tensor3) -> Vec<Vec<f32>> {
    (0..t.channels()).map(|k| t.channel_plane(k)).collect()
}

fn from_planes(h: usize, w: usize, planes: &[Vec<f32>]) -> Tensor3 {
    let n = planes.len();
    let mut out = Tensor3::zeros(h, w, n);
    let data = out.data_mut();
    for (k, plane) in planes.iter().enumerate() {
        for (idx, &v) in plane.iter().enumerate() {
            data[idx * n + k] = v;
        }
    }
    out
}

/// Output length of a padded 3×3 convolution (`ceil(len / stride)`).
pub fn conv_output_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Zero-padded 3×3 convolution with padding equal to the dilation.
///
/// `out(i, j, o) = b(o) + Σ w(o, c, u, v) · x(i·s + (u−1)·d, j·s + (v−1)·d, c)`,
/// accumulated per output cell in `f64`.
pub fn conv3x3_forward(
    input: &Tensor3,
    weights: &ConvWeights,
    stride: usize,
    dilation: usize,
) -> Result<Tensor3> {
    if input.channels() != weights.in_channels {
        return Err(D2Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            weights.in_channels,
            input.channels()
        )));
    }
    if stride == 0 || dilation == 0 {
        return Err(D2Error::InvalidArgument("stride and dilation must be positive".into()));
    }
    let (h, w, _) = input.shape();
    let (ho, wo) = (conv_output_len(h, stride), conv_output_len(w, stride));
    let planes = to_planes(input);

    // For each tap offset, the range of output columns whose source column is in bounds.
    let col_range = |v: usize| -> (usize, usize) {
        let off = v as isize * dilation as isize - dilation as isize;
        let s = stride as isize;
        let lo = if off < 0 { ((-off) + s - 1) / s } else { 0 };
        let hi = ((w as isize - 1 - off).div_euclid(s) + 1).clamp(0, wo as isize);
        (lo as usize, hi.max(lo) as usize)
    };
    let cols: [(usize, usize); 3] = [col_range(0), col_range(1), col_range(2)];

    let out_planes: Vec<Vec<f32>> = (0..weights.out_channels)
        .into_par_iter()
        .map(|o| {
            let mut acc = vec![f64::from(weights.bias[o]); ho * wo];
            for (c, plane) in planes.iter().enumerate() {
                for u in 0..3 {
                    let row_off = u as isize * dilation as isize - dilation as isize;
                    for (v, &(j_lo, j_hi)) in cols.iter().enumerate() {
                        let wt = f64::from(weights.at(o, c, u, v));
                        if wt == 0.0 || j_lo >= j_hi {
                            continue;
                        }
                        let col_off = v as isize * dilation as isize - dilation as isize;
                        for i in 0..ho {
                            let r = (i * stride) as isize + row_off;
                            if r < 0 || r >= h as isize {
                                continue;
                            }
                            let src_row = &plane[r as usize * w..(r as usize + 1) * w];
                            let dst_row = &mut acc[i * wo..(i + 1) * wo];
                            if stride == 1 {
                                let start = (j_lo as isize + col_off) as usize;
                                let src = &src_row[start..start + (j_hi - j_lo)];
                                for (d, &s) in dst_row[j_lo..j_hi].iter_mut().zip(src) {
                                    *d += wt * f64::from(s);
                                }
                            } else {
                                for (j, d) in dst_row.iter_mut().enumerate().take(j_hi).skip(j_lo) {
                                    let col = ((j * stride) as isize + col_off) as usize;
                                    *d += wt * f64::from(src_row[col]);
                                }
                            }
                        }
                    }
                }
            }
            acc.into_iter().map(|v| v as f32).collect()
        })
        .collect();
    Ok(from_planes(ho, wo, &out_planes))
}

/// 2×2 pooling. Stride 2 floors the output size; stride 1 keeps it by
/// replicating the bottom row and right column.
pub fn pool2x2_forward(input: &Tensor3, kind: PoolKind, stride: usize) -> Result<Tensor3> {
    let (h, w, n) = input.shape();
    let (ho, wo) = match stride {
        1 => (h, w),
        2 => (h / 2, w / 2),
        s => {
            return Err(D2Error::InvalidArgument(format!(
                "pool stride must be 1 or 2, got {s}"
            )))
        }
    };
    if ho == 0 || wo == 0 {
        return Err(D2Error::ShapeMismatch(format!(
            "cannot pool a {h}x{w} map with stride 2"
        )));
    }
    let mut out = Tensor3::zeros(ho, wo, n);
    for i in 0..ho {
        for j in 0..wo {
            let (i0, j0) = (i * stride, j * stride);
            let (i1, j1) = ((i0 + 1).min(h - 1), (j0 + 1).min(w - 1));
            let (a, b, c, d) = (
                input.cell(i0, j0),
                input.cell(i0, j1),
                input.cell(i1, j0),
                input.cell(i1, j1),
            );
            let dst = out.cell_mut(i, j);
            for k in 0..n {
                dst[k] = match kind {
                    PoolKind::Max => a[k].max(b[k]).max(c[k]).max(d[k]),
                    PoolKind::Avg => {
                        ((f64::from(a[k]) + f64::from(b[k]) + f64::from(c[k]) + f64::from(d[k])) / 4.0)
                            as f32
                    }
                };
            }
        }
    }
    Ok(out)
}

pub fn relu_inplace(t: &mut Tensor3) {
    t.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Runs the backbone on an image and returns the dense feature map `F`.
pub fn forward(img: &Image, arch: &ArchitectureSpec, bank: &WeightBank) -> Result<Tensor3> {
    if img.height() < MIN_INPUT_SIDE || img.width() < MIN_INPUT_SIDE {
        return Err(D2Error::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            min: MIN_INPUT_SIDE,
        });
    }
    bank.check(arch)?;
    let mut x = img.expand_channels(arch.input_channels())?;
    let c = x.channels();
    for cell in x.data_mut().chunks_exact_mut(c) {
        for (k, v) in cell.iter_mut().enumerate() {
            *v = (*v - bank.norm.mean[k]) / bank.norm.std[k];
        }
    }
    forward_normalized(x, arch, bank)
}

/// Runs the layer stack on an already-normalized input tensor.
pub fn forward_normalized(mut x: Tensor3, arch: &ArchitectureSpec, bank: &WeightBank) -> Result<Tensor3> {
    for layer in &arch.layers {
        x = match layer.kind {
            LayerKind::Conv3x3 => {
                conv3x3_forward(&x, bank.conv(&layer.name)?, layer.stride, layer.dilation)?
            }
            LayerKind::Relu => {
                relu_inplace(&mut x);
                x
            }
            LayerKind::Pool(kind) => pool2x2_forward(&x, kind, layer.stride)?,
        };
    }
    Ok(x)
}
