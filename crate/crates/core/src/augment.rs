//! Weak and strong image augmentation.
//!
//! Weak: random horizontal flip, then an integer translation with zero padding.
//! Strong: `num_ops` transforms drawn with replacement from the op set, each at
//! a strength proportional to `magnitude`, followed by cutout. Every output is
//! clamped to `[0, 1]`.
//!
//! Randomness is supplied by the caller. [`sample_rng`] derives a per-sample
//! generator from `(run_seed, step, sample_index, pipeline)` so batch results
//! do not depend on how the work is scheduled.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::seed::{rng_for, Rng};
use crate::{math, Error, Result};

/// Fill value for cutout squares.
pub const CUTOUT_FILL: f64 = 0.5;

const MAX_ROTATE_DEG: f64 = 30.0;
const MAX_TRANSLATE_FRAC: f64 = 0.3;
const MAX_SHEAR: f64 = 0.3;
const MAX_ENHANCE: f64 = 0.9;
const MAX_POSTERIZE_BITS_DROP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    /// `pixels` is row-major `H × W × C`.
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || !(channels == 1 || channels == 3) {
            return Err(Error::Parameter(alloc::format!(
                "invalid image geometry {height}x{width}x{channels}"
            )));
        }
        if pixels.len() != height * width * channels {
            return Err(Error::Shape(alloc::format!(
                "{height}x{width}x{channels} image needs {} pixels, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
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

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    fn same_geometry(&self, pixels: Vec<f64>) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            pixels,
        }
    }

    pub fn clamped(mut self) -> Self {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
        self
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.same_geometry(self.pixels.iter().map(|&p| f(p)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugOp {
    Rotate,
    TranslateX,
    TranslateY,
    ShearX,
    ShearY,
    Brightness,
    Contrast,
    Invert,
    Solarize,
    Posterize,
    Equalize,
}

impl AugOp {
    pub const ALL: [AugOp; 11] = [
        AugOp::Rotate,
        AugOp::TranslateX,
        AugOp::TranslateY,
        AugOp::ShearX,
        AugOp::ShearY,
        AugOp::Brightness,
        AugOp::Contrast,
        AugOp::Invert,
        AugOp::Solarize,
        AugOp::Posterize,
        AugOp::Equalize,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrongAugSpec {
    pub num_ops: usize,
    pub magnitude: f64,
    pub op_set: Vec<AugOp>,
    /// `None` disables cutout.
    pub cutout_fraction: Option<f64>,
}

impl Default for StrongAugSpec {
    fn default() -> Self {
        Self {
            num_ops: 2,
            magnitude: 0.5,
            op_set: AugOp::ALL.to_vec(),
            cutout_fraction: Some(0.5),
        }
    }
}

impl StrongAugSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_ops == 0 {
            return Err(Error::Config("strong augmentation num_ops must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.magnitude) {
            return Err(Error::Config(alloc::format!(
                "magnitude must be in [0, 1], got {}",
                self.magnitude
            )));
        }
        if self.op_set.is_empty() {
            return Err(Error::Config("strong augmentation op_set is empty".into()));
        }
        if let Some(f) = self.cutout_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(alloc::format!(
                    "cutout_fraction must be in (0, 1], got {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeakAugSpec {
    pub flip_prob: f64,
    pub max_translate_fraction: f64,
}

impl Default for WeakAugSpec {
    /// Translation only: the synthetic glyph classes are not mirror symmetric,
    /// so flipping would swap classes.
    fn default() -> Self {
        Self {
            flip_prob: 0.0,
            max_translate_fraction: 0.125,
        }
    }
}

impl WeakAugSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(alloc::format!(
                "flip_prob must be in [0, 1], got {}",
                self.flip_prob
            )));
        }
        if !(0.0..=0.5).contains(&self.max_translate_fraction) {
            return Err(Error::Config(alloc::format!(
                "max_translate_fraction must be in [0, 0.5], got {}",
                self.max_translate_fraction
            )));
        }
        Ok(())
    }
}

/// Identifies an augmentation pipeline in the per-sample seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pipeline {
    StrongLabeled,
    StrongUnlabeled,
    WeakUnlabeled,
    WeakLabeled,
}

impl Pipeline {
    pub fn id(self) -> u64 {
        match self {
            Self::StrongLabeled => crate::seed::stream::STRONG,
            Self::StrongUnlabeled => crate::seed::stream::STRONG_UNLABELED,
            Self::WeakUnlabeled => crate::seed::stream::WEAK,
            Self::WeakLabeled => crate::seed::stream::WEAK_LABELED,
        }
    }
}

/// Generator for one sample of one pipeline at one step.
pub fn sample_rng(run_seed: u64, step: u64, sample_index: u64, pipeline: Pipeline) -> Rng {
    rng_for([run_seed, step, sample_index, pipeline.id()])
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..img.channels {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

/// Integer shift by `(dx, dy)` pixels (positive = right/down), zero padded.
pub fn translate(img: &Image, dx: i64, dy: i64) -> Image {
    let mut out = img.same_geometry(vec![0.0; img.len()]);
    let (h, w) = (img.height as i64, img.width as i64);
    for y in 0..h {
        let sy = y - dy;
        if sy < 0 || sy >= h {
            continue;
        }
        for x in 0..w {
            let sx = x - dx;
            if sx < 0 || sx >= w {
                continue;
            }
            for c in 0..img.channels {
                out.set(y as usize, x as usize, c, img.get(sy as usize, sx as usize, c));
            }
        }
    }
    out
}

/// Parameters drawn by [`weak_augment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WeakDraw {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
}

pub fn draw_weak(spec: &WeakAugSpec, height: usize, width: usize, rng: &mut Rng) -> WeakDraw {
    let flip = rng.random::<f64>() < spec.flip_prob;
    let tx = math::floor(spec.max_translate_fraction * width as f64) as i64;
    let ty = math::floor(spec.max_translate_fraction * height as f64) as i64;
    let dx = if tx > 0 { rng.random_range(-tx..=tx) } else { 0 };
    let dy = if ty > 0 { rng.random_range(-ty..=ty) } else { 0 };
    WeakDraw { flip, dx, dy }
}

pub fn apply_weak(img: &Image, draw: WeakDraw) -> Image {
    let flipped;
    let src = if draw.flip {
        flipped = flip_horizontal(img);
        &flipped
    } else {
        img
    };
    if draw.dx == 0 && draw.dy == 0 {
        src.clone().clamped()
    } else {
        translate(src, draw.dx, draw.dy).clamped()
    }
}

pub fn weak_augment(img: &Image, spec: &WeakAugSpec, rng: &mut Rng) -> Image {
    let draw = draw_weak(spec, img.height, img.width, rng);
    apply_weak(img, draw)
}

/// Inverse-mapped affine warp with bilinear sampling and zero padding.
/// `inverse` maps output `(x, y)` (relative to the image center) to source
/// coordinates: `[a, b, c, d, tx, ty]` → `(a x + b y + tx, c x + d y + ty)`.
fn affine(img: &Image, inverse: [f64; 6]) -> Image {
    let [a, b, c, d, tx, ty] = inverse;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let cy = (img.height as f64 - 1.0) / 2.0;
    let mut out = img.same_geometry(vec![0.0; img.len()]);
    for y in 0..img.height {
        let ry = y as f64 - cy;
        for x in 0..img.width {
            let rx = x as f64 - cx;
            let sx = a * rx + b * ry + tx + cx;
            let sy = c * rx + d * ry + ty + cy;
            for ch in 0..img.channels {
                out.set(y, x, ch, bilinear(img, sx, sy, ch));
            }
        }
    }
    out
}

fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> f64 {
    let x0 = math::floor(x);
    let y0 = math::floor(y);
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |yy: i64, xx: i64| -> f64 {
        if yy < 0 || xx < 0 || yy >= img.height as i64 || xx >= img.width as i64 {
            0.0
        } else {
            img.get(yy as usize, xx as usize, c)
        }
    };
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x0 + 1) * fx;
    let bottom = px(y0 + 1, x0) * (1.0 - fx) + px(y0 + 1, x0 + 1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Rotation by `degrees` about the image center. With the y axis pointing
/// down, positive angles turn the image clockwise as displayed.
pub fn rotate(img: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return img.clone();
    }
    let t = degrees * core::f64::consts::PI / 180.0;
    let (s, c) = (math::sin(t), math::cos(t));
    // Output point p came from R(−t) p.
    affine(img, [c, s, -s, c, 0.0, 0.0])
}

pub fn shear_x(img: &Image, factor: f64) -> Image {
    if factor == 0.0 {
        return img.clone();
    }
    affine(img, [1.0, factor, 0.0, 1.0, 0.0, 0.0])
}

pub fn shear_y(img: &Image, factor: f64) -> Image {
    if factor == 0.0 {
        return img.clone();
    }
    affine(img, [1.0, 0.0, factor, 1.0, 0.0, 0.0])
}

/// Sub-pixel translation by `(dx, dy)` with bilinear sampling.
pub fn translate_subpixel(img: &Image, dx: f64, dy: f64) -> Image {
    if dx == 0.0 && dy == 0.0 {
        return img.clone();
    }
    affine(img, [1.0, 0.0, 0.0, 1.0, -dx, -dy])
}

pub fn brightness(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    img.map(|p| p * factor).clamped()
}

/// Blends each channel towards its mean by `factor` (1 = unchanged).
pub fn contrast(img: &Image, factor: f64) -> Image {
    if factor == 1.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let n = (img.height * img.width) as f64;
    for c in 0..img.channels {
        let mut mean = 0.0;
        for i in 0..img.height * img.width {
            mean += img.pixels[i * img.channels + c];
        }
        mean /= n;
        for i in 0..img.height * img.width {
            let p = &mut out.pixels[i * img.channels + c];
            *p = (mean + factor * (*p - mean)).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn invert(img: &Image) -> Image {
    img.map(|p| 1.0 - p)
}

/// Inverts pixels strictly above `threshold`.
pub fn solarize(img: &Image, threshold: f64) -> Image {
    img.map(|p| if p > threshold { 1.0 - p } else { p })
}

/// Quantizes to `2^bits` levels; `bits >= 8` leaves the image unchanged.
pub fn posterize(img: &Image, bits: u32) -> Image {
    if bits >= 8 {
        return img.clone();
    }
    let levels = (1u32 << bits) as f64;
    img.map(|p| (math::floor(p * levels).min(levels - 1.0)) / (levels - 1.0).max(1.0))
}

/// Per-channel histogram equalization over 256 bins, blended with the input
/// by `strength` in `[0, 1]`.
pub fn equalize(img: &Image, strength: f64) -> Image {
    if strength == 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..img.channels {
        let bin = |p: f64| -> usize { (math::round(p.clamp(0.0, 1.0) * 255.0)) as usize };
        let mut hist = [0usize; 256];
        for i in 0..n {
            hist[bin(img.pixels[i * img.channels + c])] += 1;
        }
        let mut cdf = [0usize; 256];
        let mut run = 0;
        for (k, h) in hist.iter().enumerate() {
            run += h;
            cdf[k] = run;
        }
        let cdf_min = cdf.iter().copied().find(|&v| v > 0).unwrap_or(0);
        if n == cdf_min {
            continue;
        }
        for i in 0..n {
            let p = &mut out.pixels[i * img.channels + c];
            let eq = (cdf[bin(*p)] - cdf_min) as f64 / (n - cdf_min) as f64;
            *p = (1.0 - strength) * *p + strength * eq;
        }
    }
    out
}

/// Side of the cutout square for an image.
pub fn cutout_side(height: usize, width: usize, fraction: f64) -> usize {
    math::ceil(fraction * height.min(width) as f64) as usize
}

/// Sets the square of side `side` centered at `(cy, cx)` to [`CUTOUT_FILL`],
/// clipped at the borders. Rows covered: `cy − side/2 .. cy − side/2 + side`.
pub fn cutout_at(img: &Image, cy: usize, cx: usize, side: usize) -> Image {
    let mut out = img.clone();
    let half = (side / 2) as i64;
    let (y0, x0) = (cy as i64 - half, cx as i64 - half);
    for y in y0.max(0)..(y0 + side as i64).min(img.height as i64) {
        for x in x0.max(0)..(x0 + side as i64).min(img.width as i64) {
            for c in 0..img.channels {
                out.set(y as usize, x as usize, c, CUTOUT_FILL);
            }
        }
    }
    out
}

pub fn cutout(img: &Image, fraction: f64, rng: &mut Rng) -> Image {
    let side = cutout_side(img.height, img.width, fraction);
    let cy = rng.random_range(0..img.height);
    let cx = rng.random_range(0..img.width);
    cutout_at(img, cy, cx, side)
}

fn signed(rng: &mut Rng, v: f64) -> f64 {
    if rng.random::<bool>() {
        v
    } else {
        -v
    }
}

/// Applies one op at `magnitude`; magnitude 0 is the identity for every op.
pub fn apply_op(img: &Image, op: AugOp, magnitude: f64, rng: &mut Rng) -> Image {
    let m = magnitude;
    match op {
        AugOp::Rotate => {
            let deg = signed(rng, MAX_ROTATE_DEG * m);
            rotate(img, deg)
        }
        AugOp::TranslateX => {
            let d = signed(rng, MAX_TRANSLATE_FRAC * m * img.width as f64);
            translate_subpixel(img, d, 0.0)
        }
        AugOp::TranslateY => {
            let d = signed(rng, MAX_TRANSLATE_FRAC * m * img.height as f64);
            translate_subpixel(img, 0.0, d)
        }
        AugOp::ShearX => {
            let s = signed(rng, MAX_SHEAR * m);
            shear_x(img, s)
        }
        AugOp::ShearY => {
            let s = signed(rng, MAX_SHEAR * m);
            shear_y(img, s)
        }
        AugOp::Brightness => {
            let f = 1.0 + signed(rng, MAX_ENHANCE * m);
            brightness(img, f)
        }
        AugOp::Contrast => {
            let f = 1.0 + signed(rng, MAX_ENHANCE * m);
            contrast(img, f)
        }
        AugOp::Invert => {
            // Applied with probability `magnitude`.
            if rng.random::<f64>() < m {
                invert(img)
            } else {
                img.clone()
            }
        }
        AugOp::Solarize => solarize(img, 1.0 - 0.5 * m),
        AugOp::Posterize => {
            let drop = math::round(MAX_POSTERIZE_BITS_DROP * m) as u32;
            posterize(img, 8 - drop)
        }
        AugOp::Equalize => equalize(img, m),
    }
}

/// Random op chain followed by cutout (when enabled), clamped to `[0, 1]`.
pub fn strong_augment(img: &Image, spec: &StrongAugSpec, rng: &mut Rng) -> Image {
    let mut out = img.clone();
    for _ in 0..spec.num_ops {
        let op = spec.op_set[rng.random_range(0..spec.op_set.len())];
        out = apply_op(&out, op, spec.magnitude, rng).clamped();
    }
    if let Some(fraction) = spec.cutout_fraction {
        out = cutout(&out, fraction, rng);
    }
    out.clamped()
}

/// Which augmentation a batch goes through.
#[derive(Debug, Clone)]
pub enum AugKind {
    Strong(StrongAugSpec),
    Weak(WeakAugSpec),
}

impl AugKind {
    pub fn apply(&self, img: &Image, rng: &mut Rng) -> Image {
        match self {
            Self::Strong(s) => strong_augment(img, s, rng),
            Self::Weak(w) => weak_augment(img, w, rng),
        }
    }
}

/// Augments a batch sample by sample. Sample `i` draws from
/// `sample_rng(run_seed, step, i, pipeline)`.
pub trait BatchAugmenter {
    fn augment(
        &self,
        images: &[&Image],
        kind: &AugKind,
        run_seed: u64,
        step: u64,
        pipeline: Pipeline,
    ) -> Vec<Image>;
}

/// Single-threaded [`BatchAugmenter`].
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialAugmenter;

impl BatchAugmenter for SequentialAugmenter {
    fn augment(
        &self,
        images: &[&Image],
        kind: &AugKind,
        run_seed: u64,
        step: u64,
        pipeline: Pipeline,
    ) -> Vec<Image> {
        images
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut rng = sample_rng(run_seed, step, i as u64, pipeline);
                kind.apply(img, &mut rng)
            })
            .collect()
    }
}
