//! Two-domain datasets, landmark splits and class-balanced batch sampling.
//!
//! The synthetic benchmark renders each class as an anisotropic Gaussian blob
//! whose position on a ring and orientation are class specific; samples vary
//! by a small geometric jitter and pixel noise. A target domain is produced by
//! [`apply_shift`] (rotation, intensity inversion, extra noise).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::{self, Image};
use crate::seed::{rng_for, stream, Rng};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    images: Vec<Image>,
    labels: Vec<usize>,
    num_classes: usize,
    domain: Domain,
}

impl DomainDataset {
    pub fn new(images: Vec<Image>, labels: Vec<usize>, num_classes: usize, domain: Domain) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Parameter(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        if let Some(first) = images.first() {
            let geom = (first.height(), first.width(), first.channels());
            if images
                .iter()
                .any(|im| (im.height(), im.width(), im.channels()) != geom)
            {
                return Err(Error::Shape("images of mixed geometry".into()));
            }
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            domain,
        })
    }

    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Flattened pixel count of one image (0 when empty).
    pub fn input_dim(&self) -> usize {
        self.images.first().map_or(0, Image::len)
    }

    /// Dataset indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            domain: self.domain,
        }
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }
}

fn standard_normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub base_seed: u64,
    /// Standard deviation of additive pixel noise.
    pub noise_std: f64,
    /// Scale of per-sample geometric variation (position, size, orientation,
    /// brightness); 0 renders every sample of a class from the same glyph.
    pub jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class: 200,
            image_size: 16,
            base_seed: 7,
            noise_std: 0.2,
            jitter: 1.25,
        }
    }
}

/// Geometry of one rendered blob, in pixels.
#[derive(Debug, Clone, Copy)]
struct Glyph {
    cy: f64,
    cx: f64,
    sigma_major: f64,
    sigma_minor: f64,
    theta: f64,
    amplitude: f64,
}

fn class_glyph(class: usize, num_classes: usize, size: usize) -> Glyph {
    let s = size as f64;
    let center = (s - 1.0) / 2.0;
    let phi = 2.0 * PI * class as f64 / num_classes as f64;
    let radius = 0.28 * s;
    // Alternate radial and tangential elongation between neighbouring classes.
    let theta = if class % 2 == 0 { phi } else { phi + PI / 2.0 };
    Glyph {
        cy: center + radius * math::sin(phi),
        cx: center + radius * math::cos(phi),
        sigma_major: 0.15 * s,
        sigma_minor: 0.065 * s,
        theta,
        amplitude: 1.0,
    }
}

fn render(glyph: &Glyph, size: usize) -> Vec<f64> {
    let (st, ct) = (math::sin(glyph.theta), math::cos(glyph.theta));
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - glyph.cy;
            let dx = x as f64 - glyph.cx;
            let u = ct * dx + st * dy;
            let v = -st * dx + ct * dy;
            let q = (u / glyph.sigma_major) * (u / glyph.sigma_major)
                + (v / glyph.sigma_minor) * (v / glyph.sigma_minor);
            out.push(glyph.amplitude * math::exp(-0.5 * q));
        }
    }
    out
}

/// Renders `per_class` samples for each class. Sample `(class, i)` depends only
/// on `(base_seed, class, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DomainDataset> {
    if spec.num_classes < 2 || spec.per_class == 0 {
        return Err(Error::Parameter(format!(
            "need at least 2 classes and 1 sample per class, got {} x {}",
            spec.num_classes, spec.per_class
        )));
    }
    if spec.image_size < 8 {
        return Err(Error::Parameter(format!(
            "image size {} is too small to separate glyphs (minimum 8)",
            spec.image_size
        )));
    }
    if !(spec.noise_std >= 0.0) || !(spec.jitter >= 0.0) {
        return Err(Error::Parameter("noise_std and jitter must be >= 0".into()));
    }
    let size = spec.image_size;
    let s = size as f64;
    let mut images = Vec::with_capacity(spec.num_classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for class in 0..spec.num_classes {
        let base = class_glyph(class, spec.num_classes, size);
        for i in 0..spec.per_class {
            let mut rng = rng_for([spec.base_seed, class as u64, i as u64, stream::SYNTH]);
            let j = spec.jitter;
            let unit = |rng: &mut Rng| 2.0 * rng.random::<f64>() - 1.0;
            let glyph = Glyph {
                cy: base.cy + j * 0.06 * s * unit(&mut rng),
                cx: base.cx + j * 0.06 * s * unit(&mut rng),
                sigma_major: base.sigma_major * (1.0 + j * 0.15 * unit(&mut rng)),
                sigma_minor: base.sigma_minor * (1.0 + j * 0.15 * unit(&mut rng)),
                theta: base.theta + j * (12.0 * PI / 180.0) * unit(&mut rng),
                amplitude: 1.0 - j * 0.2 * rng.random::<f64>(),
            };
            let mut pixels = render(&glyph, size);
            if spec.noise_std > 0.0 {
                for p in &mut pixels {
                    *p += spec.noise_std * standard_normal(&mut rng);
                }
            }
            for p in &mut pixels {
                *p = p.clamp(0.0, 1.0);
            }
            images.push(Image::new(size, size, 1, pixels)?);
            labels.push(class);
        }
    }
    DomainDataset::new(images, labels, spec.num_classes, Domain::Source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub rotation_degrees: f64,
    pub intensity_invert: bool,
    pub noise_std: f64,
    /// Hue rotation in degrees, 3-channel images only.
    pub hue_shift: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            rotation_degrees: 30.0,
            intensity_invert: true,
            noise_std: 0.0,
            hue_shift: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            rotation_degrees: 0.0,
            intensity_invert: false,
            noise_std: 0.0,
            hue_shift: 0.0,
        }
    }
}

/// Rotates RGB values about the gray axis by `degrees`.
fn hue_rotate(img: &Image, degrees: f64) -> Image {
    let t = degrees * PI / 180.0;
    let (c, s) = (math::cos(t), math::sin(t));
    let k = 1.0 / 3.0;
    let sq = math::sqrt(k);
    // Rodrigues rotation about (1,1,1)/√3.
    let m = [
        [c + (1.0 - c) * k, k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s],
        [k * (1.0 - c) + sq * s, c + k * (1.0 - c), k * (1.0 - c) - sq * s],
        [k * (1.0 - c) - sq * s, k * (1.0 - c) + sq * s, c + k * (1.0 - c)],
    ];
    let mut px = img.pixels().to_vec();
    for rgb in px.chunks_mut(3) {
        let v = [rgb[0], rgb[1], rgb[2]];
        for (o, row) in rgb.iter_mut().zip(&m) {
            *o = row[0] * v[0] + row[1] * v[1] + row[2] * v[2];
        }
    }
    Image::new(img.height(), img.width(), 3, px).expect("same geometry")
}

/// Builds a target domain: rotate, optionally invert, add noise, clamp.
pub fn apply_shift(ds: &DomainDataset, shift: &ShiftSpec, seed: u64) -> Result<DomainDataset> {
    if !(shift.noise_std >= 0.0) {
        return Err(Error::Parameter("shift noise_std must be >= 0".into()));
    }
    let images = ds
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let mut out = augment::rotate(img, shift.rotation_degrees);
            if shift.intensity_invert {
                out = augment::invert(&out);
            }
            if shift.hue_shift != 0.0 && out.channels() == 3 {
                out = hue_rotate(&out, shift.hue_shift);
            }
            if shift.noise_std > 0.0 {
                let mut rng = rng_for([seed, i as u64, 0, stream::SHIFT]);
                for p in out.pixels_mut() {
                    *p += shift.noise_std * standard_normal(&mut rng);
                }
            }
            out.clamped()
        })
        .collect();
    DomainDataset::new(images, ds.labels.clone(), ds.num_classes, Domain::Target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub shots_per_class: usize,
    pub split_seed: u64,
}

impl Default for SplitSpec {
    /// One landmark per class.
    fn default() -> Self {
        Self {
            shots_per_class: 1,
            split_seed: 0,
        }
    }
}

/// Unlabeled target images. Labels are kept for evaluation only and are
/// reachable solely through [`UnlabeledSet::evaluation_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    images: Vec<Image>,
    hidden_labels: Vec<usize>,
    num_classes: usize,
    /// Index of each image in the full target set.
    origin: Vec<usize>,
}

impl UnlabeledSet {
    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn origin(&self) -> &[usize] {
        &self.origin
    }

    /// Labeled copy for computing metrics. Never feed this to a loss.
    pub fn evaluation_dataset(&self) -> DomainDataset {
        DomainDataset {
            images: self.images.clone(),
            labels: self.hidden_labels.clone(),
            num_classes: self.num_classes,
            domain: Domain::Target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    /// `T_l`: `k` labeled samples per class, ascending original index.
    pub landmarks: DomainDataset,
    /// Original index of each landmark.
    pub landmark_origin: Vec<usize>,
    /// `T_u`: the remaining target samples.
    pub unlabeled: UnlabeledSet,
}

/// Draws `k` landmarks per class without replacement under `split_seed`.
pub fn select_landmarks(target: &DomainDataset, spec: &SplitSpec) -> Result<TargetSplit> {
    if spec.shots_per_class == 0 {
        return Err(Error::Parameter("shots_per_class must be >= 1".into()));
    }
    let by_class = target.class_indices();
    let mut rng = rng_for([spec.split_seed, 0, 0, stream::SPLIT]);
    let mut chosen = vec![false; target.len()];
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < spec.shots_per_class {
            return Err(Error::Coverage { class });
        }
        for pos in index::sample(&mut rng, members.len(), spec.shots_per_class) {
            chosen[members[pos]] = true;
        }
    }
    let landmark_origin: Vec<usize> = (0..target.len()).filter(|&i| chosen[i]).collect();
    let rest: Vec<usize> = (0..target.len()).filter(|&i| !chosen[i]).collect();
    Ok(TargetSplit {
        landmarks: target.subset(&landmark_origin),
        landmark_origin,
        unlabeled: UnlabeledSet {
            images: rest.iter().map(|&i| target.images[i].clone()).collect(),
            hidden_labels: rest.iter().map(|&i| target.labels[i]).collect(),
            num_classes: target.num_classes,
            origin: rest,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatchShape {
    /// Classes per batch (`M`).
    pub classes: usize,
    /// Source samples per chosen class (`N_s`).
    pub source_per_class: usize,
    /// Landmarks per chosen class (`N_t`).
    pub target_per_class: usize,
    /// Unlabeled samples per batch (`N_u`).
    pub unlabeled: usize,
}

impl Default for BatchShape {
    fn default() -> Self {
        Self {
            classes: 8,
            source_per_class: 10,
            target_per_class: 1,
            unlabeled: 24,
        }
    }
}

/// One class-balanced mini-batch, as indices into the datasets it was drawn from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedBatch {
    /// Chosen classes, ascending.
    pub classes: Vec<usize>,
    /// Source indices, grouped by chosen class.
    pub source: Vec<usize>,
    pub source_labels: Vec<usize>,
    /// Landmark indices (into `T_l`), grouped by chosen class.
    pub landmarks: Vec<usize>,
    pub landmark_labels: Vec<usize>,
    /// Indices into `T_u`.
    pub unlabeled: Vec<usize>,
}

impl BalancedBatch {
    pub fn labeled_len(&self) -> usize {
        self.source.len() + self.landmarks.len()
    }
}

/// Deterministic class-balanced sampler: batch `t` is a pure function of
/// `(seed, t)`.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    shape: BatchShape,
    source_by_class: Vec<Vec<usize>>,
    landmarks_by_class: Vec<Vec<usize>>,
    unlabeled_len: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(
        source: &DomainDataset,
        landmarks: &DomainDataset,
        unlabeled_len: usize,
        shape: BatchShape,
        seed: u64,
    ) -> Result<Self> {
        let c = source.num_classes();
        if shape.classes == 0 || shape.classes > c {
            return Err(Error::Parameter(format!(
                "M = {} classes per batch, but there are {c} classes",
                shape.classes
            )));
        }
        if shape.source_per_class == 0 || shape.target_per_class == 0 {
            return Err(Error::Parameter("N_s and N_t must be >= 1".into()));
        }
        let source_by_class = source.class_indices();
        if let Some(class) = source_by_class.iter().position(Vec::is_empty) {
            return Err(Error::Coverage { class });
        }
        let landmarks_by_class = landmarks.class_indices();
        for (class, l) in landmarks_by_class.iter().enumerate() {
            if l.len() < shape.target_per_class {
                return Err(Error::Parameter(format!(
                    "N_t = {} but class {class} has {} landmarks",
                    shape.target_per_class,
                    l.len()
                )));
            }
        }
        if shape.unlabeled > 0 && unlabeled_len == 0 {
            return Err(Error::Parameter("no unlabeled samples to draw from".into()));
        }
        Ok(Self {
            shape,
            source_by_class,
            landmarks_by_class,
            unlabeled_len,
            seed,
        })
    }

    pub fn shape(&self) -> BatchShape {
        self.shape
    }

    /// Number of classes.
    pub fn num_classes(&self) -> usize {
        self.source_by_class.len()
    }

    /// Steps needed to visit roughly every source sample once.
    pub fn steps_per_epoch(&self) -> usize {
        let total: usize = self.source_by_class.iter().map(Vec::len).sum();
        let per = self.shape.classes * self.shape.source_per_class;
        total.div_ceil(per)
    }

    fn rng(&self, step: u64) -> Rng {
        rng_for([self.seed, step, 0, stream::BATCH])
    }

    /// Classes chosen at `step`, ascending.
    pub fn classes_at(&self, step: u64) -> Vec<usize> {
        choose_classes(&mut self.rng(step), self.num_classes(), self.shape.classes)
    }

    pub fn batch(&self, step: u64) -> BalancedBatch {
        let mut rng = self.rng(step);
        let classes = choose_classes(&mut rng, self.num_classes(), self.shape.classes);
        let mut b = BalancedBatch {
            classes: classes.clone(),
            source: Vec::new(),
            source_labels: Vec::new(),
            landmarks: Vec::new(),
            landmark_labels: Vec::new(),
            unlabeled: Vec::new(),
        };
        for &c in &classes {
            let pool = &self.source_by_class[c];
            let ns = self.shape.source_per_class;
            if pool.len() >= ns {
                b.source
                    .extend(index::sample(&mut rng, pool.len(), ns).into_iter().map(|i| pool[i]));
            } else {
                b.source
                    .extend((0..ns).map(|_| pool[rng.random_range(0..pool.len())]));
            }
            b.source_labels.extend(core::iter::repeat(c).take(ns));

            let lm = &self.landmarks_by_class[c];
            let nt = self.shape.target_per_class;
            b.landmarks
                .extend(index::sample(&mut rng, lm.len(), nt).into_iter().map(|i| lm[i]));
            b.landmark_labels.extend(core::iter::repeat(c).take(nt));
        }
        let nu = self.shape.unlabeled;
        if nu <= self.unlabeled_len {
            b.unlabeled = index::sample(&mut rng, self.unlabeled_len, nu).into_vec();
        } else {
            b.unlabeled = (0..nu).map(|_| rng.random_range(0..self.unlabeled_len)).collect();
        }
        b
    }

    /// Batches `first, first + 1, …` without end.
    pub fn iter_from(&self, first: u64) -> impl Iterator<Item = BalancedBatch> + '_ {
        (first..).map(move |t| self.batch(t))
    }
}

fn choose_classes(rng: &mut Rng, num_classes: usize, m: usize) -> Vec<usize> {
    let mut classes = index::sample(rng, num_classes, m).into_vec();
    classes.sort_unstable();
    classes
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small(per_class: usize, noise: f64, jitter: f64) -> DomainDataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            per_class,
            image_size: 12,
            base_seed: 3,
            noise_std: noise,
            jitter,
        })
        .unwrap()
    }

    /// Pixel-mass centroid `(x, y)` relative to the image center.
    fn centroid(im: &Image) -> (f64, f64) {
        let c = (im.width() as f64 - 1.0) / 2.0;
        let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..im.height() {
            for x in 0..im.width() {
                let v = im.get(y, x, 0);
                m += v;
                sx += v * (x as f64 - c);
                sy += v * (y as f64 - c);
            }
        }
        (sx / m, sy / m)
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(small(5, 0.1, 1.0), small(5, 0.1, 1.0));
        let other = generate_synthetic(&SyntheticSpec {
            base_seed: 4,
            ..SyntheticSpec::default()
        })
        .unwrap();
        assert_ne!(other, generate_synthetic(&SyntheticSpec::default()).unwrap());
    }

    #[test]
    fn samples_depend_only_on_their_own_key() {
        // growing the dataset leaves the first samples of each class untouched
        let (a, b) = (small(3, 0.1, 1.0), small(6, 0.1, 1.0));
        for class in 0..4 {
            for i in 0..3 {
                assert_eq!(a.images()[class * 3 + i], b.images()[class * 6 + i]);
            }
        }
    }

    #[test]
    fn no_noise_and_no_jitter_gives_identical_class_samples() {
        let ds = small(5, 0.0, 0.0);
        for class in 0..4 {
            for i in 1..5 {
                assert_eq!(ds.images()[class * 5 + i], ds.images()[class * 5]);
            }
        }
        assert_ne!(ds.images()[0], ds.images()[5]);
    }

    #[test]
    fn tiny_images_are_rejected() {
        let spec = SyntheticSpec {
            image_size: 7,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Parameter(_))));
        let spec = SyntheticSpec {
            num_classes: 1,
            ..SyntheticSpec::default()
        };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn nearest_centroid_separates_default_classes() {
        let ds = generate_synthetic(&SyntheticSpec {
            per_class: 50,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let d = ds.input_dim();
        let mut centroids = vec![vec![0.0; d]; 8];
        for (im, &y) in ds.images().iter().zip(ds.labels()) {
            for (c, p) in centroids[y].iter_mut().zip(im.pixels()) {
                *c += p / 50.0;
            }
        }
        let correct = ds
            .images()
            .iter()
            .zip(ds.labels())
            .filter(|(im, &y)| {
                let dist = |c: &Vec<f64>| c.iter().zip(im.pixels()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..8).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
                best == y
            })
            .count();
        let acc = correct as f64 / 400.0;
        assert!(acc > 0.95, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn identity_shift_changes_only_the_domain() {
        let ds = small(3, 0.1, 1.0);
        let t = apply_shift(&ds, &ShiftSpec::identity(), 1).unwrap();
        assert_eq!(t.images(), ds.images());
        assert_eq!(t.labels(), ds.labels());
        assert_eq!(t.domain(), Domain::Target);
    }

    #[test]
    fn inversion_is_an_involution() {
        let ds = small(3, 0.1, 1.0);
        let inv = ShiftSpec {
            intensity_invert: true,
            ..ShiftSpec::identity()
        };
        let twice = apply_shift(&apply_shift(&ds, &inv, 1).unwrap(), &inv, 1).unwrap();
        for (a, b) in twice.images().iter().zip(ds.images()) {
            for (x, y) in a.pixels().iter().zip(b.pixels()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quarter_turn_rotates_the_centroid() {
        // y axis down, positive angle clockwise on screen: (x, y) → (−y, x)
        let ds = generate_synthetic(&SyntheticSpec {
            per_class: 2,
            noise_std: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let rot = ShiftSpec {
            rotation_degrees: 90.0,
            ..ShiftSpec::identity()
        };
        let t = apply_shift(&ds, &rot, 0).unwrap();
        for (a, b) in ds.images().iter().zip(t.images()) {
            let ((x, y), (rx, ry)) = (centroid(a), centroid(b));
            assert!((rx + y).abs() < 1.0 && (ry - x).abs() < 1.0, "({x}, {y}) → ({rx}, {ry})");
        }
    }

    #[test]
    fn shift_noise_is_seeded_and_clamped() {
        let ds = small(3, 0.0, 1.0);
        let noisy = ShiftSpec {
            noise_std: 0.3,
            ..ShiftSpec::identity()
        };
        let a = apply_shift(&ds, &noisy, 5).unwrap();
        assert_eq!(a, apply_shift(&ds, &noisy, 5).unwrap());
        assert_ne!(a, apply_shift(&ds, &noisy, 6).unwrap());
        assert!(a.images().iter().flat_map(|im| im.pixels()).all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn hue_shift_touches_only_color_images() {
        let gray = small(2, 0.1, 1.0);
        let hue = ShiftSpec {
            hue_shift: 120.0,
            ..ShiftSpec::identity()
        };
        assert_eq!(apply_shift(&gray, &hue, 0).unwrap().images(), gray.images());
        let rgb = Image::new(1, 1, 3, vec![0.9, 0.2, 0.1]).unwrap();
        let ds = DomainDataset::new(vec![rgb], vec![0], 2, Domain::Source).unwrap();
        let out = apply_shift(&ds, &hue, 0).unwrap();
        // a third of a turn permutes the channels
        let p = out.images()[0].pixels();
        assert!((p[0] - 0.1).abs() < 1e-12 && (p[1] - 0.9).abs() < 1e-12 && (p[2] - 0.2).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn split_examples() {
        let ds = small(5, 0.1, 1.0);
        let all = select_landmarks(&ds, &SplitSpec { shots_per_class: 5, split_seed: 0 }).unwrap();
        assert!(all.unlabeled.is_empty());
        let spec = SplitSpec { shots_per_class: 3, split_seed: 9 };
        let s = select_landmarks(&ds, &spec).unwrap();
        assert_eq!(s, select_landmarks(&ds, &spec).unwrap());
        assert_eq!(s.landmarks.len(), 12);
        assert_eq!(s.landmarks.class_counts(), vec![3; 4]);
        assert_eq!(
            select_landmarks(&ds, &SplitSpec { shots_per_class: 6, split_seed: 0 }).unwrap_err(),
            Error::Coverage { class: 0 }
        );
    }

    #[test]
    fn eight_classes_three_shots() {
        let ds = generate_synthetic(&SyntheticSpec {
            per_class: 10,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let s = select_landmarks(&ds, &SplitSpec { shots_per_class: 3, split_seed: 1 }).unwrap();
        assert_eq!(s.landmarks.len(), 24);
        assert_eq!(s.landmarks.class_counts(), vec![3; 8]);
    }

    fn sampler(shape: BatchShape, seed: u64) -> (BalancedSampler, TargetSplit) {
        let ds = small(6, 0.1, 1.0);
        let split = select_landmarks(&ds, &SplitSpec { shots_per_class: 2, split_seed: 0 }).unwrap();
        let s = BalancedSampler::new(&ds, &split.landmarks, split.unlabeled.len(), shape, seed).unwrap();
        (s, split)
    }

    #[test]
    fn every_class_appears_when_m_equals_c() {
        let shape = BatchShape { classes: 4, source_per_class: 3, target_per_class: 1, unlabeled: 5 };
        let (s, split) = sampler(shape, 1);
        for b in s.iter_from(0).take(20) {
            assert_eq!(b.classes, vec![0, 1, 2, 3]);
            assert_eq!(b.labeled_len(), 4 * (3 + 1));
            for (&i, &y) in b.landmarks.iter().zip(&b.landmark_labels) {
                assert_eq!(split.landmarks.labels()[i], y);
            }
        }
    }

    #[test]
    fn one_shot_uses_the_single_landmark() {
        let ds = small(6, 0.1, 1.0);
        let split = select_landmarks(&ds, &SplitSpec::default()).unwrap();
        let shape = BatchShape { classes: 2, source_per_class: 3, target_per_class: 1, unlabeled: 4 };
        let s = BalancedSampler::new(&ds, &split.landmarks, split.unlabeled.len(), shape, 0).unwrap();
        for b in s.iter_from(0).take(20) {
            for (&i, &y) in b.landmarks.iter().zip(&b.landmark_labels) {
                // landmarks are ordered by original index, one per class
                assert_eq!(i, y);
            }
        }
    }

    #[test]
    fn too_many_classes_is_a_parameter_error() {
        let ds = small(6, 0.1, 1.0);
        let split = select_landmarks(&ds, &SplitSpec::default()).unwrap();
        let shape = BatchShape { classes: 5, ..BatchShape::default() };
        assert!(matches!(
            BalancedSampler::new(&ds, &split.landmarks, split.unlabeled.len(), shape, 0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn class_frequencies_match_seeded_replay() {
        let shape = BatchShape { classes: 2, source_per_class: 2, target_per_class: 1, unlabeled: 3 };
        let (s, _) = sampler(shape, 42);
        let steps = s.steps_per_epoch() as u64 * 10;
        let mut got = [0usize; 4];
        let mut want = [0usize; 4];
        for t in 0..steps {
            for c in s.batch(t).classes {
                got[c] += 1;
            }
            // replay: uniform choice of 2 of 4 classes from the step's stream
            let mut rng = rng_for([42, t, 0, stream::BATCH]);
            for c in index::sample(&mut rng, 4, 2) {
                want[c] += 1;
            }
        }
        assert_eq!(got, want);
        assert!(got.iter().all(|&n| n > 0));
    }

    #[test]
    fn small_classes_are_drawn_with_replacement() {
        let ds = small(2, 0.1, 1.0);
        let split = select_landmarks(&ds, &SplitSpec::default()).unwrap();
        let shape = BatchShape { classes: 4, source_per_class: 5, target_per_class: 1, unlabeled: 10 };
        let s = BalancedSampler::new(&ds, &split.landmarks, split.unlabeled.len(), shape, 0).unwrap();
        let b = s.batch(0);
        assert_eq!(b.source.len(), 20);
        assert_eq!(b.unlabeled.len(), 10);
        assert!(b.source.iter().zip(&b.source_labels).all(|(&i, &y)| ds.labels()[i] == y));
    }

    proptest! {
        #[test]
        fn split_partitions_the_target(seed in any::<u64>(), k in 1usize..=6) {
            let ds = small(6, 0.1, 1.0);
            let s = select_landmarks(&ds, &SplitSpec { shots_per_class: k, split_seed: seed }).unwrap();
            let mut all: Vec<usize> = s.landmark_origin.iter().chain(s.unlabeled.origin()).copied().collect();
            prop_assert_eq!(all.len(), ds.len());
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), ds.len());
            let eval = s.unlabeled.evaluation_dataset();
            for (i, &o) in s.unlabeled.origin().iter().enumerate() {
                prop_assert_eq!(eval.labels()[i], ds.labels()[o]);
            }
        }

        #[test]
        fn batches_are_balanced_and_pure(seed in any::<u64>(), step in any::<u64>(), m in 1usize..=4, ns in 1usize..5, nt in 1usize..=2) {
            let shape = BatchShape { classes: m, source_per_class: ns, target_per_class: nt, unlabeled: 7 };
            let (s, split) = sampler(shape, seed);
            let b = s.batch(step);
            prop_assert_eq!(&b, &s.batch(step));
            let mut distinct = b.classes.clone();
            distinct.dedup();
            prop_assert_eq!(distinct.len(), m);
            prop_assert_eq!(b.labeled_len(), m * (ns + nt));
            for &c in &b.classes {
                prop_assert_eq!(b.source_labels.iter().filter(|&&y| y == c).count(), ns);
                prop_assert_eq!(b.landmark_labels.iter().filter(|&&y| y == c).count(), nt);
            }
            prop_assert!(b.unlabeled.iter().all(|&i| i < split.unlabeled.len()));
        }
    }
}
