//! Synthetic two-channel volumes with small spherical lesions, patch
//! sampling and geometric/intensity augmentation.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Real, Shape3, Volume};

/// Image channels: a T1-like and a FLAIR-like modality.
pub const IMAGE_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|x| x.as_str() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub image: Volume<f32>,
    pub gt: BinaryMask,
    pub split: Split,
}

/// Parameters of the smooth background field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureConfig {
    /// Gaussian bumps summed per channel before normalisation to `[0, 1]`.
    pub bumps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Voxelwise Gaussian noise added after normalisation.
    pub noise_sigma: f64,
}

impl Default for TextureConfig {
    fn default() -> Self {
        TextureConfig {
            bumps: 6,
            sigma_min: 3.0,
            sigma_max: 8.0,
            noise_sigma: 0.12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    pub volume_shape: Shape3,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub radius_min: usize,
    pub radius_max: usize,
    pub texture: TextureConfig,
    /// Additive lesion intensity per channel.
    pub lesion_contrast: [f64; IMAGE_CHANNELS],
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_train: 24,
            n_validation: 6,
            n_test: 8,
            volume_shape: Shape3::cube(32),
            lesions_min: 1,
            lesions_max: 2,
            radius_min: 2,
            radius_max: 4,
            texture: TextureConfig::default(),
            lesion_contrast: [0.1, 0.3],
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("gen.{field}"),
            message,
        };
        self.volume_shape
            .validate()
            .map_err(|e| bad("volume_shape", e.to_string()))?;
        if self.lesions_min > self.lesions_max {
            return Err(bad(
                "lesions_min",
                format!("{} exceeds lesions_max {}", self.lesions_min, self.lesions_max),
            ));
        }
        if self.radius_min < 1 || self.radius_min > self.radius_max {
            return Err(bad(
                "radius_min",
                format!(
                    "need 1 <= radius_min <= radius_max, got {}..={}",
                    self.radius_min, self.radius_max
                ),
            ));
        }
        let smallest = self.volume_shape.dims().into_iter().min().unwrap_or(0);
        if 2 * self.radius_max + 1 > smallest {
            return Err(bad(
                "radius_max",
                format!("a ball of radius {} does not fit in {}", self.radius_max, self.volume_shape),
            ));
        }
        if self.n_train > 0 && self.lesions_max == 0 {
            return Err(bad("lesions_max", "training subjects need at least one lesion".into()));
        }
        let t = &self.texture;
        if !(t.sigma_min > 0.0 && t.sigma_min <= t.sigma_max && t.sigma_max.is_finite()) {
            return Err(bad("texture.sigma_min", "need 0 < sigma_min <= sigma_max".into()));
        }
        if !(t.noise_sigma >= 0.0 && t.noise_sigma.is_finite()) {
            return Err(bad("texture.noise_sigma", "must be finite and >= 0".into()));
        }
        if self.lesion_contrast.iter().any(|c| !c.is_finite()) {
            return Err(bad("lesion_contrast", "must be finite".into()));
        }
        Ok(())
    }

    pub fn n_subjects(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Validation => self.n_validation,
            Split::Test => self.n_test,
        }
    }
}

/// A spherical lesion on the voxel lattice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lesion {
    pub center: [usize; 3],
    pub radius: usize,
}

/// Sets every voxel within Euclidean distance `radius` of `center`.
pub fn paint_ball(mask: &mut BinaryMask, lesion: Lesion) {
    let s = mask.shape();
    let r = lesion.radius as isize;
    let [ci, cj, ck] = lesion.center.map(|c| c as isize);
    for di in -r..=r {
        for dj in -r..=r {
            for dk in -r..=r {
                if di * di + dj * dj + dk * dk > r * r {
                    continue;
                }
                let (i, j, k) = (ci + di, cj + dj, ck + dk);
                if s.contains(i, j, k) {
                    mask.set(i as usize, j as usize, k as usize, true);
                }
            }
        }
    }
}

fn subject_rng(seed: u64, subject_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(subject_seed);
    rng
}

fn background(shape: Shape3, t: &TextureConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let dims = shape.dims();
    let mut field = vec![0.0f64; shape.len()];
    for _ in 0..t.bumps {
        let c: [f64; 3] = dims.map(|n| rng.random_range(0.0..n as f64));
        let sigma = rng.random_range(t.sigma_min..=t.sigma_max);
        let amp = rng.random_range(-1.0..1.0);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for (idx, v) in field.iter_mut().enumerate() {
            let (i, j, k) = shape.coords(idx);
            let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
            *v += amp * (-d2 * inv).exp();
        }
    }
    let lo = field.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = field.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi - lo > 1e-12 { hi - lo } else { 1.0 };
    let noise = (t.noise_sigma > 0.0).then(|| Normal::new(0.0, t.noise_sigma).expect("valid sigma"));
    field
        .into_iter()
        .map(|v| {
            let mut x = (v - lo) / span;
            if let Some(n) = &noise {
                x = (x + n.sample(rng)).clamp(0.0, 1.0);
            }
            x as f32
        })
        .collect()
}

/// Generates one subject. Deterministic in `(cfg.seed, subject_seed)`.
///
/// Training subjects always receive at least one lesion.
pub fn generate_subject(cfg: &GenConfig, subject_seed: u64, split: Split) -> Result<SubjectRecord> {
    cfg.validate()?;
    let shape = cfg.volume_shape;
    let mut rng = subject_rng(cfg.seed, subject_seed);
    let mut data = Vec::with_capacity(IMAGE_CHANNELS * shape.len());
    for _ in 0..IMAGE_CHANNELS {
        data.extend(background(shape, &cfg.texture, &mut rng));
    }
    let mut image = Volume::from_vec(IMAGE_CHANNELS, shape, data)?;

    let lo = if split == Split::Train { cfg.lesions_min.max(1) } else { cfg.lesions_min };
    if lo > cfg.lesions_max {
        return Err(Error::invalid("training subjects need at least one lesion"));
    }
    let count = rng.random_range(lo..=cfg.lesions_max);
    let mut gt = BinaryMask::zeros(shape);
    for _ in 0..count {
        let radius = rng.random_range(cfg.radius_min..=cfg.radius_max);
        let center = shape.dims().map(|n| rng.random_range(radius..n - radius));
        paint_ball(&mut gt, Lesion { center, radius });
    }
    add_contrast(&mut image, &gt, &cfg.lesion_contrast);
    Ok(SubjectRecord {
        id: format!("sub{subject_seed:03}"),
        image,
        gt,
        split,
    })
}

/// Adds `contrast[c]` to channel `c` at every lesion voxel.
pub fn add_contrast(image: &mut Volume<f32>, gt: &BinaryMask, contrast: &[f64]) {
    for (c, &delta) in contrast.iter().enumerate().take(image.channels()) {
        for (v, &m) in image.channel_mut(c).iter_mut().zip(gt.data()) {
            if m != 0 {
                *v += delta as f32;
            }
        }
    }
}

/// Generates all splits. Subject seeds run consecutively over train,
/// validation and test, so splits are disjoint.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<SubjectRecord>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut seed = 0u64;
    for split in Split::ALL {
        for _ in 0..cfg.n_subjects(split) {
            out.push(generate_subject(cfg, seed, split)?);
            seed += 1;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Patch {
    pub image: Volume<f32>,
    pub gt: BinaryMask,
    /// Corner of the crop in subject coordinates.
    pub corner: [usize; 3],
    /// The patch was centred on a lesion voxel.
    pub lesion_centered: bool,
    /// Balanced sampling was requested on a lesion-free subject.
    pub fell_back: bool,
}

/// Random crop. With `balanced`, half of the draws are centred on a random
/// lesion voxel (corner clamped into the volume).
pub fn sample_patch<R: Rng + ?Sized>(
    subject: &SubjectRecord,
    crop: Shape3,
    balanced: bool,
    rng: &mut R,
) -> Result<Patch> {
    let s = subject.gt.shape();
    let (dims, cdims) = (s.dims(), crop.dims());
    if (0..3).any(|a| cdims[a] > dims[a] || cdims[a] == 0) {
        return Err(Error::invalid(format!("crop {crop} does not fit in volume {s}")));
    }
    let mut corner = [0usize; 3];
    let mut lesion_centered = false;
    let mut fell_back = false;
    let want_lesion = balanced && rng.random_bool(0.5);
    let lesion_voxels: Vec<usize> = if want_lesion {
        (0..s.len()).filter(|&i| subject.gt.at(i)).collect()
    } else {
        Vec::new()
    };
    if let Some(&v) = lesion_voxels.choose(rng) {
        let (i, j, k) = s.coords(v);
        for (a, c) in [i, j, k].into_iter().enumerate() {
            corner[a] = c.saturating_sub(cdims[a] / 2).min(dims[a] - cdims[a]);
        }
        lesion_centered = true;
    } else {
        fell_back = want_lesion;
        for a in 0..3 {
            corner[a] = rng.random_range(0..=dims[a] - cdims[a]);
        }
    }
    Ok(Patch {
        image: subject.image.crop(corner, crop)?,
        gt: subject.gt.crop(corner, crop)?,
        corner,
        lesion_centered,
        fell_back,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub crop_size: Shape3,
    pub balanced: bool,
    pub rotate: bool,
    pub flip: bool,
    pub intensity_shift: bool,
    pub noise: bool,
    /// Per-channel shift drawn uniformly from `[-range, range]`.
    pub intensity_shift_range: f64,
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_size: Shape3::cube(16),
            balanced: true,
            rotate: true,
            flip: true,
            intensity_shift: true,
            noise: true,
            intensity_shift_range: 0.1,
            noise_sigma: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn disabled(crop_size: Shape3) -> Self {
        AugmentConfig {
            crop_size,
            balanced: false,
            rotate: false,
            flip: false,
            intensity_shift: false,
            noise: false,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self, volume: Shape3, divisor: usize) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("augment.{field}"),
            message,
        };
        let (c, v) = (self.crop_size.dims(), volume.dims());
        if (0..3).any(|a| c[a] == 0 || c[a] > v[a]) {
            return Err(bad("crop_size", format!("{} does not fit in {}", self.crop_size, volume)));
        }
        if !self.crop_size.divisible_by(divisor) {
            return Err(bad(
                "crop_size",
                format!("{} must be divisible by {divisor} along every axis", self.crop_size),
            ));
        }
        if !(self.intensity_shift_range >= 0.0 && self.intensity_shift_range.is_finite()) {
            return Err(bad("intensity_shift_range", "must be finite and >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(bad("noise_sigma", "must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Remaps every channel so that `out[p] = src[map(p)]`.
fn remap<T: Copy>(data: &[T], shape: Shape3, out_shape: Shape3, map: impl Fn([usize; 3]) -> [usize; 3]) -> Vec<T> {
    let n = shape.len();
    let mut out = Vec::with_capacity(data.len());
    for ch in data.chunks(n) {
        for idx in 0..n {
            let (i, j, k) = out_shape.coords(idx);
            let [a, b, c] = map([i, j, k]);
            out.push(ch[shape.offset(a, b, c)]);
        }
    }
    out
}

fn rotate_map(shape: Shape3, plane: (usize, usize), times: usize) -> impl Fn([usize; 3]) -> [usize; 3] {
    let n = shape.dims()[plane.0];
    move |mut p| {
        for _ in 0..times % 4 {
            let (a, b) = (p[plane.0], p[plane.1]);
            p[plane.0] = b;
            p[plane.1] = n - 1 - a;
        }
        p
    }
}

fn flip_map(shape: Shape3, axis: usize) -> impl Fn([usize; 3]) -> [usize; 3] {
    let n = shape.dims()[axis];
    move |mut p| {
        p[axis] = n - 1 - p[axis];
        p
    }
}

fn check_plane(shape: Shape3, plane: (usize, usize)) -> Result<()> {
    let d = shape.dims();
    if plane.0 > 2 || plane.1 > 2 || plane.0 == plane.1 || d[plane.0] != d[plane.1] {
        return Err(Error::invalid(format!(
            "cannot rotate {shape} in plane {plane:?}: axes must differ and have equal extent"
        )));
    }
    Ok(())
}

/// Rotates by `times` quarter turns in the plane spanned by two axes of
/// equal extent.
pub fn rotate90<T: Real>(x: &Volume<T>, plane: (usize, usize), times: usize) -> Result<Volume<T>> {
    let s = x.shape();
    check_plane(s, plane)?;
    Volume::from_vec(x.channels(), s, remap(x.data(), s, s, rotate_map(s, plane, times)))
}

pub fn rotate90_mask(m: &BinaryMask, plane: (usize, usize), times: usize) -> Result<BinaryMask> {
    let s = m.shape();
    check_plane(s, plane)?;
    BinaryMask::from_vec(s, remap(m.data(), s, s, rotate_map(s, plane, times)))
}

pub fn flip<T: Real>(x: &Volume<T>, axis: usize) -> Result<Volume<T>> {
    let s = x.shape();
    if axis > 2 {
        return Err(Error::invalid(format!("flip axis {axis} out of range")));
    }
    Volume::from_vec(x.channels(), s, remap(x.data(), s, s, flip_map(s, axis)))
}

pub fn flip_mask(m: &BinaryMask, axis: usize) -> Result<BinaryMask> {
    let s = m.shape();
    if axis > 2 {
        return Err(Error::invalid(format!("flip axis {axis} out of range")));
    }
    BinaryMask::from_vec(s, remap(m.data(), s, s, flip_map(s, axis)))
}

/// Applies the enabled augmentations. Geometric ops act identically on
/// image and mask; intensity ops touch the image only.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Volume<T>,
    gt: &BinaryMask,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<(Volume<T>, BinaryMask)> {
    if image.shape() != gt.shape() {
        return Err(Error::mismatch(format!(
            "image {} vs mask {}",
            image.shape(),
            gt.shape()
        )));
    }
    let mut x = image.clone();
    let mut m = gt.clone();
    let s = x.shape();
    let d = s.dims();
    if cfg.rotate {
        for plane in [(0, 1), (0, 2), (1, 2)] {
            if d[plane.0] == d[plane.1] {
                let times = rng.random_range(0..4usize);
                if times > 0 {
                    x = rotate90(&x, plane, times)?;
                    m = rotate90_mask(&m, plane, times)?;
                }
            }
        }
    }
    if cfg.flip {
        for axis in 0..3 {
            if rng.random_bool(0.5) {
                x = flip(&x, axis)?;
                m = flip_mask(&m, axis)?;
            }
        }
    }
    if cfg.intensity_shift && cfg.intensity_shift_range > 0.0 {
        let r = cfg.intensity_shift_range;
        for c in 0..x.channels() {
            let delta = T::of(rng.random_range(-r..=r));
            for v in x.channel_mut(c) {
                *v += delta;
            }
        }
    }
    if cfg.noise && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in x.data_mut() {
            *v += T::of(normal.sample(rng));
        }
    }
    Ok((x, m))
}
