//! Dense 3D/4D voxel containers.
//!
//! All containers use one fixed memory layout: channel-major, then depth,
//! height and width, with width varying fastest. The linear offset of
//! `(c, i, j, k)` is `((c * d + i) * h + j) * w + k`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Largest voxel count accepted for any allocation.
pub const MAX_VOXELS: u64 = 1 << 32;

/// Scalar type used by volumes, losses and the network.
///
/// Production code runs in `f32`; every gradient path also compiles for
/// `f64` so finite-difference checks can run in double precision.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// True for the double-precision instantiation.
    const DOUBLE: bool;

    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to every Real")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("every Real converts to f64")
    }
}

impl Real for f32 {
    const DOUBLE: bool = false;
}

impl Real for f64 {
    const DOUBLE: bool = true;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    /// Validated constructor.
    pub fn new(d: usize, h: usize, w: usize) -> Result<Self> {
        let s = Shape3 { d, h, w };
        s.validate()?;
        Ok(s)
    }

    pub const fn cube(n: usize) -> Self {
        Shape3 { d: n, h: n, w: n }
    }

    pub fn validate(&self) -> Result<()> {
        let Shape3 { d, h, w } = *self;
        if d == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidShape {
                d,
                h,
                w,
                reason: "every axis must be at least 1",
            });
        }
        let n = (d as u128) * (h as u128) * (w as u128);
        if n > MAX_VOXELS as u128 {
            return Err(Error::InvalidShape {
                d,
                h,
                w,
                reason: "voxel count exceeds 2^32",
            });
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.d * self.h * self.w
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        [self.d, self.h, self.w]
    }

    pub fn from_dims(dims: [usize; 3]) -> Self {
        Shape3 {
            d: dims[0],
            h: dims[1],
            w: dims[2],
        }
    }

    #[inline]
    pub fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.h + j) * self.w + k
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let k = idx % self.w;
        let j = (idx / self.w) % self.h;
        let i = idx / (self.w * self.h);
        (i, j, k)
    }

    #[inline]
    pub fn contains(&self, i: isize, j: isize, k: isize) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.d
            && (j as usize) < self.h
            && (k as usize) < self.w
    }

    /// True when every axis is divisible by `factor`.
    pub fn divisible_by(&self, factor: usize) -> bool {
        self.d.is_multiple_of(factor) && self.h.is_multiple_of(factor) && self.w.is_multiple_of(factor)
    }
}

impl Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Multi-channel dense volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T = f32> {
    channels: usize,
    shape: Shape3,
    data: Vec<T>,
}

impl<T: Real> Volume<T> {
    pub fn new(channels: usize, shape: Shape3, fill: T) -> Result<Self> {
        shape.validate()?;
        if channels == 0 {
            return Err(Error::invalid("volume needs at least one channel"));
        }
        let total = (channels as u128) * (shape.len() as u128);
        if total > MAX_VOXELS as u128 {
            return Err(Error::InvalidShape {
                d: shape.d,
                h: shape.h,
                w: shape.w,
                reason: "channels x voxels exceeds 2^32",
            });
        }
        Ok(Volume {
            channels,
            shape,
            data: vec![fill; channels * shape.len()],
        })
    }

    pub fn zeros(channels: usize, shape: Shape3) -> Self {
        Self::new(channels, shape, T::zero()).expect("valid shape")
    }

    pub fn from_vec(channels: usize, shape: Shape3, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        if channels == 0 {
            return Err(Error::invalid("volume needs at least one channel"));
        }
        if data.len() != channels * shape.len() {
            return Err(Error::mismatch(format!(
                "data length {} != {} channel(s) x {}",
                data.len(),
                channels,
                shape
            )));
        }
        Ok(Volume {
            channels,
            shape,
            data,
        })
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn voxels(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.shape.len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.shape.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    fn checked_offset(&self, c: usize, i: usize, j: usize, k: usize) -> Result<usize> {
        let s = self.shape;
        if c >= self.channels || i >= s.d || j >= s.h || k >= s.w {
            return Err(Error::OutOfBounds {
                c,
                i,
                j,
                k,
                channels: self.channels,
                d: s.d,
                h: s.h,
                w: s.w,
            });
        }
        Ok(((c * s.d + i) * s.h + j) * s.w + k)
    }

    pub fn get(&self, c: usize, i: usize, j: usize, k: usize) -> Result<T> {
        self.checked_offset(c, i, j, k).map(|o| self.data[o])
    }

    pub fn set(&mut self, c: usize, i: usize, j: usize, k: usize, value: T) -> Result<()> {
        let o = self.checked_offset(c, i, j, k)?;
        self.data[o] = value;
        Ok(())
    }

    /// Copy out a single channel as its own volume.
    pub fn extract_channel(&self, c: usize) -> Result<Volume<T>> {
        if c >= self.channels {
            return Err(Error::invalid(format!(
                "channel {c} requested from a {}-channel volume",
                self.channels
            )));
        }
        Ok(Volume {
            channels: 1,
            shape: self.shape,
            data: self.channel(c).to_vec(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert to another precision.
    pub fn cast<U: Real>(&self) -> Volume<U> {
        Volume {
            channels: self.channels,
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Volume<T>) -> Result<()> {
        if self.channels != other.channels || self.shape != other.shape {
            return Err(Error::mismatch("axpy operands differ in shape"));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, alpha: T) {
        for v in &mut self.data {
            *v *= alpha;
        }
    }

    /// Sub-volume starting at `corner` with the given size, all channels.
    pub fn crop(&self, corner: [usize; 3], size: Shape3) -> Result<Volume<T>> {
        let s = self.shape;
        if corner[0] + size.d > s.d || corner[1] + size.h > s.h || corner[2] + size.w > s.w {
            return Err(Error::invalid(format!(
                "crop {size} at {corner:?} exceeds volume {s}"
            )));
        }
        let mut out = Vec::with_capacity(self.channels * size.len());
        for c in 0..self.channels {
            let ch = self.channel(c);
            for i in 0..size.d {
                for j in 0..size.h {
                    let o = s.offset(corner[0] + i, corner[1] + j, corner[2]);
                    out.extend_from_slice(&ch[o..o + size.w]);
                }
            }
        }
        Volume::from_vec(self.channels, size, out)
    }
}

/// Binary voxel mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    shape: Shape3,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(shape: Shape3) -> Self {
        BinaryMask {
            shape,
            data: vec![0; shape.len()],
        }
    }

    pub fn ones(shape: Shape3) -> Self {
        BinaryMask {
            shape,
            data: vec![1; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<u8>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::mismatch(format!(
                "mask data length {} != {}",
                data.len(),
                shape
            )));
        }
        if let Some(bad) = data.iter().find(|&&v| v > 1) {
            return Err(Error::invalid(format!("mask value {bad} is not 0 or 1")));
        }
        Ok(BinaryMask { shape, data })
    }

    /// Build from any per-voxel predicate over `(i, j, k)`.
    pub fn from_fn(shape: Shape3, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(shape.len());
        for i in 0..shape.d {
            for j in 0..shape.h {
                for k in 0..shape.w {
                    data.push(f(i, j, k) as u8);
                }
            }
        }
        BinaryMask { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[self.shape.offset(i, j, k)] != 0
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, on: bool) {
        let o = self.shape.offset(i, j, k);
        self.data[o] = on as u8;
    }

    #[inline]
    pub fn at(&self, idx: usize) -> bool {
        self.data[idx] != 0
    }

    #[inline]
    pub fn set_at(&mut self, idx: usize, on: bool) {
        self.data[idx] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            shape: self.shape,
            data: self.data.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// The mask as a one-channel real volume of 0.0 / 1.0.
    pub fn to_volume<T: Real>(&self) -> Volume<T> {
        let data = self
            .data
            .iter()
            .map(|&v| if v != 0 { T::one() } else { T::zero() })
            .collect();
        Volume::from_vec(1, self.shape, data).expect("shape already validated")
    }

    pub fn crop(&self, corner: [usize; 3], size: Shape3) -> Result<BinaryMask> {
        let s = self.shape;
        if corner[0] + size.d > s.d || corner[1] + size.h > s.h || corner[2] + size.w > s.w {
            return Err(Error::invalid(format!(
                "crop {size} at {corner:?} exceeds mask {s}"
            )));
        }
        let mut out = Vec::with_capacity(size.len());
        for i in 0..size.d {
            for j in 0..size.h {
                let o = s.offset(corner[0] + i, corner[1] + j, corner[2]);
                out.extend_from_slice(&self.data[o..o + size.w]);
            }
        }
        Ok(BinaryMask {
            shape: size,
            data: out,
        })
    }
}

/// Connected-component labels: 0 is background, clusters are `1..=num_clusters`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Shape3,
    labels: Vec<u32>,
    num_clusters: usize,
}

impl LabelMap {
    /// Wraps labels, checking that positive labels are contiguous and all present.
    pub fn new(shape: Shape3, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != shape.len() {
            return Err(Error::mismatch("label count differs from shape"));
        }
        let max = labels.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; max + 1];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().skip(1).any(|s| !s) {
            return Err(Error::invalid("labels are not contiguous 1..=n"));
        }
        Ok(LabelMap {
            shape,
            labels,
            num_clusters: max,
        })
    }

    #[inline]
    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    #[inline]
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn num_clusters(&self) -> usize {
        self.num_clusters
    }

    /// Voxel count per label; index 0 holds the background count.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_clusters + 1];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// Default binarization threshold on the lesion probability channel.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Voxel is 1 iff `prob >= tau`.
pub fn mask_from_threshold<T: Real>(prob: &Volume<T>, tau: f64) -> Result<BinaryMask> {
    if prob.channels() != 1 {
        return Err(Error::invalid(format!(
            "thresholding needs a single channel, got {}",
            prob.channels()
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::invalid(format!("threshold {tau} not in (0, 1)")));
    }
    let t = T::of(tau);
    let data = prob.data().iter().map(|&p| (p >= t) as u8).collect();
    Ok(BinaryMask {
        shape: prob.shape(),
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Overlap {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Overlap {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Confusion counts of prediction `a` against reference `b`.
pub fn count_overlap(a: &BinaryMask, b: &BinaryMask) -> Result<Overlap> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(format!(
            "masks {} and {} differ",
            a.shape(),
            b.shape()
        )));
    }
    let mut o = Overlap::default();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        match (x != 0, y != 0) {
            (true, true) => o.tp += 1,
            (true, false) => o.fp += 1,
            (false, true) => o.fn_ += 1,
            (false, false) => o.tn += 1,
        }
    }
    Ok(o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fill_semantics() {
        let v = Volume::<f32>::new(1, Shape3::cube(2), 0.0).unwrap();
        assert_eq!(v.data(), &[0.0; 8]);
        let v = Volume::<f32>::new(2, Shape3::cube(1), 0.5).unwrap();
        assert_eq!(v.data(), &[0.5, 0.5]);
        assert!(Volume::<f32>::new(1, Shape3 { d: 0, h: 1, w: 1 }, 0.0).is_err());
        assert!(Volume::<f32>::new(1, Shape3 { d: 1 << 11, h: 1 << 11, w: 1 << 11 }, 0.0).is_err());
    }

    #[test]
    fn voxel_access() {
        let mut v = Volume::<f32>::new(1, Shape3::new(2, 3, 4).unwrap(), 0.3).unwrap();
        assert_eq!(v.get(0, 1, 2, 3).unwrap(), 0.3);
        v.set(0, 0, 0, 0, 1.0).unwrap();
        assert_eq!(v.get(0, 0, 0, 0).unwrap(), 1.0);
        assert!(matches!(v.get(0, 2, 0, 0), Err(Error::OutOfBounds { .. })));
        assert!(v.get(1, 0, 0, 0).is_err());
    }

    #[test]
    fn layout_offset() {
        let s = Shape3::new(2, 3, 4).unwrap();
        let mut v = Volume::<f64>::zeros(2, s);
        v.set(1, 1, 2, 3, 7.0).unwrap();
        let off = ((s.d + 1) * s.h + 2) * s.w + 3;
        assert_eq!(v.data()[off], 7.0);
    }

    #[test]
    fn threshold_rules() {
        let s = Shape3::cube(2);
        let v = Volume::<f32>::new(1, s, 0.6).unwrap();
        assert_eq!(mask_from_threshold(&v, 0.5).unwrap(), BinaryMask::ones(s));
        let v = Volume::<f32>::new(1, s, 0.5).unwrap();
        assert_eq!(mask_from_threshold(&v, 0.5).unwrap(), BinaryMask::ones(s));
        let v = Volume::<f32>::from_vec(1, Shape3::new(1, 1, 2).unwrap(), vec![0.2, 0.8]).unwrap();
        assert_eq!(mask_from_threshold(&v, 0.5).unwrap().data(), &[0, 1]);
        let two = Volume::<f32>::zeros(2, s);
        assert!(mask_from_threshold(&two, 0.5).is_err());
    }

    #[test]
    fn overlap_counts() {
        let s = Shape3::cube(2);
        let ones = BinaryMask::ones(s);
        let zeros = BinaryMask::zeros(s);
        let o = count_overlap(&ones, &ones).unwrap();
        assert_eq!((o.tp, o.fp, o.fn_, o.tn), (8, 0, 0, 0));
        let o = count_overlap(&ones, &zeros).unwrap();
        assert_eq!((o.tp, o.fp, o.fn_, o.tn), (0, 8, 0, 0));
        assert!(count_overlap(&ones, &BinaryMask::ones(Shape3::cube(3))).is_err());
    }

    #[test]
    fn overlap_matches_loop_oracle() {
        let s = Shape3::cube(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = BinaryMask::from_fn(s, |_, _, _| rng.random_bool(0.4));
        let b = BinaryMask::from_fn(s, |_, _, _| rng.random_bool(0.4));
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    match (a.get(i, j, k), b.get(i, j, k)) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => tn += 1,
                    }
                }
            }
        }
        let o = count_overlap(&a, &b).unwrap();
        assert_eq!((o.tp, o.fp, o.fn_, o.tn), (tp, fp, fn_, tn));
    }

    #[test]
    fn label_map_rejects_gaps() {
        let s = Shape3::new(1, 1, 3).unwrap();
        assert!(LabelMap::new(s, vec![0, 2, 2]).is_err());
        let lm = LabelMap::new(s, vec![1, 0, 2]).unwrap();
        assert_eq!(lm.num_clusters(), 2);
        assert_eq!(lm.sizes(), vec![1, 1, 1]);
    }

    proptest! {
        #[test]
        fn set_get_round_trip(d in 1usize..5, h in 1usize..5, w in 1usize..5, c in 1usize..3, val in -1e6f32..1e6) {
            let s = Shape3::new(d, h, w).unwrap();
            let mut v = Volume::<f32>::zeros(c, s);
            for ch in 0..c { for i in 0..d { for j in 0..h { for k in 0..w {
                v.set(ch, i, j, k, val).unwrap();
                prop_assert_eq!(v.get(ch, i, j, k).unwrap().to_bits(), val.to_bits());
            }}}}
        }

        #[test]
        fn overlap_sums_to_total(bits in proptest::collection::vec(0u8..4, 27)) {
            let s = Shape3::cube(3);
            let a = BinaryMask::from_vec(s, bits.iter().map(|b| b & 1).collect()).unwrap();
            let b = BinaryMask::from_vec(s, bits.iter().map(|b| b >> 1).collect()).unwrap();
            prop_assert_eq!(count_overlap(&a, &b).unwrap().total(), 27);
        }

        #[test]
        fn threshold_is_monotone(vals in proptest::collection::vec(0f32..=1.0, 8), t1 in 0.01f64..0.99, t2 in 0.01f64..0.99) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let v = Volume::from_vec(1, Shape3::cube(2), vals).unwrap();
            let a = mask_from_threshold(&v, lo).unwrap();
            let b = mask_from_threshold(&v, hi).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!(y <= x);
            }
        }
    }
}
