//! Segmentation losses with analytic gradients.
//!
//! Every loss takes the lesion-probability channel `p` (one channel) and
//! returns its value together with `dL/dp`. Sums are accumulated in `f64`
//! regardless of the volume precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Real, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Dice smoothing constant.
    pub epsilon: f64,
    pub w_dice: f64,
    pub w_bce: f64,
    pub w_tv: f64,
    /// Probabilities are clamped to `[bce_clamp, 1 - bce_clamp]` before the log.
    pub bce_clamp: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossPreset::DiceTv.config(0.1)
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("loss.{field}"),
            message,
        };
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(bad("epsilon", format!("must be > 0, got {}", self.epsilon)));
        }
        for (name, w) in [("w_dice", self.w_dice), ("w_bce", self.w_bce), ("w_tv", self.w_tv)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(bad(name, format!("must be a finite value >= 0, got {w}")));
            }
        }
        if self.w_dice + self.w_bce + self.w_tv <= 0.0 {
            return Err(bad("w_dice", "at least one loss weight must be positive".into()));
        }
        if !(self.bce_clamp > 0.0 && self.bce_clamp < 0.5) {
            return Err(bad(
                "bce_clamp",
                format!("must lie in (0, 0.5), got {}", self.bce_clamp),
            ));
        }
        Ok(())
    }
}

/// The three loss formulations compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPreset {
    Dice,
    DiceBce,
    DiceTv,
}

impl LossPreset {
    pub const ALL: [LossPreset; 3] = [LossPreset::Dice, LossPreset::DiceBce, LossPreset::DiceTv];

    /// Weights for this preset. `tv_weight` is only used by `DiceTv`.
    pub fn config(self, tv_weight: f64) -> LossConfig {
        let (w_dice, w_bce, w_tv) = match self {
            LossPreset::Dice => (1.0, 0.0, 0.0),
            LossPreset::DiceBce => (0.5, 0.5, 0.0),
            LossPreset::DiceTv => (1.0, 0.0, tv_weight),
        };
        LossConfig {
            epsilon: 1e-5,
            w_dice,
            w_bce,
            w_tv,
            bce_clamp: 1e-7,
        }
    }

    /// Row label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            LossPreset::Dice => "Dice",
            LossPreset::DiceBce => "Dice + BCE",
            LossPreset::DiceTv => "Dice + TV",
        }
    }

    /// Command-line / file-name spelling.
    pub fn key(self) -> &'static str {
        match self {
            LossPreset::Dice => "dice",
            LossPreset::DiceBce => "dice_bce",
            LossPreset::DiceTv => "dice_tv",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.key() == key)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T = f32> {
    pub value: f64,
    pub grad: Volume<T>,
}

fn check_pair<T: Real>(p: &Volume<T>, g: &BinaryMask) -> Result<()> {
    if p.channels() != 1 {
        return Err(Error::invalid(format!(
            "loss expects the single lesion channel, got {} channels",
            p.channels()
        )));
    }
    if p.shape() != g.shape() {
        return Err(Error::mismatch(format!(
            "prediction {} vs ground truth {}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

/// Smoothed Dice loss `1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss<T: Real>(p: &Volume<T>, g: &BinaryMask, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_pair(p, g)?;
    let eps = cfg.epsilon;
    let (mut inter, mut sum_p, mut sum_g) = (0.0f64, 0.0f64, 0.0f64);
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        let pv = pv.as_f64();
        let gv = gv as f64;
        inter += pv * gv;
        sum_p += pv;
        sum_g += gv;
    }
    let num = 2.0 * inter + eps;
    let den = sum_p + sum_g + eps;
    let value = 1.0 - num / den;
    // d/dp_i of -(num/den) = -(2 g_i den - num) / den^2
    let den2 = den * den;
    let on = T::of(-(2.0 * den - num) / den2);
    let off = T::of(num / den2);
    let grad = g
        .data()
        .iter()
        .map(|&gv| if gv != 0 { on } else { off })
        .collect();
    Ok(LossOutput {
        value,
        grad: Volume::from_vec(1, p.shape(), grad)?,
    })
}

/// Mean binary cross entropy on clamped probabilities.
///
/// Voxels where the clamp is active receive zero gradient.
pub fn bce_loss<T: Real>(p: &Volume<T>, g: &BinaryMask, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_pair(p, g)?;
    let n = p.voxels() as f64;
    let lo = cfg.bce_clamp;
    let hi = 1.0 - cfg.bce_clamp;
    let mut total = 0.0f64;
    let mut grad = Vec::with_capacity(p.voxels());
    for (&pv, &gv) in p.data().iter().zip(g.data()) {
        let raw = pv.as_f64();
        let pc = raw.clamp(lo, hi);
        let clamped = raw < lo || raw > hi;
        if gv != 0 {
            total += pc.ln();
            grad.push(if clamped { T::zero() } else { T::of(-1.0 / (n * pc)) });
        } else {
            total += (1.0 - pc).ln();
            grad.push(if clamped {
                T::zero()
            } else {
                T::of(1.0 / (n * (1.0 - pc)))
            });
        }
    }
    Ok(LossOutput {
        value: -total / n,
        grad: Volume::from_vec(1, p.shape(), grad)?,
    })
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Anisotropic total variation: the raw sum of absolute forward differences
/// along depth, height and width. Pairs whose `+1` neighbour would fall
/// outside the volume are skipped. The subgradient uses `sign(0) = 0`.
pub fn tv_loss<T: Real>(p: &Volume<T>) -> Result<LossOutput<T>> {
    if p.channels() != 1 {
        return Err(Error::invalid(format!(
            "TV expects a single channel, got {}",
            p.channels()
        )));
    }
    let s = p.shape();
    let x = p.data();
    let mut grad = vec![T::zero(); x.len()];
    let mut total = 0.0f64;
    let mut pair = |a: usize, b: usize, total: &mut f64| {
        let diff = x[b] - x[a];
        *total += diff.abs().as_f64();
        let sg = sign(diff);
        grad[b] += sg;
        grad[a] -= sg;
    };
    // voxel-major order: the d, h and w terms of each voxel in turn
    for i in 0..s.d {
        for j in 0..s.h {
            for k in 0..s.w {
                let a = s.offset(i, j, k);
                if i + 1 < s.d {
                    pair(a, a + s.h * s.w, &mut total);
                }
                if j + 1 < s.h {
                    pair(a, a + s.w, &mut total);
                }
                if k + 1 < s.w {
                    pair(a, a + 1, &mut total);
                }
            }
        }
    }
    Ok(LossOutput {
        value: total,
        grad: Volume::from_vec(1, s, grad)?,
    })
}

/// Weighted sum `w_dice * dice + w_bce * bce + w_tv * tv` and its gradient.
/// Terms with zero weight are not evaluated.
pub fn total_loss<T: Real>(p: &Volume<T>, g: &BinaryMask, cfg: &LossConfig) -> Result<LossOutput<T>> {
    check_pair(p, g)?;
    let mut value = 0.0;
    let mut grad = Volume::zeros(1, p.shape());
    if cfg.w_dice != 0.0 {
        let d = dice_loss(p, g, cfg)?;
        value += cfg.w_dice * d.value;
        grad.axpy(T::of(cfg.w_dice), &d.grad)?;
    }
    if cfg.w_bce != 0.0 {
        let b = bce_loss(p, g, cfg)?;
        value += cfg.w_bce * b.value;
        grad.axpy(T::of(cfg.w_bce), &b.grad)?;
    }
    if cfg.w_tv != 0.0 {
        let t = tv_loss(p)?;
        value += cfg.w_tv * t.value;
        grad.axpy(T::of(cfg.w_tv), &t.grad)?;
    }
    Ok(LossOutput { value, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(vals: &[f64]) -> Volume<f64> {
        Volume::from_vec(1, Shape3::new(vals.len(), 1, 1).unwrap(), vals.to_vec()).unwrap()
    }

    fn mask(bits: &[u8], shape: Shape3) -> BinaryMask {
        BinaryMask::from_vec(shape, bits.to_vec()).unwrap()
    }

    fn random_case(seed: u64, n: usize) -> (Volume<f64>, BinaryMask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = Shape3::cube(n);
        let p = (0..s.len()).map(|_| rng.random_range(0.02..0.98)).collect();
        let g = BinaryMask::from_fn(s, |_, _, _| rng.random_bool(0.3));
        (Volume::from_vec(1, s, p).unwrap(), g)
    }

    // central differences, independent of the analytic path
    fn fd<F: Fn(&Volume<f64>) -> f64>(f: F, p: &Volume<f64>, h: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut q = p.clone();
        for idx in 0..p.data().len() {
            let orig = q.data()[idx];
            q.data_mut()[idx] = orig + h;
            let up = f(&q);
            q.data_mut()[idx] = orig - h;
            let dn = f(&q);
            q.data_mut()[idx] = orig;
            out.push((up - dn) / (2.0 * h));
        }
        out
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
    }

    #[test]
    fn dice_perfect_and_empty() {
        let cfg = LossConfig::default();
        let s = Shape3::new(4, 1, 1).unwrap();
        let g = mask(&[0, 1, 1, 0], s);
        let out = dice_loss(&g.to_volume::<f64>(), &g, &cfg).unwrap();
        assert!(out.value.abs() < 1e-15);
        let z = BinaryMask::zeros(s);
        let out = dice_loss(&z.to_volume::<f64>(), &z, &cfg).unwrap();
        assert_eq!(out.value, 0.0);
    }

    #[test]
    fn dice_disjoint_pair() {
        let cfg = LossConfig::default();
        let p = line(&[1.0, 0.0]);
        let g = mask(&[0, 1], p.shape());
        let out = dice_loss(&p, &g, &cfg).unwrap();
        let eps = 1e-5;
        assert!((out.value - (1.0 - eps / (2.0 + eps))).abs() < 1e-15);
        let num = fd(|q| dice_loss(q, &g, &cfg).unwrap().value, &p, 1e-5);
        assert!(max_rel(out.grad.data(), &num) < 1e-6);
    }

    #[test]
    fn bce_reference_values() {
        let cfg = LossConfig::default();
        let s = Shape3::new(3, 1, 1).unwrap();
        let g = mask(&[1, 0, 1], s);
        let out = bce_loss(&g.to_volume::<f64>(), &g, &cfg).unwrap();
        assert!((out.value - -(1.0f64 - 1e-7).ln()).abs() < 1e-15);
        assert!(out.grad.data().iter().all(|&v| v == 0.0));
        let half = Volume::<f64>::new(1, s, 0.5).unwrap();
        let out = bce_loss(&half, &g, &cfg).unwrap();
        assert!((out.value - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_scalar_loop_and_fd() {
        let cfg = LossConfig::default();
        let (p, g) = random_case(3, 4);
        let n = p.voxels() as f64;
        let mut oracle = 0.0;
        for (pv, gv) in p.data().iter().zip(g.data()) {
            oracle -= if *gv == 1 { pv.ln() } else { (1.0 - pv).ln() } / n;
        }
        let out = bce_loss(&p, &g, &cfg).unwrap();
        assert!((out.value - oracle).abs() < 1e-13);
        let num = fd(|q| bce_loss(q, &g, &cfg).unwrap().value, &p, 1e-5);
        assert!(max_rel(out.grad.data(), &num) < 1e-6);
    }

    #[test]
    fn tv_simple_cases() {
        let c = Volume::<f64>::new(1, Shape3::new(3, 2, 4).unwrap(), 0.7).unwrap();
        let out = tv_loss(&c).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grad.data().iter().all(|&v| v == 0.0));
        let out = tv_loss(&line(&[0.0, 1.0])).unwrap();
        assert_eq!(out.value, 1.0);
        assert_eq!(out.grad.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn tv_matches_triple_loop_and_fd() {
        let (p, _) = random_case(5, 4);
        let s = p.shape();
        let at = |i: usize, j: usize, k: usize| p.data()[s.offset(i, j, k)];
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    if i + 1 < 4 {
                        oracle += (at(i + 1, j, k) - at(i, j, k)).abs();
                    }
                    if j + 1 < 4 {
                        oracle += (at(i, j + 1, k) - at(i, j, k)).abs();
                    }
                    if k + 1 < 4 {
                        oracle += (at(i, j, k + 1) - at(i, j, k)).abs();
                    }
                }
            }
        }
        let out = tv_loss(&p).unwrap();
        assert!((out.value - oracle).abs() < 1e-12);
        let num = fd(|q| tv_loss(q).unwrap().value, &p, 1e-5);
        assert!(max_rel(out.grad.data(), &num) < 1e-6);
    }

    #[test]
    fn tv_binary_counts_disagreements() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Shape3::new(3, 4, 5).unwrap();
        let m = BinaryMask::from_fn(s, |_, _, _| rng.random_bool(0.5));
        let mut pairs = 0usize;
        for i in 0..s.d {
            for j in 0..s.h {
                for k in 0..s.w {
                    let v = m.get(i, j, k);
                    if i + 1 < s.d && m.get(i + 1, j, k) != v {
                        pairs += 1;
                    }
                    if j + 1 < s.h && m.get(i, j + 1, k) != v {
                        pairs += 1;
                    }
                    if k + 1 < s.w && m.get(i, j, k + 1) != v {
                        pairs += 1;
                    }
                }
            }
        }
        assert_eq!(tv_loss(&m.to_volume::<f64>()).unwrap().value, pairs as f64);
    }

    #[test]
    fn tv_grad_bounded() {
        let (p, _) = random_case(8, 5);
        let out = tv_loss(&p).unwrap();
        assert!(out.grad.data().iter().all(|v| v.abs() <= 6.0));
    }

    #[test]
    fn total_loss_weights() {
        let (p, g) = random_case(13, 4);
        let dice_only = LossPreset::Dice.config(0.1);
        let a = total_loss(&p, &g, &dice_only).unwrap();
        let b = dice_loss(&p, &g, &dice_only).unwrap();
        assert_eq!(a.value, b.value);
        assert_eq!(a.grad, b.grad);

        let db = LossPreset::DiceBce.config(0.1);
        let t = total_loss(&p, &g, &db).unwrap();
        let expect = 0.5 * dice_loss(&p, &g, &db).unwrap().value + 0.5 * bce_loss(&p, &g, &db).unwrap().value;
        assert!((t.value - expect).abs() < 1e-15);

        let dt = LossPreset::DiceTv.config(0.1);
        let t = total_loss(&p, &g, &dt).unwrap();
        let expect = dice_loss(&p, &g, &dt).unwrap().value + 0.1 * tv_loss(&p).unwrap().value;
        assert!((t.value - expect).abs() < 1e-12);
        let num = fd(|q| total_loss(q, &g, &dt).unwrap().value, &p, 1e-5);
        assert!(max_rel(t.grad.data(), &num) < 1e-6);
    }

    #[test]
    fn shape_errors() {
        let cfg = LossConfig::default();
        let p = Volume::<f64>::zeros(1, Shape3::cube(2));
        let g = BinaryMask::zeros(Shape3::cube(3));
        assert!(dice_loss(&p, &g, &cfg).is_err());
        assert!(bce_loss(&p, &g, &cfg).is_err());
        assert!(tv_loss(&Volume::<f64>::zeros(2, Shape3::cube(2))).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let mut c = LossConfig::default();
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.w_dice = 0.0;
        c.w_tv = 0.0;
        assert!(c.validate().is_err());
        let mut c = LossConfig::default();
        c.bce_clamp = 0.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn preset_keys() {
        for p in LossPreset::ALL {
            assert_eq!(LossPreset::from_key(p.key()), Some(p));
        }
        let c = LossPreset::DiceTv.config(0.1);
        assert_eq!((c.w_dice, c.w_bce, c.w_tv), (1.0, 0.0, 0.1));
        let c = LossPreset::DiceBce.config(0.1);
        assert_eq!((c.w_dice, c.w_bce, c.w_tv), (0.5, 0.5, 0.0));
    }
}
