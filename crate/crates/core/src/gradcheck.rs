//! Finite-difference verification of the loss and network gradients.
//!
//! Analytic gradients run in the requested precision; the reference is
//! always a central difference evaluated in `f64`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::engine::loss_on_probs;
use crate::error::{Error, Result};
use crate::experiment::preset_loss;
use crate::losses::{bce_loss, dice_loss, total_loss, tv_loss, LossConfig, LossOutput, LossPreset};
use crate::net::{backward, forward, init_params, predict, NetConfig, NetParams};
use crate::volume::{BinaryMask, Real, Shape3, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn loss_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-5,
        }
    }

    pub fn net_tolerance(self) -> f64 {
        match self {
            Precision::Single => 1e-3,
            Precision::Double => 1e-4,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::Single => "single",
            Precision::Double => "double",
        })
    }
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" | "f32" => Ok(Precision::Single),
            "double" | "f64" => Ok(Precision::Double),
            other => Err(Error::invalid(format!("unknown precision {other:?}"))),
        }
    }
}

/// Deliberate defects used to prove the harness can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Negates the TV gradient everywhere it is used.
    TvSignFlip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckConfig {
    pub precision: Precision,
    /// Random loss inputs per loss component.
    pub volumes: usize,
    pub min_side: usize,
    pub max_side: usize,
    pub step: f64,
    pub seed: u64,
    pub net: NetConfig,
    pub net_input: Shape3,
    /// Entries checked per parameter tensor; `None` checks all of them.
    pub max_entries_per_tensor: Option<usize>,
    pub loss: LossConfig,
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            precision: Precision::Double,
            volumes: 20,
            min_side: 6,
            max_side: 8,
            step: 1e-5,
            seed: 0,
            net: NetConfig::tiny(),
            net_input: Shape3::cube(8),
            max_entries_per_tensor: None,
            loss: LossConfig::default(),
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub component: String,
    pub worst_rel_err: f64,
    pub tolerance: f64,
    /// Gradient entries compared.
    pub checked: usize,
    /// Entries excluded at TV ties or the BCE clamp.
    pub skipped: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst_rel_err.is_finite() && self.worst_rel_err < self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub precision: Precision,
    pub losses: Vec<CheckResult>,
    pub network: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.losses.iter().chain(&self.network).all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "precision {} (loss tolerance {:e}, network tolerance {:e})\n",
            self.precision,
            self.precision.loss_tolerance(),
            self.precision.net_tolerance()
        );
        if self.precision == Precision::Single {
            out.push_str("single precision: analytic gradients in f32 against an f64 reference, tolerance relaxed\n");
        }
        for (title, rows) in [("loss", &self.losses), ("network", &self.network)] {
            for r in rows.iter() {
                out.push_str(&format!(
                    "{} {title} {:<32} worst rel err {:.3e} (tol {:e}, {} checked, {} skipped)\n",
                    if r.passed() { "PASS" } else { "FAIL" },
                    r.component,
                    r.worst_rel_err,
                    r.tolerance,
                    r.checked,
                    r.skipped
                ));
            }
        }
        out.push_str(if self.passed() { "all checks passed\n" } else { "gradient check FAILED\n" });
        out
    }
}

/// Loss components checked by the harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Dice,
    Bce,
    Tv,
    Preset(LossPreset),
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [
        LossKind::Dice,
        LossKind::Bce,
        LossKind::Tv,
        LossKind::Preset(LossPreset::DiceBce),
        LossKind::Preset(LossPreset::DiceTv),
    ];

    pub fn name(self) -> String {
        match self {
            LossKind::Dice => "dice_loss".into(),
            LossKind::Bce => "bce_loss".into(),
            LossKind::Tv => "tv_loss".into(),
            LossKind::Preset(p) => format!("total_loss[{}]", p.key()),
        }
    }

    fn uses_tv(self, cfg: &LossConfig) -> bool {
        match self {
            LossKind::Tv => true,
            LossKind::Preset(p) => p.config(cfg.w_tv).w_tv != 0.0,
            _ => false,
        }
    }

    fn uses_bce(self, cfg: &LossConfig) -> bool {
        match self {
            LossKind::Bce => true,
            LossKind::Preset(p) => p.config(cfg.w_tv).w_bce != 0.0,
            _ => false,
        }
    }

    fn preset_config(self, base: &LossConfig) -> LossConfig {
        match self {
            LossKind::Preset(p) => preset_loss(base, p),
            _ => *base,
        }
    }

    /// Loss value and gradient with an optional injected fault.
    pub fn eval<T: Real>(self, p: &Volume<T>, g: &BinaryMask, base: &LossConfig, fault: Fault) -> Result<LossOutput<T>> {
        let cfg = self.preset_config(base);
        let mut out = match self {
            LossKind::Dice => dice_loss(p, g, &cfg)?,
            LossKind::Bce => bce_loss(p, g, &cfg)?,
            LossKind::Tv => tv_loss(p)?,
            LossKind::Preset(_) => total_loss(p, g, &cfg)?,
        };
        if fault == Fault::TvSignFlip && self.uses_tv(&cfg) {
            let weight = if self == LossKind::Tv { 1.0 } else { cfg.w_tv };
            let tv = tv_loss(p)?;
            out.grad.axpy(T::of(-2.0 * weight), &tv.grad)?;
        }
        Ok(out)
    }
}

/// Largest absolute deviation divided by the largest reference magnitude.
pub fn max_rel_error(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    let diff = analytic
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, r)| if m.is_nan() || (a - r).is_nan() { f64::NAN } else { m.max((a - r).abs()) });
    diff / scale
}

fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, h: f64) -> Result<f64> {
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

fn random_loss_input(rng: &mut ChaCha8Rng, cfg: &GradcheckConfig) -> Result<(Volume<f64>, BinaryMask)> {
    let mut side = || rng.random_range(cfg.min_side..=cfg.max_side);
    let shape = Shape3::new(side(), side(), side())?;
    let p: Vec<f64> = (0..shape.len()).map(|_| rng.random_range(0.02..0.98)).collect();
    let g = BinaryMask::from_fn(shape, |_, _, _| rng.random_bool(0.3));
    Ok((Volume::from_vec(1, shape, p)?, g))
}

/// Voxels whose TV terms have a kink within one step of `p`.
fn tv_near_tie(p: &Volume<f64>, idx: usize, h: f64) -> bool {
    let s = p.shape();
    let (i, j, k) = s.coords(idx);
    let x = p.data();
    let (i, j, k) = (i as isize, j as isize, k as isize);
    let nbrs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
    nbrs.iter().any(|&(di, dj, dk)| {
        let (a, b, c) = (i + di, j + dj, k + dk);
        s.contains(a, b, c) && (x[s.offset(a as usize, b as usize, c as usize)] - x[idx]).abs() <= 2.0 * h
    })
}

fn bce_near_clamp(v: f64, h: f64, clamp: f64) -> bool {
    v - h <= clamp || v + h >= 1.0 - clamp
}

/// Checks one loss component on `cfg.volumes` random inputs.
pub fn check_loss(kind: LossKind, cfg: &GradcheckConfig) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let h = cfg.step;
    let (mut worst, mut checked, mut skipped) = (0.0f64, 0usize, 0usize);
    for _ in 0..cfg.volumes {
        let (p, g) = random_loss_input(&mut rng, cfg)?;
        let p = match cfg.precision {
            Precision::Double => p,
            Precision::Single => p.cast::<f32>().cast::<f64>(),
        };
        let analytic: Vec<f64> = match cfg.precision {
            Precision::Double => kind.eval(&p, &g, &cfg.loss, cfg.fault)?.grad.into_vec(),
            Precision::Single => kind
                .eval(&p.cast::<f32>(), &g, &cfg.loss, cfg.fault)?
                .grad
                .data()
                .iter()
                .map(|v| v.as_f64())
                .collect(),
        };
        let mut a_kept = Vec::new();
        let mut n_kept = Vec::new();
        let mut q = p.clone();
        for idx in 0..p.data().len() {
            let v = p.data()[idx];
            if (kind.uses_tv(&cfg.loss) && tv_near_tie(&p, idx, h))
                || (kind.uses_bce(&cfg.loss) && bce_near_clamp(v, h, cfg.loss.bce_clamp))
            {
                skipped += 1;
                continue;
            }
            let num = central_difference(
                |x| {
                    q.data_mut()[idx] = x;
                    let r = kind.eval(&q, &g, &cfg.loss, Fault::None).map(|o| o.value);
                    q.data_mut()[idx] = v;
                    r
                },
                v,
                h,
            )?;
            a_kept.push(analytic[idx]);
            n_kept.push(num);
        }
        checked += a_kept.len();
        let e = max_rel_error(&a_kept, &n_kept);
        worst = if e.is_nan() { f64::NAN } else { worst.max(e) };
    }
    Ok(CheckResult {
        component: kind.name(),
        worst_rel_err: worst,
        tolerance: cfg.precision.loss_tolerance(),
        checked,
        skipped,
    })
}

fn net_loss(params: &NetParams<f64>, x: &Volume<f64>, gt: &BinaryMask, loss: &LossConfig) -> Result<f64> {
    let probs = predict(params, x)?;
    Ok(loss_on_probs(&probs, gt, loss)?.0)
}

fn net_analytic<T: Real>(params: &NetParams<f64>, x: &Volume<f64>, gt: &BinaryMask, loss: &LossConfig) -> Result<Vec<Vec<f64>>> {
    let p = params.cast::<T>();
    let (probs, tape) = forward(&p, &x.cast::<T>())?;
    let (_, dprobs) = loss_on_probs(&probs, gt, loss)?;
    let g = backward(&p, &tape, &dprobs)?;
    Ok(g.tensors.iter().map(|t| t.iter().map(|v| v.as_f64()).collect()).collect())
}

/// Checks the gradient of every parameter tensor of a network trained
/// through the Dice + BCE preset.
pub fn check_network(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(2);
    let params: NetParams<f64> = init_params(&cfg.net, cfg.seed)?;
    let params = match cfg.precision {
        Precision::Double => params,
        Precision::Single => params.cast::<f32>().cast::<f64>(),
    };
    let s = cfg.net_input;
    let mut x: Vec<f64> = (0..cfg.net.in_channels * s.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    if cfg.precision == Precision::Single {
        x.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
    let x = Volume::from_vec(cfg.net.in_channels, s, x)?;
    let gt = BinaryMask::from_fn(s, |_, _, _| rng.random_bool(0.3));
    let loss = LossKind::Preset(LossPreset::DiceBce).preset_config(&cfg.loss);
    let analytic = match cfg.precision {
        Precision::Double => net_analytic::<f64>(&params, &x, &gt, &loss)?,
        Precision::Single => net_analytic::<f32>(&params, &x, &gt, &loss)?,
    };
    let zero = params.zeros_like();
    let mut results = Vec::with_capacity(analytic.len());
    let mut q = params.clone();
    for (t, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        let entries: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut a_kept = Vec::with_capacity(entries.len());
        let mut n_kept = Vec::with_capacity(entries.len());
        for &e in &entries {
            let v = params.tensor(t)[e];
            let num = central_difference(
                |w| {
                    q.tensors_mut()[t][e] = w;
                    let r = net_loss(&q, &x, &gt, &loss);
                    q.tensors_mut()[t][e] = v;
                    r
                },
                v,
                cfg.step,
            )?;
            a_kept.push(grad[e]);
            n_kept.push(num);
        }
        results.push(CheckResult {
            component: zero.name(t).to_string(),
            worst_rel_err: max_rel_error(&a_kept, &n_kept),
            tolerance: cfg.precision.net_tolerance(),
            checked: entries.len(),
            skipped: 0,
        });
    }
    Ok(results)
}

/// Runs every loss check and, when `network` is set, the per-tensor
/// network check.
pub fn run_gradcheck(cfg: &GradcheckConfig, network: bool) -> Result<GradcheckReport> {
    if cfg.volumes == 0 || cfg.min_side == 0 || cfg.min_side > cfg.max_side || !(cfg.step > 0.0) {
        return Err(Error::invalid("gradcheck needs volumes > 0, 0 < min_side <= max_side and a positive step"));
    }
    let losses = LossKind::ALL
        .iter()
        .map(|&k| check_loss(k, cfg))
        .collect::<Result<Vec<_>>>()?;
    let network = if network { check_network(cfg)? } else { Vec::new() };
    Ok(GradcheckReport {
        precision: cfg.precision,
        losses,
        network,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(precision: Precision) -> GradcheckConfig {
        GradcheckConfig {
            precision,
            volumes: 3,
            min_side: 3,
            max_side: 4,
            net_input: Shape3::cube(4),
            max_entries_per_tensor: Some(6),
            ..Default::default()
        }
    }

    #[test]
    fn double_precision_passes() {
        let r = run_gradcheck(&quick(Precision::Double), true).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert!(!r.network.is_empty());
    }

    #[test]
    fn single_precision_passes_relaxed() {
        let r = run_gradcheck(&quick(Precision::Single), true).unwrap();
        assert!(r.passed(), "{}", r.render());
        assert!(r.render().contains("tolerance relaxed"));
    }

    #[test]
    fn tv_sign_flip_is_caught() {
        let cfg = GradcheckConfig {
            fault: Fault::TvSignFlip,
            ..quick(Precision::Double)
        };
        let r = run_gradcheck(&cfg, false).unwrap();
        assert!(!r.passed());
        let failed: Vec<_> = r.losses.iter().filter(|c| !c.passed()).map(|c| c.component.as_str()).collect();
        assert_eq!(failed, ["tv_loss", "total_loss[dice_tv]"]);
    }

    #[test]
    fn rel_error_scales_by_reference() {
        assert!((max_rel_error(&[1.0, 2.1], &[1.0, 2.0]) - 0.05).abs() < 1e-12);
        assert!(max_rel_error(&[f64::NAN], &[1.0]).is_nan());
    }
}
