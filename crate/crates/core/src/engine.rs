//! Optimizer, learning-rate schedule, training loop and sliding-window
//! inference.
//!
//! Patch gradients and validation subjects may be computed on a rayon
//! pool; results are always reduced in a fixed order, so runs are bitwise
//! reproducible for any thread count.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::metrics::voxel_metrics;
use crate::net::{self, init_params, NetConfig, NetParams, ParamGrads, OUT_CHANNELS};
use crate::synth::{augment, sample_patch, AugmentConfig, Split, SubjectRecord};
use crate::volume::{mask_from_threshold, BinaryMask, Real, Shape3, Volume, DEFAULT_THRESHOLD};

/// Output channel holding the lesion probability.
pub const LESION_CHANNEL: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub warmup_epochs: usize,
    pub patience: usize,
    pub patches_per_subject: usize,
    pub optimizer: AdamWConfig,
    /// Sliding window used for validation inference (overlap 0).
    pub val_window: Shape3,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 300,
            lr_max: 1e-4,
            lr_min: 1e-6,
            warmup_epochs: 10,
            patience: 25,
            patches_per_subject: 4,
            optimizer: AdamWConfig::default(),
            val_window: Shape3::cube(32),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("train.{field}"),
            message,
        };
        if self.max_epochs == 0 {
            return Err(bad("max_epochs", "must be >= 1".into()));
        }
        if !(self.lr_min >= 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(bad(
                "lr_min",
                format!("need 0 <= lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max),
            ));
        }
        if self.warmup_epochs >= self.max_epochs {
            return Err(bad(
                "warmup_epochs",
                format!("{} must be below max_epochs {}", self.warmup_epochs, self.max_epochs),
            ));
        }
        if self.patience == 0 {
            return Err(bad("patience", "must be >= 1".into()));
        }
        if self.patches_per_subject == 0 {
            return Err(bad("patches_per_subject", "must be >= 1".into()));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(bad("optimizer.beta1", "betas must lie in [0, 1)".into()));
        }
        if !(o.eps > 0.0 && o.weight_decay >= 0.0 && o.weight_decay.is_finite()) {
            return Err(bad("optimizer.eps", "need eps > 0 and weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// Linear warmup from `0.1 * lr_max`, then cosine decay to `lr_min` at
/// `max_epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let e = epoch.min(cfg.max_epochs) as f64;
    let warm = cfg.warmup_epochs as f64;
    if e < warm {
        0.1 * cfg.lr_max + (e / warm) * 0.9 * cfg.lr_max
    } else {
        let t = (e - warm) / (cfg.max_epochs as f64 - warm);
        cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (PI * t).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
    pub cfg: AdamWConfig,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &NetParams<T>, cfg: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = params.tensors().iter().map(|t| vec![T::zero(); t.len()]).collect();
        OptState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            cfg,
        }
    }
}

/// One decoupled-weight-decay Adam update.
pub fn adamw_step<T: Real>(
    params: &mut NetParams<T>,
    grads: &ParamGrads<T>,
    opt: &mut OptState<T>,
    lr: f64,
) -> Result<()> {
    let shapes_ok = |ts: &[Vec<T>]| {
        ts.len() == params.tensors().len() && ts.iter().zip(params.tensors()).all(|(a, b)| a.len() == b.len())
    };
    if !shapes_ok(&grads.tensors) || !shapes_ok(&opt.m) || !shapes_ok(&opt.v) {
        return Err(Error::mismatch("gradient or optimizer state does not match parameters"));
    }
    let AdamWConfig { beta1, beta2, eps, weight_decay } = opt.cfg;
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((theta, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(&grads.tensors)
        .zip(&mut opt.m)
        .zip(&mut opt.v)
    {
        for i in 0..theta.len() {
            let gi = g[i].as_f64();
            let mi = beta1 * m[i].as_f64() + (1.0 - beta1) * gi;
            let vi = beta2 * v[i].as_f64() + (1.0 - beta2) * gi * gi;
            m[i] = T::of(mi);
            v[i] = T::of(vi);
            let mhat = mi / c1;
            let vhat = vi / c2;
            let th = theta[i].as_f64();
            theta[i] = T::of(th - lr * (mhat / (vhat.sqrt() + eps) + weight_decay * th));
        }
    }
    Ok(())
}

/// Loss on the lesion channel of two-channel probabilities, with the
/// gradient lifted back to both channels.
pub fn loss_on_probs<T: Real>(probs: &Volume<T>, gt: &BinaryMask, cfg: &LossConfig) -> Result<(f64, Volume<T>)> {
    if probs.channels() != OUT_CHANNELS {
        return Err(Error::mismatch(format!(
            "expected {OUT_CHANNELS} probability channels, got {}",
            probs.channels()
        )));
    }
    let p = probs.extract_channel(LESION_CHANNEL)?;
    let out = total_loss(&p, gt, cfg)?;
    let mut grad = Volume::zeros(OUT_CHANNELS, probs.shape());
    grad.channel_mut(LESION_CHANNEL).copy_from_slice(out.grad.data());
    Ok((out.value, grad))
}

fn tile_starts(dim: usize, win: usize, stride: usize) -> Vec<usize> {
    let mut starts = Vec::new();
    let mut s = 0;
    while s + win < dim {
        starts.push(s);
        s += stride;
    }
    starts.push(dim - win);
    starts.dedup();
    starts
}

/// Window corners used by [`infer_volume`] for a window that fits.
pub fn tile_corners(shape: Shape3, window: Shape3, overlap: f64) -> Vec<[usize; 3]> {
    let (v, w) = (shape.dims(), window.dims());
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let stride = ((w[a] as f64 * (1.0 - overlap)).floor() as usize).max(1);
            tile_starts(v[a], w[a], stride)
        })
        .collect();
    let mut corners = Vec::new();
    for &i in &starts[0] {
        for &j in &starts[1] {
            for &k in &starts[2] {
                corners.push([i, j, k]);
            }
        }
    }
    corners
}

/// Tiles the volume with `stride = window * (1 - overlap)`, clamping the
/// last tile of each axis to the border, and averages overlapping
/// probabilities. A window larger than the volume falls back to one
/// full-volume pass.
pub fn infer_volume<T: Real>(
    params: &NetParams<T>,
    image: &Volume<T>,
    window: Shape3,
    overlap: f64,
) -> Result<Volume<T>> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::invalid(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let shape = image.shape();
    let div = params.config().required_divisor();
    let (v, w) = (shape.dims(), window.dims());
    if (0..3).any(|a| w[a] > v[a]) {
        return net::predict(params, image);
    }
    if !window.divisible_by(div) {
        return Err(Error::invalid(format!(
            "window {window} must be divisible by {div} along every axis"
        )));
    }
    let corners = tile_corners(shape, window, overlap);
    if corners.len() == 1 && window == shape {
        return net::predict(params, image);
    }
    let tiles = corners
        .par_iter()
        .map(|&c| net::predict(params, &image.crop(c, window)?))
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0f64; OUT_CHANNELS * shape.len()];
    let mut count = vec![0u32; shape.len()];
    for (corner, tile) in corners.iter().zip(&tiles) {
        for ch in 0..OUT_CHANNELS {
            let src = tile.channel(ch);
            for i in 0..window.d {
                for j in 0..window.h {
                    let dst = shape.offset(corner[0] + i, corner[1] + j, corner[2]);
                    let row = window.offset(i, j, 0);
                    for k in 0..window.w {
                        sum[ch * shape.len() + dst + k] += src[row + k].as_f64();
                        if ch == 0 {
                            count[dst + k] += 1;
                        }
                    }
                }
            }
        }
    }
    let data = sum
        .iter()
        .enumerate()
        .map(|(idx, &s)| T::of(s / f64::from(count[idx % shape.len()])))
        .collect();
    Volume::from_vec(OUT_CHANNELS, shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_sens: f64,
    pub val_prec: f64,
    pub val_dc: f64,
}

pub fn logs_to_csv(logs: &[EpochLog]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::invalid(format!("csv: {e}"));
    for l in logs {
        w.serialize(l).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::invalid(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: NetParams<f32>,
    pub opt: OptState<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    pub best: NetParams<f32>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stagnant: usize,
    pub stopped: bool,
    pub logs: Vec<EpochLog>,
}

impl TrainState {
    pub fn new(net: &NetConfig, cfg: &TrainConfig) -> Result<Self> {
        let params = init_params::<f32>(net, cfg.seed)?;
        Ok(Self::from_params(params, cfg))
    }

    pub fn from_params(params: NetParams<f32>, cfg: &TrainConfig) -> Self {
        TrainState {
            opt: OptState::new(&params, cfg.optimizer),
            best: params.clone(),
            params,
            epoch: 0,
            best_epoch: None,
            best_val_loss: f64::INFINITY,
            stagnant: 0,
            stopped: false,
            logs: Vec::new(),
        }
    }

    pub fn finished(&self, cfg: &TrainConfig) -> bool {
        self.stopped || self.epoch >= cfg.max_epochs
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 is left to parameter initialisation
    rng.set_stream(epoch as u64 + 1);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    pub loss: f64,
    pub sens: f64,
    pub prec: f64,
    pub dice: f64,
}

/// Full-volume validation: mean loss and voxel metrics over subjects.
pub fn validate(
    params: &NetParams<f32>,
    subjects: &[&SubjectRecord],
    window: Shape3,
    loss: &LossConfig,
) -> Result<Validation> {
    if subjects.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let per = subjects
        .par_iter()
        .map(|s| {
            let probs = infer_volume(params, &s.image, window, 0.0)?;
            let (l, _) = loss_on_probs(&probs, &s.gt, loss)?;
            let pred = mask_from_threshold(&probs.extract_channel(LESION_CHANNEL)?, DEFAULT_THRESHOLD)?;
            Ok((l, voxel_metrics(&pred, &s.gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per.len() as f64;
    Ok(Validation {
        loss: per.iter().map(|p| p.0).sum::<f64>() / n,
        sens: per.iter().map(|p| p.1.sens).sum::<f64>() / n,
        prec: per.iter().map(|p| p.1.prec).sum::<f64>() / n,
        dice: per.iter().map(|p| p.1.dice).sum::<f64>() / n,
    })
}

/// Training inputs that stay fixed across epochs.
#[derive(Debug, Clone, Copy)]
pub struct TrainSetup<'a> {
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub loss: &'a LossConfig,
    pub subjects: &'a [SubjectRecord],
}

impl TrainSetup<'_> {
    fn split(&self, split: Split) -> Vec<&SubjectRecord> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }

    pub fn check(&self, net: &NetConfig) -> Result<()> {
        self.train.validate()?;
        self.loss.validate()?;
        let train = self.split(Split::Train);
        let val = self.split(Split::Validation);
        if train.is_empty() || val.is_empty() {
            return Err(Error::invalid("training needs nonempty train and validation splits"));
        }
        self.augment.validate(train[0].image.shape(), net.required_divisor())
    }
}

/// Runs one epoch and updates early-stopping bookkeeping.
pub fn run_epoch(state: &mut TrainState, setup: &TrainSetup<'_>) -> Result<EpochLog> {
    let cfg = setup.train;
    let epoch = state.epoch;
    let lr = lr_at(epoch, cfg);
    let mut rng = epoch_rng(cfg.seed, epoch);
    let mut order = setup.split(Split::Train);
    order.shuffle(&mut rng);

    let mut loss_sum = 0.0;
    let mut n_patches = 0usize;
    for subject in order {
        let mut patches = Vec::with_capacity(cfg.patches_per_subject);
        for _ in 0..cfg.patches_per_subject {
            let p = sample_patch(subject, setup.augment.crop_size, setup.augment.balanced, &mut rng)?;
            patches.push(augment(&p.image, &p.gt, setup.augment, &mut rng)?);
        }
        let params = &state.params;
        let results = patches
            .par_iter()
            .map(|(x, g)| {
                let (probs, tape) = net::forward(params, x)?;
                let (l, dprobs) = loss_on_probs(&probs, g, setup.loss)?;
                Ok((l, net::backward(params, &tape, &dprobs)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut grads = state.params.zeros_like();
        for (l, g) in &results {
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("training loss {l} on subject {}", subject.id),
                });
            }
            loss_sum += l;
            n_patches += 1;
            grads.accumulate(g);
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite {
                epoch,
                detail: format!("non-finite gradient on subject {}", subject.id),
            });
        }
        adamw_step(&mut state.params, &grads, &mut state.opt, lr)?;
    }

    let val = validate(&state.params, &setup.split(Split::Validation), cfg.val_window, setup.loss)?;
    if !val.loss.is_finite() {
        return Err(Error::NonFinite {
            epoch,
            detail: format!("validation loss {}", val.loss),
        });
    }
    let log = EpochLog {
        epoch,
        lr,
        train_loss: loss_sum / n_patches as f64,
        val_loss: val.loss,
        val_sens: val.sens,
        val_prec: val.prec,
        val_dc: val.dice,
    };
    if val.loss < state.best_val_loss {
        state.best_val_loss = val.loss;
        state.best_epoch = Some(epoch);
        state.best = state.params.clone();
        state.stagnant = 0;
    } else {
        state.stagnant += 1;
        if state.stagnant >= cfg.patience {
            state.stopped = true;
        }
    }
    state.logs.push(log);
    state.epoch += 1;
    Ok(log)
}

/// Trains until early stopping, `max_epochs`, or `until` epochs have run
/// in total, whichever comes first. `on_epoch` sees every finished epoch.
pub fn train_until(
    state: &mut TrainState,
    setup: &TrainSetup<'_>,
    until: Option<usize>,
    mut on_epoch: impl FnMut(&TrainState, &EpochLog),
) -> Result<()> {
    setup.check(state.params.config())?;
    let stop = until.unwrap_or(usize::MAX).min(setup.train.max_epochs);
    while !state.stopped && state.epoch < stop {
        let log = run_epoch(state, setup)?;
        on_epoch(state, &log);
    }
    Ok(())
}

/// Trains from scratch and returns the final state; `state.best` holds the
/// parameters with the lowest validation loss.
pub fn train(net: &NetConfig, setup: &TrainSetup<'_>) -> Result<TrainState> {
    let mut state = TrainState::new(net, setup.train)?;
    train_until(&mut state, setup, None, |_, _| {})?;
    Ok(state)
}
