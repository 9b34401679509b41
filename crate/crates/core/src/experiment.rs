//! Loss-comparison experiment: train every loss preset for several seeds on
//! one synthetic dataset and evaluate test subjects before and after
//! post-processing.

use serde::{Deserialize, Serialize};

use crate::engine::{infer_volume, train_until, TrainConfig, TrainSetup, TrainState, LESION_CHANNEL};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, LossPreset};
use crate::metrics::{aggregate, evaluate_subject, AggregateReport, SubjectMetrics};
use crate::net::NetParams;
use crate::postproc::{postprocess, PostprocConfig};
use crate::storage::{InferConfig, RunConfig};
use crate::synth::{generate_dataset, Split, SubjectRecord};
use crate::volume::{mask_from_threshold, Shape3};

#[derive(Debug, Clone, PartialEq)]
pub struct TrendConfig {
    pub run: RunConfig,
    pub presets: Vec<LossPreset>,
    pub seeds: Vec<u64>,
}

impl Default for TrendConfig {
    fn default() -> Self {
        TrendConfig {
            run: RunConfig::default(),
            presets: LossPreset::ALL.to_vec(),
            seeds: (0..5).collect(),
        }
    }
}

impl TrendConfig {
    /// Desk-scale settings for the default synthetic dataset: 16^3 training
    /// crops, a short schedule and a TV weight sized for raw sums over
    /// those crops.
    pub fn desk() -> Self {
        let mut run = RunConfig::default();
        run.augment.crop_size = Shape3::cube(16);
        run.train.max_epochs = 20;
        run.train.warmup_epochs = 4;
        run.train.lr_max = 1e-2;
        run.train.lr_min = 1e-5;
        run.train.patience = 20;
        run.loss.w_tv = 5e-5;
        TrendConfig {
            run,
            ..TrendConfig::default()
        }
    }
}

/// Loss weights of a preset. The TV weight of `Dice + TV` is taken from
/// `base.w_tv`; smoothing and clamping constants are kept.
pub fn preset_loss(base: &LossConfig, preset: LossPreset) -> LossConfig {
    let p = preset.config(base.w_tv);
    LossConfig {
        w_dice: p.w_dice,
        w_bce: p.w_bce,
        w_tv: p.w_tv,
        ..*base
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub preset: LossPreset,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub pre: Vec<SubjectMetrics>,
    pub post: Vec<SubjectMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendReport {
    pub runs: Vec<RunResult>,
    /// One report per preset before post-processing, then one per preset after.
    pub reports: Vec<AggregateReport>,
}

impl TrendReport {
    pub fn report(&self, preset: LossPreset, postprocessed: bool) -> Option<&AggregateReport> {
        self.reports
            .iter()
            .find(|r| r.label == preset.label() && r.postprocessed == postprocessed)
    }
}

/// Metrics of every subject before and after post-processing.
pub fn evaluate_params(
    params: &NetParams<f32>,
    subjects: &[&SubjectRecord],
    infer: &InferConfig,
    postproc: &PostprocConfig,
) -> Result<(Vec<SubjectMetrics>, Vec<SubjectMetrics>)> {
    let mut pre = Vec::with_capacity(subjects.len());
    let mut post = Vec::with_capacity(subjects.len());
    for s in subjects {
        let probs = infer_volume(params, &s.image, infer.window, infer.overlap)?;
        let mask = mask_from_threshold(&probs.extract_channel(LESION_CHANNEL)?, infer.threshold)?;
        pre.push(evaluate_subject(&mask, &s.gt)?);
        post.push(evaluate_subject(&postprocess(&mask, postproc)?, &s.gt)?);
    }
    Ok((pre, post))
}

/// Runs the full grid. `progress` is called after every finished run.
pub fn run_trend(cfg: &TrendConfig, mut progress: impl FnMut(&RunResult)) -> Result<TrendReport> {
    if cfg.presets.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::invalid("experiment needs at least one preset and one seed"));
    }
    let run = &cfg.run;
    run.validate()?;
    let data = generate_dataset(&run.gen)?;
    let test: Vec<&SubjectRecord> = data.iter().filter(|s| s.split == Split::Test).collect();
    if test.is_empty() {
        return Err(Error::invalid("experiment needs test subjects"));
    }
    let mut runs = Vec::new();
    for &preset in &cfg.presets {
        let loss = preset_loss(&run.loss, preset);
        for &seed in &cfg.seeds {
            let train = TrainConfig { seed, ..run.train };
            let setup = TrainSetup {
                train: &train,
                augment: &run.augment,
                loss: &loss,
                subjects: &data,
            };
            let mut state = TrainState::new(&run.net, &train)?;
            train_until(&mut state, &setup, None, |_, _| {})?;
            let (pre, post) = evaluate_params(&state.best, &test, &run.infer, &run.postproc)?;
            let run = RunResult {
                preset,
                seed,
                epochs: state.epoch,
                best_epoch: state.best_epoch,
                pre,
                post,
            };
            progress(&run);
            runs.push(run);
        }
    }
    let mut reports = Vec::new();
    for postprocessed in [false, true] {
        for &preset in &cfg.presets {
            let per_run: Vec<Vec<SubjectMetrics>> = runs
                .iter()
                .filter(|r| r.preset == preset)
                .map(|r| if postprocessed { r.post.clone() } else { r.pre.clone() })
                .collect();
            reports.push(aggregate(&per_run, preset.label(), postprocessed)?);
        }
    }
    Ok(TrendReport { runs, reports })
}
