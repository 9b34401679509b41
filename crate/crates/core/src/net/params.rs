use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Real;

/// Number of output classes (background, lesion).
pub const OUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub num_stages: usize,
    /// First (1-based) encoder stage whose skip connection exists; every
    /// skip passes through a dual self-attention block. The bottleneck
    /// stage has no skip, so `attn_start_stage == num_stages` disables both.
    pub attn_start_stage: usize,
    pub attn_reduced_dim: usize,
    pub leaky_slope: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 2,
            base_channels: 8,
            num_stages: 3,
            attn_start_stage: 2,
            attn_reduced_dim: 4,
            leaky_slope: 0.01,
        }
    }
}

impl NetConfig {
    /// Full-size six-stage configuration starting at 16 channels.
    pub fn full_scale() -> Self {
        NetConfig {
            in_channels: 2,
            base_channels: 16,
            num_stages: 6,
            attn_start_stage: 3,
            attn_reduced_dim: 32,
            leaky_slope: 0.01,
        }
    }

    /// Two stages, four base channels, attention on the only skip.
    pub fn tiny() -> Self {
        NetConfig {
            in_channels: 2,
            base_channels: 4,
            num_stages: 2,
            attn_start_stage: 1,
            attn_reduced_dim: 2,
            leaky_slope: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Error::Config {
            path: format!("net.{field}"),
            message,
        };
        if self.in_channels == 0 {
            return Err(bad("in_channels", "must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(bad("base_channels", "must be >= 1".into()));
        }
        if self.num_stages < 2 || self.num_stages > 12 {
            return Err(bad("num_stages", format!("must be in 2..=12, got {}", self.num_stages)));
        }
        if self.attn_start_stage == 0 || self.attn_start_stage > self.num_stages {
            return Err(bad(
                "attn_start_stage",
                format!("must be in 1..={}, got {}", self.num_stages, self.attn_start_stage),
            ));
        }
        if self.attn_reduced_dim == 0 {
            return Err(bad("attn_reduced_dim", "must be >= 1".into()));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(bad("leaky_slope", format!("must be in [0, 1), got {}", self.leaky_slope)));
        }
        Ok(())
    }

    /// Channel count of 1-based stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << (s - 1)
    }

    /// Every spatial axis of the input must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }

    pub fn has_skip(&self, s: usize) -> bool {
        s >= self.attn_start_stage && s < self.num_stages
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal with std `sqrt(2 / ((1 + slope^2) fan_in))`.
    Kaiming { fan_in: usize },
    /// Uniform on `+-sqrt(6 / (fan_in + fan_out))`.
    Xavier { fan_in: usize, fan_out: usize },
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub init: Init,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NormRef {
    pub scale: usize,
    pub shift: usize,
}

/// Input projection, residual unit and trailing conv/norm of one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRef {
    pub proj: ConvRef,
    pub conv1: ConvRef,
    pub norm1: NormRef,
    pub conv2: ConvRef,
    pub norm2: NormRef,
    pub post: ConvRef,
    pub post_norm: NormRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DsaRef {
    pub wq: usize,
    pub wk: usize,
    pub wvs: usize,
    pub wvc: usize,
    pub wos: usize,
    pub woc: usize,
    pub reduced: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderRef {
    /// 1-based level this decoder produces (same resolution as encoder stage `level`).
    pub level: usize,
    pub up: ConvRef,
    pub dsa: Option<DsaRef>,
    pub block: BlockRef,
}

/// Tensor inventory derived from a [`NetConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct NetLayout {
    pub specs: Vec<TensorSpec>,
    pub encoders: Vec<BlockRef>,
    /// Ordered from the deepest level to level 1.
    pub decoders: Vec<DecoderRef>,
    pub head: ConvRef,
}

struct Builder {
    specs: Vec<TensorSpec>,
}

impl Builder {
    fn push(&mut self, name: String, dims: Vec<usize>, init: Init) -> usize {
        self.specs.push(TensorSpec { name, dims, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, bias: bool) -> ConvRef {
        let weight = self.push(
            format!("{name}.weight"),
            vec![c_out, c_in, k, k, k],
            Init::Kaiming {
                fan_in: c_in * k * k * k,
            },
        );
        let bias = bias.then(|| self.push(format!("{name}.bias"), vec![c_out], Init::Const(0.0)));
        ConvRef {
            weight,
            bias,
            c_in,
            c_out,
            k,
        }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormRef {
        NormRef {
            scale: self.push(format!("{name}.scale"), vec![c], Init::Const(1.0)),
            shift: self.push(format!("{name}.shift"), vec![c], Init::Const(0.0)),
        }
    }

    // convs feeding an instance norm carry no bias: the norm removes it
    fn block(&mut self, name: &str, c_in: usize, c: usize) -> BlockRef {
        BlockRef {
            proj: self.conv(&format!("{name}.proj"), c_in, c, 3, true),
            conv1: self.conv(&format!("{name}.conv1"), c, c, 3, false),
            norm1: self.norm(&format!("{name}.norm1"), c),
            conv2: self.conv(&format!("{name}.conv2"), c, c, 3, false),
            norm2: self.norm(&format!("{name}.norm2"), c),
            post: self.conv(&format!("{name}.post"), c, c, 3, false),
            post_norm: self.norm(&format!("{name}.post_norm"), c),
        }
    }

    fn dsa(&mut self, name: &str, c: usize, r: usize) -> DsaRef {
        let into = Init::Xavier { fan_in: c, fan_out: r };
        let back = Init::Xavier { fan_in: r, fan_out: c };
        DsaRef {
            wq: self.push(format!("{name}.query"), vec![c, r], into),
            wk: self.push(format!("{name}.key"), vec![c, r], into),
            wvs: self.push(format!("{name}.value_spatial"), vec![c, r], into),
            wvc: self.push(format!("{name}.value_channel"), vec![c, r], into),
            wos: self.push(format!("{name}.out_spatial"), vec![r, c], back),
            woc: self.push(format!("{name}.out_channel"), vec![r, c], back),
            reduced: r,
        }
    }
}

impl NetLayout {
    pub fn new(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = Builder { specs: Vec::new() };
        let mut encoders = Vec::new();
        for s in 1..=cfg.num_stages {
            let c_in = if s == 1 {
                cfg.in_channels
            } else {
                cfg.stage_channels(s - 1)
            };
            encoders.push(b.block(&format!("enc{s}"), c_in, cfg.stage_channels(s)));
        }
        let mut decoders = Vec::new();
        for level in (1..cfg.num_stages).rev() {
            let c = cfg.stage_channels(level);
            let c_up = cfg.stage_channels(level + 1);
            let name = format!("dec{level}");
            // a 2x2x2 stride-2 deconv feeds each output voxel one tap per input channel
            let up_w = b.push(
                format!("{name}.up.weight"),
                vec![c_up, c, 2, 2, 2],
                Init::Kaiming { fan_in: c_up },
            );
            let up_b = b.push(format!("{name}.up.bias"), vec![c], Init::Const(0.0));
            let up = ConvRef {
                weight: up_w,
                bias: Some(up_b),
                c_in: c_up,
                c_out: c,
                k: 2,
            };
            let dsa = cfg
                .has_skip(level)
                .then(|| b.dsa(&format!("{name}.dsa"), c, cfg.attn_reduced_dim));
            let block_in = if dsa.is_some() { 2 * c } else { c };
            let block = b.block(&name, block_in, c);
            decoders.push(DecoderRef {
                level,
                up,
                dsa,
                block,
            });
        }
        let head = b.conv("head", cfg.base_channels, OUT_CHANNELS, 1, true);
        Ok(NetLayout {
            specs: b.specs,
            encoders,
            decoders,
            head,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.specs.iter().map(TensorSpec::len).sum()
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// All learnable tensors of the network, in layout order.
#[derive(Debug)]
pub struct NetParams<T = f32> {
    config: NetConfig,
    layout: Arc<NetLayout>,
    tensors: Vec<Vec<T>>,
    id: u64,
    generation: u64,
}

impl<T: Real> Clone for NetParams<T> {
    fn clone(&self) -> Self {
        NetParams {
            config: self.config,
            layout: Arc::clone(&self.layout),
            tensors: self.tensors.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

impl<T: Real> PartialEq for NetParams<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.tensors == other.tensors
    }
}

/// Draw every tensor from its initializer. Deterministic in `seed`.
pub fn init_params<T: Real>(cfg: &NetConfig, seed: u64) -> Result<NetParams<T>> {
    let layout = NetLayout::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let slope2 = cfg.leaky_slope * cfg.leaky_slope;
    let tensors = layout
        .specs
        .iter()
        .map(|spec| {
            let n = spec.len();
            match spec.init {
                Init::Kaiming { fan_in } => {
                    let std = (2.0 / ((1.0 + slope2) * fan_in as f64)).sqrt();
                    (0..n)
                        .map(|_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
                        .collect()
                }
                Init::Xavier { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-a..a))).collect()
                }
                Init::Const(v) => vec![T::of(v); n],
            }
        })
        .collect();
    Ok(NetParams {
        config: *cfg,
        layout: Arc::new(layout),
        tensors,
        id: fresh_id(),
        generation: 0,
    })
}

impl<T: Real> NetParams<T> {
    /// Rebuild from raw tensors, checking every shape against the layout.
    pub fn from_tensors(cfg: &NetConfig, tensors: Vec<Vec<T>>) -> Result<Self> {
        let layout = NetLayout::new(cfg)?;
        if tensors.len() != layout.specs.len() {
            return Err(Error::CheckpointMismatch(format!(
                "expected {} tensors, got {}",
                layout.specs.len(),
                tensors.len()
            )));
        }
        for (spec, t) in layout.specs.iter().zip(&tensors) {
            if spec.len() != t.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "tensor {} has {} values, expected {}",
                    spec.name,
                    t.len(),
                    spec.len()
                )));
            }
        }
        Ok(NetParams {
            config: *cfg,
            layout: Arc::new(layout),
            tensors,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub(crate) fn layout_arc(&self) -> Arc<NetLayout> {
        Arc::clone(&self.layout)
    }

    #[inline]
    pub fn tensor(&self, idx: usize) -> &[T] {
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Vec<T>] {
        &self.tensors
    }

    /// Mutable access; invalidates any tape recorded before the call.
    pub fn tensors_mut(&mut self) -> &mut [Vec<T>] {
        self.generation += 1;
        &mut self.tensors
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(Vec::len).sum()
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            config: self.config,
            layout: Arc::clone(&self.layout),
            tensors: self
                .tensors
                .iter()
                .map(|t| t.iter().map(|&v| U::of(v.as_f64())).collect())
                .collect(),
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn zeros_like(&self) -> ParamGrads<T> {
        ParamGrads {
            layout: Arc::clone(&self.layout),
            tensors: self.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect(),
        }
    }
}

/// Gradient buffers shaped like [`NetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<T = f32> {
    layout: Arc<NetLayout>,
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn layout(&self) -> &NetLayout {
        &self.layout
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.layout.specs[idx].name
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for v in self.tensors.iter_mut().flatten() {
            *v *= alpha;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }

    pub(crate) fn many_mut<const N: usize>(&mut self, idx: [usize; N]) -> [&mut [T]; N] {
        self.tensors
            .get_disjoint_mut(idx)
            .expect("distinct parameter indices")
            .map(|v| v.as_mut_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = NetConfig::default();
        let a = init_params::<f32>(&cfg, 7).unwrap();
        let b = init_params::<f32>(&cfg, 7).unwrap();
        assert_eq!(a, b);
        let c = init_params::<f32>(&cfg, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn norm_scales_start_at_one() {
        let p = init_params::<f32>(&NetConfig::default(), 1).unwrap();
        let mut seen = 0;
        for (i, spec) in p.layout().specs.iter().enumerate() {
            if spec.name.ends_with(".scale") {
                assert!(p.tensor(i).iter().all(|&v| v == 1.0));
                seen += 1;
            }
            if spec.name.ends_with(".shift") || spec.name.ends_with(".bias") {
                assert!(p.tensor(i).iter().all(|&v| v == 0.0));
            }
        }
        assert!(seen > 0);
    }

    #[test]
    fn kaiming_std_monte_carlo() {
        // 3x3x3 conv with fan_in 216 (8 input channels), >= 10^4 draws pooled over seeds
        let cfg = NetConfig::default();
        let layout = NetLayout::new(&cfg).unwrap();
        let idx = layout
            .specs
            .iter()
            .position(|s| s.name == "enc1.conv1.weight")
            .unwrap();
        assert_eq!(layout.specs[idx].init, Init::Kaiming { fan_in: 216 });
        let mut draws = Vec::new();
        let mut seed = 0;
        while draws.len() < 10_000 {
            let p = init_params::<f64>(&cfg, seed).unwrap();
            draws.extend_from_slice(p.tensor(idx));
            seed += 1;
        }
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = (2.0 / (216.0 * (1.0 + 0.01f64 * 0.01))).sqrt();
        assert!((std / target - 1.0).abs() < 0.05, "std {std} vs {target}");
    }

    #[test]
    fn xavier_bounds() {
        let p = init_params::<f64>(&NetConfig::tiny(), 3).unwrap();
        for (i, spec) in p.layout().specs.iter().enumerate() {
            if let Init::Xavier { fan_in, fan_out } = spec.init {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                assert!(p.tensor(i).iter().all(|v| v.abs() <= a));
            }
        }
    }

    #[test]
    fn full_scale_builds() {
        let layout = NetLayout::new(&NetConfig::full_scale()).unwrap();
        assert_eq!(NetConfig::full_scale().stage_channels(6), 512);
        assert!(layout.num_parameters() > 1_000_000);
        assert_eq!(layout.decoders.len(), 5);
        assert_eq!(layout.decoders.iter().filter(|d| d.dsa.is_some()).count(), 3);
    }

    #[test]
    fn config_validation() {
        assert!(NetConfig::default().validate().is_ok());
        let mut c = NetConfig::default();
        c.num_stages = 1;
        assert!(c.validate().is_err());
        let mut c = NetConfig::default();
        c.attn_start_stage = 4;
        assert!(c.validate().is_err());
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let p = init_params::<f32>(&NetConfig::tiny(), 0).unwrap();
        let mut other = NetConfig::tiny();
        other.base_channels = 6;
        assert!(NetParams::<f32>::from_tensors(&other, p.tensors().to_vec()).is_err());
        let q = NetParams::<f32>::from_tensors(&NetConfig::tiny(), p.tensors().to_vec()).unwrap();
        assert_eq!(p, q);
    }
}
