//! Miniature 3D encoder-decoder with attention-gated skip connections.
//!
//! Each stage is an input projection `h0 = proj(x)`, a residual unit
//! `s = h0 + norm2(conv2(lrelu(norm1(conv1(h0)))))` and a trailing
//! `lrelu(post_norm(post(s)))`. Encoders halve resolution with 2x2x2
//! max-pooling; decoders double it with a 2x2x2 transposed convolution,
//! concatenate the attention-refined skip when the level has one, and run
//! the same stage structure. A 1x1x1 head and a two-class softmax produce
//! background and lesion probabilities.

pub mod dsa;
pub mod ops;
mod params;

pub use params::{
    init_params, BlockRef, ConvRef, DecoderRef, DsaRef, Init, NetConfig, NetLayout, NetParams,
    NormRef, ParamGrads, TensorSpec, OUT_CHANNELS,
};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::volume::{Real, Shape3, Volume};
use dsa::{DsaCache, DsaGrads, DsaWeights};
use ops::NormCache;

/// Caches of one stage block.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    x: Volume<T>,
    h0: Volume<T>,
    n1: Volume<T>,
    norm1: NormCache<T>,
    l1: Volume<T>,
    norm2: NormCache<T>,
    s: Volume<T>,
    norm3: NormCache<T>,
    n3: Volume<T>,
}

fn conv<T: Real>(p: &NetParams<T>, c: &ConvRef, x: &Volume<T>) -> Result<Volume<T>> {
    ops::conv3d_forward(x, p.tensor(c.weight), c.bias.map(|b| p.tensor(b)), c.c_out, c.k)
}

fn conv_back<T: Real>(
    p: &NetParams<T>,
    c: &ConvRef,
    x: &Volume<T>,
    dy: &Volume<T>,
    g: &mut ParamGrads<T>,
) -> Volume<T> {
    match c.bias {
        Some(b) => {
            let [dw, db] = g.many_mut([c.weight, b]);
            ops::conv3d_backward(x, p.tensor(c.weight), dy, c.k, dw, Some(db))
        }
        None => ops::conv3d_backward(x, p.tensor(c.weight), dy, c.k, &mut g.tensors[c.weight], None),
    }
}

fn norm<T: Real>(p: &NetParams<T>, n: &NormRef, x: &Volume<T>) -> Result<(Volume<T>, NormCache<T>)> {
    ops::instance_norm_forward(x, p.tensor(n.scale), p.tensor(n.shift), ops::NORM_EPS)
}

fn norm_back<T: Real>(
    p: &NetParams<T>,
    n: &NormRef,
    cache: &NormCache<T>,
    dy: &Volume<T>,
    g: &mut ParamGrads<T>,
) -> Volume<T> {
    let [ds, db] = g.many_mut([n.scale, n.shift]);
    ops::instance_norm_backward(cache, p.tensor(n.scale), dy, ds, db)
}

pub fn block_forward<T: Real>(
    p: &NetParams<T>,
    b: &BlockRef,
    x: &Volume<T>,
) -> Result<(Volume<T>, BlockCache<T>)> {
    if x.channels() != b.proj.c_in {
        return Err(Error::mismatch(format!(
            "block expects {} input channels, got {}",
            b.proj.c_in,
            x.channels()
        )));
    }
    let slope = p.config().leaky_slope;
    let h0 = conv(p, &b.proj, x)?;
    let (n1, norm1) = norm(p, &b.norm1, &conv(p, &b.conv1, &h0)?)?;
    let l1 = ops::leaky_relu(&n1, slope);
    let (n2, norm2) = norm(p, &b.norm2, &conv(p, &b.conv2, &l1)?)?;
    let mut s = h0.clone();
    s.axpy(T::one(), &n2)?;
    let (n3, norm3) = norm(p, &b.post_norm, &conv(p, &b.post, &s)?)?;
    let out = ops::leaky_relu(&n3, slope);
    let cache = BlockCache {
        x: x.clone(),
        h0,
        n1,
        norm1,
        l1,
        norm2,
        s,
        norm3,
        n3,
    };
    Ok((out, cache))
}

pub fn block_backward<T: Real>(
    p: &NetParams<T>,
    b: &BlockRef,
    cache: &BlockCache<T>,
    dy: &Volume<T>,
    g: &mut ParamGrads<T>,
) -> Volume<T> {
    let slope = p.config().leaky_slope;
    let dn3 = ops::leaky_relu_backward(&cache.n3, dy, slope);
    let da3 = norm_back(p, &b.post_norm, &cache.norm3, &dn3, g);
    let ds = conv_back(p, &b.post, &cache.s, &da3, g);
    let da2 = norm_back(p, &b.norm2, &cache.norm2, &ds, g);
    let dl1 = conv_back(p, &b.conv2, &cache.l1, &da2, g);
    let dn1 = ops::leaky_relu_backward(&cache.n1, &dl1, slope);
    let da1 = norm_back(p, &b.norm1, &cache.norm1, &dn1, g);
    let mut dh0 = conv_back(p, &b.conv1, &cache.h0, &da1, g);
    dh0.axpy(T::one(), &ds).expect("same shape");
    conv_back(p, &b.proj, &cache.x, &dh0, g)
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    block: BlockCache<T>,
    pool: Option<(Shape3, Vec<u32>)>,
}

/// One encoder stage (1-based `stage`). Returns the stage features and,
/// when `pool` is set, their 2x2x2 max-pooled version.
pub fn encoder_stage_forward<T: Real>(
    p: &NetParams<T>,
    stage: usize,
    x: &Volume<T>,
    pool: bool,
) -> Result<(Volume<T>, Option<Volume<T>>, EncoderCache<T>)> {
    let b = p
        .layout()
        .encoders
        .get(stage.wrapping_sub(1))
        .copied()
        .ok_or_else(|| Error::invalid(format!("no encoder stage {stage}")))?;
    if pool && !x.shape().divisible_by(2) {
        return Err(Error::invalid(format!(
            "encoder stage {stage} needs even spatial dims to pool, got {}",
            x.shape()
        )));
    }
    let (features, block) = block_forward(p, &b, x)?;
    let (pooled, pool_cache) = if pool {
        let (y, arg) = ops::max_pool2(&features)?;
        (Some(y), Some((features.shape(), arg)))
    } else {
        (None, None)
    };
    Ok((
        features,
        pooled,
        EncoderCache {
            block,
            pool: pool_cache,
        },
    ))
}

/// Backward of [`encoder_stage_forward`]; `dfeatures` and `dpooled` are
/// the upstream gradients of its two outputs.
pub fn encoder_stage_backward<T: Real>(
    p: &NetParams<T>,
    stage: usize,
    cache: &EncoderCache<T>,
    dfeatures: Option<&Volume<T>>,
    dpooled: Option<&Volume<T>>,
    g: &mut ParamGrads<T>,
) -> Volume<T> {
    let b = p.layout().encoders[stage - 1];
    let c = b.proj.c_out;
    let shape = cache.block.h0.shape();
    let mut df = match dfeatures {
        Some(d) => d.clone(),
        None => Volume::zeros(c, shape),
    };
    if let (Some(dp), Some((s, arg))) = (dpooled, &cache.pool) {
        let back = ops::max_pool2_backward(*s, c, arg, dp);
        df.axpy(T::one(), &back).expect("same shape");
    }
    block_backward(p, &b, &cache.block, &df, g)
}

fn dsa_weights<'a, T: Real>(p: &'a NetParams<T>, d: &DsaRef) -> DsaWeights<'a, T> {
    DsaWeights {
        wq: p.tensor(d.wq),
        wk: p.tensor(d.wk),
        wvs: p.tensor(d.wvs),
        wvc: p.tensor(d.wvc),
        wos: p.tensor(d.wos),
        woc: p.tensor(d.woc),
        reduced: d.reduced,
    }
}

/// Dual self-attention block of the skip feeding decoder `level`.
pub fn dsa_block_forward<T: Real>(
    p: &NetParams<T>,
    level: usize,
    f: &Volume<T>,
) -> Result<(Volume<T>, DsaCache<T>)> {
    let d = decoder_ref(p, level)?
        .dsa
        .ok_or_else(|| Error::invalid(format!("level {level} has no attention skip")))?;
    let c = p.config().stage_channels(level);
    if f.channels() != c {
        return Err(Error::mismatch(format!(
            "attention at level {level} expects {c} channels, got {}",
            f.channels()
        )));
    }
    Ok(dsa::dsa_forward(f, &dsa_weights(p, &d)))
}

pub fn dsa_block_backward<T: Real>(
    p: &NetParams<T>,
    level: usize,
    cache: &DsaCache<T>,
    dy: &Volume<T>,
    g: &mut ParamGrads<T>,
) -> Result<Volume<T>> {
    let d = decoder_ref(p, level)?
        .dsa
        .ok_or_else(|| Error::invalid(format!("level {level} has no attention skip")))?;
    let [wq, wk, wvs, wvc, wos, woc] = g.many_mut([d.wq, d.wk, d.wvs, d.wvc, d.wos, d.woc]);
    let grads = DsaGrads {
        wq,
        wk,
        wvs,
        wvc,
        wos,
        woc,
    };
    Ok(dsa::dsa_backward(cache, &dsa_weights(p, &d), dy, grads))
}

fn decoder_ref<T: Real>(p: &NetParams<T>, level: usize) -> Result<DecoderRef> {
    p.layout()
        .decoders
        .iter()
        .find(|d| d.level == level)
        .copied()
        .ok_or_else(|| Error::invalid(format!("no decoder at level {level}")))
}

#[derive(Debug, Clone)]
pub struct DecoderCache<T> {
    x: Volume<T>,
    dsa: Option<DsaCache<T>>,
    block: BlockCache<T>,
}

/// Decoder producing `level`: upsample `x`, join the (attention-refined)
/// skip when this level has one, then run the stage block. `skip` must be
/// the raw encoder features of the same level.
pub fn decoder_stage_forward<T: Real>(
    p: &NetParams<T>,
    level: usize,
    x: &Volume<T>,
    skip: Option<&Volume<T>>,
) -> Result<(Volume<T>, DecoderCache<T>)> {
    let d = decoder_ref(p, level)?;
    if x.channels() != d.up.c_in {
        return Err(Error::mismatch(format!(
            "decoder {level} expects {} input channels, got {}",
            d.up.c_in,
            x.channels()
        )));
    }
    let up = ops::deconv2_forward(
        x,
        p.tensor(d.up.weight),
        p.tensor(d.up.bias.expect("deconv bias")),
        d.up.c_out,
    )?;
    let (joined, dsa_cache) = match (d.dsa, skip) {
        (Some(_), Some(skip)) => {
            if skip.shape() != up.shape() {
                return Err(Error::mismatch(format!(
                    "skip {} does not match upsampled {}",
                    skip.shape(),
                    up.shape()
                )));
            }
            let (refined, cache) = dsa_block_forward(p, level, skip)?;
            (ops::concat_channels(&up, &refined)?, Some(cache))
        }
        (Some(_), None) => {
            return Err(Error::invalid(format!("decoder {level} requires a skip input")));
        }
        (None, _) => (up, None),
    };
    let (out, block) = block_forward(p, &d.block, &joined)?;
    Ok((
        out,
        DecoderCache {
            x: x.clone(),
            dsa: dsa_cache,
            block,
        },
    ))
}

/// Returns `(dx, dskip)`.
pub fn decoder_stage_backward<T: Real>(
    p: &NetParams<T>,
    level: usize,
    cache: &DecoderCache<T>,
    dy: &Volume<T>,
    g: &mut ParamGrads<T>,
) -> Result<(Volume<T>, Option<Volume<T>>)> {
    let d = decoder_ref(p, level)?;
    let djoined = block_backward(p, &d.block, &cache.block, dy, g);
    let (dup, dskip) = match &cache.dsa {
        Some(dc) => {
            let (dup, drefined) = ops::split_channels(&djoined, d.up.c_out);
            let dskip = dsa_block_backward(p, level, dc, &drefined, g)?;
            (dup, Some(dskip))
        }
        None => (djoined, None),
    };
    let [dw, db] = g.many_mut([d.up.weight, d.up.bias.expect("deconv bias")]);
    let dx = ops::deconv2_backward(&cache.x, p.tensor(d.up.weight), &dup, dw, db);
    Ok((dx, dskip))
}

/// Everything one backward pass needs from its forward pass.
#[derive(Debug, Clone)]
pub struct TapeState<T> {
    owner: (u64, u64),
    layout: Arc<NetLayout>,
    encoders: Vec<EncoderCache<T>>,
    decoders: Vec<DecoderCache<T>>,
    head_in: Volume<T>,
    probs: Volume<T>,
}

impl<T: Real> TapeState<T> {
    pub fn probs(&self) -> &Volume<T> {
        &self.probs
    }
}

fn check_input<T: Real>(p: &NetParams<T>, x: &Volume<T>) -> Result<()> {
    let cfg = p.config();
    if x.channels() != cfg.in_channels {
        return Err(Error::mismatch(format!(
            "network expects {} input channels, got {}",
            cfg.in_channels,
            x.channels()
        )));
    }
    let div = cfg.required_divisor();
    if !x.shape().divisible_by(div) {
        return Err(Error::invalid(format!(
            "input {} must be divisible by {div} along every axis ({} stages)",
            x.shape(),
            cfg.num_stages
        )));
    }
    Ok(())
}

/// Full forward pass. Returns two-channel probabilities (background,
/// lesion) of the input's spatial size plus the tape for [`backward`].
pub fn forward<T: Real>(p: &NetParams<T>, x: &Volume<T>) -> Result<(Volume<T>, TapeState<T>)> {
    check_input(p, x)?;
    let stages = p.config().num_stages;
    let mut features = Vec::with_capacity(stages);
    let mut enc_caches = Vec::with_capacity(stages);
    let mut cur = x.clone();
    for s in 1..=stages {
        let (f, pooled, cache) = encoder_stage_forward(p, s, &cur, s < stages)?;
        enc_caches.push(cache);
        if let Some(pl) = pooled {
            cur = pl;
        }
        features.push(f);
    }
    let mut y = features.pop().expect("at least two stages");
    let mut dec_caches = Vec::with_capacity(stages - 1);
    for d in p.layout().decoders.clone() {
        let skip = d.dsa.map(|_| &features[d.level - 1]);
        let (out, cache) = decoder_stage_forward(p, d.level, &y, skip)?;
        dec_caches.push(cache);
        y = out;
    }
    let head = p.layout().head;
    let logits = conv(p, &head, &y)?;
    let probs = ops::softmax2(&logits)?;
    let tape = TapeState {
        owner: p.stamp(),
        layout: p.layout_arc(),
        encoders: enc_caches,
        decoders: dec_caches,
        head_in: y,
        probs: probs.clone(),
    };
    Ok((probs, tape))
}

/// Reverse-mode gradients of every parameter given `dL/dprobs`.
pub fn backward<T: Real>(
    p: &NetParams<T>,
    tape: &TapeState<T>,
    grad_probs: &Volume<T>,
) -> Result<ParamGrads<T>> {
    if tape.owner != p.stamp() || *tape.layout != *p.layout() {
        return Err(Error::StaleTape);
    }
    if grad_probs.channels() != OUT_CHANNELS || grad_probs.shape() != tape.probs.shape() {
        return Err(Error::mismatch(format!(
            "upstream gradient {}x{} does not match output {}x{}",
            grad_probs.channels(),
            grad_probs.shape(),
            OUT_CHANNELS,
            tape.probs.shape()
        )));
    }
    let mut g = p.zeros_like();
    let stages = p.config().num_stages;
    let dlogits = ops::softmax2_backward(&tape.probs, grad_probs);
    let mut dy = conv_back(p, &p.layout().head, &tape.head_in, &dlogits, &mut g);

    // gradient w.r.t. encoder features, indexed by level - 1
    let mut dfeat: Vec<Option<Volume<T>>> = vec![None; stages];
    let decoders = p.layout().decoders.clone();
    for (d, cache) in decoders.iter().zip(&tape.decoders).rev() {
        let (dx, dskip) = decoder_stage_backward(p, d.level, cache, &dy, &mut g)?;
        if let Some(ds) = dskip {
            dfeat[d.level - 1] = Some(ds);
        }
        dy = dx;
    }
    // dy is now the gradient of the bottleneck features
    dfeat[stages - 1] = Some(dy);
    let mut dpooled: Option<Volume<T>> = None;
    for s in (1..=stages).rev() {
        let dx = encoder_stage_backward(
            p,
            s,
            &tape.encoders[s - 1],
            dfeat[s - 1].as_ref(),
            dpooled.as_ref(),
            &mut g,
        );
        dpooled = Some(dx);
    }
    Ok(g)
}

/// Forward pass without keeping anything for backward.
pub fn predict<T: Real>(p: &NetParams<T>, x: &Volume<T>) -> Result<Volume<T>> {
    forward(p, x).map(|(probs, _)| probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vol(seed: u64, c: usize, s: Shape3) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_vec(c, s, (0..c * s.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn softmax_output_sums_to_one() {
        let p = init_params::<f32>(&NetConfig::tiny(), 0).unwrap();
        let x = rand_vol(1, 2, Shape3::cube(8)).cast::<f32>();
        let (probs, _) = forward(&p, &x).unwrap();
        assert_eq!(probs.shape(), x.shape());
        let n = probs.voxels();
        for i in 0..n {
            let (a, b) = (probs.data()[i], probs.data()[n + i]);
            assert!((a + b - 1.0).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let p = init_params::<f32>(&NetConfig::default(), 0).unwrap();
        let x = Volume::<f32>::zeros(2, Shape3::new(8, 8, 6).unwrap());
        let err = forward(&p, &x).unwrap_err().to_string();
        assert!(err.contains("divisible by 4"), "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = NetConfig::default();
        let x = rand_vol(2, 2, Shape3::cube(8)).cast::<f32>();
        let a = predict(&init_params::<f32>(&cfg, 5).unwrap(), &x).unwrap();
        let b = predict(&init_params::<f32>(&cfg, 5).unwrap(), &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn stale_tape_rejected() {
        let mut p = init_params::<f64>(&NetConfig::tiny(), 0).unwrap();
        let x = rand_vol(3, 2, Shape3::cube(4));
        let (probs, tape) = forward(&p, &x).unwrap();
        let g = Volume::zeros(2, probs.shape());
        assert!(backward(&p, &tape, &g).is_ok());
        let q = p.clone();
        assert!(matches!(backward(&q, &tape, &g), Err(Error::StaleTape)));
        p.tensors_mut()[0][0] += 1.0;
        assert!(matches!(backward(&p, &tape, &g), Err(Error::StaleTape)));
    }

    #[test]
    fn backward_is_linear() {
        let p = init_params::<f64>(&NetConfig::tiny(), 4).unwrap();
        let x = rand_vol(5, 2, Shape3::cube(4));
        let (probs, tape) = forward(&p, &x).unwrap();
        let zero = backward(&p, &tape, &Volume::zeros(2, probs.shape())).unwrap();
        assert!(zero.tensors.iter().flatten().all(|&v| v == 0.0));
        let r = rand_vol(6, 2, probs.shape());
        let g1 = backward(&p, &tape, &r).unwrap();
        let mut r2 = r.clone();
        r2.scale(2.0);
        let g2 = backward(&p, &tape, &r2).unwrap();
        for (a, b) in g1.tensors.iter().flatten().zip(g2.tensors.iter().flatten()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn decoder_without_skip_uses_upsampled_only() {
        let cfg = NetConfig {
            attn_start_stage: 2,
            ..NetConfig::tiny()
        };
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let d = p.layout().decoders[0];
        assert!(d.dsa.is_none());
        assert_eq!(d.block.proj.c_in, cfg.stage_channels(1));
        let x = rand_vol(1, cfg.stage_channels(2), Shape3::cube(2));
        let (y, _) = decoder_stage_forward(&p, 1, &x, None).unwrap();
        assert_eq!(y.channels(), 4);
        assert_eq!(y.shape(), Shape3::cube(4));

        let with = init_params::<f64>(&NetConfig::tiny(), 1).unwrap();
        assert_eq!(with.layout().decoders[0].block.proj.c_in, 8);
        assert!(decoder_stage_forward(&with, 1, &x, None).is_err());
    }

    #[test]
    fn odd_dims_rejected_by_pooling_stage() {
        let p = init_params::<f64>(&NetConfig::tiny(), 0).unwrap();
        let x = rand_vol(0, 2, Shape3::new(3, 4, 4).unwrap());
        assert!(encoder_stage_forward(&p, 1, &x, true).is_err());
    }
}
