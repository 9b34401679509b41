//! Layer primitives with explicit backward passes.
//!
//! Convolutions are cross-correlations (no kernel flip). Kernels are laid
//! out `[c_out, c_in, k, k, k]`; transposed convolutions `[c_in, c_out, 2, 2, 2]`.

use crate::error::{Error, Result};
use crate::volume::{Real, Shape3, Volume};

/// Zero-padded copy of every channel with `pad` voxels on each side.
fn pad_channels<T: Real>(x: &[T], channels: usize, s: Shape3, pad: usize) -> (Vec<T>, [usize; 3]) {
    let pd = [s.d + 2 * pad, s.h + 2 * pad, s.w + 2 * pad];
    let plen = pd[0] * pd[1] * pd[2];
    let mut out = vec![T::zero(); channels * plen];
    let n = s.len();
    for c in 0..channels {
        for i in 0..s.d {
            for j in 0..s.h {
                let src = c * n + (i * s.h + j) * s.w;
                let dst = c * plen + ((i + pad) * pd[1] + j + pad) * pd[2] + pad;
                out[dst..dst + s.w].copy_from_slice(&x[src..src + s.w]);
            }
        }
    }
    (out, pd)
}

/// Inverse of [`pad_channels`]: copies the interior back out.
fn unpad_into<T: Real>(p: &[T], channels: usize, s: Shape3, pad: usize, pd: [usize; 3], out: &mut [T]) {
    let plen = pd[0] * pd[1] * pd[2];
    let n = s.len();
    for c in 0..channels {
        for i in 0..s.d {
            for j in 0..s.h {
                let src = c * plen + ((i + pad) * pd[1] + j + pad) * pd[2] + pad;
                let dst = c * n + (i * s.h + j) * s.w;
                out[dst..dst + s.w].copy_from_slice(&p[src..src + s.w]);
            }
        }
    }
}

/// Flat offsets of every kernel tap in the padded grid, plus the span of
/// padded indices that covers all interior voxels.
fn tap_offsets(k: usize, pad: usize, s: Shape3, pd: [usize; 3]) -> (Vec<isize>, usize, usize) {
    let (ph, pw) = (pd[1] as isize, pd[2] as isize);
    let p = pad as isize;
    let mut offs = Vec::with_capacity(k * k * k);
    for a in 0..k as isize {
        for b in 0..k as isize {
            for c in 0..k as isize {
                offs.push(((a - p) * ph + (b - p)) * pw + (c - p));
            }
        }
    }
    let start = (pad * pd[1] + pad) * pd[2] + pad;
    let end = ((s.d - 1 + pad) * pd[1] + s.h - 1 + pad) * pd[2] + s.w - 1 + pad + 1;
    (offs, start, end)
}

/// Sum with eight independent lanes (fixed order, so deterministic).
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().copied().fold(T::zero(), |s, v| s + v) + tail
}

/// Same-size 3D convolution with an odd cubic kernel of side `k` and
/// zero padding `k / 2`.
///
/// Works on a zero-padded copy so every tap is a constant flat offset;
/// halo positions inside the computed span are discarded.
pub fn conv3d_forward<T: Real>(
    x: &Volume<T>,
    kernel: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    k: usize,
) -> Result<Volume<T>> {
    let c_in = x.channels();
    if k.is_multiple_of(2) || kernel.len() != c_out * c_in * k * k * k {
        return Err(Error::mismatch(format!(
            "kernel of {} values does not fit {c_out}x{c_in}x{k}^3",
            kernel.len()
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::mismatch("bias length differs from output channels"));
        }
    }
    let s = x.shape();
    let pad = k / 2;
    let (xp, pd) = pad_channels(x.data(), c_in, s, pad);
    let plen = pd[0] * pd[1] * pd[2];
    let (offs, start, end) = tap_offsets(k, pad, s, pd);
    let kk = offs.len();
    let mut outp = vec![T::zero(); c_out * plen];
    for co in 0..c_out {
        let dst = &mut outp[co * plen + start..co * plen + end];
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..c_in {
            let src = &xp[ci * plen..(ci + 1) * plen];
            for (t, &off) in offs.iter().enumerate() {
                let wv = kernel[(co * c_in + ci) * kk + t];
                let lo = (start as isize + off) as usize;
                let srow = &src[lo..lo + (end - start)];
                for (d, &v) in dst.iter_mut().zip(srow) {
                    *d += wv * v;
                }
            }
        }
    }
    let mut out = Volume::zeros(c_out, s);
    unpad_into(&outp, c_out, s, pad, pd, out.data_mut());
    Ok(out)
}

/// Gradients of [`conv3d_forward`]: returns `dx` and accumulates into
/// `dkernel` / `dbias`.
pub fn conv3d_backward<T: Real>(
    x: &Volume<T>,
    kernel: &[T],
    dout: &Volume<T>,
    k: usize,
    dkernel: &mut [T],
    dbias: Option<&mut [T]>,
) -> Volume<T> {
    let c_in = x.channels();
    let c_out = dout.channels();
    let s = x.shape();
    let pad = k / 2;
    if let Some(db) = dbias {
        for co in 0..c_out {
            db[co] += dout.channel(co).iter().copied().sum::<T>();
        }
    }
    let (xp, pd) = pad_channels(x.data(), c_in, s, pad);
    // halo entries of the padded upstream gradient stay zero, which masks
    // out the discarded positions of the forward span
    let (gp, _) = pad_channels(dout.data(), c_out, s, pad);
    let plen = pd[0] * pd[1] * pd[2];
    let (offs, start, end) = tap_offsets(k, pad, s, pd);
    let kk = offs.len();
    let span = end - start;
    let mut dxp = vec![T::zero(); c_in * plen];
    for co in 0..c_out {
        let g = &gp[co * plen + start..co * plen + end];
        for ci in 0..c_in {
            let src = &xp[ci * plen..(ci + 1) * plen];
            let dst = &mut dxp[ci * plen..(ci + 1) * plen];
            for (t, &off) in offs.iter().enumerate() {
                let widx = (co * c_in + ci) * kk + t;
                let wv = kernel[widx];
                let lo = (start as isize + off) as usize;
                dkernel[widx] += dot(g, &src[lo..lo + span]);
                for (d, &gv) in dst[lo..lo + span].iter_mut().zip(g) {
                    *d += wv * gv;
                }
            }
        }
    }
    let mut dx = Volume::zeros(c_in, s);
    unpad_into(&dxp, c_in, s, pad, pd, dx.data_mut());
    dx
}

/// Per-channel statistics kept for the instance-norm backward pass.
#[derive(Debug, Clone)]
pub struct NormCache<T> {
    pub xhat: Volume<T>,
    pub inv_std: Vec<T>,
}

pub const NORM_EPS: f64 = 1e-5;

/// Instance normalization over each channel's full spatial extent.
pub fn instance_norm_forward<T: Real>(
    x: &Volume<T>,
    scale: &[T],
    shift: &[T],
    eps: f64,
) -> Result<(Volume<T>, NormCache<T>)> {
    let c = x.channels();
    if scale.len() != c || shift.len() != c {
        return Err(Error::mismatch(format!(
            "norm parameters of length {}/{} for {c} channels",
            scale.len(),
            shift.len()
        )));
    }
    let n = x.voxels();
    let nf = n as f64;
    let mut y = Volume::zeros(c, x.shape());
    let mut xhat = Volume::zeros(c, x.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let src = x.channel(ch);
        let mean = src.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
        let var = src
            .iter()
            .map(|v| {
                let d = v.as_f64() - mean;
                d * d
            })
            .sum::<f64>()
            / nf;
        let is = T::of(1.0 / (var + eps).sqrt());
        let m = T::of(mean);
        inv_std.push(is);
        let xh = xhat.channel_mut(ch);
        for (h, &v) in xh.iter_mut().zip(src) {
            *h = (v - m) * is;
        }
        let (g, b) = (scale[ch], shift[ch]);
        for (o, &h) in y.channel_mut(ch).iter_mut().zip(xhat.channel(ch)) {
            *o = h * g + b;
        }
    }
    Ok((y, NormCache { xhat, inv_std }))
}

pub fn instance_norm_backward<T: Real>(
    cache: &NormCache<T>,
    scale: &[T],
    dy: &Volume<T>,
    dscale: &mut [T],
    dshift: &mut [T],
) -> Volume<T> {
    let c = dy.channels();
    let n = dy.voxels();
    let nt = T::of(n as f64);
    let mut dx = Volume::zeros(c, dy.shape());
    for ch in 0..c {
        let g = dy.channel(ch);
        let xh = cache.xhat.channel(ch);
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&gv, &hv) in g.iter().zip(xh) {
            sum_g += gv;
            sum_gx += gv * hv;
        }
        dshift[ch] += sum_g;
        dscale[ch] += sum_gx;
        // with dxhat = scale * dy:
        // dx = inv_std / n * (n dxhat - sum(dxhat) - xhat sum(dxhat xhat))
        let k = scale[ch] * cache.inv_std[ch] / nt;
        for ((o, &gv), &hv) in dx.channel_mut(ch).iter_mut().zip(g).zip(xh) {
            *o = k * (nt * gv - sum_g - hv * sum_gx);
        }
    }
    dx
}

pub fn leaky_relu<T: Real>(x: &Volume<T>, slope: f64) -> Volume<T> {
    let s = T::of(slope);
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= T::zero() {
            *v = *v * s;
        }
    }
    y
}

/// Backward of [`leaky_relu`] given the pre-activation input.
pub fn leaky_relu_backward<T: Real>(x: &Volume<T>, dy: &Volume<T>, slope: f64) -> Volume<T> {
    let s = T::of(slope);
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *d = *d * s;
        }
    }
    dx
}

/// 2x2x2 max-pooling with stride 2. Returns the pooled volume and the
/// linear source index of each output (first maximum wins on ties).
pub fn max_pool2<T: Real>(x: &Volume<T>) -> Result<(Volume<T>, Vec<u32>)> {
    let s = x.shape();
    if !s.divisible_by(2) {
        return Err(Error::invalid(format!(
            "max-pooling needs even spatial dims, got {s}"
        )));
    }
    let o = Shape3::new(s.d / 2, s.h / 2, s.w / 2)?;
    let c = x.channels();
    let mut out = Volume::zeros(c, o);
    let mut arg = vec![0u32; c * o.len()];
    let n = s.len();
    for ch in 0..c {
        let src = x.channel(ch);
        for i in 0..o.d {
            for j in 0..o.h {
                for k in 0..o.w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                let idx = s.offset(2 * i + a, 2 * j + b, 2 * k + cc);
                                if src[idx] > best {
                                    best = src[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    let oi = ch * o.len() + o.offset(i, j, k);
                    out.data_mut()[oi] = best;
                    arg[oi] = (ch * n + best_idx) as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool2_backward<T: Real>(
    input_shape: Shape3,
    channels: usize,
    argmax: &[u32],
    dy: &Volume<T>,
) -> Volume<T> {
    let mut dx = Volume::zeros(channels, input_shape);
    let d = dx.data_mut();
    for (&a, &g) in argmax.iter().zip(dy.data()) {
        d[a as usize] += g;
    }
    dx
}

/// Transposed convolution with a 2x2x2 kernel and stride 2 (doubles every axis).
pub fn deconv2_forward<T: Real>(
    x: &Volume<T>,
    kernel: &[T],
    bias: &[T],
    c_out: usize,
) -> Result<Volume<T>> {
    let c_in = x.channels();
    if kernel.len() != c_in * c_out * 8 || bias.len() != c_out {
        return Err(Error::mismatch(format!(
            "deconv parameters do not fit {c_in}->{c_out}"
        )));
    }
    let s = x.shape();
    let o = Shape3::new(2 * s.d, 2 * s.h, 2 * s.w)?;
    let mut out = Volume::zeros(c_out, o);
    let on = o.len();
    let od = out.data_mut();
    for co in 0..c_out {
        od[co * on..(co + 1) * on].fill(bias[co]);
    }
    for ci in 0..c_in {
        let src = x.channel(ci);
        for co in 0..c_out {
            let w = &kernel[(ci * c_out + co) * 8..(ci * c_out + co + 1) * 8];
            let dst = &mut od[co * on..(co + 1) * on];
            for i in 0..s.d {
                for j in 0..s.h {
                    for k in 0..s.w {
                        let v = src[s.offset(i, j, k)];
                        for a in 0..2 {
                            for b in 0..2 {
                                let base = o.offset(2 * i + a, 2 * j + b, 2 * k);
                                dst[base] += w[(a * 2 + b) * 2] * v;
                                dst[base + 1] += w[(a * 2 + b) * 2 + 1] * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn deconv2_backward<T: Real>(
    x: &Volume<T>,
    kernel: &[T],
    dout: &Volume<T>,
    dkernel: &mut [T],
    dbias: &mut [T],
) -> Volume<T> {
    let c_in = x.channels();
    let c_out = dout.channels();
    let s = x.shape();
    let o = dout.shape();
    for co in 0..c_out {
        dbias[co] += dout.channel(co).iter().copied().sum::<T>();
    }
    let mut dx = Volume::zeros(c_in, s);
    for ci in 0..c_in {
        let src = x.channel(ci);
        for co in 0..c_out {
            let widx = (ci * c_out + co) * 8;
            let w = &kernel[widx..widx + 8];
            let g = dout.channel(co);
            let mut dw = [T::zero(); 8];
            let dxc = &mut dx.data_mut()[ci * s.len()..(ci + 1) * s.len()];
            for i in 0..s.d {
                for j in 0..s.h {
                    for k in 0..s.w {
                        let si = s.offset(i, j, k);
                        let v = src[si];
                        let mut acc = T::zero();
                        for a in 0..2 {
                            for b in 0..2 {
                                for c in 0..2 {
                                    let t = (a * 2 + b) * 2 + c;
                                    let gv = g[o.offset(2 * i + a, 2 * j + b, 2 * k + c)];
                                    acc += w[t] * gv;
                                    dw[t] += v * gv;
                                }
                            }
                        }
                        dxc[si] += acc;
                    }
                }
            }
            for t in 0..8 {
                dkernel[widx + t] += dw[t];
            }
        }
    }
    dx
}

/// Two-class softmax over the channel axis at every voxel.
pub fn softmax2<T: Real>(logits: &Volume<T>) -> Result<Volume<T>> {
    if logits.channels() != 2 {
        return Err(Error::invalid("softmax head expects two channels"));
    }
    let n = logits.voxels();
    let mut out = Volume::zeros(2, logits.shape());
    let (l0, l1) = logits.data().split_at(n);
    let (p0, p1) = out.data_mut().split_at_mut(n);
    for i in 0..n {
        // numerically stable form of 1 / (1 + exp(z0 - z1))
        let d = l1[i] - l0[i];
        let (a, b) = if d >= T::zero() {
            let e = (-d).exp();
            (e / (T::one() + e), T::one() / (T::one() + e))
        } else {
            let e = d.exp();
            (T::one() / (T::one() + e), e / (T::one() + e))
        };
        p0[i] = a;
        p1[i] = b;
    }
    Ok(out)
}

pub fn softmax2_backward<T: Real>(probs: &Volume<T>, dprobs: &Volume<T>) -> Volume<T> {
    let n = probs.voxels();
    let mut dz = Volume::zeros(2, probs.shape());
    let (p0, p1) = probs.data().split_at(n);
    let (g0, g1) = dprobs.data().split_at(n);
    let (z0, z1) = dz.data_mut().split_at_mut(n);
    for i in 0..n {
        let dot = p0[i] * g0[i] + p1[i] * g1[i];
        z0[i] = p0[i] * (g0[i] - dot);
        z1[i] = p1[i] * (g1[i] - dot);
    }
    dz
}

/// Stack the channels of `a` then `b`.
pub fn concat_channels<T: Real>(a: &Volume<T>, b: &Volume<T>) -> Result<Volume<T>> {
    if a.shape() != b.shape() {
        return Err(Error::mismatch(format!(
            "cannot concatenate {} with {}",
            a.shape(),
            b.shape()
        )));
    }
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Volume::from_vec(a.channels() + b.channels(), a.shape(), data)
}

pub fn split_channels<T: Real>(x: &Volume<T>, first: usize) -> (Volume<T>, Volume<T>) {
    let n = x.voxels();
    let (a, b) = x.data().split_at(first * n);
    (
        Volume::from_vec(first, x.shape(), a.to_vec()).expect("split shape"),
        Volume::from_vec(x.channels() - first, x.shape(), b.to_vec()).expect("split shape"),
    )
}
