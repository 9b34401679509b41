//! Dual self-attention on skip connections.
//!
//! Tokens are the `N = d*h*w` spatial positions, each a `C`-vector. Both
//! branches share one query and one key projection into `r` dimensions:
//!
//! * spatial branch: `A = softmax_rows(Q K^T / sqrt(r))` (N x N) applied to
//!   `Vs = X Wvs` (N x r);
//! * channel branch: `B = softmax_rows(Q^T K / sqrt(N))` (r x r), an
//!   affinity between reduced query and key channels, applied to
//!   `Vc = X Wvc` along the channel axis: `Oc = Vc B^T`.
//!
//! Each branch is projected back to `C` and added to the input:
//! `Y = X + Os Wos + Oc Woc`. No positional encoding is used.

use super::ops::dot;
use crate::volume::{Real, Volume};

/// `C = A B` with `A: m x k`, `B: k x n`, all row-major.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C = A^T B` with `A: k x m`, `B: k x n`.
pub(crate) fn matmul_tn<T: Real>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            for (cv, &bv) in c[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `C = A B^T` with `A: m x k`, `B: n x k`.
pub(crate) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
    c
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_mut(cols) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
}

/// `dS = A * (dA - rowsum(dA * A)) * scale`
fn softmax_rows_backward<T: Real>(a: &[T], da: &[T], cols: usize, scale: T) -> Vec<T> {
    let mut ds = vec![T::zero(); a.len()];
    for ((row, drow), out) in a.chunks(cols).zip(da.chunks(cols)).zip(ds.chunks_mut(cols)) {
        let dot = row.iter().zip(drow).map(|(&x, &y)| x * y).sum::<T>();
        for ((o, &x), &y) in out.iter_mut().zip(row).zip(drow) {
            *o = x * (y - dot) * scale;
        }
    }
    ds
}

/// Borrowed DSA weights.
#[derive(Debug, Clone, Copy)]
pub struct DsaWeights<'a, T> {
    pub wq: &'a [T],
    pub wk: &'a [T],
    pub wvs: &'a [T],
    pub wvc: &'a [T],
    pub wos: &'a [T],
    pub woc: &'a [T],
    pub reduced: usize,
}

/// Mutable gradient buffers matching [`DsaWeights`].
pub struct DsaGrads<'a, T> {
    pub wq: &'a mut [T],
    pub wk: &'a mut [T],
    pub wvs: &'a mut [T],
    pub wvc: &'a mut [T],
    pub wos: &'a mut [T],
    pub woc: &'a mut [T],
}

#[derive(Debug, Clone)]
pub struct DsaCache<T> {
    x: Volume<T>,
    q: Vec<T>,
    k: Vec<T>,
    vs: Vec<T>,
    vc: Vec<T>,
    /// Row-stochastic spatial attention, N x N.
    pub spatial_attn: Vec<T>,
    /// Row-stochastic channel affinity, r x r.
    pub channel_attn: Vec<T>,
    os: Vec<T>,
    oc: Vec<T>,
}

pub fn dsa_forward<T: Real>(x: &Volume<T>, w: &DsaWeights<'_, T>) -> (Volume<T>, DsaCache<T>) {
    let c = x.channels();
    let n = x.voxels();
    let r = w.reduced;
    let xt = x.data();
    let q = matmul_tn(xt, w.wq, c, n, r);
    let k = matmul_tn(xt, w.wk, c, n, r);
    let vs = matmul_tn(xt, w.wvs, c, n, r);
    let vc = matmul_tn(xt, w.wvc, c, n, r);

    let alpha_s = T::of(1.0 / (r as f64).sqrt());
    // token-major N x r operands are transposed so the N-long axis is innermost
    let kt = transpose(&k, n, r);
    let mut a = matmul(&q, &kt, n, r, n);
    for v in a.iter_mut() {
        *v *= alpha_s;
    }
    softmax_rows(&mut a, n);
    let os = transpose(&matmul_nt(&transpose(&vs, n, r), &a, r, n, n), r, n);

    let alpha_c = T::of(1.0 / (n as f64).sqrt());
    let mut b = matmul_tn(&q, &k, n, r, r);
    for v in b.iter_mut() {
        *v *= alpha_c;
    }
    softmax_rows(&mut b, r);
    let oc = matmul_nt(&vc, &b, n, r, r);

    let ys = matmul(&os, w.wos, n, r, c);
    let yc = matmul(&oc, w.woc, n, r, c);
    let mut y = x.clone();
    {
        let yd = y.data_mut();
        for t in 0..n {
            for ch in 0..c {
                yd[ch * n + t] += ys[t * c + ch] + yc[t * c + ch];
            }
        }
    }
    let cache = DsaCache {
        x: x.clone(),
        q,
        k,
        vs,
        vc,
        spatial_attn: a,
        channel_attn: b,
        os,
        oc,
    };
    (y, cache)
}

pub fn dsa_backward<T: Real>(
    cache: &DsaCache<T>,
    w: &DsaWeights<'_, T>,
    dy: &Volume<T>,
    g: DsaGrads<'_, T>,
) -> Volume<T> {
    let x = &cache.x;
    let c = x.channels();
    let n = x.voxels();
    let r = w.reduced;
    let dy_tok = transpose(dy.data(), c, n); // N x C

    let add = |dst: &mut [T], src: &[T]| {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    };

    add(g.wos, &matmul_tn(&cache.os, &dy_tok, n, r, c));
    add(g.woc, &matmul_tn(&cache.oc, &dy_tok, n, r, c));
    let dos = matmul_nt(&dy_tok, w.wos, n, c, r);
    let doc = matmul_nt(&dy_tok, w.woc, n, c, r);

    let da = matmul(&dos, &transpose(&cache.vs, n, r), n, r, n);
    let dvs = transpose(
        &matmul(&transpose(&dos, n, r), &cache.spatial_attn, r, n, n),
        r,
        n,
    );
    let dvc = matmul(&doc, &cache.channel_attn, n, r, r);
    let db = matmul_tn(&doc, &cache.vc, n, r, r);

    let alpha_s = T::of(1.0 / (r as f64).sqrt());
    let alpha_c = T::of(1.0 / (n as f64).sqrt());
    let ds = softmax_rows_backward(&cache.spatial_attn, &da, n, alpha_s);
    let dg = softmax_rows_backward(&cache.channel_attn, &db, r, alpha_c);

    let mut dq = transpose(&matmul_nt(&transpose(&cache.k, n, r), &ds, r, n, n), r, n);
    add(&mut dq, &matmul_nt(&cache.k, &dg, n, r, r));
    let mut dk = transpose(&matmul(&transpose(&cache.q, n, r), &ds, r, n, n), r, n);
    add(&mut dk, &matmul(&cache.q, &dg, n, r, r));

    let xt = x.data();
    add(g.wq, &matmul(xt, &dq, c, n, r));
    add(g.wk, &matmul(xt, &dk, c, n, r));
    add(g.wvs, &matmul(xt, &dvs, c, n, r));
    add(g.wvc, &matmul(xt, &dvc, c, n, r));

    // dX^T (C x N) = W dProj^T for each projection, plus the residual path
    let mut dx = dy.clone();
    let dxd = dx.data_mut();
    for (wm, dm) in [(w.wq, &dq), (w.wk, &dk), (w.wvs, &dvs), (w.wvc, &dvc)] {
        add(dxd, &matmul_nt(wm, dm, c, r, n));
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Shape3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c = matmul(&a, &b, 2, 3, 4);
        let at = transpose(&a, 2, 3);
        let c2 = matmul_tn(&at, &b, 3, 2, 4);
        let bt = transpose(&b, 3, 4);
        let c3 = matmul_nt(&a, &bt, 2, 3, 4);
        for i in 0..8 {
            assert!((c[i] - c2[i]).abs() < 1e-14);
            assert!((c[i] - c3[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_value_paths_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Shape3::cube(2);
        let x = Volume::from_vec(4, s, (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let wq: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let wk: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let zeros = vec![0.0; 8];
        let w = DsaWeights {
            wq: &wq,
            wk: &wk,
            wvs: &zeros,
            wvc: &zeros,
            wos: &zeros,
            woc: &zeros,
            reduced: 2,
        };
        let (y, cache) = dsa_forward(&x, &w);
        assert_eq!(y, x);
        for row in cache.spatial_attn.chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        for row in cache.channel_attn.chunks(2) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
