//! Binary morphology and connected-component cleanup of prediction masks.
//!
//! The default chain is dilate, erode, hole fill, label, size filter.
//! Note that dilation followed by erosion is a morphological closing;
//! [`PostprocConfig::true_opening`] swaps the order to erode-then-dilate.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, LabelMap, Shape3};

/// Structuring element: active offsets inside an odd-sized box.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StructElem {
    shape: Shape3,
    offsets: Vec<[isize; 3]>,
}

impl StructElem {
    /// Full `n x n x n` cube, `n` odd.
    pub fn cube(n: usize) -> Result<Self> {
        Self::full(Shape3::cube(n))
    }

    pub fn full(shape: Shape3) -> Result<Self> {
        Self::from_fn(shape, |_| true)
    }

    /// Element whose active offsets satisfy `keep`. Offsets are relative
    /// to the centre of `shape`.
    pub fn from_fn(shape: Shape3, mut keep: impl FnMut([isize; 3]) -> bool) -> Result<Self> {
        if shape.dims().iter().any(|&n| n == 0 || n % 2 == 0) {
            return Err(Error::InvalidShape {
                d: shape.d,
                h: shape.h,
                w: shape.w,
                reason: "structuring element extents must be odd",
            });
        }
        let r = shape.dims().map(|n| (n / 2) as isize);
        let mut offsets = Vec::new();
        for a in -r[0]..=r[0] {
            for b in -r[1]..=r[1] {
                for c in -r[2]..=r[2] {
                    if keep([a, b, c]) {
                        offsets.push([a, b, c]);
                    }
                }
            }
        }
        Ok(StructElem { shape, offsets })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn offsets(&self) -> &[[isize; 3]] {
        &self.offsets
    }

    /// Offsets without the centre, used as a neighbourhood.
    fn neighbours(&self) -> impl Iterator<Item = [isize; 3]> + '_ {
        self.offsets.iter().copied().filter(|o| *o != [0, 0, 0])
    }
}

fn shifted(s: Shape3, idx: usize, o: [isize; 3]) -> Option<usize> {
    let (i, j, k) = s.coords(idx);
    let (a, b, c) = (i as isize + o[0], j as isize + o[1], k as isize + o[2]);
    s.contains(a, b, c).then(|| s.offset(a as usize, b as usize, c as usize))
}

/// `out[v] = 1` iff `m[v - o] = 1` for some offset `o` of the element.
pub fn dilate(m: &BinaryMask, e: &StructElem) -> BinaryMask {
    let s = m.shape();
    let mut out = BinaryMask::zeros(s);
    for idx in (0..s.len()).filter(|&i| m.at(i)) {
        for &o in e.offsets() {
            if let Some(t) = shifted(s, idx, o) {
                out.set_at(t, true);
            }
        }
    }
    out
}

/// `out[v] = 1` iff `m[v + o] = 1` for every offset `o`; voxels outside
/// the volume count as 0.
pub fn erode(m: &BinaryMask, e: &StructElem) -> BinaryMask {
    let s = m.shape();
    let mut out = BinaryMask::zeros(s);
    for idx in (0..s.len()).filter(|&i| m.at(i)) {
        let keep = e
            .offsets()
            .iter()
            .all(|&o| shifted(s, idx, o).is_some_and(|t| m.at(t)));
        out.set_at(idx, keep);
    }
    out
}

/// Fills background components that do not reach the volume border.
/// Background connectivity is given by the element's offsets.
pub fn fill_holes(m: &BinaryMask, e: &StructElem) -> BinaryMask {
    let s = m.shape();
    let [d, h, w] = s.dims();
    let mut outside = vec![false; s.len()];
    let mut queue = VecDeque::new();
    for idx in 0..s.len() {
        let (i, j, k) = s.coords(idx);
        let border = i == 0 || j == 0 || k == 0 || i + 1 == d || j + 1 == h || k + 1 == w;
        if border && !m.at(idx) {
            outside[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        for o in e.neighbours() {
            if let Some(t) = shifted(s, idx, o) {
                if !m.at(t) && !outside[t] {
                    outside[t] = true;
                    queue.push_back(t);
                }
            }
        }
    }
    let mut out = m.clone();
    for (idx, &o) in outside.iter().enumerate() {
        if !o {
            out.set_at(idx, true);
        }
    }
    out
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[parent[x as usize] as usize];
        parent[x as usize] = p;
        x = p;
    }
    x
}

/// 26-connected component labels, numbered 1.. in raster order of each
/// component's first voxel. Background is 0.
pub fn label_components(m: &BinaryMask) -> LabelMap {
    let s = m.shape();
    let n = s.len();
    // provisional roots are voxel indices; union keeps the smaller index
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let back: Vec<[isize; 3]> = StructElem::cube(3)
        .expect("3 is odd")
        .neighbours()
        .filter(|o| (o[0], o[1], o[2]) < (0, 0, 0))
        .collect();
    for idx in (0..n).filter(|&i| m.at(i)) {
        for &o in &back {
            if let Some(t) = shifted(s, idx, o) {
                if m.at(t) {
                    let (a, b) = (find(&mut parent, idx as u32), find(&mut parent, t as u32));
                    let (lo, hi) = (a.min(b), a.max(b));
                    parent[hi as usize] = lo;
                }
            }
        }
    }
    let mut labels = vec![0u32; n];
    let mut next = 0u32;
    for idx in 0..n {
        if !m.at(idx) {
            continue;
        }
        let root = find(&mut parent, idx as u32) as usize;
        if root == idx {
            next += 1;
            labels[idx] = next;
        } else {
            labels[idx] = labels[root];
        }
    }
    LabelMap::new(s, labels).expect("labels are contiguous by construction")
}

/// Keeps clusters with at least `min_voxels` voxels.
pub fn filter_small(lm: &LabelMap, min_voxels: usize) -> BinaryMask {
    let sizes = lm.sizes();
    let data = lm
        .labels()
        .iter()
        .map(|&l| u8::from(l != 0 && sizes[l as usize] >= min_voxels))
        .collect();
    BinaryMask::from_vec(lm.shape(), data).expect("binary by construction")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocConfig {
    /// Cube size of the opening element.
    pub opening_size: usize,
    /// Erode before dilating instead of the default dilate-then-erode.
    pub true_opening: bool,
    /// Cube size of the element defining background connectivity for hole filling.
    pub holefill_size: usize,
    pub min_cluster_voxels: usize,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        PostprocConfig {
            opening_size: 3,
            true_opening: false,
            holefill_size: 5,
            min_cluster_voxels: 50,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, n) in [("opening_size", self.opening_size), ("holefill_size", self.holefill_size)] {
            if n == 0 || n % 2 == 0 {
                return Err(Error::Config {
                    path: format!("postproc.{field}"),
                    message: format!("must be odd and positive, got {n}"),
                });
            }
        }
        Ok(())
    }
}

pub fn postprocess(m: &BinaryMask, cfg: &PostprocConfig) -> Result<BinaryMask> {
    cfg.validate()?;
    let open = StructElem::cube(cfg.opening_size)?;
    let hole = StructElem::cube(cfg.holefill_size)?;
    let opened = if cfg.true_opening {
        dilate(&erode(m, &open), &open)
    } else {
        erode(&dilate(m, &open), &open)
    };
    let filled = fill_holes(&opened, &hole);
    Ok(filter_small(&label_components(&filled), cfg.min_cluster_voxels))
}
