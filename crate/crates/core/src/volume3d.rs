//! 3D patchification, positional embeddings, and random token masking.
//!
//! Volumes are `[N, C, H, W, L]` row-major. A patch size p that divides all
//! three spatial dims cuts the volume into a (l, h, w) grid of p³ blocks:
//!
//! ```text
//! token index   t = (il·gh + ih)·gw + iw          (il slowest, iw fastest)
//! token element e = ((c·p + dz)·p + dy)·p + dx
//! voxel         (n, c, ih·p + dz, iw·p + dy, il·p + dx)
//! ```
//!
//! so each token flattens its block channel-major, then z (along H), y
//! (along W), x (along L). The same layout is assumed by the saliency
//! mapping and the reconstruction path.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numcore::ops;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;
use crate::par;

/// Block layout of a patchified volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Patches per axis as (l, h, w).
    pub grid: (usize, usize, usize),
    /// Edge length of one cubic patch, in voxels.
    pub patch: usize,
    /// Channels per voxel.
    pub channels: usize,
}

impl PatchGeometry {
    pub fn for_dims(channels: usize, h: usize, w: usize, l: usize, p: usize) -> Result<Self> {
        if p == 0 || h % p != 0 || w % p != 0 || l % p != 0 {
            return Err(Error::Geometry(format!(
                "volume {h}x{w}x{l} is not divisible into {p}-voxel patches"
            )));
        }
        Ok(PatchGeometry {
            grid: (l / p, h / p, w / p),
            patch: p,
            channels,
        })
    }

    /// Total token count T = l·h·w.
    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// Flattened size of one token, p³·C.
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.patch * self.channels
    }

    /// Spatial dims (H, W, L) of the full volume.
    pub fn volume_dims(&self) -> (usize, usize, usize) {
        let p = self.patch;
        (self.grid.1 * p, self.grid.2 * p, self.grid.0 * p)
    }
}

/// Cuts `volume: [N, C, H, W, L]` into non-overlapping p³ patches and
/// flattens each to a token row. Lossless; see the module docs for the
/// exact layout.
pub fn patchify(volume: &Tensor, p: usize) -> Result<(Tensor, PatchGeometry)> {
    let s = volume.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!(
            "volume must be [N, C, H, W, L], got {:?}",
            s
        )));
    }
    let (n, c, h, w, l) = (s[0], s[1], s[2], s[3], s[4]);
    let geom = PatchGeometry::for_dims(c, h, w, l, p)?;
    let t = geom.tokens();
    let td = geom.token_dim();
    let (_, gh, gw) = geom.grid;
    let vd = volume.data();
    let mut out = vec![0.0; n * t * td];
    par::for_each_row(&mut out, td, |row_i, row| {
        let (ni, ti) = (row_i / t, row_i % t);
        let il = ti / (gh * gw);
        let ih = (ti / gw) % gh;
        let iw = ti % gw;
        let mut e = 0;
        for ci in 0..c {
            for dz in 0..p {
                for dy in 0..p {
                    let base = (((ni * c + ci) * h + ih * p + dz) * w + iw * p + dy) * l + il * p;
                    row[e..e + p].copy_from_slice(&vd[base..base + p]);
                    e += p;
                }
            }
        }
    });
    let tokens = Tensor::new(vec![n, t, td], out)?;
    Ok((tokens, geom))
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, geom: &PatchGeometry) -> Result<Tensor> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!(
            "tokens must be [N, T, p³·C], got {:?}",
            s
        )));
    }
    let (n, t, td) = (s[0], s[1], s[2]);
    if t != geom.tokens() || td != geom.token_dim() {
        return Err(Error::Geometry(format!(
            "tokens [{n}, {t}, {td}] do not match geometry (T={}, dim={})",
            geom.tokens(),
            geom.token_dim()
        )));
    }
    let (gl, gh, gw) = geom.grid;
    let (p, c) = (geom.patch, geom.channels);
    let (h, w, l) = geom.volume_dims();
    let tok = tokens.data();
    let mut out = vec![0.0; n * c * h * w * l];
    // rows along the L axis are contiguous in both layouts; each output row
    // of length L gathers p-voxel runs from gl different tokens
    par::for_each_row(&mut out, l, |row_i, row| {
        let dy = row_i % w % p;
        let iw = row_i % w / p;
        let dz = row_i / w % h % p;
        let ih = row_i / w % h / p;
        let ci = row_i / (w * h) % c;
        let ni = row_i / (w * h * c);
        for il in 0..gl {
            let ti = (il * gh + ih) * gw + iw;
            let e = ((ci * p + dz) * p + dy) * p;
            let base = (ni * t + ti) * td + e;
            row[il * p..(il + 1) * p].copy_from_slice(&tok[base..base + p]);
        }
    });
    Tensor::new(vec![n, c, h, w, l], out)
}

/// Fixed sinusoidal embedding over the (l, h, w) patch grid, `[T, dim]`.
///
/// The width is split evenly across the three axes; each axis gets
/// sin(pos·ω_i) then cos(pos·ω_i) at geometrically spaced frequencies
/// ω_i = 10000^(−2i/axis_dim). When 6 does not divide `dim` the last few
/// columns stay zero.
pub fn positional_embedding_3d(geom: &PatchGeometry, dim: usize) -> Tensor {
    let t = geom.tokens();
    let (_, gh, gw) = geom.grid;
    let axis_dim = 2 * (dim / 6);
    let half = axis_dim / 2;
    let mut out = vec![0.0; t * dim];
    for ti in 0..t {
        let pos = [
            (ti / (gh * gw)) as f64,       // l
            ((ti / gw) % gh) as f64,       // h
            (ti % gw) as f64,              // w
        ];
        for (a, &pa) in pos.iter().enumerate() {
            for i in 0..half {
                let omega = 10000f64.powf(-((2 * i) as f64) / axis_dim as f64);
                out[ti * dim + a * axis_dim + i] = (pa * omega).sin();
                out[ti * dim + a * axis_dim + half + i] = (pa * omega).cos();
            }
        }
    }
    Tensor::new(vec![t, dim], out).expect("shape/data agree")
}

/// A masking decision over T tokens: which are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    pub fn tokens(&self) -> usize {
        self.masked_idx.len() + self.visible_idx.len()
    }
}

/// Draws round(ratio·T) masked indices uniformly without replacement.
/// Deterministic per seed. Both index lists come back sorted.
pub fn sample_mask(t: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Domain(format!(
            "mask ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let m = (ratio * t as f64).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..t).collect();
    // partial Fisher–Yates: the first m slots become the masked sample
    for i in 0..m.min(t.saturating_sub(1)) {
        let j = rng.gen_range(i..t);
        idx.swap(i, j);
    }
    let mut masked: Vec<usize> = idx[..m].to_vec();
    let mut visible: Vec<usize> = idx[m..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        masked_idx: masked,
        visible_idx: visible,
        seed,
    })
}

/// Keeps only the visible token rows, `[N, T, dim] → [N, V, dim]`, in
/// original relative order.
pub fn gather_visible(tape: &mut Tape, tokens: Var, plan: &MaskPlan) -> Result<Var> {
    let t = tape.value(tokens).shape()[1];
    if plan.tokens() != t {
        return Err(Error::Shape(format!(
            "mask plan covers {} tokens but input has {t}",
            plan.tokens()
        )));
    }
    ops::gather_axis1(tape, tokens, &plan.visible_idx)
}

/// Rebuilds the full sequence: encoded rows return to their original slots
/// and every masked slot receives the (learnable) `mask_token` vector.
pub fn scatter_with_mask_tokens(
    tape: &mut Tape,
    encoded: Var,
    plan: &MaskPlan,
    mask_token: Var,
) -> Result<Var> {
    let v = tape.value(encoded).shape()[1];
    if plan.visible_idx.len() != v {
        return Err(Error::Shape(format!(
            "plan has {} visible slots but input has {v} rows",
            plan.visible_idx.len()
        )));
    }
    ops::scatter_fill(tape, encoded, mask_token, &plan.visible_idx, &plan.masked_idx)
}
