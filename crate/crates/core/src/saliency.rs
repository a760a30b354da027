//! Latent-to-spatial saliency mapping.
//!
//! Each latent token is collapsed to a scalar by a max over the embedding
//! dimension, and that scalar is broadcast to the token's p³ voxel block at
//! its original grid position — the exact inverse layout of patchification.
//! The result is a single-channel volume aligned with the input, piecewise
//! constant per block.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;
use crate::volume3d::{unpatchify, PatchGeometry};

/// A saliency volume `[N, 1, H, W, L]` plus the geometry it was built from
/// and, once normalized, the per-item (min, max) used for display scaling.
pub struct SaliencyVolume {
    pub values: Tensor,
    pub geometry: PatchGeometry,
    pub norm: Option<Vec<(f64, f64)>>,
}

/// Projects latent tokens `z: [N, T, E]` to a saliency volume: block t gets
/// max_e z[n, t, e]. `T` must match the token grid of `geom`.
pub fn latent_to_spatial(z: &Tensor, p: usize, geom: &PatchGeometry) -> Result<SaliencyVolume> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("latents must be [N, T, E], got {s:?}")));
    }
    let (n, t, e) = (s[0], s[1], s[2]);
    let (gl, gh, gw) = geom.grid;
    if t != gl * gh * gw || p != geom.patch {
        return Err(Error::Geometry(format!(
            "token count {t} does not factor as {gl}·{gh}·{gw} with patch {p}"
        )));
    }
    // max over embedding, then broadcast each scalar to a constant token row
    // and let unpatchify place the blocks
    let pd = p * p * p;
    let mut tokens = vec![0.0; n * t * pd];
    for ni in 0..n {
        for ti in 0..t {
            let row = &z.data()[(ni * t + ti) * e..(ni * t + ti + 1) * e];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            tokens[(ni * t + ti) * pd..(ni * t + ti + 1) * pd].fill(m);
        }
    }
    let sal_geom = PatchGeometry {
        grid: geom.grid,
        patch: p,
        channels: 1,
    };
    let values = unpatchify(&Tensor::new(vec![n, t, pd], tokens)?, &sal_geom)?;
    Ok(SaliencyVolume {
        values,
        geometry: sal_geom,
        norm: None,
    })
}

/// Min-max scales each item of the batch into [0, 1] in place and records
/// the (min, max) pairs. A constant item maps to all zeros.
pub fn normalize_for_display(vol: &mut SaliencyVolume) {
    let s = vol.values.shape().to_vec();
    let per = s[1..].iter().product::<usize>();
    let mut norms = Vec::with_capacity(s[0]);
    for n in 0..s[0] {
        let item = &mut vol.values.data_mut()[n * per..(n + 1) * per];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in item.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let span = hi - lo;
        if span > 0.0 {
            item.iter_mut().for_each(|v| *v = (*v - lo) / span);
        } else {
            item.iter_mut().for_each(|v| *v = 0.0);
        }
        norms.push((lo, hi));
    }
    vol.norm = Some(norms);
}

/// An 8-bit grayscale raster.
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Cuts a 2D slice out of `volume [N, C, H, W, L]` at `index` along the
/// given spatial axis (0 = H, 1 = W, 2 = L). The slice keeps the two
/// remaining axes in their original order. Values are expected in [0, 1].
pub fn extract_slice(
    volume: &Tensor,
    n: usize,
    c: usize,
    axis: usize,
    index: usize,
) -> Result<(usize, usize, Vec<f64>)> {
    let s = volume.shape();
    if s.len() != 5 {
        return Err(Error::Shape(format!("expected [N, C, H, W, L], got {s:?}")));
    }
    let (nn, cc, h, w, l) = (s[0], s[1], s[2], s[3], s[4]);
    if n >= nn || c >= cc || axis > 2 {
        return Err(Error::Domain(format!(
            "slice selector (n={n}, c={c}, axis={axis}) out of range"
        )));
    }
    let extent = [h, w, l][axis];
    if index >= extent {
        return Err(Error::Domain(format!(
            "slice index {index} out of range for axis extent {extent}"
        )));
    }
    let at = |hi: usize, wi: usize, li: usize| {
        volume.data()[(((n * cc + c) * h + hi) * w + wi) * l + li]
    };
    let (rows, cols) = match axis {
        0 => (w, l),
        1 => (h, l),
        _ => (h, w),
    };
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            out.push(match axis {
                0 => at(index, r, q),
                1 => at(r, index, q),
                _ => at(r, q, index),
            });
        }
    }
    Ok((rows, cols, out))
}

fn quantize(vals: &[f64]) -> Vec<u8> {
    vals.iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Renders one slice of a normalized saliency volume, optionally alpha-
/// blended over an anatomy slice of the same dims: (1−α)·anatomy + α·saliency.
pub fn render_slice(
    saliency: &SaliencyVolume,
    n: usize,
    axis: usize,
    index: usize,
    overlay: Option<(&Tensor, usize, f64)>, // (anatomy volume, channel, alpha)
) -> Result<GrayImage> {
    let (rows, cols, sal) = extract_slice(&saliency.values, n, 0, axis, index)?;
    let vals = match overlay {
        None => sal,
        Some((anatomy, channel, alpha)) => {
            let (ar, ac, anat) = extract_slice(anatomy, n, channel, axis, index)?;
            if (ar, ac) != (rows, cols) {
                return Err(Error::Shape(format!(
                    "anatomy slice {ar}x{ac} does not match saliency {rows}x{cols}"
                )));
            }
            anat.iter()
                .zip(&sal)
                .map(|(&a, &s)| (1.0 - alpha) * a + alpha * s)
                .collect()
        }
    };
    Ok(GrayImage {
        width: cols,
        height: rows,
        pixels: quantize(&vals),
    })
}

/// Writes a binary PGM (P5) file.
pub fn write_pgm(path: &Path, image: &GrayImage) -> Result<()> {
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{} {}\n255\n", image.width, image.height)?;
    f.write_all(&image.pixels)?;
    Ok(())
}
