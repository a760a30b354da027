//! Volume file format, preprocessing, augmentation, test-time
//! perturbations, and a synthetic dataset generator.
//!
//! On-disk volume layout ("MV3D", little-endian):
//!
//! ```text
//! magic "MV3D"   4 bytes
//! u16  version (= 1)
//! u32  C, H, W, L
//! u8   dtype code (1 = f32)
//! f32  payload, C·H·W·L values, row-major [C][H][W][L]
//! u32  label count   (footer, optional: absent on legacy/plain files)
//! per label: u32 name_len, name bytes, i32 value
//! ```
//!
//! Axis vocabulary: z runs along H, y along W, x along L — matching the
//! in-memory `[C, H, W, L]` tensor layout used everywhere else.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numcore::tensor::Tensor;

const VOL_MAGIC: &[u8; 4] = b"MV3D";
const VOL_VERSION: u16 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: usize = 4 + 2 + 16 + 1;

/// One stored volume: voxels `[C, H, W, L]` plus named integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub voxels: Tensor,
    pub labels: Vec<(String, i32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeHeader {
    pub version: u16,
    pub channels: usize,
    pub dims: (usize, usize, usize),
}

pub fn write_volume(path: &Path, vol: &VolumeFile) -> Result<()> {
    let s = vol.voxels.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("volume must be [C, H, W, L], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + vol.voxels.numel() * 4);
    buf.extend_from_slice(VOL_MAGIC);
    buf.extend_from_slice(&VOL_VERSION.to_le_bytes());
    for &d in s {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for &v in vol.voxels.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    buf.extend_from_slice(&(vol.labels.len() as u32).to_le_bytes());
    for (name, value) in &vol.labels {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&value.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn parse_header(buf: &[u8]) -> Result<VolumeHeader> {
    if buf.len() < HEADER_LEN {
        return Err(Error::Parse {
            offset: buf.len(),
            message: format!("file too short for header: {} of {HEADER_LEN} bytes", buf.len()),
        });
    }
    if &buf[..4] != VOL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {:?}, expected {VOL_MAGIC:?}", &buf[..4]),
        });
    }
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != VOL_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported volume version {version}"),
        });
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *d = u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as usize;
        if *d == 0 {
            return Err(Error::Parse {
                offset: off,
                message: "zero-sized dimension".into(),
            });
        }
    }
    if buf[22] != DTYPE_F32 {
        return Err(Error::Parse {
            offset: 22,
            message: format!("unknown dtype code {}", buf[22]),
        });
    }
    Ok(VolumeHeader {
        version,
        channels: dims[0],
        dims: (dims[1], dims[2], dims[3]),
    })
}

/// Reads only the fixed-size header; never touches the payload.
pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let mut buf = [0u8; HEADER_LEN];
    let mut f = fs::File::open(path)?;
    let mut got = 0;
    while got < HEADER_LEN {
        let n = f.read(&mut buf[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    parse_header(&buf[..got])
}

pub fn read_volume(path: &Path) -> Result<VolumeFile> {
    let buf = fs::read(path)?;
    let header = parse_header(&buf)?;
    let (c, (h, w, l)) = (header.channels, header.dims);
    let numel = c * h * w * l;
    let need = HEADER_LEN + numel * 4;
    if buf.len() < need {
        return Err(Error::Parse {
            offset: buf.len(),
            message: format!(
                "truncated payload: expected {} payload bytes, found {}",
                numel * 4,
                buf.len() - HEADER_LEN
            ),
        });
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = HEADER_LEN + i * 4;
        data.push(f32::from_le_bytes(buf[off..off + 4].try_into().unwrap()) as f64);
    }
    let mut labels = Vec::new();
    let mut pos = need;
    if pos < buf.len() {
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<usize> {
            if *pos + n > buf.len() {
                return Err(Error::Parse {
                    offset: *pos,
                    message: format!("truncated label footer while reading {what}"),
                });
            }
            let p = *pos;
            *pos += n;
            Ok(p)
        };
        let p = take(&mut pos, 4, "label count")?;
        let count = u32::from_le_bytes(buf[p..p + 4].try_into().unwrap()) as usize;
        for _ in 0..count {
            let p = take(&mut pos, 4, "label name length")?;
            let nlen = u32::from_le_bytes(buf[p..p + 4].try_into().unwrap()) as usize;
            let p = take(&mut pos, nlen, "label name")?;
            let name = String::from_utf8(buf[p..p + nlen].to_vec()).map_err(|e| Error::Parse {
                offset: p,
                message: format!("label name is not UTF-8: {e}"),
            })?;
            let p = take(&mut pos, 4, "label value")?;
            let value = i32::from_le_bytes(buf[p..p + 4].try_into().unwrap());
            labels.push((name, value));
        }
        if pos != buf.len() {
            return Err(Error::Parse {
                offset: pos,
                message: format!("{} trailing bytes after label footer", buf.len() - pos),
            });
        }
    }
    Ok(VolumeFile {
        voxels: Tensor::new(vec![c, h, w, l], data)?,
        labels,
    })
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub task: String,
    pub label: i32,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!("{}\t{}\t{}\n", e.path.display(), e.task, e.label));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "manifest line {}: expected `path\\ttask\\tlabel`, got {line:?}",
                lineno + 1
            )));
        }
        let label: i32 = parts[2].trim().parse().map_err(|e| {
            Error::Config(format!("manifest line {}: bad label: {e}", lineno + 1))
        })?;
        entries.push(ManifestEntry {
            path: PathBuf::from(parts[0]),
            task: parts[1].to_string(),
            label,
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// preprocessing

/// Intensity-weighted center of mass over all channels, as fractional
/// (z, y, x). An all-zero volume defaults to the geometric center.
pub fn center_of_mass(volume: &Tensor) -> (f64, f64, f64) {
    let s = volume.shape();
    let (c, h, w, l) = (s[0], s[1], s[2], s[3]);
    let (mut sz, mut sy, mut sx, mut total) = (0.0, 0.0, 0.0, 0.0);
    for ci in 0..c {
        for hi in 0..h {
            for wi in 0..w {
                for li in 0..l {
                    let v = volume.data()[(((ci * h) + hi) * w + wi) * l + li];
                    sz += v * hi as f64;
                    sy += v * wi as f64;
                    sx += v * li as f64;
                    total += v;
                }
            }
        }
    }
    if total == 0.0 {
        (
            (h as f64 - 1.0) / 2.0,
            (w as f64 - 1.0) / 2.0,
            (l as f64 - 1.0) / 2.0,
        )
    } else {
        (sz / total, sy / total, sx / total)
    }
}

fn crop_start(com: f64, src: usize, dst: usize) -> isize {
    let want = com.round() as isize - (dst / 2) as isize;
    if src >= dst {
        want.clamp(0, (src - dst) as isize)
    } else {
        // smaller than target: clamp so the whole input stays inside
        want.clamp(src as isize - dst as isize, 0)
    }
}

/// Crops (or pads with zeros) a target-sized box centered on the intensity
/// center of mass, then min-max normalizes jointly over all channels to
/// [0, 255].
pub fn preprocess(volume: &Tensor, target: (usize, usize, usize)) -> Result<Tensor> {
    let s = volume.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("volume must be [C, H, W, L], got {s:?}")));
    }
    let (c, h, w, l) = (s[0], s[1], s[2], s[3]);
    let (th, tw, tl) = target;
    let (cz, cy, cx) = center_of_mass(volume);
    let (sz, sy, sx) = (
        crop_start(cz, h, th),
        crop_start(cy, w, tw),
        crop_start(cx, l, tl),
    );
    let mut out = vec![0.0; c * th * tw * tl];
    for ci in 0..c {
        for oz in 0..th {
            let iz = sz + oz as isize;
            if iz < 0 || iz >= h as isize {
                continue;
            }
            for oy in 0..tw {
                let iy = sy + oy as isize;
                if iy < 0 || iy >= w as isize {
                    continue;
                }
                for ox in 0..tl {
                    let ix = sx + ox as isize;
                    if ix < 0 || ix >= l as isize {
                        continue;
                    }
                    out[((ci * th + oz) * tw + oy) * tl + ox] = volume.data()
                        [((ci * h + iz as usize) * w + iy as usize) * l + ix as usize];
                }
            }
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &out {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let scale = 255.0 / (hi - lo);
        out.iter_mut().for_each(|v| *v = (*v - lo) * scale);
    } else {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(vec![c, th, tw, tl], out)
}

// ---------------------------------------------------------------------------
// geometric resampling shared by augmentation and perturbation

/// Trilinear lookup with zero fill outside the volume. Coordinates within
/// 1e-9 of a grid point snap to it, so grid-preserving transforms (identity,
/// exact 90° turns) copy voxels bit-exactly.
fn sample_trilinear(data: &[f64], h: usize, w: usize, l: usize, z: f64, y: f64, x: f64) -> f64 {
    let snap = |v: f64| {
        let r = v.round();
        if (v - r).abs() < 1e-9 {
            r
        } else {
            v
        }
    };
    let (z, y, x) = (snap(z), snap(y), snap(x));
    let (z0, y0, x0) = (z.floor(), y.floor(), x.floor());
    let (fz, fy, fx) = (z - z0, y - y0, x - x0);
    let fetch = |zi: f64, yi: f64, xi: f64| -> f64 {
        if zi < 0.0 || yi < 0.0 || xi < 0.0 {
            return 0.0;
        }
        let (zi, yi, xi) = (zi as usize, yi as usize, xi as usize);
        if zi >= h || yi >= w || xi >= l {
            return 0.0;
        }
        data[(zi * w + yi) * l + xi]
    };
    let mut acc = 0.0;
    for (dz, wz) in [(0.0, 1.0 - fz), (1.0, fz)] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * fetch(z0 + dz, y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

type Mat3 = [[f64; 3]; 3];

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// Rotation by `rad` about coordinate axis 0/1/2 (z/y/x).
fn rotation_matrix(axis: usize, rad: f64) -> Mat3 {
    let (c, s) = (rad.cos(), rad.sin());
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        _ => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
    }
}

/// Resamples every channel through the inverse map
/// `src = inv · (dst − center) + center`, zero outside.
fn resample(volume: &Tensor, inv: &Mat3, inv_scale: f64) -> Tensor {
    let s = volume.shape();
    let (c, h, w, l) = (s[0], s[1], s[2], s[3]);
    let center = (
        (h as f64 - 1.0) / 2.0,
        (w as f64 - 1.0) / 2.0,
        (l as f64 - 1.0) / 2.0,
    );
    let mut out = vec![0.0; volume.numel()];
    for ci in 0..c {
        let src = &volume.data()[ci * h * w * l..(ci + 1) * h * w * l];
        let dst = &mut out[ci * h * w * l..(ci + 1) * h * w * l];
        for zi in 0..h {
            for yi in 0..w {
                for xi in 0..l {
                    let d = (
                        zi as f64 - center.0,
                        yi as f64 - center.1,
                        xi as f64 - center.2,
                    );
                    let sz = (inv[0][0] * d.0 + inv[0][1] * d.1 + inv[0][2] * d.2) * inv_scale
                        + center.0;
                    let sy = (inv[1][0] * d.0 + inv[1][1] * d.1 + inv[1][2] * d.2) * inv_scale
                        + center.1;
                    let sx = (inv[2][0] * d.0 + inv[2][1] * d.1 + inv[2][2] * d.2) * inv_scale
                        + center.2;
                    dst[(zi * w + yi) * l + xi] = sample_trilinear(src, h, w, l, sz, sy, sx);
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("shape/data agree")
}

fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// augmentation

/// Knobs for train-time augmentation; each transform fires independently
/// with its own probability. Applied in order: affine, noise, gamma.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub p_affine: f64,
    pub max_rotate_deg: f64,
    pub max_scale: f64,
    pub p_noise: f64,
    /// Noise standard deviation, in the same units as the voxel values
    /// (see `value_max`).
    pub noise_sigma: f64,
    pub p_gamma: f64,
    pub gamma_range: (f64, f64),
    /// Top of the intensity scale the volume lives on: 255 for raw
    /// preprocessed volumes, 1 for volumes already rescaled for training.
    /// Gamma curves bend around this anchor.
    pub value_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_affine: 0.5,
            max_rotate_deg: 10.0,
            max_scale: 0.1,
            p_noise: 0.25,
            noise_sigma: 4.0,
            p_gamma: 0.25,
            gamma_range: (0.7, 1.5),
            value_max: 255.0,
        }
    }
}

impl AugmentConfig {
    /// Rescales the intensity-dependent knobs from the default [0, 255]
    /// convention onto [0, max] data.
    pub fn for_value_max(mut self, max: f64) -> Self {
        self.noise_sigma *= max / self.value_max;
        self.value_max = max;
        self
    }
}

/// Gamma curve on the [0, max] scale: v ↦ max·(v/max)^γ.
pub fn gamma_map(v: f64, gamma: f64, max: f64) -> f64 {
    max * (v.clamp(0.0, max) / max).powf(gamma)
}

/// Randomized augmentation of a normalized `[C, H, W, L]` volume; a pure
/// function of (input, cfg, seed).
pub fn augment(volume: &Tensor, cfg: &AugmentConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut vol = volume.clone();

    if rng.gen_range(0.0..1.0) < cfg.p_affine {
        let deg = cfg.max_rotate_deg;
        let angles: [f64; 3] = [
            rng.gen_range(-deg..=deg).to_radians(),
            rng.gen_range(-deg..=deg).to_radians(),
            rng.gen_range(-deg..=deg).to_radians(),
        ];
        let scale = 1.0 + rng.gen_range(-cfg.max_scale..=cfg.max_scale);
        // forward = Rz·Ry·Rx scaled; sample through the inverse
        let fwd = mat_mul(
            &rotation_matrix(0, angles[0]),
            &mat_mul(&rotation_matrix(1, angles[1]), &rotation_matrix(2, angles[2])),
        );
        vol = resample(&vol, &transpose(&fwd), 1.0 / scale);
    }

    if rng.gen_range(0.0..1.0) < cfg.p_noise && cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        vol.data_mut()
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut rng));
    } else if cfg.p_noise > 0.0 {
        // keep the RNG stream aligned whether or not noise fired
    }

    if rng.gen_range(0.0..1.0) < cfg.p_gamma {
        let (lo, hi) = cfg.gamma_range;
        let gamma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        if gamma != 1.0 {
            vol.data_mut().iter_mut().for_each(|v| *v = gamma_map(*v, gamma, cfg.value_max));
        }
    }
    vol
}

// ---------------------------------------------------------------------------
// test-time perturbations

/// Deterministic robustness perturbations.
#[derive(Debug, Clone, PartialEq)]
pub enum Perturbation {
    /// Rotation by exactly `degrees` about a fixed coordinate axis
    /// (0 = z/H, 1 = y/W, 2 = x/L), trilinear resampling, zero fill.
    Rotation { degrees: f64, axis: usize },
    /// Multiplies voxels by exp(P(z, y, x)) where P is a degree-3
    /// polynomial over [−1, 1]³ with coefficients drawn uniformly from
    /// [−coef, coef].
    BiasField { coef: f64, seed: u64 },
}

pub fn perturb(volume: &Tensor, kind: &Perturbation) -> Tensor {
    match *kind {
        Perturbation::Rotation { degrees, axis } => {
            if degrees == 0.0 {
                return volume.clone();
            }
            let fwd = rotation_matrix(axis, degrees.to_radians());
            resample(volume, &transpose(&fwd), 1.0)
        }
        Perturbation::BiasField { coef, seed } => {
            if coef == 0.0 {
                return volume.clone();
            }
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            // monomials z^i y^j x^k with i + j + k ≤ 3 → 20 coefficients
            let mut coeffs = Vec::new();
            for i in 0..=3usize {
                for j in 0..=(3 - i) {
                    for k in 0..=(3 - i - j) {
                        coeffs.push((i, j, k, rng.gen_range(-coef..=coef)));
                    }
                }
            }
            let s = volume.shape();
            let (c, h, w, l) = (s[0], s[1], s[2], s[3]);
            let norm = |i: usize, n: usize| {
                if n > 1 {
                    2.0 * i as f64 / (n as f64 - 1.0) - 1.0
                } else {
                    0.0
                }
            };
            let mut out = volume.data().to_vec();
            for zi in 0..h {
                let z = norm(zi, h);
                for yi in 0..w {
                    let y = norm(yi, w);
                    for xi in 0..l {
                        let x = norm(xi, l);
                        let mut p = 0.0;
                        for &(i, j, k, a) in &coeffs {
                            p += a * z.powi(i as i32) * y.powi(j as i32) * x.powi(k as i32);
                        }
                        let gain = p.exp();
                        for ci in 0..c {
                            out[((ci * h + zi) * w + yi) * l + xi] *= gain;
                        }
                    }
                }
            }
            Tensor::new(s.to_vec(), out).expect("shape/data agree")
        }
    }
}

// ---------------------------------------------------------------------------
// synthetic dataset

/// Class-conditional lesion model: a bright sphere on a smooth background.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    /// Lesion centers are drawn uniformly within this central fraction of
    /// each axis (0 → always dead center, 1 → anywhere).
    pub center_spread: f64,
    /// Radius range in voxels (uniform).
    pub radius: (f64, f64),
    /// Additive lesion intensity per class.
    pub intensity: [f64; 2],
    /// Internal texture amplitude per class: 0 gives a smooth profile, a > 0
    /// modulates the lesion by (1 + a·cos) stripes with a random phase, which
    /// shifts local statistics while leaving the mean nearly unchanged.
    pub texture: [f64; 2],
}

/// Stripe wavelength (voxels along the diagonal) for textured lesions.
const TEXTURE_WAVELENGTH: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub lesion: LesionSpec,
    pub noise_sigma: f64,
    pub seed: u64,
    pub task: String,
}

impl SyntheticSpec {
    /// Cleanly separable default: far-apart intensities, no noise.
    pub fn easy(count: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            dims: (32, 32, 32),
            channels: 2,
            lesion: LesionSpec {
                center_spread: 0.4,
                radius: (4.0, 5.0),
                intensity: [40.0, 110.0],
                texture: [0.0, 0.0],
            },
            noise_sigma: 0.0,
            seed,
            task: "lesion".into(),
        }
    }

    /// Low-separability variant: close intensities, wide radius range,
    /// heavy noise.
    pub fn hard(count: usize, seed: u64) -> Self {
        SyntheticSpec {
            count,
            dims: (32, 32, 32),
            channels: 2,
            lesion: LesionSpec {
                center_spread: 0.5,
                radius: (3.0, 6.0),
                intensity: [34.0, 52.0],
                texture: [0.0, 0.0],
            },
            noise_sigma: 22.0,
            seed,
            task: "lesion".into(),
        }
    }
}

/// Generates `count` labeled volumes, alternating classes 0,1,0,1,… so the
/// balance is exact. Values are f32-quantized so file round-trips are
/// bit-stable. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Vec<(VolumeFile, i32)> {
    let (h, w, l) = spec.dims;
    let c = spec.channels;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let label = (i % 2) as i32;
        let center = (
            (h as f64 - 1.0) / 2.0,
            (w as f64 - 1.0) / 2.0,
            (l as f64 - 1.0) / 2.0,
        );
        let spread = spec.lesion.center_spread;
        let lesion_center = (
            center.0 + rng.gen_range(-1.0..1.0) * spread * center.0,
            center.1 + rng.gen_range(-1.0..1.0) * spread * center.1,
            center.2 + rng.gen_range(-1.0..1.0) * spread * center.2,
        );
        let (r_lo, r_hi) = spec.lesion.radius;
        let radius = if r_hi > r_lo {
            rng.gen_range(r_lo..r_hi)
        } else {
            r_lo
        };
        let offset = spec.lesion.intensity[label as usize];
        let tex_amp = spec.lesion.texture[label as usize];
        // phase is drawn for every volume so both classes consume the same
        // number of random draws
        let tex_phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let noise = if spec.noise_sigma > 0.0 {
            Some(Normal::new(0.0, spec.noise_sigma).expect("valid sigma"))
        } else {
            None
        };

        let mut data = vec![0.0f64; c * h * w * l];
        for ci in 0..c {
            // per-channel contrast so every modality is informative but
            // not identical
            let bg_gain = 1.0 - 0.15 * ci as f64;
            let lesion_gain = 1.0 + 0.1 * ci as f64;
            for zi in 0..h {
                for yi in 0..w {
                    for xi in 0..l {
                        let dz = (zi as f64 - center.0) / (0.45 * h as f64);
                        let dy = (yi as f64 - center.1) / (0.45 * w as f64);
                        let dx = (xi as f64 - center.2) / (0.45 * l as f64);
                        let r2 = dz * dz + dy * dy + dx * dx;
                        let mut v = if r2 < 1.0 {
                            150.0 * bg_gain * (1.0 - r2)
                        } else {
                            0.0
                        };
                        let lz = zi as f64 - lesion_center.0;
                        let ly = yi as f64 - lesion_center.1;
                        let lx = xi as f64 - lesion_center.2;
                        let d = (lz * lz + ly * ly + lx * lx).sqrt();
                        if d < radius {
                            let edge = 1.0 - (d / radius) * (d / radius);
                            let stripes = 1.0
                                + tex_amp
                                    * (std::f64::consts::TAU * (zi + yi + xi) as f64
                                        / TEXTURE_WAVELENGTH
                                        + tex_phase)
                                        .cos();
                            v += offset * lesion_gain * edge * stripes;
                        }
                        if let Some(n) = &noise {
                            v += n.sample(&mut rng);
                        }
                        data[((ci * h + zi) * w + yi) * l + xi] =
                            (v.clamp(0.0, 255.0) as f32) as f64;
                    }
                }
            }
        }
        let voxels = Tensor::new(vec![c, h, w, l], data).expect("shape/data agree");
        out.push((
            VolumeFile {
                voxels,
                labels: vec![(spec.task.clone(), label)],
            },
            label,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::testutil::{rand_tensor, rng};

    fn f32_tensor(r: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
        let mut t = rand_tensor(r, shape);
        t.data_mut().iter_mut().for_each(|v| *v = (*v as f32) as f64);
        t
    }

    #[test]
    fn volume_round_trip_bit_exact() {
        let mut r = rng(80);
        let vol = VolumeFile {
            voxels: f32_tensor(&mut r, &[2, 3, 4, 5]),
            labels: vec![("lesion".into(), 1), ("grade".into(), -3)],
        };
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("v1.mv3d");
        let p2 = dir.path().join("v2.mv3d");
        write_volume(&p1, &vol).unwrap();
        let back = read_volume(&p1).unwrap();
        assert_eq!(back, vol);
        write_volume(&p2, &back).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn parse_errors_carry_offsets() {
        let mut r = rng(81);
        let vol = VolumeFile {
            voxels: f32_tensor(&mut r, &[1, 2, 2, 2]),
            labels: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mv3d");
        write_volume(&p, &vol).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Z';
        fs::write(&p, &bad).unwrap();
        match read_volume(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }

        // truncated payload names expected vs actual
        fs::write(&p, &good[..HEADER_LEN + 10]).unwrap();
        match read_volume(&p) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("expected 32 payload bytes"), "{message}");
                assert!(message.contains("found 10"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn header_only_read_ignores_payload() {
        let mut r = rng(82);
        let vol = VolumeFile {
            voxels: f32_tensor(&mut r, &[3, 4, 5, 6]),
            labels: vec![],
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.mv3d");
        write_volume(&p, &vol).unwrap();
        let full = fs::read(&p).unwrap();
        // keep only the header bytes: header read works, full read cannot
        fs::write(&p, &full[..HEADER_LEN]).unwrap();
        let header = read_header(&p).unwrap();
        assert_eq!(header.channels, 3);
        assert_eq!(header.dims, (4, 5, 6));
        assert!(read_volume(&p).is_err());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let entries = vec![
            ManifestEntry {
                path: PathBuf::from("data/v0.mv3d"),
                task: "lesion".into(),
                label: 0,
            },
            ManifestEntry {
                path: PathBuf::from("data/v1.mv3d"),
                task: "lesion".into(),
                label: 1,
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);

        fs::write(&p, "only-one-column\n").unwrap();
        assert!(matches!(read_manifest(&p), Err(Error::Config(_))));
    }

    #[test]
    fn center_of_mass_cases() {
        // constant volume → geometric center
        let v = Tensor::full(&[1, 5, 7, 9], 3.0);
        assert_eq!(center_of_mass(&v), (2.0, 3.0, 4.0));
        // all-zero volume → geometric center too
        let z = Tensor::zeros(&[2, 4, 4, 4]);
        assert_eq!(center_of_mass(&z), (1.5, 1.5, 1.5));
        // point mass
        let mut pm = Tensor::zeros(&[1, 40, 40, 40]);
        pm.data_mut()[(10 * 40 + 20) * 40 + 30] = 5.0;
        assert_eq!(center_of_mass(&pm), (10.0, 20.0, 30.0));
    }

    #[test]
    fn preprocess_centered_input_is_normalization_only() {
        let mut r = rng(83);
        // symmetric content → CoM at geometric center → crop start 0
        let mut v = rand_tensor(&mut r, &[2, 8, 8, 8]);
        v.data_mut().iter_mut().for_each(|x| *x = x.abs());
        // symmetrize so the center of mass is exactly central
        let orig = v.clone();
        for ci in 0..2usize {
            for z in 0..8usize {
                for y in 0..8usize {
                    for x in 0..8usize {
                        let mirrored =
                            orig.data()[((ci * 8 + 7 - z) * 8 + 7 - y) * 8 + 7 - x];
                        v.data_mut()[((ci * 8 + z) * 8 + y) * 8 + x] += mirrored;
                    }
                }
            }
        }
        let out = preprocess(&v, (8, 8, 8)).unwrap();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &x in v.data() {
            lo = lo.min(x);
            hi = hi.max(x);
        }
        let scale = 255.0 / (hi - lo);
        for (o, &x) in out.data().iter().zip(v.data()) {
            assert_eq!(*o, (x - lo) * scale);
        }
    }

    #[test]
    fn preprocess_point_mass_crop_oracle() {
        let mut v = Tensor::zeros(&[1, 40, 40, 40]);
        v.data_mut()[(10 * 40 + 20) * 40 + 30] = 5.0;
        let out = preprocess(&v, (16, 16, 16)).unwrap();
        assert_eq!(out.shape(), &[1, 16, 16, 16]);
        // starts: clamp(10−8, 0, 24) = 2; 20−8 = 12; 30−8 = 22
        // the point lands at (10−2, 20−12, 30−22) = (8, 8, 8), value 255
        for z in 0..16usize {
            for y in 0..16usize {
                for x in 0..16usize {
                    let want = if (z, y, x) == (8, 8, 8) { 255.0 } else { 0.0 };
                    assert_eq!(out.data()[(z * 16 + y) * 16 + x], want);
                }
            }
        }
    }

    #[test]
    fn preprocess_pads_small_volumes() {
        let v = Tensor::full(&[1, 2, 2, 2], 7.0);
        let out = preprocess(&v, (4, 4, 4)).unwrap();
        assert_eq!(out.shape(), &[1, 4, 4, 4]);
        // padding zeros become the min → content maps to 255, pad to 0
        let highs = out.data().iter().filter(|&&x| x == 255.0).count();
        let zeros = out.data().iter().filter(|&&x| x == 0.0).count();
        assert_eq!((highs, zeros), (8, 64 - 8));
        // non-constant small volume keeps its content, padded with zeros
        let mut v = Tensor::zeros(&[1, 2, 2, 2]);
        v.data_mut()[0] = 10.0;
        let out = preprocess(&v, (4, 4, 4)).unwrap();
        let nonzero = out.data().iter().filter(|&&x| x != 0.0).count();
        assert_eq!(nonzero, 1);
        assert_eq!(out.data().iter().cloned().fold(0.0f64, f64::max), 255.0);
    }

    #[test]
    fn augment_identity_parameters_change_nothing() {
        let mut r = rng(84);
        let v = rand_tensor(&mut r, &[2, 6, 6, 6]);
        let cfg = AugmentConfig {
            p_affine: 1.0,
            max_rotate_deg: 0.0,
            max_scale: 0.0,
            p_noise: 1.0,
            noise_sigma: 0.0,
            p_gamma: 1.0,
            gamma_range: (1.0, 1.0),
            value_max: 255.0,
        };
        let out = augment(&v, &cfg, 17);
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn augment_value_max_rescales_units() {
        let cfg = AugmentConfig::default().for_value_max(1.0);
        assert_eq!(cfg.value_max, 1.0);
        assert!((cfg.noise_sigma - 4.0 / 255.0).abs() < 1e-15);
        assert_eq!(gamma_map(0.5, 2.0, 1.0), 0.25);
    }

    #[test]
    fn gamma_formula() {
        assert_eq!(gamma_map(127.5, 2.0, 255.0), 63.75);
        assert_eq!(gamma_map(127.5, 1.0, 255.0), 127.5);
        assert_eq!(gamma_map(0.0, 0.7, 255.0), 0.0);
        assert_eq!(gamma_map(255.0, 2.3, 255.0), 255.0);
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let mut r = rng(85);
        let mut v = rand_tensor(&mut r, &[1, 6, 6, 6]);
        v.data_mut().iter_mut().for_each(|x| *x = (*x + 1.0) * 100.0);
        let cfg = AugmentConfig::default();
        let a = augment(&v, &cfg, 3);
        let b = augment(&v, &cfg, 3);
        assert_eq!(a.data(), b.data());
        let c = augment(&v, &cfg, 4);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn rotation_zero_and_bias_zero_are_identity() {
        let mut r = rng(86);
        let v = rand_tensor(&mut r, &[2, 5, 5, 5]);
        let rot = perturb(&v, &Perturbation::Rotation { degrees: 0.0, axis: 0 });
        assert_eq!(rot.data(), v.data());
        let bias = perturb(&v, &Perturbation::BiasField { coef: 0.0, seed: 1 });
        assert_eq!(bias.data(), v.data());
    }

    #[test]
    fn rotation_quarter_turn_swaps_bar_axes() {
        // bar along y (W axis) at fixed z, x
        let (h, w, l) = (5usize, 5usize, 5usize);
        let mut v = Tensor::zeros(&[1, h, w, l]);
        for yi in 0..w {
            v.data_mut()[(2 * w + yi) * l + 3] = 1.0;
        }
        let out = perturb(&v, &Perturbation::Rotation { degrees: 90.0, axis: 0 });
        // inverse map of a +90° turn about z: y_src = x_dst − c + c,
        // x_src = 2c − y_dst; verify every voxel against the permutation
        let c = (w as f64 - 1.0) / 2.0;
        for zi in 0..h {
            for yd in 0..w {
                for xd in 0..l {
                    let ys = xd as f64;
                    let xs = 2.0 * c - yd as f64;
                    let want = if ys >= 0.0 && xs >= 0.0 && (ys as usize) < w && (xs as usize) < l
                    {
                        v.data()[(zi * w + ys as usize) * l + xs as usize]
                    } else {
                        0.0
                    };
                    assert_eq!(
                        out.data()[(zi * w + yd) * l + xd],
                        want,
                        "voxel ({zi},{yd},{xd})"
                    );
                }
            }
        }
        // the bar now runs along x
        for xi in 0..l {
            assert_eq!(out.data()[(2 * w + 1) * l + xi], 1.0);
        }
    }

    #[test]
    fn bias_field_is_multiplicative_and_seeded() {
        let mut r = rng(87);
        let mut v = rand_tensor(&mut r, &[1, 4, 4, 4]);
        v.data_mut().iter_mut().for_each(|x| *x = x.abs() + 1.0);
        let kind = Perturbation::BiasField { coef: 0.3, seed: 5 };
        let a = perturb(&v, &kind);
        let b = perturb(&v, &kind);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), v.data());
        // strictly positive gain: sign and zero pattern preserved
        for (x, y) in v.data().iter().zip(a.data()) {
            assert!(y / x > 0.0);
        }
        // channels share the field: ratio equal across channels
        let mut two = Tensor::ones(&[2, 4, 4, 4]);
        two.data_mut().iter_mut().for_each(|x| *x = 2.0 * *x);
        let t = perturb(&two, &Perturbation::BiasField { coef: 0.4, seed: 9 });
        let per = 64;
        for i in 0..per {
            assert_eq!(t.data()[i], t.data()[per + i]);
        }
    }

    #[test]
    fn synthetic_classes_separable_by_mean_threshold() {
        let spec = SyntheticSpec::easy(40, 123);
        let data = generate_synthetic(&spec);
        assert_eq!(data.len(), 40);
        let means: Vec<(f64, i32)> = data
            .iter()
            .map(|(vf, label)| {
                let m = vf.voxels.data().iter().sum::<f64>() / vf.voxels.numel() as f64;
                (m, *label)
            })
            .collect();
        // best threshold between class means
        let m0: f64 = means.iter().filter(|(_, l)| *l == 0).map(|(m, _)| m).sum::<f64>() / 20.0;
        let m1: f64 = means.iter().filter(|(_, l)| *l == 1).map(|(m, _)| m).sum::<f64>() / 20.0;
        let thr = (m0 + m1) / 2.0;
        let correct = means
            .iter()
            .filter(|(m, l)| (*m > thr) == (*l == 1))
            .count();
        assert!(correct * 100 >= 99 * 40, "only {correct}/40 correct");
    }

    #[test]
    fn synthetic_determinism_and_balance() {
        let spec = SyntheticSpec::easy(10, 7);
        let a = generate_synthetic(&spec);
        let b = generate_synthetic(&spec);
        assert_eq!(a.len(), b.len());
        for ((va, la), (vb, lb)) in a.iter().zip(&b) {
            assert_eq!(la, lb);
            assert_eq!(va, vb);
        }
        let ones = a.iter().filter(|(_, l)| *l == 1).count();
        assert_eq!(ones, 5);
        // files byte-identical too
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.mv3d"), dir.path().join("b.mv3d"));
        write_volume(&p1, &a[0].0).unwrap();
        write_volume(&p2, &b[0].0).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }
}
