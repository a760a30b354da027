//! Masked-autoencoder assembly and checkpoint I/O.
//!
//! Pre-training: patchify → embed visible tokens (+fixed positional
//! embedding) → encoder stack → project to decoder width → scatter with a
//! shared learnable mask token (+decoder positional embedding) → decoder
//! stack → per-token voxel prediction. Loss is mean squared error over
//! masked tokens only.
//!
//! Fine-tuning: encoder on all tokens, mean-pool over the token axis, one
//! linear head to logits. No class token exists anywhere.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::numcore::ops;
use crate::numcore::tape::{ParamId, ParamStore, Tape, Var};
use crate::numcore::tensor::Tensor;
use crate::vim::{stack_forward, VimStack};
use crate::volume3d::{
    patchify, positional_embedding_3d, sample_mask, scatter_with_mask_tokens,
    MaskPlan, PatchGeometry,
};

pub const TARGET_NORM_EPS: f64 = 1e-6;

/// Architecture and masking hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeConfig {
    pub enc_depth: usize,
    pub enc_dim: usize,
    pub dec_depth: usize,
    pub dec_dim: usize,
    pub patch: usize,
    pub channels: usize,
    /// Volume spatial dims (H, W, L).
    pub volume: (usize, usize, usize),
    pub mask_ratio: f64,
    pub norm_targets: bool,
    /// SSM state size per channel inside every block.
    pub n_state: usize,
}

impl MaeConfig {
    /// Full-scale preset: 12×384 encoder, 8×192 decoder, 160³ four-channel
    /// volumes in 16³ patches.
    pub fn full() -> Self {
        MaeConfig {
            enc_depth: 12,
            enc_dim: 384,
            dec_depth: 8,
            dec_dim: 192,
            patch: 16,
            channels: 4,
            volume: (160, 160, 160),
            mask_ratio: 0.75,
            norm_targets: false,
            n_state: 16,
        }
    }

    /// Desk-scale preset that exercises the same architecture in minutes.
    pub fn desk() -> Self {
        MaeConfig {
            enc_depth: 4,
            enc_dim: 64,
            dec_depth: 2,
            dec_dim: 32,
            patch: 4,
            channels: 2,
            volume: (32, 32, 32),
            mask_ratio: 0.75,
            norm_targets: false,
            n_state: 8,
        }
    }

    pub fn geometry(&self) -> Result<PatchGeometry> {
        PatchGeometry::for_dims(
            self.channels,
            self.volume.0,
            self.volume.1,
            self.volume.2,
            self.patch,
        )
    }
}

/// All parameters of the autoencoder, registered in one store.
pub struct MaeModel {
    pub config: MaeConfig,
    pub geom: PatchGeometry,
    pub patch_embed_w: ParamId,
    pub patch_embed_b: ParamId,
    pub encoder: VimStack,
    pub enc_to_dec_w: ParamId,
    pub enc_to_dec_b: ParamId,
    pub mask_token: ParamId,
    pub decoder: VimStack,
    pub pred_w: ParamId,
    pub pred_b: ParamId,
    /// Fixed (non-learned) positional tables.
    pub enc_pos: Tensor,
    pub dec_pos: Tensor,
}

fn uniform_tensor(rng: &mut ChaCha12Rng, shape: &[usize], bound: f64) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/data agree")
}

impl MaeModel {
    pub fn init(config: MaeConfig, store: &mut ParamStore, rng: &mut ChaCha12Rng) -> Result<Self> {
        let geom = config.geometry()?;
        let td = geom.token_dim();
        let eb = 1.0 / (td as f64).sqrt();
        let patch_embed_w =
            store.register("mae.patch_embed.w", uniform_tensor(rng, &[td, config.enc_dim], eb));
        let patch_embed_b =
            store.register("mae.patch_embed.b", Tensor::zeros(&[config.enc_dim]));
        let encoder = VimStack::init(
            store,
            "mae.encoder",
            config.enc_depth,
            config.enc_dim,
            config.n_state,
            rng,
        );
        let pb = 1.0 / (config.enc_dim as f64).sqrt();
        let enc_to_dec_w = store.register(
            "mae.enc_to_dec.w",
            uniform_tensor(rng, &[config.enc_dim, config.dec_dim], pb),
        );
        let enc_to_dec_b =
            store.register("mae.enc_to_dec.b", Tensor::zeros(&[config.dec_dim]));
        let mask_token = store.register(
            "mae.mask_token",
            uniform_tensor(rng, &[config.dec_dim], 0.02),
        );
        let decoder = VimStack::init(
            store,
            "mae.decoder",
            config.dec_depth,
            config.dec_dim,
            config.n_state,
            rng,
        );
        let hb = 1.0 / (config.dec_dim as f64).sqrt();
        let pred_w = store.register(
            "mae.pred.w",
            uniform_tensor(rng, &[config.dec_dim, td], hb),
        );
        let pred_b = store.register("mae.pred.b", Tensor::zeros(&[td]));
        let enc_pos = positional_embedding_3d(&geom, config.enc_dim);
        let dec_pos = positional_embedding_3d(&geom, config.dec_dim);
        Ok(MaeModel {
            config,
            geom,
            patch_embed_w,
            patch_embed_b,
            encoder,
            enc_to_dec_w,
            enc_to_dec_b,
            mask_token,
            decoder,
            pred_w,
            pred_b,
            enc_pos,
            dec_pos,
        })
    }
}

/// Gathers rows `idx` of a `[T, dim]` table into a new `[|idx|, dim]` tensor.
fn gather_rows(table: &Tensor, idx: &[usize]) -> Tensor {
    let dim = table.shape()[1];
    let mut out = vec![0.0; idx.len() * dim];
    for (r, &i) in idx.iter().enumerate() {
        out[r * dim..(r + 1) * dim].copy_from_slice(&table.data()[i * dim..(i + 1) * dim]);
    }
    Tensor::new(vec![idx.len(), dim], out).expect("shape/data agree")
}

fn check_volume(model: &MaeModel, volume: &Tensor) -> Result<()> {
    let s = volume.shape();
    let (h, w, l) = model.config.volume;
    if s.len() != 5 || s[1] != model.config.channels || (s[2], s[3], s[4]) != (h, w, l) {
        return Err(Error::Geometry(format!(
            "volume {:?} does not match configured [N, {}, {h}, {w}, {l}]",
            s, model.config.channels
        )));
    }
    Ok(())
}

/// Masked reconstruction forward pass. Returns the per-token voxel
/// predictions `[N, T, p³·C]` (on the tape) and the raw target tokens.
/// Only visible tokens ever reach the encoder.
pub fn mae_forward(
    tape: &mut Tape,
    store: &ParamStore,
    model: &MaeModel,
    volume: &Tensor,
    plan: &MaskPlan,
) -> Result<(Var, Tensor)> {
    check_volume(model, volume)?;
    let (tokens, geom) = patchify(volume, model.config.patch)?;
    if geom != model.geom || plan.tokens() != geom.tokens() {
        return Err(Error::Geometry("mask plan does not cover the token grid".into()));
    }
    let n = tokens.shape()[0];
    let (t, td) = (geom.tokens(), geom.token_dim());

    // gather visible rows before anything touches the tape, so masked
    // content cannot reach the encoder
    let v = plan.visible_idx.len();
    let mut vis = vec![0.0; n * v * td];
    for ni in 0..n {
        for (r, &ti) in plan.visible_idx.iter().enumerate() {
            vis[(ni * v + r) * td..(ni * v + r + 1) * td]
                .copy_from_slice(&tokens.data()[(ni * t + ti) * td..(ni * t + ti + 1) * td]);
        }
    }
    let vis = tape.constant(Tensor::new(vec![n, v, td], vis)?);

    let ew = tape.param(store, model.patch_embed_w);
    let eb = tape.param(store, model.patch_embed_b);
    let embedded = ops::linear(tape, vis, ew, eb)?;
    let pos_vis = tape.constant(gather_rows(&model.enc_pos, &plan.visible_idx));
    let embedded = ops::add(tape, embedded, pos_vis)?;
    let encoded = stack_forward(tape, store, &model.encoder, embedded)?;

    let pw = tape.param(store, model.enc_to_dec_w);
    let pb = tape.param(store, model.enc_to_dec_b);
    let narrowed = ops::linear(tape, encoded, pw, pb)?;
    let mask_tok = tape.param(store, model.mask_token);
    let full = scatter_with_mask_tokens(tape, narrowed, plan, mask_tok)?;
    let dec_pos = tape.constant(model.dec_pos.clone());
    let full = ops::add(tape, full, dec_pos)?;
    let decoded = stack_forward(tape, store, &model.decoder, full)?;

    let hw = tape.param(store, model.pred_w);
    let hb = tape.param(store, model.pred_b);
    let pred = ops::linear(tape, decoded, hw, hb)?;
    Ok((pred, tokens))
}

/// Standardizes each token row to mean 0 / variance 1.
fn normalize_target_tokens(target: &Tensor) -> Tensor {
    let s = target.shape();
    let (rows, td) = (s[0] * s[1], s[2]);
    let mut out = target.data().to_vec();
    for r in 0..rows {
        let row = &mut out[r * td..(r + 1) * td];
        let mean = row.iter().sum::<f64>() / td as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / td as f64;
        let inv = 1.0 / (var + TARGET_NORM_EPS).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Tensor::new(s.to_vec(), out).expect("shape/data agree")
}

/// Mean squared error over masked tokens only:
/// Σ_{n, t ∈ masked, e} (pred − target)² / (N·|masked|·p³·C).
pub fn reconstruction_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    plan: &MaskPlan,
    norm_targets: bool,
) -> Result<Var> {
    if plan.masked_idx.is_empty() {
        return Err(Error::Domain("reconstruction loss needs at least one masked token".into()));
    }
    let ps = tape.value(pred).shape().to_vec();
    if ps != target.shape() {
        return Err(Error::Shape(format!(
            "pred {:?} and target {:?} disagree",
            ps,
            target.shape()
        )));
    }
    let (n, t, td) = (ps[0], ps[1], ps[2]);
    if plan.tokens() != t {
        return Err(Error::Shape("mask plan does not cover the token axis".into()));
    }
    let target = if norm_targets {
        normalize_target_tokens(target)
    } else {
        target.clone()
    };
    let tv = tape.constant(target);
    let diff = ops::sub(tape, pred, tv)?;
    let sq = ops::mul(tape, diff, diff)?;
    let mut mask = vec![0.0; t];
    for &mi in &plan.masked_idx {
        mask[mi] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![t, 1], mask)?);
    let picked = ops::mul(tape, sq, mask)?;
    let total = ops::sum_all(tape, picked)?;
    let denom = (n * plan.masked_idx.len() * td) as f64;
    Ok(ops::scale(tape, total, 1.0 / denom))
}

/// Linear classifier over mean-pooled encoder features.
pub struct ClassifierHead {
    pub num_classes: usize,
    pub w: ParamId,
    pub b: ParamId,
}

impl ClassifierHead {
    pub fn init(
        store: &mut ParamStore,
        enc_dim: usize,
        num_classes: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let hb = 1.0 / (enc_dim as f64).sqrt();
        let w = store.register("head.w", uniform_tensor(rng, &[enc_dim, num_classes], hb));
        let b = store.register("head.b", Tensor::zeros(&[num_classes]));
        ClassifierHead { num_classes, w, b }
    }
}

/// Runs the encoder over every token (no masking): `[N, T, enc_dim]`.
pub fn encode_all(
    tape: &mut Tape,
    store: &ParamStore,
    model: &MaeModel,
    volume: &Tensor,
) -> Result<Var> {
    check_volume(model, volume)?;
    let (tokens, _) = patchify(volume, model.config.patch)?;
    let tv = tape.constant(tokens);
    let ew = tape.param(store, model.patch_embed_w);
    let eb = tape.param(store, model.patch_embed_b);
    let embedded = ops::linear(tape, tv, ew, eb)?;
    let pos = tape.constant(model.enc_pos.clone());
    let embedded = ops::add(tape, embedded, pos)?;
    stack_forward(tape, store, &model.encoder, embedded)
}

/// Mean-pool over tokens then the head: logits `[N, num_classes]`.
pub fn classify(
    tape: &mut Tape,
    store: &ParamStore,
    model: &MaeModel,
    head: &ClassifierHead,
    volume: &Tensor,
) -> Result<Var> {
    let features = encode_all(tape, store, model, volume)?;
    let pooled = ops::mean_axis(tape, features, 1)?;
    let w = tape.param(store, head.w);
    let b = tape.param(store, head.b);
    ops::linear(tape, pooled, w, b)
}

// ---------------------------------------------------------------------------
// checkpoint container
//
// Layout (all integers little-endian):
//   magic  "MVCK"                        4 bytes
//   u16    version (= 1)
//   u32 ×10  enc_depth enc_dim dec_depth dec_dim patch channels H W L n_state
//   f64    mask_ratio
//   u8     norm_targets
//   u32    param count P
//   P ×  { u32 name_len, name bytes, u32 ndim, u32 dims…, f64 data… }

const CKPT_MAGIC: &[u8; 4] = b"MVCK";
const CKPT_VERSION: u16 = 1;

pub fn save_checkpoint(path: &Path, config: &MaeConfig, store: &ParamStore) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for v in [
        config.enc_depth,
        config.enc_dim,
        config.dec_depth,
        config.dec_dim,
        config.patch,
        config.channels,
        config.volume.0,
        config.volume.1,
        config.volume.2,
        config.n_state,
    ] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    buf.extend_from_slice(&config.mask_ratio.to_le_bytes());
    buf.push(config.norm_targets as u8);
    let ids: Vec<ParamId> = store.ids().collect();
    buf.extend_from_slice(&(ids.len() as u32).to_le_bytes());
    for id in ids {
        let name = store.name(id).as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        let tensor = store.get(id);
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(MaeConfig, Vec<(String, Tensor)>)> {
    let buf = fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {CKPT_MAGIC:?}"),
        });
    }
    let version = r.u16("version")?;
    if version != CKPT_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }
    let mut ints = [0usize; 10];
    for v in ints.iter_mut() {
        *v = r.u32("config field")? as usize;
    }
    let mask_ratio = r.f64("mask_ratio")?;
    let norm_targets = r.take(1, "norm_targets")?[0] != 0;
    let config = MaeConfig {
        enc_depth: ints[0],
        enc_dim: ints[1],
        dec_depth: ints[2],
        dec_dim: ints[3],
        patch: ints[4],
        channels: ints[5],
        volume: (ints[6], ints[7], ints[8]),
        mask_ratio,
        norm_targets,
        n_state: ints[9],
    };
    let count = r.u32("param count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_off = r.pos;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec()).map_err(|e| {
            Error::Parse {
                offset: name_off,
                message: format!("parameter name is not UTF-8: {e}"),
            }
        })?;
        let ndim = r.u32("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64("tensor data")?);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Parse {
            offset: r.pos,
            message: format!("{} trailing bytes after last parameter", buf.len() - r.pos),
        });
    }
    Ok((config, params))
}

/// Copies loaded tensors into a freshly constructed store by name.
/// Every loaded name must exist with a matching shape; extra names in the
/// store (e.g. a head the checkpoint predates) keep their fresh values.
pub fn apply_weights(store: &mut ParamStore, params: &[(String, Tensor)]) -> Result<()> {
    for (name, tensor) in params {
        let id = store.by_name(name).ok_or_else(|| {
            Error::Config(format!("checkpoint parameter `{name}` not present in model"))
        })?;
        if store.get(id).shape() != tensor.shape() {
            return Err(Error::Config(format!(
                "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                tensor.shape(),
                store.get(id).shape()
            )));
        }
        store.get_mut(id).data_mut().copy_from_slice(tensor.data());
    }
    Ok(())
}

/// Convenience: draw a fresh mask plan sized for this model.
pub fn plan_for(model: &MaeModel, seed: u64) -> Result<MaskPlan> {
    sample_mask(model.geom.tokens(), model.config.mask_ratio, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::ops::testutil::{rand_tensor, rng};

    fn toy_config() -> MaeConfig {
        MaeConfig {
            enc_depth: 1,
            enc_dim: 8,
            dec_depth: 1,
            dec_dim: 4,
            patch: 2,
            channels: 1,
            volume: (4, 4, 4),
            mask_ratio: 0.75,
            norm_targets: false,
            n_state: 2,
        }
    }

    #[test]
    fn forward_shapes() {
        let mut r = rng(60);
        let config = MaeConfig {
            enc_depth: 1,
            enc_dim: 16,
            dec_depth: 1,
            dec_dim: 8,
            patch: 8,
            channels: 1,
            volume: (32, 32, 32),
            mask_ratio: 0.75,
            norm_targets: false,
            n_state: 2,
        };
        let mut store = ParamStore::new();
        let model = MaeModel::init(config, &mut store, &mut r).unwrap();
        assert_eq!(model.geom.tokens(), 64);
        let plan = plan_for(&model, 1).unwrap();
        assert_eq!(plan.visible_idx.len(), 16);
        assert_eq!(plan.masked_idx.len(), 48);
        let volume = rand_tensor(&mut r, &[2, 1, 32, 32, 32]);
        let mut tape = Tape::new();
        let (pred, target) = mae_forward(&mut tape, &store, &model, &volume, &plan).unwrap();
        assert_eq!(tape.value(pred).shape(), &[2, 64, 512]);
        assert_eq!(target.shape(), &[2, 64, 512]);
    }

    #[test]
    fn masked_voxels_never_reach_encoder() {
        let mut r = rng(61);
        let mut store = ParamStore::new();
        let model = MaeModel::init(toy_config(), &mut store, &mut r).unwrap();
        let plan = plan_for(&model, 2).unwrap();
        let volume = rand_tensor(&mut r, &[1, 1, 4, 4, 4]);

        // corrupt every voxel of one masked patch
        let mut corrupted = volume.clone();
        let ti = plan.masked_idx[0];
        let (gl, gh, gw) = model.geom.grid;
        let _ = gl;
        let il = ti / (gh * gw);
        let ih = (ti / gw) % gh;
        let iw = ti % gw;
        let p = model.config.patch;
        for dz in 0..p {
            for dy in 0..p {
                for dx in 0..p {
                    let (h, w, l) = (ih * p + dz, iw * p + dy, il * p + dx);
                    corrupted.data_mut()[(h * 4 + w) * 4 + l] += 7.5;
                }
            }
        }

        let mut tape = Tape::new();
        let (pred_a, tgt_a) = mae_forward(&mut tape, &store, &model, &volume, &plan).unwrap();
        let pa = tape.value(pred_a).data().to_vec();
        let mut tape = Tape::new();
        let (pred_b, tgt_b) = mae_forward(&mut tape, &store, &model, &corrupted, &plan).unwrap();
        let pb = tape.value(pred_b).data().to_vec();
        assert_eq!(pa, pb, "prediction saw masked content");
        assert_ne!(tgt_a.data(), tgt_b.data(), "targets should change");
    }

    #[test]
    fn loss_contracts() {
        let mut r = rng(62);
        let plan = sample_mask(4, 0.25, 3).unwrap(); // 1 masked token
        assert_eq!(plan.masked_idx.len(), 1);
        let target = rand_tensor(&mut r, &[1, 4, 8]);

        // pred == target → 0
        let mut tape = Tape::new();
        let pv = tape.constant(target.clone());
        let loss = reconstruction_loss(&mut tape, pv, &target, &plan, false).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);

        // one masked token off by constant c → c²
        let c = 0.37;
        let mut shifted = target.clone();
        let mi = plan.masked_idx[0];
        for e in 0..8 {
            shifted.data_mut()[mi * 8 + e] += c;
        }
        let mut tape = Tape::new();
        let pv = tape.constant(shifted.clone());
        let loss = reconstruction_loss(&mut tape, pv, &target, &plan, false).unwrap();
        assert!((tape.value(loss).item() - c * c).abs() < 1e-12);

        // changing pred at a visible token leaves loss unchanged
        let vi = plan.visible_idx[0];
        let mut vis_changed = shifted.clone();
        vis_changed.data_mut()[vi * 8 + 3] += 100.0;
        let mut tape = Tape::new();
        let pv = tape.constant(vis_changed);
        let loss2 = reconstruction_loss(&mut tape, pv, &target, &plan, false).unwrap();
        assert!((tape.value(loss2).item() - c * c).abs() < 1e-12);

        // empty mask → error
        let empty = MaskPlan {
            masked_idx: vec![],
            visible_idx: (0..4).collect(),
            seed: 0,
        };
        let mut tape = Tape::new();
        let pv = tape.constant(target.clone());
        assert!(matches!(
            reconstruction_loss(&mut tape, pv, &target, &empty, false),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn normalized_targets_zero_loss_on_standardized_pred() {
        let mut r = rng(63);
        let target = rand_tensor(&mut r, &[1, 4, 8]);
        let plan = sample_mask(4, 0.5, 5).unwrap();
        let standardized = normalize_target_tokens(&target);
        let mut tape = Tape::new();
        let pv = tape.constant(standardized.clone());
        let loss = reconstruction_loss(&mut tape, pv, &target, &plan, true).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-20);
        // rows really are standardized
        for row in 0..4 {
            let s = &standardized.data()[row * 8..(row + 1) * 8];
            let mean: f64 = s.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn full_pipeline_gradient_check() {
        let mut r = rng(64);
        let mut store = ParamStore::new();
        let model = MaeModel::init(toy_config(), &mut store, &mut r).unwrap();
        let plan = plan_for(&model, 4).unwrap();
        let volume = rand_tensor(&mut r, &[1, 1, 4, 4, 4]);

        let mut tape = Tape::new();
        let (pred, target) = mae_forward(&mut tape, &store, &model, &volume, &plan).unwrap();
        let loss = reconstruction_loss(&mut tape, pred, &target, &plan, false).unwrap();
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut store);

        let eval = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let (pred, target) = mae_forward(&mut tape, store, &model, &volume, &plan).unwrap();
            let loss = reconstruction_loss(&mut tape, pred, &target, &plan, false).unwrap();
            tape.value(loss).item()
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let grad = store.get(id).grad.clone().expect("param gradient");
            let numel = store.get(id).numel();
            let stride = (numel / 5).max(1);
            for e in (0..numel).step_by(stride) {
                let orig = store.get(id).data()[e];
                store.get_mut(id).data_mut()[e] = orig + h;
                let fp = eval(&store);
                store.get_mut(id).data_mut()[e] = orig - h;
                let fm = eval(&store);
                store.get_mut(id).data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let err = (grad[e] - fd).abs() / f64::max(1e-5, grad[e].abs().max(fd.abs()));
                assert!(err < 1e-4, "{} elem {e}: {} vs {fd}", store.name(id), grad[e]);
            }
        }
    }

    #[test]
    fn classify_shapes_and_gradient() {
        let mut r = rng(65);
        let mut store = ParamStore::new();
        let model = MaeModel::init(toy_config(), &mut store, &mut r).unwrap();
        let head = ClassifierHead::init(&mut store, model.config.enc_dim, 2, &mut r);
        let volume = rand_tensor(&mut r, &[2, 1, 4, 4, 4]);

        let mut tape = Tape::new();
        let logits = classify(&mut tape, &store, &model, &head, &volume).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 2]);
        let labels = vec![0usize, 1];
        let loss = ops::softmax_cross_entropy(&mut tape, logits, &labels).unwrap();
        tape.backward(loss).unwrap();
        tape.collect_param_grads(&mut store);

        let eval = |store: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let logits = classify(&mut tape, store, &model, &head, &volume).unwrap();
            let loss = ops::softmax_cross_entropy(&mut tape, logits, &labels).unwrap();
            tape.value(loss).item()
        };
        let h = 1e-5;
        for id in [head.w, head.b, model.patch_embed_w, model.mask_token] {
            let grad = store.get(id).grad.clone();
            if store.name(id) == "mae.mask_token" {
                // decoder params never enter the classification graph
                assert!(grad.is_none());
                continue;
            }
            let grad = grad.expect("param gradient");
            let numel = store.get(id).numel();
            let stride = (numel / 5).max(1);
            for e in (0..numel).step_by(stride) {
                let orig = store.get(id).data()[e];
                store.get_mut(id).data_mut()[e] = orig + h;
                let fp = eval(&store);
                store.get_mut(id).data_mut()[e] = orig - h;
                let fm = eval(&store);
                store.get_mut(id).data_mut()[e] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let err = (grad[e] - fd).abs() / f64::max(1e-5, grad[e].abs().max(fd.abs()));
                assert!(err < 1e-4, "{} elem {e}", store.name(id));
            }
        }
    }

    #[test]
    fn mean_pool_constant_and_permutation_invariant() {
        let mut r = rng(66);
        // constant features: pooled == the constant row
        let mut tape = Tape::new();
        let mut data = Vec::new();
        let row = [1.5, -2.0, 0.25];
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let x = tape.constant(Tensor::new(vec![1, 5, 3], data).unwrap());
        let pooled = ops::mean_axis(&mut tape, x, 1).unwrap();
        assert_eq!(tape.value(pooled).data(), &row);

        // permutation invariance of the pooling op in isolation
        let tokens = rand_tensor(&mut r, &[1, 6, 4]);
        let perm = [4usize, 2, 0, 5, 3, 1];
        let mut pdata = vec![0.0; tokens.numel()];
        for (ti, &src) in perm.iter().enumerate() {
            pdata[ti * 4..(ti + 1) * 4].copy_from_slice(&tokens.data()[src * 4..(src + 1) * 4]);
        }
        let mut tape = Tape::new();
        let a = tape.constant(tokens);
        let b = tape.constant(Tensor::new(vec![1, 6, 4], pdata).unwrap());
        let pa = ops::mean_axis(&mut tape, a, 1).unwrap();
        let pb = ops::mean_axis(&mut tape, b, 1).unwrap();
        for (u, v) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn encoder_compute_scales_with_visible_fraction() {
        let mut r = rng(67);
        let mut store = ParamStore::new();
        let config = MaeConfig {
            enc_depth: 2,
            enc_dim: 8,
            dec_depth: 1,
            dec_dim: 4,
            patch: 2,
            channels: 1,
            volume: (4, 4, 8), // T = 16, divisible by 4
            mask_ratio: 0.75,
            norm_targets: false,
            n_state: 2,
        };
        let model = MaeModel::init(config, &mut store, &mut r).unwrap();
        let t = model.geom.tokens();
        let v = t / 4;

        let inputs: Vec<Tensor> = [v, 2 * v, t]
            .iter()
            .map(|&len| rand_tensor(&mut r, &[1, len, 8]))
            .collect();
        let macs_for = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let before = tape.macs();
            stack_forward(&mut tape, &store, &model.encoder, xv).unwrap();
            tape.macs() - before
        };
        let m: Vec<u64> = inputs.iter().map(macs_for).collect();
        // work is affine in token count: k per token plus a fixed
        // parameter-preprocessing term c (the a = −exp(a_log) transform)
        let k = (m[1] - m[0]) / v as u64;
        assert_eq!(m[1] - m[0], k * v as u64);
        assert_eq!(m[2] - m[1], k * (t - 2 * v) as u64);
        let c = m[0] - k * v as u64;
        // per-token work at 1/4 the tokens is exactly 1/4
        assert_eq!(4 * (m[0] - c), m[2] - c);
        // and the fixed term is a sliver of even the smallest run
        assert!(c * 40 <= m[0], "fixed overhead {c} vs {}", m[0]);
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut r = rng(68);
        let mut store = ParamStore::new();
        let config = toy_config();
        let model = MaeModel::init(config.clone(), &mut store, &mut r).unwrap();
        let _ = &model;
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.mvck");
        let p2 = dir.path().join("b.mvck");
        save_checkpoint(&p1, &config, &store).unwrap();

        let (loaded_cfg, params) = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded_cfg, config);
        let mut store2 = ParamStore::new();
        let mut r2 = rng(999); // different init, then overwritten
        let _model2 = MaeModel::init(config.clone(), &mut store2, &mut r2).unwrap();
        apply_weights(&mut store2, &params).unwrap();
        save_checkpoint(&p2, &loaded_cfg, &store2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_parse_errors_carry_offsets() {
        let mut r = rng(69);
        let mut store = ParamStore::new();
        let config = toy_config();
        MaeModel::init(config.clone(), &mut store, &mut r).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.mvck");
        save_checkpoint(&p, &config, &store).unwrap();
        let good = fs::read(&p).unwrap();

        // corrupt magic
        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {other:?}"),
        }

        // truncate mid-tensor
        fs::write(&p, &good[..good.len() - 9]).unwrap();
        match load_checkpoint(&p) {
            Err(Error::Parse { offset, message }) => {
                assert!(offset > 0);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
