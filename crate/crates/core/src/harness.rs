//! Training loops (masked-reconstruction pretraining and classification
//! fine-tuning), cosine LR schedule, AdamW, stratified k-fold splits, and
//! binary metrics.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::model::{classify, mae_forward, plan_for, reconstruction_loss, ClassifierHead, MaeModel};
use crate::numcore::ops;
use crate::numcore::tape::{ParamStore, Tape};
use crate::numcore::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Knobs for one training run. Warmup is counted in epochs and converted
/// to optimizer steps internally.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub seed: u64,
    /// Per-sample train-time augmentation; off by default.
    pub augment: Option<AugmentConfig>,
    /// Fine-tuning only: freeze the backbone and train just the classifier
    /// head (a linear probe of the pretrained representation).
    pub head_only: bool,
}

impl TrainConfig {
    /// Full-scale pretraining regime (1000 epochs, lr 1e-3, wd 0.05).
    pub fn pretrain_full() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            epochs: 1000,
            base_lr: 1e-3,
            weight_decay: 0.05,
            batch_size: 4,
            warmup_epochs: 50,
            seed: 0,
            augment: None,
            head_only: false,
        }
    }

    /// Full-scale fine-tuning regime (100 epochs at a reduced lr of 1e-4).
    pub fn finetune_full() -> Self {
        TrainConfig {
            mode: TrainMode::Finetune,
            epochs: 100,
            base_lr: 1e-4,
            weight_decay: 0.05,
            batch_size: 4,
            warmup_epochs: 5,
            seed: 0,
            augment: None,
            head_only: false,
        }
    }

    /// Desk-scale pretraining: same shape, laptop-sized budget.
    pub fn pretrain_desk() -> Self {
        TrainConfig {
            epochs: 200,
            warmup_epochs: 10,
            ..Self::pretrain_full()
        }
    }

    /// Desk-scale fine-tuning.
    pub fn finetune_desk() -> Self {
        TrainConfig {
            epochs: 50,
            warmup_epochs: 2,
            base_lr: 1e-3,
            ..Self::finetune_full()
        }
    }
}

/// Linear warmup to `base_lr` over `warmup` steps, then a half-cosine
/// decay to zero at `total`.
pub fn cosine_lr(step: usize, total: usize, base_lr: f64, warmup: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    if step < warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return base_lr;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

/// AdamW with decoupled weight decay. Decay applies only to tensors of
/// rank ≥ 2 (projection matrices), never to biases, gains, or scalars.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When set, only parameters whose registered name starts with this
    /// prefix are updated; everything else stays frozen.
    pub only_prefix: Option<String>,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.get(id).numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            only_prefix: None,
            t: 0,
            m,
            v,
        }
    }

    /// One update from the gradients currently stored on the parameters.
    /// Consumes the gradients; parameters without one are left alone.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, id) in store.ids().enumerate().collect::<Vec<_>>() {
            if let Some(prefix) = &self.only_prefix {
                if !store.name(id).starts_with(prefix.as_str()) {
                    store.get_mut(id).grad = None;
                    continue;
                }
            }
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad.take() else { continue };
            let decay = tensor.shape().len() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = tensor.data_mut();
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                if decay {
                    data[j] -= lr * self.weight_decay * data[j];
                }
            }
        }
    }
}

/// Stacks same-shaped `[C, H, W, L]` volumes into one `[N, C, H, W, L]`
/// batch in the given index order.
pub fn stack_volumes(volumes: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let first = volumes
        .get(*idx.first().ok_or_else(|| Error::Domain("empty batch".into()))?)
        .ok_or_else(|| Error::Domain("batch index out of range".into()))?;
    let per = first.numel();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        let v = &volumes[i];
        if v.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "cannot stack volumes of shapes {:?} and {:?}",
                first.shape(),
                v.shape()
            )));
        }
        data.extend_from_slice(v.data());
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

fn assemble_batch(
    volumes: &[Tensor],
    chunk: &[usize],
    aug: Option<&AugmentConfig>,
    rng: &mut ChaCha12Rng,
) -> Result<Tensor> {
    match aug {
        None => stack_volumes(volumes, chunk),
        Some(cfg) => {
            let augmented: Vec<Tensor> = chunk
                .iter()
                .map(|&i| augment(&volumes[i], cfg, rng.gen()))
                .collect();
            let idx: Vec<usize> = (0..augmented.len()).collect();
            stack_volumes(&augmented, &idx)
        }
    }
}

fn check_finite(loss: f64, epoch: usize, step: usize, last: f64) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Train(format!(
        "loss became non-finite ({loss}) at epoch {epoch}, step {step}; \
         last finite loss was {last:.6e} — lower the learning rate or check the inputs"
    )))
}

/// Masked-reconstruction pretraining over a set of `[C, H, W, L]` volumes.
/// Returns the per-epoch mean loss curve. Deterministic per seed.
pub fn pretrain(
    store: &mut ParamStore,
    model: &MaeModel,
    volumes: &[Tensor],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if volumes.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Train("pretrain needs volumes, epochs ≥ 1, batch ≥ 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(store, cfg.weight_decay);
    let steps_per_epoch = volumes.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_finite = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(volumes, chunk, cfg.augment.as_ref(), &mut rng)?;
            // one mask plan shared by the whole batch, fresh each step
            let plan = plan_for(model, rng.gen())?;
            let mut tape = Tape::new();
            let (pred, target) = mae_forward(&mut tape, store, model, &batch, &plan)?;
            let loss = reconstruction_loss(&mut tape, pred, &target, &plan, model.config.norm_targets)?;
            let lv = tape.value(loss).data()[0];
            check_finite(lv, epoch, step, last_finite)?;
            last_finite = lv;
            tape.backward(loss)?;
            tape.collect_param_grads(store);
            opt.step(store, cosine_lr(step, total, cfg.base_lr, warmup));
            step += 1;
            epoch_loss += lv;
        }
        curve.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(curve)
}

/// Supervised fine-tuning of encoder + classifier head with softmax
/// cross-entropy. Returns the per-epoch mean loss curve.
pub fn finetune(
    store: &mut ParamStore,
    model: &MaeModel,
    head: &ClassifierHead,
    volumes: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if volumes.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Train("finetune needs volumes, epochs ≥ 1, batch ≥ 1".into()));
    }
    if labels.len() != volumes.len() {
        return Err(Error::Shape(format!(
            "{} volumes but {} labels",
            volumes.len(),
            labels.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(store, cfg.weight_decay);
    if cfg.head_only {
        opt.only_prefix = Some("head.".into());
    }
    let steps_per_epoch = volumes.len().div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut last_finite = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..volumes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(volumes, chunk, cfg.augment.as_ref(), &mut rng)?;
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let logits = classify(&mut tape, store, model, head, &batch)?;
            let loss = ops::softmax_cross_entropy(&mut tape, logits, &batch_labels)?;
            let lv = tape.value(loss).data()[0];
            check_finite(lv, epoch, step, last_finite)?;
            last_finite = lv;
            tape.backward(loss)?;
            tape.collect_param_grads(store);
            opt.step(store, cosine_lr(step, total, cfg.base_lr, warmup));
            step += 1;
            epoch_loss += lv;
        }
        curve.push(epoch_loss / steps_per_epoch as f64);
    }
    Ok(curve)
}

/// Class-1 softmax probability for each volume, in order.
pub fn predict_scores(
    store: &ParamStore,
    model: &MaeModel,
    head: &ClassifierHead,
    volumes: &[Tensor],
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(volumes.len());
    let all: Vec<usize> = (0..volumes.len()).collect();
    for chunk in all.chunks(8) {
        let batch = stack_volumes(volumes, chunk)?;
        let mut tape = Tape::new();
        let logits = classify(&mut tape, store, model, head, &batch)?;
        let probs = ops::softmax_rows(tape.value(logits))?;
        let k = probs.shape()[1];
        for r in 0..chunk.len() {
            scores.push(probs.data()[r * k + 1]);
        }
    }
    Ok(scores)
}

// ---------------------------------------------------------------------------
// cross-validation

/// Stratified k-fold split: per-class shuffle, then round-robin deal into
/// k test folds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub test_folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// Every index not in fold `f`'s test set, ascending.
    pub fn train_fold(&self, f: usize) -> Vec<usize> {
        let n: usize = self.test_folds.iter().map(Vec::len).sum();
        let mut in_test = vec![false; n];
        for &i in &self.test_folds[f] {
            in_test[i] = true;
        }
        (0..n).filter(|&i| !in_test[i]).collect()
    }
}

pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Domain(format!("k-fold needs k ≥ 2, got {k}")));
    }
    if labels.is_empty() {
        return Err(Error::Domain("k-fold needs a non-empty label vector".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = labels.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    };
    let mut folds = vec![Vec::new(); k];
    for class in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < k {
            return Err(Error::Domain(format!(
                "class {class} has {} members, fewer than k = {k}",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (j, idx) in members.into_iter().enumerate() {
            folds[j % k].push(idx);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(FoldPlan { k, test_folds: folds })
}

// ---------------------------------------------------------------------------
// metrics

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub auc: f64,
}

/// Binary metrics from class-1 scores: accuracy at threshold 0.5, F1 of
/// the positive class, and AUC as the tie-corrected rank statistic
/// (Mann–Whitney U with midranks).
pub fn metrics(scores: &[f64], labels: &[usize]) -> Result<Metrics> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape(format!(
            "need matching non-empty scores/labels, got {} and {}",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Domain("labels must be 0 or 1".into()));
    }
    let npos = labels.iter().filter(|&&l| l == 1).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Domain(
            "AUC is undefined for a single-class label vector".into(),
        ));
    }

    let (mut tp, mut fp, mut tn, mut fnn) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= 0.5, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnn += 1,
        }
    }
    let accuracy = (tp + tn) as f64 / labels.len() as f64;
    let f1 = if 2 * tp + fp + fnn == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fnn) as f64
    };

    // midranks: ties share the average of the ranks they span
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    let rank_sum_pos: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let u = rank_sum_pos - (npos * (npos + 1)) as f64 / 2.0;
    let auc = u / (npos as f64 * nneg as f64);

    Ok(Metrics { accuracy, f1, auc })
}
