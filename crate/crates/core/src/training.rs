//! Minibatch BPTT training with Adam, quantization-aware training and
//! knowledge distillation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::FliDataset;
use crate::error::{Error, Result};
use crate::model::{Gradients, ModelConfig, SeqModel};
use crate::quant::{fake_quant_model, Bits, ScaleMode};
use crate::tensor::AdamState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// MSE weight in the mixed loss; MAE gets `1 − mixed_alpha`.
    pub mixed_alpha: f64,
    /// Ground-truth weight in the distillation loss.
    pub kd_beta: f64,
    pub qat_bits: Option<Bits>,
    pub qat_mode: ScaleMode,
    pub seed: u64,
    pub shuffle: bool,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 256,
            lr: AdamState::DEFAULT_LR,
            mixed_alpha: 0.8,
            kd_beta: 0.5,
            qat_bits: None,
            qat_mode: ScaleMode::SignedSymmetric,
            seed: 0,
            shuffle: true,
            patience: 5,
            clip_norm: 5.0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, v) in [("mixed_alpha", self.mixed_alpha), ("kd_beta", self.kd_beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::Config("clip_norm must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub seconds: Vec<f64>,
    /// Epoch (0-based) of the returned checkpoint.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }
}

fn check_lengths(a: &[f64], b: &[f64], what: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(what, &[a.len()], &[b.len()]));
    }
    if a.is_empty() {
        return Err(Error::Input(format!("{what}: empty sequence")));
    }
    Ok(())
}

/// `alpha·MSE + (1 − alpha)·MAE`.
pub fn mixed_loss(pred: &[f64], target: &[f64], alpha: f64) -> Result<f64> {
    check_lengths(pred, target, "mixed_loss")?;
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let d = p - t;
        se += d * d;
        ae += d.abs();
    }
    Ok(alpha * se / n + (1.0 - alpha) * ae / n)
}

/// Gradient of [`mixed_loss`] with respect to `pred`; the MAE subgradient is
/// zero at exact ties.
pub fn mixed_loss_grad(pred: &[f64], target: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_lengths(pred, target, "mixed_loss")?;
    let n = pred.len() as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            let sign = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            alpha * 2.0 * d / n + (1.0 - alpha) * sign / n
        })
        .collect())
}

/// `beta·mixed_loss(student, target) + (1 − beta)·MSE(student, teacher)`.
pub fn kd_loss(student: &[f64], teacher: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<f64> {
    check_lengths(student, teacher, "kd_loss")?;
    let hard = mixed_loss(student, target, alpha)?;
    let soft = mixed_loss(student, teacher, 1.0)?;
    Ok(beta * hard + (1.0 - beta) * soft)
}

pub fn kd_loss_grad(student: &[f64], teacher: &[f64], target: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    check_lengths(student, teacher, "kd_loss")?;
    let hard = mixed_loss_grad(student, target, alpha)?;
    let soft = mixed_loss_grad(student, teacher, 1.0)?;
    Ok(hard.iter().zip(&soft).map(|(h, s)| beta * h + (1.0 - beta) * s).collect())
}

/// Mean loss over a batch and its parameter gradient. With `teacher` set the
/// loss is the distillation loss, otherwise the mixed loss.
pub fn loss_and_grad(
    model: &SeqModel,
    inputs: &[&[f64]],
    targets: &[&[f64]],
    teacher: Option<&[&[f64]]>,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Gradients)> {
    let (out, cache) = model.forward_batch(inputs)?;
    if targets.len() != out.len() || teacher.is_some_and(|t| t.len() != out.len()) {
        return Err(Error::shape("loss targets", &[targets.len()], &[out.len()]));
    }
    let b = out.len() as f64;
    let mut loss = 0.0;
    let mut d_out = Vec::with_capacity(out.len());
    for (i, y) in out.iter().enumerate() {
        let (l, mut g) = match teacher {
            Some(t) => (
                kd_loss(y, t[i], targets[i], alpha, beta)?,
                kd_loss_grad(y, t[i], targets[i], alpha, beta)?,
            ),
            None => (mixed_loss(y, targets[i], alpha)?, mixed_loss_grad(y, targets[i], alpha)?),
        };
        loss += l / b;
        g.iter_mut().for_each(|v| *v /= b);
        d_out.push(g);
    }
    let grads = model.backward_batch(&cache, &d_out)?;
    Ok((loss, grads))
}

/// Seeded 90/10-style split by record index: `(train, validation)`.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Input(format!("need at least 2 records to split, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 1);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

const EVAL_CHUNK: usize = 256;

fn forward_model(model: &SeqModel, tc: &TrainConfig) -> (SeqModel, Option<Vec<Vec<bool>>>) {
    match tc.qat_bits {
        Some(bits) => {
            let (fq, masks) = fake_quant_model(model, bits, tc.qat_mode);
            (fq, Some(masks))
        }
        None => (model.clone(), None),
    }
}

/// Mean mixed loss of `model` against ground truth over `indices`.
fn eval_loss(model: &SeqModel, ds: &FliDataset, indices: &[usize], alpha: f64) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|&i| ds.records[i].tpsf.as_slice()).collect();
        let out = model.predict_batch(&inputs)?;
        for (y, &i) in out.iter().zip(chunk) {
            total += mixed_loss(y, &ds.records[i].sfd, alpha)?;
        }
    }
    Ok(total / indices.len() as f64)
}

fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.l2_norm();
    if norm > max_norm {
        grads.scale_in_place(max_norm / norm);
    }
}

fn fit(
    mut model: SeqModel,
    ds: &FliDataset,
    tc: &TrainConfig,
    teacher_out: Option<&[Vec<f64>]>,
) -> Result<(SeqModel, TrainHistory)> {
    tc.validate()?;
    if ds.is_empty() {
        return Err(Error::Input("training dataset is empty".into()));
    }
    if ds.grid.n_gates != model.config.seq_len {
        return Err(Error::shape("training data", &[ds.grid.n_gates], &[model.config.seq_len]));
    }
    let mut history = TrainHistory::default();
    if tc.epochs == 0 {
        return Ok((model, history));
    }
    let (mut train_idx, val_idx) = split_indices(ds.len(), tc.val_fraction, tc.seed)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    shuffle_rng.set_stream(2);
    let mut adam: Vec<AdamState> = model.params().iter().map(|p| AdamState::new(p.shape(), tc.lr)).collect();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 0..tc.epochs {
        let start = Instant::now();
        if tc.shuffle {
            train_idx.shuffle(&mut shuffle_rng);
        }
        let mut epoch_loss = 0.0;
        for (bi, batch) in train_idx.chunks(tc.batch_size).enumerate() {
            let inputs: Vec<&[f64]> = batch.iter().map(|&i| ds.records[i].tpsf.as_slice()).collect();
            let targets: Vec<&[f64]> = batch.iter().map(|&i| ds.records[i].sfd.as_slice()).collect();
            let teacher: Option<Vec<&[f64]>> = teacher_out.map(|t| batch.iter().map(|&i| t[i].as_slice()).collect());
            let (fwd, masks) = forward_model(&model, tc);
            let (loss, mut grads) =
                loss_and_grad(&fwd, &inputs, &targets, teacher.as_deref(), tc.mixed_alpha, tc.kd_beta)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {bi}")));
            }
            if let Some(masks) = masks {
                // straight-through estimator: clipped elements pass no gradient
                for (g, mask) in grads.params_mut().into_iter().zip(masks) {
                    for (v, keep) in g.data_mut().iter_mut().zip(mask) {
                        if !keep {
                            *v = 0.0;
                        }
                    }
                }
            }
            clip_gradients(&mut grads, tc.clip_norm);
            for ((p, g), st) in model.params_mut().into_iter().zip(grads.params()).zip(adam.iter_mut()) {
                st.update(p, g)
                    .map_err(|e| Error::Diverged(format!("epoch {epoch}, batch {bi}: {e}")))?;
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_idx.len() as f64;
        let (eval_model, _) = forward_model(&model, tc);
        let val_loss = eval_loss(&eval_model, ds, &val_idx, tc.mixed_alpha)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite validation loss at epoch {epoch}")));
        }
        let secs = start.elapsed().as_secs_f64();
        log::info!("epoch {epoch} train_loss {train_loss:.6} val_loss {val_loss:.6} seconds {secs:.1}");
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.seconds.push(secs);
        if val_loss < best_val {
            best_val = val_loss;
            best = model.clone();
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tc.patience {
                history.stopped_early = true;
                log::info!("early stop after epoch {epoch}");
                break;
            }
        }
    }
    Ok((best, history))
}

/// Trains a freshly initialized model (seeded by `tc.seed`) on the mixed
/// loss and returns the best-validation checkpoint.
pub fn train_teacher(ds: &FliDataset, config: &ModelConfig, tc: &TrainConfig) -> Result<(SeqModel, TrainHistory)> {
    let model = SeqModel::init(config.clone(), tc.seed)?;
    fit(model, ds, tc, None)
}

/// Float teacher outputs for every record.
pub fn teacher_outputs(teacher: &SeqModel, ds: &FliDataset) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.records.chunks(EVAL_CHUNK) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|r| r.tpsf.as_slice()).collect();
        out.extend(teacher.predict_batch(&inputs)?);
    }
    Ok(out)
}

/// Trains a student with fake-quantized weights (when `qat_bits` is set)
/// against the distillation loss. With `kd_beta = 1` the teacher is not run.
pub fn train_student_qat_kd(
    ds: &FliDataset,
    teacher: &SeqModel,
    student: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(SeqModel, TrainHistory)> {
    tc.validate()?;
    if teacher.config.seq_len != student.seq_len {
        return Err(Error::shape("teacher/student", &[teacher.config.seq_len], &[student.seq_len]));
    }
    if tc.qat_bits.is_none() && tc.kd_beta == 1.0 {
        log::warn!("no quantization and no distillation: plain student training");
    }
    let model = SeqModel::init(student.clone(), tc.seed)?;
    if tc.kd_beta == 1.0 {
        return fit(model, ds, tc, None);
    }
    let t_out = teacher_outputs(teacher, ds)?;
    fit(model, ds, tc, Some(&t_out))
}
