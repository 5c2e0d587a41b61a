use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    clip_global_norm, make_masks, Adam, Checkpoint, EpochRecord, LossKind, TrainConfig, TrainTrace,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::cells::{CarryState, Forward, Model, SequenceBatch};
use crate::envs::Episode;
use crate::error::{Error, Result};
use crate::nets::{Bound, ParamStore};

/// Model inputs plus loss targets for one minibatch.
///
/// Targets are the observations (or their one-step differences when the
/// model predicts differences). Step 0 and steps without finite ground
/// truth carry zero weight; imputation masks only affect the inputs.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub inputs: SequenceBatch,
    targets: Vec<Tensor>,
    weights: Vec<Tensor>,
    /// Normalizer of the whole batch: valid entries for the NLL, valid
    /// `(row, step)` pairs for the RMSE.
    pub count: f64,
    pub kind: LossKind,
}

impl TrainBatch {
    /// `observed[b][t]` hides inputs on top of missing ground truth.
    pub fn new(episodes: &[&Episode], observed: &[Vec<bool>], kind: LossKind) -> Result<Self> {
        let rows = episodes.len();
        if rows == 0 || observed.len() != rows {
            return Err(Error::ShapeMismatch(
                "batch needs one mask row per episode".into(),
            ));
        }
        let len = episodes[0].len();
        if episodes.iter().any(|e| e.len() != len) || observed.iter().any(|m| m.len() != len) {
            return Err(Error::Config(
                "episodes in a batch must have equal length".into(),
            ));
        }
        let dim = episodes[0].obs.first().map_or(0, |o| o.len());
        let finite = |o: &[f64]| o.iter().all(|x| x.is_finite());
        let inputs_seen: Vec<Vec<bool>> = episodes
            .iter()
            .zip(observed)
            .map(|(e, m)| (0..len).map(|t| m[t] && finite(&e.obs[t])).collect())
            .collect();
        let obs: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.obs.clone()).collect();
        let acts: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.actions.clone()).collect();
        let inputs = SequenceBatch::new(&obs, &acts, &inputs_seen)?;

        let mut targets = Vec::with_capacity(len);
        let mut weights = Vec::with_capacity(len);
        let mut count = 0.0;
        for t in 0..len {
            let mut tv = Vec::with_capacity(rows * dim);
            let mut wv = Vec::with_capacity(rows * dim);
            for e in episodes {
                let target: Option<Vec<f64>> = match kind {
                    _ if t == 0 => None,
                    LossKind::GaussianNll => Some(e.obs[t].clone()),
                    LossKind::RmseDifferences => Some(
                        e.obs[t]
                            .iter()
                            .zip(&e.obs[t - 1])
                            .map(|(a, b)| a - b)
                            .collect(),
                    ),
                };
                match target.filter(|v| finite(v)) {
                    Some(v) => {
                        tv.extend(v);
                        wv.extend(std::iter::repeat_n(1.0, dim));
                        count += match kind {
                            LossKind::GaussianNll => dim as f64,
                            LossKind::RmseDifferences => 1.0,
                        };
                    }
                    None => {
                        tv.extend(std::iter::repeat_n(0.0, dim));
                        wv.extend(std::iter::repeat_n(0.0, dim));
                    }
                }
            }
            targets.push(Tensor::new(vec![rows, dim], tv)?);
            weights.push(Tensor::new(vec![rows, dim], wv)?);
        }
        Ok(TrainBatch {
            inputs,
            targets,
            weights,
            count,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Steps `start..end`; `count` still refers to the whole batch.
    pub fn slice(&self, start: usize, end: usize) -> TrainBatch {
        TrainBatch {
            inputs: self.inputs.slice(start, end),
            targets: self.targets[start..end].to_vec(),
            weights: self.weights[start..end].to_vec(),
            count: self.count,
            kind: self.kind,
        }
    }

    /// Turns the summed loss terms of the whole batch into the loss.
    pub fn finish(&self, sum: f64) -> f64 {
        if self.count == 0.0 {
            return 0.0;
        }
        match self.kind {
            LossKind::GaussianNll => sum / self.count,
            LossKind::RmseDifferences => (sum / self.count).sqrt(),
        }
    }
}

/// Runs the model over `batch` and returns the unnormalized sum of loss
/// terms (NLL terms or squared errors), or `None` when no step counts.
pub fn batch_loss<'t>(
    model: &Model,
    p: &Bound<'t>,
    batch: &TrainBatch,
    carry: Option<&CarryState>,
) -> Result<(Option<Var<'t>>, Forward<'t>)> {
    if model.spec.predict_differences != (batch.kind == LossKind::RmseDifferences) {
        return Err(Error::Config(format!(
            "loss {} does not match a model with predict_differences = {}",
            batch.kind, model.spec.predict_differences
        )));
    }
    let out = model.forward(p, &batch.inputs, carry)?;
    let tape = p.tape();
    let mut terms = Vec::new();
    for t in 0..batch.len() {
        if batch.weights[t].data().iter().all(|&w| w == 0.0) {
            continue;
        }
        let target = tape.constant(batch.targets[t].clone());
        let w = tape.constant(batch.weights[t].clone());
        let (mean, var) = (out.pred_mean[t], out.pred_var[t]);
        let err = (target - mean).square();
        let term = match batch.kind {
            LossKind::GaussianNll => ((var.ln() + err / var).add_scalar((2.0 * PI).ln()) * w)
                .sum()
                .scale(0.5),
            LossKind::RmseDifferences => (err * w).sum(),
        };
        terms.push(term);
    }
    Ok((crate::cells::layers::pairwise_sum(&terms), out))
}

/// Chunk boundaries for truncated backpropagation.
fn chunks(model: &Model, len: usize, tbptt: Option<usize>) -> Result<Vec<(usize, usize)>> {
    let window = model.spec.segment().unwrap_or(1);
    let l = match tbptt {
        Some(l) if l >= len => len,
        Some(l) => {
            if l % window != 0 {
                return Err(Error::Config(format!(
                    "tbptt_len {l} must be a multiple of the window length {window}"
                )));
            }
            l
        }
        None if len <= 600 => len,
        None => (600 / window).max(1) * window,
    };
    Ok((0..len)
        .step_by(l.max(1))
        .map(|s| (s, (s + l).min(len)))
        .collect())
}

fn add_into(acc: &mut [Tensor], grads: Vec<Tensor>) {
    for (a, g) in acc.iter_mut().zip(grads) {
        for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
            *x += y;
        }
    }
}

/// Loss value and gradient (in store order) of one batch.
fn loss_and_grads(
    model: &Model,
    batch: &TrainBatch,
    tbptt: Option<usize>,
) -> Result<(f64, Vec<Tensor>)> {
    let mut grads: Vec<Tensor> = model
        .params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    if batch.count == 0.0 {
        return Ok((0.0, grads));
    }
    let parts = chunks(model, batch.len(), tbptt)?;
    // RMSE over several chunks needs the total first: d√(S/n) = dS / (2n√(S/n))
    let scale = match batch.kind {
        LossKind::GaussianNll => 1.0 / batch.count,
        LossKind::RmseDifferences if parts.len() == 1 => 0.0,
        LossKind::RmseDifferences => {
            let total = loss_sum(model, batch, &parts)?;
            let rmse = batch.finish(total);
            if rmse == 0.0 {
                return Ok((0.0, grads));
            }
            1.0 / (2.0 * batch.count * rmse)
        }
    };
    let mut carry: Option<CarryState> = None;
    let mut sum = 0.0;
    for &(s, e) in &parts {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let part = batch.slice(s, e);
        let (terms, out) = batch_loss(model, &p, &part, carry.as_ref())?;
        if let Some(terms) = terms {
            sum += terms.item();
            let loss = if scale == 0.0 {
                (terms.scale(1.0 / batch.count)).sqrt()
            } else {
                terms.scale(scale)
            };
            let g = tape.backward(loss)?;
            add_into(&mut grads, p.gradients(&g));
        }
        carry = Some(out.carry());
    }
    Ok((batch.finish(sum), grads))
}

/// Summed loss terms over all chunks, without gradients.
fn loss_sum(model: &Model, batch: &TrainBatch, parts: &[(usize, usize)]) -> Result<f64> {
    let mut carry: Option<CarryState> = None;
    let mut sum = 0.0;
    for &(s, e) in parts {
        let tape = Tape::new();
        let p = model.params.bind(&tape);
        let (terms, out) = batch_loss(model, &p, &batch.slice(s, e), carry.as_ref())?;
        sum += terms.map_or(0.0, |v| v.item());
        carry = Some(out.carry());
    }
    Ok(sum)
}

/// Loss over `episodes` with inputs hidden where `observed` is false.
pub fn evaluate_loss(
    model: &Model,
    episodes: &[&Episode],
    observed: &[Vec<bool>],
    kind: LossKind,
    batch_size: usize,
    tbptt: Option<usize>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0.0;
    for (eps, masks) in episodes
        .chunks(batch_size.max(1))
        .zip(observed.chunks(batch_size.max(1)))
    {
        let batch = TrainBatch::new(eps, masks, kind)?;
        let parts = chunks(model, batch.len(), tbptt)?;
        sum += loss_sum(model, &batch, &parts)?;
        count += batch.count;
    }
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(match kind {
        LossKind::GaussianNll => sum / count,
        LossKind::RmseDifferences => (sum / count).sqrt(),
    })
}

/// Shuffles `0..n` with `seed` and holds out `ceil(fraction · n)` indices
/// (none when `n < 2`). Returns `(train, validation)`, each sorted.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((fraction * n as f64).ceil() as usize).clamp(1, n - 1)
    };
    let mut val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct RunState {
    epoch: usize,
    adam: Adam,
    trace: TrainTrace,
    best: Option<ParamStore>,
}

/// Trains `model` on normalized `episodes`, writing `best.ckpt` and
/// `last.ckpt` into `out_dir` when given.
pub fn train(
    model: &mut Model,
    episodes: &[Episode],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainTrace> {
    let state = RunState {
        epoch: 0,
        adam: Adam::new(cfg.optim, &model.params),
        trace: TrainTrace::default(),
        best: None,
    };
    run(model, episodes, cfg, out_dir, state)
}

/// Continues a run from a `last.ckpt`-style checkpoint with its optimizer
/// state. With the same config and data the continuation matches an
/// uninterrupted run.
pub fn resume(
    model: &mut Model,
    episodes: &[Episode],
    cfg: &TrainConfig,
    ckpt: Checkpoint,
    out_dir: Option<&Path>,
) -> Result<TrainTrace> {
    if ckpt.spec != model.spec {
        return Err(Error::CheckpointMismatch(
            "checkpoint was written for a different model".into(),
        ));
    }
    *model = Model::with_params(ckpt.spec.clone(), ckpt.params)?;
    let mut adam = ckpt
        .optimizer
        .unwrap_or_else(|| Adam::new(cfg.optim, &model.params));
    adam.spec = cfg.optim;
    let best = match out_dir.map(|d| d.join("best.ckpt")) {
        Some(p) if p.exists() => Some(Checkpoint::load(&p)?.params),
        _ => None,
    };
    let state = RunState {
        epoch: ckpt.epoch,
        adam,
        trace: ckpt.trace,
        best,
    };
    run(model, episodes, cfg, out_dir, state)
}

fn diverged(epoch: usize, loss: f64, trace: &TrainTrace) -> Error {
    Error::Diverged {
        epoch,
        loss,
        trace: Box::new(trace.clone()),
    }
}

fn run(
    model: &mut Model,
    episodes: &[Episode],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut state: RunState,
) -> Result<TrainTrace> {
    cfg.validate()?;
    if episodes.is_empty() {
        return Err(Error::Config("no training episodes".into()));
    }
    let len = episodes[0].len();
    if episodes.iter().any(|e| e.len() != len) {
        return Err(Error::Config(
            "all training episodes must have the same length".into(),
        ));
    }
    let kind = cfg.loss.kind;
    let (train_idx, val_idx) = split_validation(episodes.len(), cfg.val_fraction, cfg.seed);
    let mut fixed_rng = stream_rng(cfg.seed, 1);
    let fixed_masks = make_masks(&cfg.mask, episodes.len(), len, &mut fixed_rng).observed();
    let val_eps: Vec<&Episode> = val_idx.iter().map(|&i| &episodes[i]).collect();
    let val_masks: Vec<Vec<bool>> = val_idx.iter().map(|&i| fixed_masks[i].clone()).collect();

    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let mut rng = stream_rng(cfg.seed, 2 + epoch as u64);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let eps: Vec<&Episode> = idx.iter().map(|&i| &episodes[i]).collect();
            let observed = if cfg.mask.resample_per_batch {
                make_masks(&cfg.mask, idx.len(), len, &mut rng).observed()
            } else {
                idx.iter().map(|&i| fixed_masks[i].clone()).collect()
            };
            let batch = TrainBatch::new(&eps, &observed, kind)?;
            let (loss, mut grads) = loss_and_grads(model, &batch, cfg.tbptt_len)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(diverged(epoch, loss, &state.trace));
            }
            model.params.mask_gradients(&mut grads);
            norm_sum += clip_global_norm(&mut grads, cfg.loss.clip_norm);
            state.adam.update(&mut model.params, &grads)?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = if val_eps.is_empty() {
            train_loss
        } else {
            evaluate_loss(
                model,
                &val_eps,
                &val_masks,
                kind,
                cfg.batch_size,
                cfg.tbptt_len,
            )?
        };
        if !val_loss.is_finite() {
            return Err(diverged(epoch, val_loss, &state.trace));
        }
        state.trace.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            grad_norm: norm_sum / batches.max(1) as f64,
        });
        state.epoch += 1;
        if state.trace.best_val_loss.is_none_or(|b| val_loss < b) {
            state.trace.best_val_loss = Some(val_loss);
            state.trace.best_epoch = Some(epoch);
            state.best = Some(model.params.clone());
            if let Some(dir) = out_dir {
                Checkpoint::new(model, state.epoch, state.trace.clone(), None)
                    .save(&dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = out_dir {
            Checkpoint::new(
                model,
                state.epoch,
                state.trace.clone(),
                Some(state.adam.clone()),
            )
            .save(&dir.join("last.ckpt"))?;
        }
    }
    if cfg.restore_best {
        if let Some(best) = state.best {
            model.params = best;
        }
    }
    Ok(state.trace)
}
