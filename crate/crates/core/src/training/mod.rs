//! Objectives, imputation masks, Adam and the truncated-BPTT loop.

mod adam;
mod checkpoint;
mod trainer;

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::Checkpoint;
pub use trainer::{batch_loss, evaluate_loss, resume, split_validation, train, TrainBatch};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Mean Gaussian negative log-likelihood of the next observation.
    GaussianNll,
    /// Root mean squared error of predicted observation differences.
    RmseDifferences,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_nll" => Ok(LossKind::GaussianNll),
            "rmse_differences" => Ok(LossKind::RmseDifferences),
            other => Err(Error::Config(format!(
                "unknown loss `{other}` (expected gaussian_nll or rmse_differences)"
            ))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::GaussianNll => "gaussian_nll",
            LossKind::RmseDifferences => "rmse_differences",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Global gradient norm limit.
    pub clip_norm: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            kind: LossKind::GaussianNll,
            clip_norm: 5.0,
        }
    }
}

/// Fractions of steps and of whole windows hidden from the model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    pub step_fraction: f64,
    pub window_fraction: f64,
    /// Window length for window masks.
    pub window: usize,
    /// Draw fresh masks for every minibatch instead of once per episode.
    pub resample_per_batch: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            step_fraction: 0.0,
            window_fraction: 0.0,
            window: 1,
            resample_per_batch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Everything the training loop needs besides the model and the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub mask: MaskSpec,
    pub optim: OptimSpec,
    pub epochs: usize,
    pub batch_size: usize,
    /// Chunk length for truncated backpropagation; `None` picks the full
    /// sequence up to 600 steps.
    pub tbptt_len: Option<usize>,
    pub val_fraction: f64,
    pub seed: u64,
    /// Leave the model at its best-validation parameters when done.
    pub restore_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossSpec::default(),
            mask: MaskSpec::default(),
            optim: OptimSpec::default(),
            epochs: 50,
            batch_size: 8,
            tbptt_len: None,
            val_fraction: 0.1,
            seed: 0,
            restore_best: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.loss.clip_norm > 0.0) {
            return bad(format!(
                "clip_norm must be positive, got {}",
                self.loss.clip_norm
            ));
        }
        for (name, f) in [
            ("step_mask_fraction", self.mask.step_fraction),
            ("window_mask_fraction", self.mask.window_fraction),
            ("val_fraction", self.val_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("{name} must lie in [0, 1], got {f}"));
            }
        }
        if self.mask.window == 0 {
            return bad("mask window must be positive".into());
        }
        if !(self.optim.lr >= 0.0) || !(self.optim.eps > 0.0) {
            return bad("lr must be non-negative and eps positive".into());
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.tbptt_len == Some(0) {
            return bad("tbptt_len must be positive".into());
        }
        Ok(())
    }
}

/// Losses of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-epoch history of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainTrace {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,grad_norm";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                r.epoch, r.train_loss, r.val_loss, r.grad_norm
            ));
        }
        s
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.train_loss)
    }
}

/// Mean over valid entries of `0.5 (ln 2π σ² + (o − μ)² / σ²)`.
pub fn gaussian_nll(mean: &[f64], var: &[f64], target: &[f64], valid: &[bool]) -> Result<f64> {
    if mean.len() != var.len() || mean.len() != target.len() || mean.len() != valid.len() {
        return Err(Error::ShapeMismatch(
            "gaussian_nll inputs differ in length".into(),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..mean.len() {
        if !valid[i] {
            continue;
        }
        if !(var[i] > 0.0) {
            return Err(Error::NonPositiveVariance {
                index: i,
                value: var[i],
            });
        }
        total += 0.5 * ((2.0 * PI * var[i]).ln() + (target[i] - mean[i]).powi(2) / var[i]);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `sqrt(mean_t ‖(o_t − o_{t−1}) − δ_t‖²)` over steps `t ≥ 1` with
/// `valid[t]`. `deltas[t]` predicts the change into step `t`.
pub fn rmse_differences(deltas: &[Vec<f64>], obs: &[Vec<f64>], valid: &[bool]) -> Result<f64> {
    if deltas.len() != obs.len() || valid.len() != obs.len() {
        return Err(Error::ShapeMismatch(
            "rmse_differences inputs differ in length".into(),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 1..obs.len() {
        if !valid[t] {
            continue;
        }
        total += (0..obs[t].len())
            .map(|i| (obs[t][i] - obs[t - 1][i] - deltas[t][i]).powi(2))
            .sum::<f64>();
        n += 1;
    }
    Ok(if n == 0 {
        0.0
    } else {
        (total / n as f64).sqrt()
    })
}

/// Imputation masks; `true` marks an observed step.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    pub step: Vec<Vec<bool>>,
    pub window: Vec<Vec<bool>>,
}

impl Masks {
    /// Observed under both masks.
    pub fn observed(&self) -> Vec<Vec<bool>> {
        self.step
            .iter()
            .zip(&self.window)
            .map(|(s, w)| s.iter().zip(w).map(|(a, b)| *a && *b).collect())
            .collect()
    }
}

/// Hides each step with probability `step_fraction` and each window of
/// `spec.window` steps with probability `window_fraction`. Step 0 of every
/// row stays observed.
pub fn make_masks<R: Rng + ?Sized>(spec: &MaskSpec, rows: usize, len: usize, rng: &mut R) -> Masks {
    let mut step = Vec::with_capacity(rows);
    let mut window = Vec::with_capacity(rows);
    for _ in 0..rows {
        let mut s: Vec<bool> = (0..len)
            .map(|_| !rng.gen_bool(spec.step_fraction))
            .collect();
        let n_windows = len.div_ceil(spec.window.max(1));
        let keep: Vec<bool> = (0..n_windows)
            .map(|_| !rng.gen_bool(spec.window_fraction))
            .collect();
        let mut w: Vec<bool> = (0..len).map(|t| keep[t / spec.window.max(1)]).collect();
        if len > 0 {
            s[0] = true;
            w[0] = true;
        }
        step.push(s);
        window.push(w);
    }
    Masks { step, window }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nll_examples() {
        let half_log_2pi = 0.5 * (2.0 * PI).ln();
        let v = gaussian_nll(&[1.0, -2.0], &[1.0, 1.0], &[1.0, -2.0], &[true, true]).unwrap();
        assert!((v - half_log_2pi).abs() < 1e-15);
        assert!((v - 0.9189385332046727).abs() < 1e-12);
        // doubling the standard deviation at zero residual adds ln 2
        let w = gaussian_nll(&[0.0], &[4.0], &[0.0], &[true]).unwrap();
        assert!((w - v - 2f64.ln()).abs() < 1e-12);
        assert!(matches!(
            gaussian_nll(&[0.0], &[0.0], &[0.0], &[true]),
            Err(Error::NonPositiveVariance { index: 0, .. })
        ));
        // invalid entries are skipped entirely
        let x = gaussian_nll(&[0.0, 9.0], &[1.0, -1.0], &[0.0, f64::NAN], &[true, false]).unwrap();
        assert_eq!(x, v);
    }

    #[test]
    fn rmse_difference_examples() {
        let obs: Vec<Vec<f64>> = (0..6)
            .map(|t| vec![t as f64, (t * t) as f64, -1.0])
            .collect();
        let perfect: Vec<Vec<f64>> = (0..6)
            .map(|t| {
                if t == 0 {
                    vec![0.0; 3]
                } else {
                    (0..3).map(|i| obs[t][i] - obs[t - 1][i]).collect()
                }
            })
            .collect();
        assert_eq!(rmse_differences(&perfect, &obs, &[true; 6]).unwrap(), 0.0);
        let off: Vec<Vec<f64>> = perfect
            .iter()
            .map(|d| d.iter().map(|x| x + 0.5).collect())
            .collect();
        let r = rmse_differences(&off, &obs, &[true; 6]).unwrap();
        assert!((r - 0.5 * 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn mask_extremes_and_determinism() {
        let spec = |s: f64, w: f64| MaskSpec {
            step_fraction: s,
            window_fraction: w,
            window: 4,
            resample_per_batch: true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = make_masks(&spec(0.0, 0.0), 3, 17, &mut rng);
        assert!(none.observed().iter().flatten().all(|&o| o));
        for (s, w) in [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)] {
            let all = make_masks(&spec(s, w), 3, 17, &mut rng);
            for row in all.observed() {
                assert!(row[0] && row[1..].iter().all(|&o| !o));
            }
        }
        let a = make_masks(&spec(0.3, 0.3), 5, 40, &mut ChaCha8Rng::seed_from_u64(9));
        let b = make_masks(&spec(0.3, 0.3), 5, 40, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        // window masks cover whole windows
        for row in &a.window {
            for (k, w) in row.chunks(4).enumerate() {
                let first = if k == 0 {
                    w[1..].first().copied()
                } else {
                    Some(w[0])
                };
                if let Some(f) = first {
                    assert!(w.iter().skip(usize::from(k == 0)).all(|&x| x == f));
                }
            }
        }
    }
}
