//! Open-loop rollouts, sliding-window metrics and their CSV files.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::ops::Range;

use crate::autodiff::Tape;
use crate::cells::{Model, SequenceBatch};
use crate::envs::{Episode, Normalization};
use crate::error::{Error, Result};

/// Predictions of one episode in observation units.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub mean: Vec<Vec<f64>>,
    pub var: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    /// Leading steps whose observations were given to the model.
    pub context_len: usize,
    /// Trailing steps predicted without observations.
    pub horizon: usize,
}

impl RolloutResult {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    /// Steps the metrics score: the horizon, or every step after the first
    /// when only filtering.
    pub fn scored(&self) -> Range<usize> {
        if self.horizon > 0 {
            self.context_len..self.context_len + self.horizon
        } else {
            1.min(self.len())..self.len()
        }
    }
}

/// Filters the first `context_len` steps of each (normalized) episode,
/// then predicts `horizon` steps open loop from the actions alone.
/// Predictions and ground truth are denormalized with `stats` when given.
pub fn rollout_batch(
    model: &Model,
    episodes: &[&Episode],
    stats: Option<&Normalization>,
    context_len: usize,
    horizon: usize,
) -> Result<Vec<RolloutResult>> {
    let n = context_len + horizon;
    if let Some(e) = episodes.iter().find(|e| e.len() < n) {
        return Err(Error::TooShort {
            needed: n,
            have: e.len(),
        });
    }
    let observed: Vec<Vec<bool>> = episodes
        .iter()
        .map(|_| (0..n).map(|t| t < context_len).collect())
        .collect();
    let mut results = predict_masked(model, episodes, stats, &observed)?;
    for r in &mut results {
        r.context_len = context_len;
        r.horizon = horizon;
    }
    Ok(results)
}

/// One-step predictions of the first `observed[b].len()` steps of each
/// episode with inputs hidden where `observed` is false. The results score
/// every step after the first.
pub fn predict_masked(
    model: &Model,
    episodes: &[&Episode],
    stats: Option<&Normalization>,
    observed: &[Vec<bool>],
) -> Result<Vec<RolloutResult>> {
    if observed.len() != episodes.len() {
        return Err(Error::ShapeMismatch("one mask per episode".into()));
    }
    let n = observed.first().map_or(0, |m| m.len());
    if observed.iter().any(|m| m.len() != n) {
        return Err(Error::ShapeMismatch("masks differ in length".into()));
    }
    if let Some(e) = episodes.iter().find(|e| e.len() < n) {
        return Err(Error::TooShort {
            needed: n,
            have: e.len(),
        });
    }
    if episodes.is_empty() || n == 0 {
        return Ok(Vec::new());
    }
    let finite = |o: &[f64]| o.iter().all(|x| x.is_finite());
    let obs: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.obs[..n].to_vec()).collect();
    let acts: Vec<Vec<Vec<f64>>> = episodes.iter().map(|e| e.actions[..n].to_vec()).collect();
    let observed: Vec<Vec<bool>> = obs
        .iter()
        .zip(observed)
        .map(|(o, m)| (0..n).map(|t| m[t] && finite(&o[t])).collect())
        .collect();
    let batch = SequenceBatch::new(&obs, &acts, &observed)?;
    let tape = Tape::new();
    let p = model.params.bind(&tape);
    let out = model.forward(&p, &batch, None)?;
    let pred_mean: Vec<_> = out.pred_mean.iter().map(|v| v.to_tensor()).collect();
    let pred_var: Vec<_> = out.pred_var.iter().map(|v| v.to_tensor()).collect();

    let mut results = Vec::with_capacity(episodes.len());
    for (b, o) in obs.iter().enumerate() {
        let mut mean: Vec<Vec<f64>> = (0..n).map(|t| pred_mean[t].row_slice(b).to_vec()).collect();
        let mut var: Vec<Vec<f64>> = (0..n).map(|t| pred_var[t].row_slice(b).to_vec()).collect();
        if model.spec.predict_differences {
            reconstruct(&mut mean, &mut var, o, &observed[b]);
        }
        let mut truth = o.clone();
        if let Some(s) = stats {
            for t in 0..n {
                mean[t] = s.denormalize_obs(&mean[t]);
                var[t] = s.denormalize_var(&var[t]);
                truth[t] = s.denormalize_obs(&truth[t]);
            }
        }
        results.push(RolloutResult {
            mean,
            var,
            truth,
            context_len: n,
            horizon: 0,
        });
    }
    Ok(results)
}

/// Single-episode [`rollout_batch`].
pub fn rollout(
    model: &Model,
    episode: &Episode,
    stats: Option<&Normalization>,
    context_len: usize,
    horizon: usize,
) -> Result<RolloutResult> {
    if episode.len() < context_len + horizon {
        return Err(Error::TooShort {
            needed: context_len + horizon,
            have: episode.len(),
        });
    }
    if context_len + horizon == 0 {
        return Ok(RolloutResult {
            mean: Vec::new(),
            var: Vec::new(),
            truth: Vec::new(),
            context_len,
            horizon,
        });
    }
    Ok(rollout_batch(model, &[episode], stats, context_len, horizon)?.remove(0))
}

/// Turns predicted differences into observations: each step adds its
/// difference to the last observed value, or to the previous prediction
/// when that step was not observed. Variances accumulate along
/// unobserved stretches.
pub fn reconstruct(
    mean: &mut [Vec<f64>],
    var: &mut [Vec<f64>],
    obs: &[Vec<f64>],
    observed: &[bool],
) {
    for t in 1..mean.len() {
        let (done, rest) = mean.split_at_mut(t);
        let (vdone, vrest) = var.split_at_mut(t);
        let (m, v) = (&mut rest[0], &mut vrest[0]);
        if observed[t - 1] {
            m.iter_mut().zip(&obs[t - 1]).for_each(|(x, o)| *x += o);
        } else {
            m.iter_mut().zip(&done[t - 1]).for_each(|(x, p)| *x += p);
            v.iter_mut().zip(&vdone[t - 1]).for_each(|(x, p)| *x += p);
        }
    }
}

/// Sliding mean of a per-step score over the scored steps of every result;
/// windows at the start use the steps available.
fn pooled_sliding(
    results: &[RolloutResult],
    window: usize,
    score: impl Fn(&RolloutResult, usize) -> Result<Option<f64>>,
) -> Result<Vec<f64>> {
    if window == 0 {
        return Err(Error::Config("sliding window must be at least 1".into()));
    }
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let range = first.scored();
    if results.iter().any(|r| r.scored() != range) {
        return Err(Error::ShapeMismatch(
            "rollouts score different step ranges".into(),
        ));
    }
    let mut sums = Vec::with_capacity(range.len());
    let mut counts = Vec::with_capacity(range.len());
    for t in range {
        let (mut s, mut c) = (0.0, 0usize);
        for r in results {
            if let Some(x) = score(r, t)? {
                s += x;
                c += 1;
            }
        }
        sums.push(s);
        counts.push(c);
    }
    Ok((0..sums.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let s: f64 = sums[lo..=i].iter().sum();
            let c: usize = counts[lo..=i].iter().sum();
            if c == 0 {
                f64::NAN
            } else {
                s / c as f64
            }
        })
        .collect())
}

fn squared_error(r: &RolloutResult, t: usize) -> Result<Option<f64>> {
    let truth = &r.truth[t];
    if truth.iter().any(|x| !x.is_finite()) {
        return Ok(None);
    }
    let se: f64 = truth
        .iter()
        .zip(&r.mean[t])
        .map(|(o, m)| (o - m).powi(2))
        .sum();
    Ok(Some(se / truth.len() as f64))
}

fn gaussian_nll(r: &RolloutResult, t: usize) -> Result<Option<f64>> {
    let truth = &r.truth[t];
    if truth.iter().any(|x| !x.is_finite()) {
        return Ok(None);
    }
    let mut total = 0.0;
    for (i, ((o, m), v)) in truth.iter().zip(&r.mean[t]).zip(&r.var[t]).enumerate() {
        if !(*v > 0.0) {
            return Err(Error::NonPositiveVariance {
                index: i,
                value: *v,
            });
        }
        total += 0.5 * ((2.0 * PI * v).ln() + (o - m).powi(2) / v);
    }
    Ok(Some(total / truth.len() as f64))
}

/// `RMSE(t)` over the last `window` scored steps, pooled over episodes and
/// dimensions.
pub fn pooled_sliding_rmse(results: &[RolloutResult], window: usize) -> Result<Vec<f64>> {
    Ok(pooled_sliding(results, window, squared_error)?
        .into_iter()
        .map(f64::sqrt)
        .collect())
}

/// Mean Gaussian negative log-likelihood per element over the last
/// `window` scored steps, pooled over episodes.
pub fn pooled_sliding_nll(results: &[RolloutResult], window: usize) -> Result<Vec<f64>> {
    pooled_sliding(results, window, gaussian_nll)
}

pub fn sliding_rmse(r: &RolloutResult, window: usize) -> Result<Vec<f64>> {
    pooled_sliding_rmse(std::slice::from_ref(r), window)
}

pub fn sliding_nll(r: &RolloutResult, window: usize) -> Result<Vec<f64>> {
    pooled_sliding_nll(std::slice::from_ref(r), window)
}

/// One row of a metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub env: String,
    pub seed: u64,
    /// 1-based step within the scored range.
    pub horizon_step: usize,
    pub rmse: f64,
    pub nll: f64,
}

pub const METRICS_HEADER: &str = "model,env,seed,horizon_step,rmse,nll";

/// Rows for every scored step of equally long `rmse` and `nll` series.
pub fn metrics_rows(
    model: &str,
    env: &str,
    seed: u64,
    rmse: &[f64],
    nll: &[f64],
) -> Vec<MetricsRow> {
    rmse.iter()
        .zip(nll)
        .enumerate()
        .map(|(i, (&rmse, &nll))| MetricsRow {
            model: model.to_string(),
            env: env.to_string(),
            seed,
            horizon_step: i + 1,
            rmse,
            nll,
        })
        .collect()
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], mut w: W) -> Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{:?},{:?}",
            r.model, r.env, r.seed, r.horizon_step, r.rmse, r.nll
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(r: R) -> Result<Vec<MetricsRow>> {
    let mut lines = r.lines();
    match lines.next() {
        Some(Ok(h)) if h == METRICS_HEADER => {}
        _ => {
            return Err(Error::Format(format!(
                "metrics file must start with `{METRICS_HEADER}`"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Format(format!("metrics line {}: `{line}`", i + 2));
        if f.len() != 6 {
            return Err(bad());
        }
        rows.push(MetricsRow {
            model: f[0].to_string(),
            env: f[1].to_string(),
            seed: f[2].parse().map_err(|_| bad())?,
            horizon_step: f[3].parse().map_err(|_| bad())?,
            rmse: f[4].parse().map_err(|_| bad())?,
            nll: f[5].parse().map_err(|_| bad())?,
        });
    }
    Ok(rows)
}

/// Writes every step of every rollout: `episode,t,truth_*,mean_*,var_*`.
pub fn write_predictions_csv<W: Write>(results: &[RolloutResult], mut w: W) -> Result<()> {
    let Some(first) = results.first() else {
        writeln!(w, "# context_len=0\n# horizon=0\nepisode,t")?;
        return Ok(());
    };
    let dim = first.truth.first().map_or(0, |o| o.len());
    writeln!(
        w,
        "# context_len={}\n# horizon={}",
        first.context_len, first.horizon
    )?;
    let mut header = vec!["episode".to_string(), "t".to_string()];
    for prefix in ["truth", "mean", "var"] {
        header.extend((0..dim).map(|i| format!("{prefix}_{i}")));
    }
    writeln!(w, "{}", header.join(","))?;
    for (e, r) in results.iter().enumerate() {
        if (r.context_len, r.horizon) != (first.context_len, first.horizon) {
            return Err(Error::ShapeMismatch(
                "rollouts differ in context or horizon".into(),
            ));
        }
        for t in 0..r.len() {
            let mut f = vec![e.to_string(), t.to_string()];
            for row in [&r.truth[t], &r.mean[t], &r.var[t]] {
                f.extend(row.iter().map(|x| format!("{x:?}")));
            }
            writeln!(w, "{}", f.join(","))?;
        }
    }
    Ok(())
}

pub fn read_predictions_csv<R: BufRead>(r: R) -> Result<Vec<RolloutResult>> {
    let mut lines = r.lines();
    let mut meta = |key: &str| -> Result<usize> {
        let line = lines.next().transpose()?.unwrap_or_default();
        line.strip_prefix(&format!("# {key}="))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("predictions file needs a `# {key}=` line")))
    };
    let context_len = meta("context_len")?;
    let horizon = meta("horizon")?;
    let header = lines.next().transpose()?.unwrap_or_default();
    let cols = header.split(',').count();
    if cols < 2 || (cols - 2) % 3 != 0 {
        return Err(Error::Format(format!("bad predictions header `{header}`")));
    }
    let dim = (cols - 2) / 3;
    let mut results: Vec<RolloutResult> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let bad = || Error::Format(format!("predictions line {}: `{line}`", i + 4));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols {
            return Err(bad());
        }
        let e: usize = f[0].parse().map_err(|_| bad())?;
        let t: usize = f[1].parse().map_err(|_| bad())?;
        let nums = f[2..]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<f64>>>()?;
        if e == results.len() {
            results.push(RolloutResult {
                mean: Vec::new(),
                var: Vec::new(),
                truth: Vec::new(),
                context_len,
                horizon,
            });
        }
        let r = results
            .get_mut(e)
            .filter(|r| r.len() == t)
            .ok_or_else(bad)?;
        r.truth.push(nums[..dim].to_vec());
        r.mean.push(nums[dim..2 * dim].to_vec());
        r.var.push(nums[2 * dim..].to_vec());
    }
    Ok(results)
}
