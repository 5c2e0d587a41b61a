use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use rssm::cells::{Model, ModelKind, ModelSpec};
use rssm::envs::{
    gen_hip_variant, gen_pendulum, gen_two_timescale, Episode, EpisodeDataset, MultisinePolicy,
    PendulumParams, Split,
};
use rssm::eval::{
    metrics_rows, pooled_sliding_nll, pooled_sliding_rmse, rollout_batch, write_metrics_csv,
    write_predictions_csv, MetricsRow,
};
use rssm::training::{
    resume, train, Checkpoint, LossKind, LossSpec, MaskSpec, OptimSpec, TrainConfig, TrainTrace,
};
use rssm::Error;

use crate::config::{timescale_windows, window_for_duration, ConfigError, RawConfig, Section};

/// Window duration used when `window = auto`; `window = rule` uses the
/// square root of the episode length instead.
pub const DEFAULT_WINDOW_SECONDS: f64 = 0.3;

/// Offset between the train and test seeds of `generate`.
const TEST_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Env {
    Pendulum,
    HipVariant,
    TwoTimescale,
}

impl FromStr for Env {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "pendulum" => Ok(Env::Pendulum),
            "hip_variant" => Ok(Env::HipVariant),
            "two_timescale" => Ok(Env::TwoTimescale),
            _ => Err(()),
        }
    }
}

pub fn generate(raw: &RawConfig) -> Result<()> {
    let s = raw.resolve("generate")?;
    let env: Env = s.get("env")?;
    let params = PendulumParams {
        mass: s.get("mass")?,
        length: s.get("length")?,
        damping: s.get("damping")?,
        gravity: s.get("gravity")?,
        dt: s.get("dt")?,
    };
    let policy = MultisinePolicy {
        amplitude: s.get("policy_amplitude")?,
        components: s.get("policy_components")?,
        min_freq: s.get("policy_min_freq")?,
        max_freq: s.get("policy_max_freq")?,
    };
    let len: usize = s.get("len")?;
    let (n_train, n_test): (usize, usize) = (s.get("episodes")?, s.get("test_episodes")?);
    let seed: u64 = s.get("seed")?;
    let test_seed = seed.wrapping_add(TEST_SEED_OFFSET);
    let segment: usize = s.get("segment_len")?;
    let (amp, period): (f64, usize) = (s.get("drift_amplitude")?, s.get("drift_period")?);
    let out = PathBuf::from(s.str("out"));

    let make = |n: usize, split: Split, seed: u64| -> rssm::Result<EpisodeDataset> {
        match env {
            Env::Pendulum => gen_pendulum(&params, &policy, len, n, seed).map(|mut d| {
                d.split = split;
                d
            }),
            Env::HipVariant => gen_hip_variant(&params, &policy, len, n, segment, split, seed),
            Env::TwoTimescale => {
                gen_two_timescale(&params, &policy, len, n, amp, period, split, seed)
            }
        }
    };
    let train_ds = make(n_train, Split::Train, seed)?;
    let test_ds = make(n_test, Split::Test, test_seed)?.with_stats(&train_ds.stats)?;

    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    train_ds.save(&out.join("train.csv"))?;
    test_ds.save(&out.join("test.csv"))?;

    let masses = |d: &EpisodeDataset| {
        d.episodes
            .iter()
            .flat_map(|e| e.hidden.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
                (lo.min(m), hi.max(m))
            })
    };
    println!(
        "wrote {} (train {} x {len}, test {} x {len}, dt {})",
        out.display(),
        n_train,
        n_test,
        params.dt
    );
    println!(
        "obs mean {:?} std {:?}",
        train_ds.stats.obs_mean, train_ds.stats.obs_std
    );
    println!(
        "act mean {:?} std {:?}",
        train_ds.stats.act_mean, train_ds.stats.act_std
    );
    let (lo, hi) = masses(&train_ds);
    let (tlo, thi) = masses(&test_ds);
    println!("mass range train [{lo}, {hi}] test [{tlo}, {thi}]");
    Ok(())
}

/// Model spec from a `[model]` section and the data it will see.
fn model_spec(m: &Section, data: &EpisodeDataset, loss: LossKind) -> Result<ModelSpec> {
    let kind: ModelKind = m.get("kind")?;
    let mut spec = ModelSpec::new(kind, data.obs_dim(), data.action_dim());
    spec.latent_dim = m.get("latent_dim")?;
    spec.task_dim = m.get("task_dim")?;
    spec.hidden = m.list("hidden")?;
    spec.num_basis = m.get("num_basis")?;
    spec.bandwidth = m.get("bandwidth")?;
    spec.control = m.get("control")?;
    spec.task_transform = m.get("task_transform")?;
    spec.window = match m.str("window") {
        "auto" => window_for_duration(DEFAULT_WINDOW_SECONDS, data.dt),
        "rule" => timescale_windows(data.episodes.first().map_or(1, Episode::len), 2)[0],
        _ => m.get("window")?,
    };
    spec.initial_var = m.get("initial_var")?;
    spec.noise_init = m.get("noise_init")?;
    spec.predict_differences = loss == LossKind::RmseDifferences;
    spec.validate()?;
    Ok(spec)
}

fn train_config(t: &Section, spec: &ModelSpec) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        loss: LossSpec {
            kind: t.get("loss")?,
            clip_norm: t.get("clip_norm")?,
        },
        mask: MaskSpec {
            step_fraction: t.get("step_mask_fraction")?,
            window_fraction: t.get("window_mask_fraction")?,
            window: t.auto("mask_window")?.unwrap_or(spec.window),
            resample_per_batch: t.get("resample_masks")?,
        },
        optim: OptimSpec {
            lr: t.get("lr")?,
            beta1: t.get("beta1")?,
            beta2: t.get("beta2")?,
            eps: t.get("eps")?,
        },
        epochs: t.get("epochs")?,
        batch_size: t.get("batch_size")?,
        tbptt_len: t.auto("tbptt_len")?,
        val_fraction: t.get("val_fraction")?,
        seed: t.get("seed")?,
        restore_best: t.get("restore_best")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn write_trace(trace: &TrainTrace, path: &Path) -> Result<()> {
    fs::write(path, trace.to_csv()).with_context(|| format!("writing {}", path.display()))
}

pub fn train_cmd(raw: &RawConfig) -> Result<()> {
    let m = raw.resolve("model")?;
    let t = raw.resolve("train")?;
    let loss: LossKind = t.get("loss")?;
    let data_path = PathBuf::from(t.str("data"));
    let data = EpisodeDataset::load(&data_path)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let spec = model_spec(&m, &data, loss)?;
    let cfg = train_config(&t, &spec)?;
    let out = PathBuf::from(t.str("out"));
    let resume_from = t.str("resume");
    let checkpoint = if resume_from.is_empty() {
        None
    } else {
        Some(
            Checkpoint::load(Path::new(resume_from))
                .with_context(|| format!("loading {resume_from}"))?,
        )
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let episodes = data.normalized();
    let mut model = Model::new(spec, cfg.seed)?;
    let result = match checkpoint {
        Some(ck) => resume(&mut model, &episodes, &cfg, ck, Some(&out)),
        None => train(&mut model, &episodes, &cfg, Some(&out)),
    };
    let trace = match result {
        Ok(trace) => trace,
        Err(Error::Diverged { epoch, loss, trace }) => {
            write_trace(&trace, &out.join("trace.csv"))?;
            return Err(Error::Diverged { epoch, loss, trace }).context(format!(
                "partial trace saved to {}",
                out.join("trace.csv").display()
            ));
        }
        Err(e) => return Err(e.into()),
    };
    write_trace(&trace, &out.join("trace.csv"))?;
    let epochs = trace.epochs.last().map_or(0, |r| r.epoch + 1);
    Checkpoint::new(&model, epochs, trace.clone(), None).save(&out.join("model.ckpt"))?;
    match (trace.epochs.last(), trace.best_epoch, trace.best_val_loss) {
        (Some(last), Some(be), Some(bv)) => println!(
            "{} epochs: train {:.5} val {:.5}; best val {bv:.5} at epoch {be}",
            epochs, last.train_loss, last.val_loss
        ),
        _ => println!("no epochs run; saved the initial model"),
    }
    println!("wrote {}", out.join("model.ckpt").display());
    Ok(())
}

fn mismatch(msg: String) -> anyhow::Error {
    Error::CheckpointMismatch(msg).into()
}

pub fn eval_cmd(raw: &RawConfig) -> Result<()> {
    let e = raw.resolve("eval")?;
    let model_check = if raw.has_section("model") {
        Some(raw.resolve("model")?)
    } else {
        None
    };
    let sweep: Vec<usize> = e.list("sweep")?;
    let template = e.str("checkpoint").to_string();
    if !sweep.is_empty() && !template.contains("{H}") {
        return Err(ConfigError::Invalid {
            section: "eval".into(),
            key: "checkpoint".into(),
            value: template,
            expected: "a path containing {H} when sweep is set".into(),
        }
        .into());
    }
    let context: Option<usize> = e.auto("context")?;
    let horizon: Option<usize> = e.auto("horizon")?;
    let metric_window: Option<usize> = e.auto("metric_window")?;
    let seed: u64 = e.get("seed")?;
    let export: bool = e.get("predictions")?;
    let data_path = PathBuf::from(e.str("data"));
    let env = match e.str("env") {
        "auto" => data_path
            .file_stem()
            .map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        other => other.to_string(),
    };
    let out = PathBuf::from(e.str("out"));

    let data = EpisodeDataset::load(&data_path)
        .with_context(|| format!("loading {}", data_path.display()))?;
    let len = data.episodes.iter().map(Episode::len).min().unwrap_or(0);
    let context = context.unwrap_or(len / 2);
    let horizon = horizon.unwrap_or(len.saturating_sub(context));
    if context + horizon > len || context == 0 {
        return Err(Error::Config(format!(
            "context {context} + horizon {horizon} must fit the {len}-step episodes with context >= 1"
        ))
        .into());
    }

    let runs: Vec<(Option<usize>, PathBuf)> = if sweep.is_empty() {
        vec![(None, PathBuf::from(&template))]
    } else {
        sweep
            .iter()
            .map(|&h| {
                (
                    Some(h),
                    PathBuf::from(template.replace("{H}", &h.to_string())),
                )
            })
            .collect()
    };
    let mut models = Vec::with_capacity(runs.len());
    for (h, path) in &runs {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        let spec = &ck.spec;
        if (spec.obs_dim, spec.action_dim) != (data.obs_dim(), data.action_dim()) {
            return Err(mismatch(format!(
                "{} expects obs_dim {} and action_dim {}, the data has {} and {}",
                path.display(),
                spec.obs_dim,
                spec.action_dim,
                data.obs_dim(),
                data.action_dim()
            )));
        }
        if let Some(h) = h {
            if spec.window != *h {
                return Err(mismatch(format!(
                    "{} has window {}, expected {h}",
                    path.display(),
                    spec.window
                )));
            }
        }
        if let Some(m) = &model_check {
            let loss = if spec.predict_differences {
                LossKind::RmseDifferences
            } else {
                LossKind::GaussianNll
            };
            let mut expected = model_spec(m, &data, loss)?;
            if h.is_some() {
                expected.window = spec.window;
            }
            let differing: Vec<String> = expected
                .to_pairs()
                .into_iter()
                .zip(spec.to_pairs())
                .filter(|(a, b)| a != b)
                .map(|((k, want), (_, got))| format!("{k}: config {want}, checkpoint {got}"))
                .collect();
            if !differing.is_empty() {
                return Err(mismatch(format!(
                    "{}: {}",
                    path.display(),
                    differing.join("; ")
                )));
            }
        }
        models.push((*h, ck.to_model()?));
    }

    let window = metric_window.unwrap_or_else(|| models[0].1.spec.segment().unwrap_or(1));
    let episodes = data.normalized();
    let refs: Vec<&Episode> = episodes.iter().collect();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let (mut rows, mut summary) = (Vec::<MetricsRow>::new(), Vec::<MetricsRow>::new());
    for (h, model) in &models {
        let results = rollout_batch(model, &refs, Some(&data.stats), context, horizon)?;
        let rmse = pooled_sliding_rmse(&results, window)?;
        let nll = pooled_sliding_nll(&results, window)?;
        let label = match h {
            Some(h) => format!("{}_h{h}", model.spec.kind),
            None => model.spec.kind.to_string(),
        };
        let model_rows = metrics_rows(&label, &env, seed, &rmse, &nll);
        if let Some(last) = model_rows.last() {
            println!(
                "{label}: final-step sliding RMSE {:.6} NLL {:.6} (window {window})",
                last.rmse, last.nll
            );
            summary.push(last.clone());
        }
        rows.extend(model_rows);
        if export {
            let name = match h {
                Some(h) => format!("predictions_h{h}.csv"),
                None => "predictions.csv".into(),
            };
            let f = File::create(out.join(&name)).with_context(|| format!("creating {name}"))?;
            write_predictions_csv(&results, BufWriter::new(f))?;
        }
    }
    write_metrics_csv(
        &rows,
        BufWriter::new(File::create(out.join("metrics.csv"))?),
    )?;
    write_metrics_csv(
        &summary,
        BufWriter::new(File::create(out.join("summary.csv"))?),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}
