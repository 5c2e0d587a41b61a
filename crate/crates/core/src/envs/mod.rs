//! Synthetic pendulum benchmarks and the dataset plumbing around them.
//!
//! The generators stand in for robot logs: only `[sin θ, cos θ]` is
//! observed, the angular velocity is hidden, and the mass acting on the
//! torque is either fixed, redrawn per segment, or drifting slowly.

mod pendulum;

pub use pendulum::{
    drifting_mass, gen_hip_variant, gen_pendulum, gen_two_timescale, MultisinePolicy,
    PendulumParams, HIP_TEST_MASSES, HIP_TRAIN_MASSES, OBS_NOISE,
};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};

/// One trajectory. `actions[t]` acts between `obs[t]` and `obs[t + 1]`;
/// `hidden[t]` is the mass in effect at step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub hidden: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// Steps `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Episode {
        Episode {
            obs: self.obs[start..end].to_vec(),
            actions: self.actions[start..end].to_vec(),
            hidden: self.hidden[start..end].to_vec(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train or test)"
            ))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Per-dimension mean and standard deviation of observations and actions.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalization {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.clone().count().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows.clone() {
        for (m, x) in mean.iter_mut().zip(&r) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; dim];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(&r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    // constant dimensions keep unit scale
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 0.0 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

impl Normalization {
    /// Statistics over every step of every episode.
    pub fn fit(episodes: &[Episode]) -> Result<Self> {
        let first = episodes
            .iter()
            .find(|e| !e.is_empty())
            .ok_or_else(|| Error::Config("cannot normalize an empty dataset".into()))?;
        let (od, ad) = (first.obs[0].len(), first.actions[0].len());
        let obs = episodes.iter().flat_map(|e| e.obs.iter().cloned());
        let act = episodes.iter().flat_map(|e| e.actions.iter().cloned());
        let (obs_mean, obs_std) = moments(obs, od);
        let (act_mean, act_std) = moments(act, ad);
        Ok(Normalization {
            obs_mean,
            obs_std,
            act_mean,
            act_std,
        })
    }

    pub fn normalize_obs(&self, o: &[f64]) -> Vec<f64> {
        o.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize_obs(&self, o: &[f64]) -> Vec<f64> {
        o.iter()
            .zip(&self.obs_mean)
            .zip(&self.obs_std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    /// Variance in normalized units back to raw units.
    pub fn denormalize_var(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(&self.obs_std)
            .map(|(x, s)| x * s * s)
            .collect()
    }

    pub fn normalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.act_mean)
            .zip(&self.act_std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    pub fn denormalize_action(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .zip(&self.act_mean)
            .zip(&self.act_std)
            .map(|((x, m), s)| x * s + m)
            .collect()
    }

    pub fn normalize_episode(&self, e: &Episode) -> Episode {
        Episode {
            obs: e.obs.iter().map(|o| self.normalize_obs(o)).collect(),
            actions: e.actions.iter().map(|a| self.normalize_action(a)).collect(),
            hidden: e.hidden.clone(),
        }
    }
}

/// Raw episodes of one split plus the statistics used to normalize them.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeDataset {
    pub episodes: Vec<Episode>,
    pub stats: Normalization,
    pub split: Split,
    pub dt: f64,
}

impl EpisodeDataset {
    /// Checks shapes and fits the statistics on `episodes` themselves.
    pub fn fit(episodes: Vec<Episode>, split: Split, dt: f64) -> Result<Self> {
        let stats = Normalization::fit(&episodes)?;
        let ds = EpisodeDataset {
            episodes,
            stats,
            split,
            dt,
        };
        ds.check()?;
        Ok(ds)
    }

    fn check(&self) -> Result<()> {
        let (od, ad) = (self.obs_dim(), self.action_dim());
        for (i, e) in self.episodes.iter().enumerate() {
            if e.actions.len() != e.len() || e.hidden.len() != e.len() {
                return Err(Error::Format(format!("episode {i} has ragged fields")));
            }
            if e.obs.iter().any(|o| o.len() != od) || e.actions.iter().any(|a| a.len() != ad) {
                return Err(Error::Format(format!(
                    "episode {i} has inconsistent widths"
                )));
            }
        }
        if self.stats.obs_mean.len() != od || self.stats.act_mean.len() != ad {
            return Err(Error::Format(
                "normalization does not match the data widths".into(),
            ));
        }
        Ok(())
    }

    /// The same episodes under `stats`, e.g. the training statistics for a
    /// test split.
    pub fn with_stats(mut self, stats: &Normalization) -> Result<Self> {
        self.stats = stats.clone();
        self.check()?;
        Ok(self)
    }

    pub fn obs_dim(&self) -> usize {
        self.episodes
            .first()
            .and_then(|e| e.obs.first())
            .map_or(0, |o| o.len())
    }

    pub fn action_dim(&self) -> usize {
        self.episodes
            .first()
            .and_then(|e| e.actions.first())
            .map_or(0, |a| a.len())
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Every episode in normalized units.
    pub fn normalized(&self) -> Vec<Episode> {
        self.episodes
            .iter()
            .map(|e| self.stats.normalize_episode(e))
            .collect()
    }

    /// Writes the dataset as a commented header followed by CSV rows
    /// `episode_id,t,obs…,act…,hidden`. Floats use shortest round-trip
    /// formatting, so reading the file back is bit-exact.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        let (od, ad) = (self.obs_dim(), self.action_dim());
        writeln!(w, "# rssm-dataset v1")?;
        writeln!(w, "# split={}", self.split)?;
        writeln!(w, "# dt={:?}", self.dt)?;
        writeln!(w, "# obs_dim={od}")?;
        writeln!(w, "# action_dim={ad}")?;
        writeln!(w, "# obs_mean={}", join(&self.stats.obs_mean))?;
        writeln!(w, "# obs_std={}", join(&self.stats.obs_std))?;
        writeln!(w, "# act_mean={}", join(&self.stats.act_mean))?;
        writeln!(w, "# act_std={}", join(&self.stats.act_std))?;
        let mut cols = vec!["episode_id".to_string(), "t".to_string()];
        cols.extend((0..od).map(|i| format!("obs{i}")));
        cols.extend((0..ad).map(|i| format!("act{i}")));
        cols.push("hidden".into());
        writeln!(w, "{}", cols.join(","))?;
        for (id, e) in self.episodes.iter().enumerate() {
            for t in 0..e.len() {
                writeln!(
                    w,
                    "{id},{t},{},{},{:?}",
                    join(&e.obs[t]),
                    join(&e.actions[t]),
                    e.hidden[t]
                )?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let bad = |msg: String| Error::Format(msg);
        let parse_f = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("bad number `{s}`: {e}")))
        };
        let parse_list = |s: &str| -> Result<Vec<f64>> {
            if s.trim().is_empty() {
                Ok(Vec::new())
            } else {
                s.split(',').map(parse_f).collect()
            }
        };
        let mut header = std::collections::HashMap::new();
        let mut lines = r.lines();
        let mut saw_magic = false;
        let mut columns = None;
        for line in lines.by_ref() {
            let line = line?;
            if let Some(rest) = line.strip_prefix('#') {
                let rest = rest.trim();
                if rest == "rssm-dataset v1" {
                    saw_magic = true;
                } else if let Some((k, v)) = rest.split_once('=') {
                    header.insert(k.trim().to_string(), v.trim().to_string());
                }
            } else {
                columns = Some(line);
                break;
            }
        }
        if !saw_magic {
            return Err(bad("missing `# rssm-dataset v1` header".into()));
        }
        let columns = columns.ok_or_else(|| bad("missing column header".into()))?;
        let get = |k: &str| {
            header
                .get(k)
                .ok_or_else(|| bad(format!("missing header field `{k}`")))
        };
        let od: usize = get("obs_dim")?
            .parse()
            .map_err(|_| bad("bad obs_dim".into()))?;
        let ad: usize = get("action_dim")?
            .parse()
            .map_err(|_| bad("bad action_dim".into()))?;
        if columns.split(',').count() != 3 + od + ad {
            return Err(bad(format!(
                "expected {} columns, found `{columns}`",
                3 + od + ad
            )));
        }
        let stats = Normalization {
            obs_mean: parse_list(get("obs_mean")?)?,
            obs_std: parse_list(get("obs_std")?)?,
            act_mean: parse_list(get("act_mean")?)?,
            act_std: parse_list(get("act_std")?)?,
        };
        let split: Split = get("split")?.parse()?;
        let dt = parse_f(get("dt")?)?;
        let mut episodes: Vec<Episode> = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 + od + ad {
                return Err(bad(format!(
                    "row {n} has {} fields, expected {}",
                    f.len(),
                    3 + od + ad
                )));
            }
            let id: usize = f[0]
                .parse()
                .map_err(|_| bad(format!("row {n}: bad episode id")))?;
            let t: usize = f[1]
                .parse()
                .map_err(|_| bad(format!("row {n}: bad step")))?;
            if id == episodes.len() {
                episodes.push(Episode {
                    obs: Vec::new(),
                    actions: Vec::new(),
                    hidden: Vec::new(),
                });
            }
            if id + 1 != episodes.len() {
                return Err(bad(format!("row {n}: episodes out of order")));
            }
            let e = episodes.last_mut().expect("pushed above");
            if t != e.len() {
                return Err(bad(format!("row {n}: steps out of order")));
            }
            e.obs.push(
                f[2..2 + od]
                    .iter()
                    .map(|s| parse_f(s))
                    .collect::<Result<_>>()?,
            );
            e.actions.push(
                f[2 + od..2 + od + ad]
                    .iter()
                    .map(|s| parse_f(s))
                    .collect::<Result<_>>()?,
            );
            e.hidden.push(parse_f(f[2 + od + ad])?);
        }
        let ds = EpisodeDataset {
            episodes,
            stats,
            split,
            dt,
        };
        ds.check()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_csv(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// One target window and the window right before it.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub episode: usize,
    pub context: Episode,
    pub target: Episode,
}

/// Non-overlapping `(context, target)` window pairs of length `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub window: usize,
    pub pairs: Vec<WindowPair>,
}

/// Cuts every episode into windows of length `n`; each window after the
/// first becomes a target with its predecessor as context. A trailing
/// partial window is dropped.
pub fn window_dataset(episodes: &[Episode], n: usize) -> Result<WindowedDataset> {
    if n == 0 {
        return Err(Error::Config("window length must be positive".into()));
    }
    let mut pairs = Vec::new();
    for (i, e) in episodes.iter().enumerate() {
        if e.len() < 2 * n {
            return Err(Error::TooShort {
                needed: 2 * n,
                have: e.len(),
            });
        }
        for k in 1..e.len() / n {
            pairs.push(WindowPair {
                episode: i,
                context: e.slice((k - 1) * n, k * n),
                target: e.slice(k * n, (k + 1) * n),
            });
        }
    }
    Ok(WindowedDataset { window: n, pairs })
}
