//! Sectioned `key = value` run configs.
//!
//! ```text
//! # comment
//! [train]
//! data = data/train.csv
//! epochs = 20
//! ```
//!
//! Every key belongs to a schema entry; unknown sections or keys, duplicate
//! keys and missing required keys are errors.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown section [{0}]")]
    UnknownSection(String),
    #[error("unknown key `{key}` in [{section}]")]
    UnknownKey { section: String, key: String },
    #[error("missing required key `{key}` in [{section}]")]
    Missing { section: String, key: String },
    #[error("`{key}` in [{section}]: invalid value `{value}` ({expected})")]
    Invalid {
        section: String,
        key: String,
        value: String,
        expected: String,
    },
}

struct Key {
    name: &'static str,
    /// `None` marks a required key.
    default: Option<&'static str>,
}

const fn req(name: &'static str) -> Key {
    Key {
        name,
        default: None,
    }
}

const fn opt(name: &'static str, default: &'static str) -> Key {
    Key {
        name,
        default: Some(default),
    }
}

const GENERATE: &[Key] = &[
    req("env"),
    opt("len", "200"),
    opt("episodes", "32"),
    opt("test_episodes", "16"),
    opt("seed", "0"),
    opt("dt", "0.05"),
    opt("mass", "1.0"),
    opt("length", "1.0"),
    opt("damping", "0.2"),
    opt("gravity", "9.81"),
    opt("policy_amplitude", "3.0"),
    opt("policy_components", "3"),
    opt("policy_min_freq", "0.1"),
    opt("policy_max_freq", "1.0"),
    opt("segment_len", "40"),
    opt("drift_amplitude", "0.8"),
    opt("drift_period", "200"),
    opt("out", "data"),
];

const MODEL: &[Key] = &[
    req("kind"),
    opt("latent_dim", "15"),
    opt("task_dim", "15"),
    opt("hidden", "32"),
    opt("num_basis", "4"),
    opt("bandwidth", "3"),
    opt("control", "nonlinear"),
    opt("task_transform", "linear"),
    opt("window", "auto"),
    opt("initial_var", "10.0"),
    opt("noise_init", "0.1"),
];

const TRAIN: &[Key] = &[
    req("data"),
    opt("loss", "gaussian_nll"),
    opt("clip_norm", "5.0"),
    opt("step_mask_fraction", "0.0"),
    opt("window_mask_fraction", "0.0"),
    opt("mask_window", "auto"),
    opt("resample_masks", "true"),
    opt("lr", "0.003"),
    opt("beta1", "0.9"),
    opt("beta2", "0.999"),
    opt("eps", "1e-8"),
    opt("epochs", "50"),
    opt("batch_size", "8"),
    opt("tbptt_len", "auto"),
    opt("val_fraction", "0.1"),
    opt("restore_best", "true"),
    opt("seed", "0"),
    opt("resume", ""),
    opt("out", "run"),
];

const EVAL: &[Key] = &[
    req("checkpoint"),
    req("data"),
    opt("context", "auto"),
    opt("horizon", "auto"),
    opt("metric_window", "auto"),
    opt("sweep", ""),
    opt("env", "auto"),
    opt("seed", "0"),
    opt("predictions", "true"),
    opt("out", "eval"),
];

fn schema(section: &str) -> Option<&'static [Key]> {
    match section {
        "generate" => Some(GENERATE),
        "model" => Some(MODEL),
        "train" => Some(TRAIN),
        "eval" => Some(EVAL),
        _ => None,
    }
}

/// A parsed file: raw values per section, before defaults.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut out = RawConfig::default();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if schema(name).is_none() {
                    return Err(ConfigError::UnknownSection(name.into()));
                }
                out.sections.entry(name.into()).or_default();
                current = Some(name.into());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("expected `key = value`, got `{line}`"),
                });
            };
            let Some(section) = current.clone() else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: "key outside of any [section]".into(),
                });
            };
            let key = key.trim();
            if !schema(&section).unwrap().iter().any(|k| k.name == key) {
                return Err(ConfigError::UnknownKey {
                    section,
                    key: key.into(),
                });
            }
            let entries = out.sections.get_mut(&section).unwrap();
            if entries.insert(key.into(), value.trim().into()).is_some() {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("duplicate key `{key}` in [{section}]"),
                });
            }
        }
        Ok(out)
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.contains_key(section)
    }

    /// Overrides a known key, creating the section if needed.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.into())
            .or_default()
            .insert(key.into(), value.into());
    }

    /// The section with defaults filled in.
    pub fn resolve(&self, section: &'static str) -> Result<Section, ConfigError> {
        let given = self.sections.get(section).cloned().unwrap_or_default();
        let mut values = Vec::new();
        for key in schema(section).expect("known section") {
            let v = match (given.get(key.name), key.default) {
                (Some(v), _) => v.clone(),
                (None, Some(d)) => d.to_string(),
                (None, None) => {
                    return Err(ConfigError::Missing {
                        section: section.into(),
                        key: key.name.into(),
                    })
                }
            };
            values.push((key.name, v));
        }
        Ok(Section {
            name: section,
            values,
        })
    }
}

/// One fully resolved section, in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub name: &'static str,
    values: Vec<(&'static str, String)>,
}

impl Section {
    pub fn str(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("`{key}` is not in the [{}] schema", self.name))
    }

    fn invalid(&self, key: &str, expected: &str) -> ConfigError {
        ConfigError::Invalid {
            section: self.name.into(),
            key: key.into(),
            value: self.str(key).into(),
            expected: expected.into(),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError> {
        self.str(key)
            .parse()
            .map_err(|_| self.invalid(key, std::any::type_name::<T>()))
    }

    /// `None` for `auto`.
    pub fn auto<T: FromStr>(&self, key: &str) -> Result<Option<T>, ConfigError> {
        if self.str(key) == "auto" {
            Ok(None)
        } else {
            self.get(key).map(Some)
        }
    }

    /// Comma-separated list; empty means an empty list.
    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError> {
        let v = self.str(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| self.invalid(key, "comma-separated list"))
            })
            .collect()
    }

    pub fn render(&self, out: &mut String) {
        let _ = writeln!(out, "[{}]", self.name);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
    }
}

/// Window length in steps covering `seconds` at step `dt`, at least one.
pub fn window_for_duration(seconds: f64, dt: f64) -> usize {
    ((seconds / dt).round() as usize).max(1)
}

/// Window lengths `H_i = T^{i/N}` for `i = 1..N-1`, splitting a horizon of
/// `t` steps into `n` levels of equal-length windows.
pub fn timescale_windows(t: usize, levels: usize) -> Vec<usize> {
    (1..levels)
        .map(|i| ((t as f64).powf(i as f64 / levels as f64).round() as usize).max(1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_fills_defaults() {
        let raw = RawConfig::parse("# run\n[train]\ndata = a.csv  # inline\nepochs=3\n").unwrap();
        let s = raw.resolve("train").unwrap();
        assert_eq!(s.str("data"), "a.csv");
        assert_eq!(s.get::<usize>("epochs").unwrap(), 3);
        assert_eq!(s.get::<f64>("lr").unwrap(), 0.003);
        assert_eq!(s.auto::<usize>("tbptt_len").unwrap(), None);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(matches!(
            RawConfig::parse("[nope]"),
            Err(ConfigError::UnknownSection(_))
        ));
        assert!(matches!(
            RawConfig::parse("[train]\nfoo = 1"),
            Err(ConfigError::UnknownKey { .. })
        ));
        assert!(matches!(
            RawConfig::parse("epochs = 1"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RawConfig::parse("[train]\nepochs"),
            Err(ConfigError::Syntax { line: 2, .. })
        ));
        assert!(matches!(
            RawConfig::parse("[train]\nepochs = 1\nepochs = 2"),
            Err(ConfigError::Syntax { line: 3, .. })
        ));
        let err = RawConfig::parse("[train]\nepochs = 1")
            .unwrap()
            .resolve("train")
            .unwrap_err();
        assert!(err.to_string().contains("`data`"), "{err}");
    }

    #[test]
    fn typed_values_are_checked() {
        let s = RawConfig::parse("[train]\ndata=x\nepochs=lots")
            .unwrap()
            .resolve("train")
            .unwrap();
        assert!(matches!(
            s.get::<usize>("epochs"),
            Err(ConfigError::Invalid { .. })
        ));
        let s = RawConfig::parse("[eval]\ncheckpoint=c\ndata=d\nsweep=1, 5,15")
            .unwrap()
            .resolve("eval")
            .unwrap();
        assert_eq!(s.list::<usize>("sweep").unwrap(), vec![1, 5, 15]);
    }

    #[test]
    fn window_helpers() {
        assert_eq!(window_for_duration(0.3, 0.05), 6);
        assert_eq!(window_for_duration(0.3, 1.0), 1);
        assert_eq!(timescale_windows(900, 2), vec![30]);
        assert_eq!(timescale_windows(1000, 3), vec![10, 100]);
        assert!(timescale_windows(50, 1).is_empty());
    }
}
