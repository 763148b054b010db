//! Run configuration documents.

use std::path::Path;

use lds_stitch::eval::MAX_EVAL_PAIRS;
use lds_stitch::model::SimConfig;
use lds_stitch::observation::{make_multi_subset_scheme, make_two_subset_scheme, ObservationScheme, Overlap};
use lds_stitch::s3id::S3idConfig;
use lds_stitch::sem::SemConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchemeConfig {
    Full,
    /// Two sessions; `t1` defaults to half the recording.
    TwoSubset {
        overlap_fraction: f64,
        #[serde(default)]
        t1: Option<usize>,
    },
    /// A chain of `k` equally long sessions sharing `overlap` variables with each neighbour.
    MultiSubset { k: usize, overlap: usize },
}

impl SchemeConfig {
    pub fn build(&self, p: usize, t: usize) -> lds_stitch::Result<ObservationScheme> {
        match *self {
            SchemeConfig::Full => Ok(ObservationScheme::full(p, t)),
            SchemeConfig::TwoSubset { overlap_fraction, t1 } => {
                let t1 = t1.unwrap_or(t / 2);
                if t1 == 0 || t1 >= t {
                    return Err(lds_stitch::Error::InvalidConfig(format!("t1 = {t1} must lie strictly inside 0..{t}")));
                }
                make_two_subset_scheme(p, Overlap::Fraction(overlap_fraction), t1, t - t1)
            }
            SchemeConfig::MultiSubset { k, overlap } => {
                if k == 0 || t % k != 0 {
                    return Err(lds_stitch::Error::InvalidConfig(format!("T = {t} is not divisible into {k} sessions")));
                }
                make_multi_subset_scheme(p, k, overlap, t / k)
            }
        }
    }
}

fn default_eval_lags() -> usize {
    1
}
fn default_pair_sample() -> usize {
    MAX_EVAL_PAIRS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prediction correlations are reported for `s = 0..=max_lag`.
    #[serde(default = "default_eval_lags")]
    pub max_lag: usize,
    #[serde(default = "default_pair_sample")]
    pub pair_sample: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { max_lag: default_eval_lags(), pair_sample: default_pair_sample(), seed: 0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub sim: Option<SimConfig>,
    #[serde(default)]
    pub scheme: Option<SchemeConfig>,
    #[serde(default)]
    pub s3id: Option<S3idConfig>,
    #[serde(default)]
    pub sem: Option<SemConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

/// A parsed configuration together with its source text, for line-anchored messages.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: RunConfig,
    path: String,
    text: String,
}

impl LoadedConfig {
    /// Config error pointing at the line where `section` is defined.
    pub fn error(&self, section: &str, msg: impl std::fmt::Display) -> CliError {
        let needle = format!("\"{section}\"");
        let line = self.text.lines().position(|l| l.contains(&needle)).map_or(1, |k| k + 1);
        CliError::usage(format!("{}:{line}: {section}: {msg}", self.path))
    }

    pub fn require<'a, T>(&self, value: &'a Option<T>, section: &str) -> Result<&'a T, CliError> {
        value.as_ref().ok_or_else(|| CliError::usage(format!("{}: missing section \"{section}\"", self.path)))
    }

    /// Checks every present section.
    pub fn validate(&self) -> Result<(), CliError> {
        let c = &self.config;
        if let Some(sim) = &c.sim {
            sim.validate().map_err(|e| self.error("sim", e))?;
            if let Some(scheme) = &c.scheme {
                scheme.build(sim.p, sim.t).map_err(|e| self.error("scheme", e))?;
            }
        }
        if let Some(s3id) = &c.s3id {
            s3id.validate().map_err(|e| self.error("s3id", e))?;
        }
        if let Some(sem) = &c.sem {
            sem.validate().map_err(|e| self.error("sem", e))?;
        }
        if let Some(eval) = &c.eval {
            if eval.pair_sample == 0 {
                return Err(self.error("eval", "pair_sample must be positive"));
            }
        }
        Ok(())
    }
}

/// Reads and validates a configuration file; every failure is a usage error.
pub fn load_config(path: &Path) -> Result<LoadedConfig, CliError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{shown}: cannot read config: {e}")))?;
    let config: RunConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::usage(format!("{shown}:{}:{}: {e}", e.line(), e.column())))?;
    let loaded = LoadedConfig { config, path: shown, text };
    loaded.validate()?;
    Ok(loaded)
}
