//! Sensitivity sweeps over the diffused length and the noise scale.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::graph::EventLog;
use crate::train::{run_experiment, Augmenter, ConfigError, DiffLen, Result, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    DiffLen,
    K,
}

impl FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "diff_len" => Ok(Self::DiffLen),
            "k" => Ok(Self::K),
            _ => Err(format!("unknown sweep parameter `{s}` (expected diff_len|k)")),
        }
    }
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            Self::DiffLen => "diff_len",
            Self::K => "k",
        }
    }

    /// Checks that `value` parses for this parameter.
    pub fn check(self, value: &str) -> std::result::Result<(), ConfigError> {
        let err = |msg: String| ConfigError::Value {
            key: self.key().into(),
            msg,
        };
        match self {
            Self::DiffLen => value.parse::<DiffLen>().map(|_| ()).map_err(err),
            Self::K => match value.parse::<f64>() {
                Ok(k) if (0.0..=1.0).contains(&k) => Ok(()),
                Ok(k) => Err(err(format!("k = {k} outside [0, 1]"))),
                Err(e) => Err(err(e.to_string())),
            },
        }
    }

    /// Config for one sweep value; `k = 0` is the unaugmented baseline.
    pub fn apply(self, base: &TrainConfig, value: &str) -> std::result::Result<TrainConfig, ConfigError> {
        self.check(value)?;
        let mut c = base.clone();
        c.augmenter = Augmenter::Conda;
        if self == Self::K && value.parse::<f64>().is_ok_and(|k| k == 0.0) {
            c.augmenter = Augmenter::None;
            return Ok(c);
        }
        c.set(self.key(), value)?;
        Ok(c)
    }
}

/// Splits a comma-separated value list; an empty list is an error.
pub fn parse_values(param: SweepParam, list: &str) -> std::result::Result<Vec<String>, ConfigError> {
    let values: Vec<String> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    if values.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one value".into()));
    }
    for v in &values {
        param.check(v)?;
    }
    Ok(values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_ap: f64,
    pub test_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The swept value, or `baseline`.
    pub value: String,
    pub mean_ap: f64,
    pub std_ap: f64,
    pub mean_auc: f64,
    pub std_auc: f64,
    pub runs: Vec<SeedResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub param: SweepParam,
    /// Value rows in input order.
    pub rows: Vec<SweepRow>,
    pub baseline: SweepRow,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(value: String, runs: Vec<SeedResult>) -> SweepRow {
    let (mean_ap, std_ap) = mean_std(&runs.iter().map(|r| r.test_ap).collect::<Vec<_>>());
    let (mean_auc, std_auc) = mean_std(&runs.iter().map(|r| r.test_auc).collect::<Vec<_>>());
    SweepRow {
        value,
        mean_ap,
        std_ap,
        mean_auc,
        std_auc,
        runs,
    }
}

/// Test metrics of `config` for each seed.
pub fn run_seeds(config: &TrainConfig, log: &EventLog, seeds: &[u64]) -> Result<Vec<SeedResult>> {
    seeds
        .iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            let report = run_experiment(&c, log)?;
            let f = report.final_record().expect("a completed run ends with a final record");
            Ok(SeedResult {
                seed,
                test_ap: f.test_ap,
                test_auc: f.test_auc,
            })
        })
        .collect()
}

/// One run per value and seed, plus the baseline over the same seeds.
pub fn run_sweep(
    base: &TrainConfig,
    log: &EventLog,
    param: SweepParam,
    values: &[String],
    seeds: &[u64],
) -> Result<SweepTable> {
    if values.is_empty() || seeds.is_empty() {
        return Err(ConfigError::Invalid("sweep needs at least one value and one seed".into()).into());
    }
    let mut baseline_cfg = base.clone();
    baseline_cfg.augmenter = Augmenter::None;
    let baseline_runs = run_seeds(&baseline_cfg, log, seeds)?;
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let c = param.apply(base, v)?;
        let runs = if c.augmenter == Augmenter::None {
            baseline_runs.clone()
        } else {
            c.validate()?;
            run_seeds(&c, log, seeds)?
        };
        rows.push(summarize(v.clone(), runs));
    }
    Ok(SweepTable {
        param,
        rows,
        baseline: summarize("baseline".into(), baseline_runs),
    })
}

impl SweepTable {
    pub fn row(&self, value: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value)
    }

    /// Plain-text table, baseline last.
    pub fn render(&self) -> String {
        let mut out = format!("{:<10} {:>17} {:>17}\n", self.param.key(), "test AP", "test AUC");
        for r in self.rows.iter().chain(std::iter::once(&self.baseline)) {
            let _ = writeln!(
                out,
                "{:<10} {:>8.4} ± {:<6.4} {:>8.4} ± {:<6.4}",
                r.value, r.mean_ap, r.std_ap, r.mean_auc, r.std_auc
            );
        }
        out
    }
}
