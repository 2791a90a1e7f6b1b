//! Config files: every `TrainConfig` key plus `data`, `out` and `seeds`.

use std::path::PathBuf;

use conda_core::train::{parse_pairs, ConfigError, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            data: None,
            out: PathBuf::from("runs"),
            seeds: vec![0, 1, 2],
        }
    }
}

pub fn parse_seeds(list: &str) -> Result<Vec<u64>, ConfigError> {
    let seeds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse().map_err(|_| ConfigError::Value {
                key: "seeds".into(),
                msg: format!("`{s}` is not a non-negative integer"),
            })
        })
        .collect::<Result<Vec<u64>, _>>()?;
    if seeds.is_empty() {
        return Err(ConfigError::Value {
            key: "seeds".into(),
            msg: "empty seed list".into(),
        });
    }
    Ok(seeds)
}

impl Settings {
    /// Reads a config file, then applies `key=value` overrides in order.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: 0,
                msg: format!("override `{o}` is not key=value"),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut s = Self::default();
        for (k, v) in &pairs {
            match k.as_str() {
                "data" => s.data = Some(PathBuf::from(v)),
                "out" => s.out = PathBuf::from(v),
                "seeds" => s.seeds = parse_seeds(v)?,
                _ => s.train.set(k, v)?,
            }
        }
        Ok(s)
    }

    /// Canonical text of the training configuration, used for run ids.
    pub fn canonical(&self) -> String {
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        format!("{}seeds = {}\n", self.train.to_text(), seeds.join(","))
    }
}
