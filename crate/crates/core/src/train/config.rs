use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{DropKind, DropPolicy};
use crate::conda::{CondaConfig, Orientation};
use crate::model::CtdgConfig;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    Off,
    #[default]
    Supplement,
    Replace,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Augmenter {
    None,
    #[default]
    Conda,
    DropEdge,
    DropNode,
}

/// Diffused prefix length, either absolute or as `L / q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiffLen {
    Rows(usize),
    OfSeq(usize),
}

impl DiffLen {
    pub fn resolve(self, seq_len: usize) -> usize {
        match self {
            Self::Rows(r) => r,
            Self::OfSeq(q) => (seq_len / q).max(1),
        }
    }
}

macro_rules! names {
    ($t:ty { $($v:ident => $s:literal),* $(,)? }) => {
        impl FromStr for $t {
            type Err = String;
            fn from_str(s: &str) -> Result<Self, String> {
                match s {
                    $($s => Ok(Self::$v),)*
                    _ => Err(format!("expected one of {}", [$($s),*].join("|"))),
                }
            }
        }
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s,)* })
            }
        }
    };
}

names!(AugMode { Off => "off", Supplement => "supplement", Replace => "replace" });
names!(Augmenter { None => "none", Conda => "conda", DropEdge => "dropedge", DropNode => "dropnode" });

impl FromStr for DiffLen {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        if let Some(q) = s.strip_prefix("L/") {
            let q: usize = q.parse().map_err(|_| format!("bad fraction `{s}`"))?;
            if q == 0 {
                return Err("fraction denominator must be positive".into());
            }
            return Ok(Self::OfSeq(q));
        }
        s.parse().map(Self::Rows).map_err(|_| format!("expected an integer or L/q, got `{s}`"))
    }
}

impl fmt::Display for DiffLen {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rows(r) => write!(f, "{r}"),
            Self::OfSeq(q) => write!(f, "L/{q}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub r_ctdg: usize,
    pub r_conda: usize,
    pub cycles: usize,
    pub final_ctdg: bool,
    pub batch_size: usize,
    pub lr: f64,
    pub conda_lr: f64,
    pub dropout: f64,
    pub seq_len: usize,
    pub dim: usize,
    pub time_dim: usize,
    pub blocks: usize,
    pub diff_len: DiffLen,
    /// Latent width; 0 selects `max(D/8, 4)`.
    pub latent: usize,
    pub steps: usize,
    pub k: f64,
    pub alpha_min: f64,
    pub alpha_max: f64,
    pub lambda: f64,
    pub orientation: Orientation,
    /// Noising depth at augmentation time; 0 selects `N`.
    pub aug_step: usize,
    pub aug_mode: AugMode,
    pub aug_weight: f64,
    pub augmenter: Augmenter,
    pub drop_p: f64,
    pub seed: u64,
    pub patience: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// When false, `wall_ms` is written as 0 so reports compare byte for byte.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            r_ctdg: 10,
            r_conda: 10,
            cycles: 3,
            final_ctdg: true,
            batch_size: 200,
            lr: 1e-3,
            conda_lr: 1e-3,
            dropout: 0.1,
            seq_len: 32,
            dim: 64,
            time_dim: 32,
            blocks: 2,
            diff_len: DiffLen::OfSeq(8),
            latent: 0,
            steps: 50,
            k: 1e-4,
            alpha_min: 0.1,
            alpha_max: 0.9,
            lambda: 1.0,
            orientation: Orientation::DiffPrefix,
            aug_step: 0,
            aug_mode: AugMode::Supplement,
            aug_weight: 0.5,
            augmenter: Augmenter::Conda,
            drop_p: 0.1,
            seed: 0,
            patience: 5,
            train_ratio: 0.1,
            val_ratio: 0.1,
            test_ratio: 0.8,
            timing: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.into(),
        msg: e.to_string(),
    })
}

macro_rules! fields {
    ($($name:ident),* $(,)?) => {
        /// Every recognised key, in canonical order.
        pub const KEYS: &[&str] = &[$(stringify!($name)),*];

        impl TrainConfig {
            /// Sets one field from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($name) => self.$name = parse(key, value)?,)*
                    _ => return Err(ConfigError::UnknownKey(key.into())),
                }
                Ok(())
            }

            /// `(key, value)` pairs that [`TrainConfig::set`] accepts back.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($name), self.$name.to_string())),*]
            }
        }
    };
}

fields!(
    r_ctdg, r_conda, cycles, final_ctdg, batch_size, lr, conda_lr, dropout, seq_len, dim, time_dim, blocks,
    diff_len, latent, steps, k, alpha_min, alpha_max, lambda, orientation, aug_step, aug_mode, aug_weight,
    augmenter, drop_p, seed, patience, train_ratio, val_ratio, test_ratio, timing,
);

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            msg: format!("expected key = value, got `{line}`"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainConfig {
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        Self::from_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn diff_rows(&self) -> usize {
        self.diff_len.resolve(self.seq_len)
    }

    pub fn latent_width(&self) -> usize {
        if self.latent == 0 {
            (self.dim / 8).max(4)
        } else {
            self.latent
        }
    }

    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.train_ratio, self.val_ratio, self.test_ratio)
    }

    pub fn uses_conda(&self) -> bool {
        self.augmenter == Augmenter::Conda
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (name, v) in [
            ("cycles", self.cycles),
            ("batch_size", self.batch_size),
            ("seq_len", self.seq_len),
            ("dim", self.dim),
            ("time_dim", self.time_dim),
            ("blocks", self.blocks),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [("lr", self.lr), ("conda_lr", self.conda_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        let r = self.ratios();
        if [r.0, r.1, r.2].iter().any(|&x| x <= 0.0) || (r.0 + r.1 + r.2 - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {r:?} must be positive and sum to 1"));
        }
        match self.augmenter {
            Augmenter::Conda => {
                let d = self.diff_rows();
                if d == 0 || d >= self.seq_len {
                    return bad(format!("diff_len {d} must lie in 1..{}", self.seq_len));
                }
                if self.latent_width() >= self.dim {
                    return bad(format!("latent width {} must be below dim {}", self.latent_width(), self.dim));
                }
                if !(self.aug_weight >= 0.0 && self.aug_weight.is_finite()) {
                    return bad("aug_weight must be non-negative".into());
                }
                if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
                    return bad("lambda must be non-negative".into());
                }
                crate::conda::build_schedule(self.steps, self.k, self.alpha_min, self.alpha_max)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                if self.aug_step > self.steps {
                    return bad(format!("aug_step {} exceeds N = {}", self.aug_step, self.steps));
                }
            }
            Augmenter::DropEdge | Augmenter::DropNode => {
                if !(0.0..=1.0).contains(&self.drop_p) {
                    return bad(format!("drop_p {} outside [0, 1]", self.drop_p));
                }
            }
            Augmenter::None => {}
        }
        Ok(())
    }

    pub fn ctdg_config(&self, d_v: usize, d_e: usize) -> CtdgConfig {
        let mut c = CtdgConfig::new(d_v, d_e, self.time_dim, self.dim, self.seq_len);
        c.blocks = self.blocks;
        c.dropout = self.dropout;
        c
    }

    pub fn conda_config(&self) -> CondaConfig {
        let mut c = CondaConfig::new(self.dim, self.seq_len, self.diff_rows());
        c.latent = self.latent_width();
        c.steps = self.steps;
        c.k = self.k;
        c.alpha_min = self.alpha_min;
        c.alpha_max = self.alpha_max;
        c.lambda = self.lambda;
        c.orientation = self.orientation;
        c.aug_step = (self.aug_step > 0).then_some(self.aug_step);
        c
    }

    pub fn drop_policy(&self) -> Option<DropPolicy> {
        let kind = match self.augmenter {
            Augmenter::DropEdge => DropKind::Edge,
            Augmenter::DropNode => DropKind::Node,
            _ => return None,
        };
        Some(DropPolicy {
            kind,
            p: self.drop_p,
            seed: self.seed,
        })
    }
}
