//! Flat `key = value` experiment configuration with `dataset.`, `train.` and
//! `eval.` sections. Unknown keys are rejected; every key can be overridden
//! by an environment variable (`TAPINN_` + key upper-cased, dots to
//! underscores, e.g. `TAPINN_TRAIN_LR`).

use crate::sim::DatasetConfig;
use crate::training::{Method, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("line {line}: expected `key = value`, got {text:?}")]
    BadLine { line: usize, text: String },
    #[error("key {key}: cannot parse {value:?}: {why}")]
    BadValue { key: String, value: String, why: String },
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub n_collocation: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { n_collocation: 10_000, seed: 1234 }
    }
}

/// Union of the dataset protocol, training setup, and evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    /// Where `generate` writes and `train` reads the dataset.
    pub dataset_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            train: TrainConfig::defaults(Method::TapinnAo, 0),
            eval: EvalSettings::default(),
            dataset_dir: "data".into(),
        }
    }
}

pub const ENV_PREFIX: &str = "TAPINN_";

fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

macro_rules! keys {
    ($(($key:literal, $get:expr, $set:expr)),+ $(,)?) => {
        const KEY_COUNT: usize = [$($key),+].len();
        fn key_names() -> [&'static str; KEY_COUNT] { [$($key),+] }
        fn get_key(cfg: &ExperimentConfig, key: &str) -> Option<String> {
            match key {
                $($key => { let f: fn(&ExperimentConfig) -> String = $get; Some(f(cfg)) })+
                _ => None,
            }
        }
        fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<(), ConfigError> {
            match key {
                $($key => { let f: fn(&mut ExperimentConfig, &str) -> Result<(), ConfigError> = $set; f(cfg, value) })+
                _ => Err(ConfigError::UnknownKey(key.to_string())),
            }
        }
    };
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        why: e.to_string(),
    })
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| parse::<f64>(key, s)).collect()
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

keys![
    ("dataset.delta", |c| c.dataset.params.delta.to_string(), |c, v| { c.dataset.params.delta = parse("dataset.delta", v)?; Ok(()) }),
    ("dataset.alpha", |c| c.dataset.params.alpha.to_string(), |c, v| { c.dataset.params.alpha = parse("dataset.alpha", v)?; Ok(()) }),
    ("dataset.beta", |c| c.dataset.params.beta.to_string(), |c, v| { c.dataset.params.beta = parse("dataset.beta", v)?; Ok(()) }),
    ("dataset.omega", |c| c.dataset.params.omega.to_string(), |c, v| { c.dataset.params.omega = parse("dataset.omega", v)?; Ok(()) }),
    ("dataset.regimes", |c| fmt_list(&c.dataset.regimes), |c, v| { c.dataset.regimes = parse_list("dataset.regimes", v)?; Ok(()) }),
    ("dataset.per_regime", |c| c.dataset.per_regime.to_string(), |c, v| { c.dataset.per_regime = parse("dataset.per_regime", v)?; Ok(()) }),
    ("dataset.samples_per_trajectory", |c| c.dataset.samples_per_trajectory.to_string(), |c, v| { c.dataset.samples_per_trajectory = parse("dataset.samples_per_trajectory", v)?; Ok(()) }),
    ("dataset.dt", |c| c.dataset.dt.to_string(), |c, v| { c.dataset.dt = parse("dataset.dt", v)?; Ok(()) }),
    ("dataset.x0_min", |c| c.dataset.x0_range.0.to_string(), |c, v| { c.dataset.x0_range.0 = parse("dataset.x0_min", v)?; Ok(()) }),
    ("dataset.x0_max", |c| c.dataset.x0_range.1.to_string(), |c, v| { c.dataset.x0_range.1 = parse("dataset.x0_max", v)?; Ok(()) }),
    ("dataset.v0_min", |c| c.dataset.v0_range.0.to_string(), |c, v| { c.dataset.v0_range.0 = parse("dataset.v0_min", v)?; Ok(()) }),
    ("dataset.v0_max", |c| c.dataset.v0_range.1.to_string(), |c, v| { c.dataset.v0_range.1 = parse("dataset.v0_max", v)?; Ok(()) }),
    ("dataset.train_fraction", |c| c.dataset.train_fraction.to_string(), |c, v| { c.dataset.train_fraction = parse("dataset.train_fraction", v)?; Ok(()) }),
    ("train.dataset_dir", |c| c.dataset_dir.clone(), |c, v| { c.dataset_dir = v.trim().to_string(); Ok(()) }),
    ("train.method", |c| c.train.method.to_string(), |c, v| { c.train.method = v.trim().parse().map_err(|e: String| ConfigError::BadValue { key: "train.method".into(), value: v.into(), why: e })?; Ok(()) }),
    ("train.epochs", |c| c.train.epochs.to_string(), |c, v| { c.train.epochs = parse("train.epochs", v)?; Ok(()) }),
    ("train.lr", |c| c.train.lr.to_string(), |c, v| { c.train.lr = parse("train.lr", v)?; Ok(()) }),
    ("train.alpha", |c| c.train.alpha.to_string(), |c, v| { c.train.alpha = parse("train.alpha", v)?; Ok(()) }),
    ("train.beta", |c| c.train.beta.to_string(), |c, v| { c.train.beta = parse("train.beta", v)?; Ok(()) }),
    ("train.margin", |c| c.train.margin.to_string(), |c, v| { c.train.margin = parse("train.margin", v)?; Ok(()) }),
    ("train.k_joint", |c| c.train.k_joint.to_string(), |c, v| { c.train.k_joint = parse("train.k_joint", v)?; Ok(()) }),
    ("train.phase1_epochs", |c| c.train.phase1_epochs.to_string(), |c, v| { c.train.phase1_epochs = parse("train.phase1_epochs", v)?; Ok(()) }),
    ("train.phase2_epochs", |c| c.train.phase2_epochs.to_string(), |c, v| { c.train.phase2_epochs = parse("train.phase2_epochs", v)?; Ok(()) }),
    ("train.batch_size", |c| c.train.batch_size.to_string(), |c, v| { c.train.batch_size = parse("train.batch_size", v)?; Ok(()) }),
    ("train.seed", |c| c.train.seed.to_string(), |c, v| { c.train.seed = parse("train.seed", v)?; Ok(()) }),
    ("train.collocation_per_item", |c| c.train.collocation_per_item.to_string(), |c, v| { c.train.collocation_per_item = parse("train.collocation_per_item", v)?; Ok(()) }),
    ("train.data_points_per_item", |c| c.train.data_points_per_item.to_string(), |c, v| { c.train.data_points_per_item = parse("train.data_points_per_item", v)?; Ok(()) }),
    ("train.window_len", |c| c.train.dims.window_len.to_string(), |c, v| { c.train.dims.window_len = parse("train.window_len", v)?; Ok(()) }),
    ("train.lstm_hidden", |c| c.train.dims.lstm_hidden.to_string(), |c, v| { c.train.dims.lstm_hidden = parse("train.lstm_hidden", v)?; Ok(()) }),
    ("train.d_z", |c| c.train.dims.d_z.to_string(), |c, v| { c.train.dims.d_z = parse("train.d_z", v)?; Ok(()) }),
    ("train.gen_hidden", |c| c.train.dims.gen_hidden.to_string(), |c, v| { c.train.dims.gen_hidden = parse("train.gen_hidden", v)?; Ok(()) }),
    ("train.parametric_hidden", |c| c.train.dims.parametric_hidden.to_string(), |c, v| { c.train.dims.parametric_hidden = parse("train.parametric_hidden", v)?; Ok(()) }),
    ("train.hyper_hidden", |c| c.train.dims.hyper_hidden.to_string(), |c, v| { c.train.dims.hyper_hidden = parse("train.hyper_hidden", v)?; Ok(()) }),
    ("train.target_hidden", |c| c.train.dims.target_hidden.to_string(), |c, v| { c.train.dims.target_hidden = parse("train.target_hidden", v)?; Ok(()) }),
    ("eval.n_collocation", |c| c.eval.n_collocation.to_string(), |c, v| { c.eval.n_collocation = parse("eval.n_collocation", v)?; Ok(()) }),
    ("eval.seed", |c| c.eval.seed.to_string(), |c, v| { c.eval.seed = parse("eval.seed", v)?; Ok(()) }),
];

impl ExperimentConfig {
    /// Parse a flat key=value document; `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine { line: i + 1, text: raw.to_string() })?;
            set_key(&mut cfg, key.trim(), value)?;
        }
        cfg.finalize();
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let mut cfg = Self::parse_str(&std::fs::read_to_string(path)?)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    /// Environment overrides for every known key.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        for key in key_names() {
            if let Ok(v) = std::env::var(env_name(key)) {
                set_key(self, key, &v)?;
            }
        }
        self.finalize();
        Ok(())
    }

    /// Derived values: the generator's time normalisation tracks the
    /// trajectory horizon.
    pub fn finalize(&mut self) {
        self.train.dims.t_scale = self.dataset.t_max();
    }

    /// All keys with their current values, parseable back via `parse_str`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let mut last_section = "";
        for key in key_names() {
            let section = key.split('.').next().unwrap();
            if section != last_section {
                if !last_section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("# {section} settings\n"));
                last_section = section;
            }
            out.push_str(&format!("{key} = {}\n", get_key(self, key).unwrap()));
        }
        out
    }
}
