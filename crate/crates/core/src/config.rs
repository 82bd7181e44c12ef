//! Run configuration: flat `key = value` files, `GTN_*` environment
//! overrides, then explicit overrides (command-line flags) on top.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::SyntheticSpec;
use crate::encoder::Backend;
use crate::error::{Error, Result};
use crate::filter::Combine;
use crate::training::TrainConfig;

pub const ENV_PREFIX: &str = "GTN_";

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_kv(text: &str, origin: &Path) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key = value, found {line:?}",
                origin.display(),
                lineno + 1
            )));
        };
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

/// Everything a CLI run needs; every field has a default.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Directory holding `train.txt` / `test.txt`.
    pub data_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub backend: Backend,
    pub combine: Combine,
    pub eval_k: Vec<usize>,
    pub out_dir: PathBuf,
    pub synthetic: SyntheticSpec,
    pub sparsity_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            train: TrainConfig::default(),
            backend: Backend::Gtn,
            combine: Combine::Mean,
            eval_k: vec![20],
            out_dir: PathBuf::from("out"),
            synthetic: SyntheticSpec::default(),
            sparsity_threshold: crate::eval::SPARSITY_THRESHOLD,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse_value(key, v.trim())).collect()
}

impl RunConfig {
    /// Applies one setting. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synthetic;
        match key {
            "data_dir" => self.data_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "backend" => self.backend = value.parse()?,
            "combine" => self.combine = value.parse()?,
            "eval_k" => self.eval_k = parse_list(key, value)?,
            "sparsity_threshold" => self.sparsity_threshold = parse_value(key, value)?,
            "embed_dim" => t.embed_dim = parse_value(key, value)?,
            "learning_rate" => t.learning_rate = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "l2_alpha" => t.l2_alpha = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "lambda" => t.filter.lambda = parse_value(key, value)?,
            "num_layers" => t.filter.num_layers = parse_value(key, value)?,
            "gamma" => t.filter.gamma = parse_value(key, value)?,
            "beta" => t.filter.beta = parse_value(key, value)?,
            "synthetic_users" => s.num_users = parse_value(key, value)?,
            "synthetic_items" => s.num_items = parse_value(key, value)?,
            "synthetic_interactions" => s.interactions = parse_value(key, value)?,
            "synthetic_blocks" => s.num_blocks = parse_value(key, value)?,
            "synthetic_noise" => s.noise_frac = parse_value(key, value)?,
            "synthetic_seed" => s.seed = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Defaults, then `file`, then `GTN_<KEY>` variables from `env`, then `overrides`.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            for (k, v) in parse_kv(&text, path)? {
                cfg.set(&k, &v)?;
            }
        }
        let mut env_pairs: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|key| (key.to_ascii_lowercase(), v)))
            .collect();
        env_pairs.sort();
        for (k, v) in env_pairs {
            cfg.set(&k, &v)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_k.is_empty() || self.eval_k.contains(&0) {
            return Err(Error::Config("eval_k needs positive cutoffs".into()));
        }
        if self.sparsity_threshold.is_nan() || self.sparsity_threshold <= 0.0 {
            return Err(Error::Config("sparsity_threshold must be positive".into()));
        }
        Ok(())
    }

    /// Fully resolved settings in the same `key = value` format `resolve` reads.
    pub fn to_kv_string(&self) -> String {
        let t = &self.train;
        let f = &t.filter;
        let s = &self.synthetic;
        let ks: Vec<String> = self.eval_k.iter().map(|k| k.to_string()).collect();
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        line(
            "data_dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        line("out_dir", self.out_dir.display().to_string());
        line("backend", self.backend.name().to_string());
        line(
            "combine",
            match self.combine {
                Combine::Last => "last".into(),
                Combine::Mean => "mean".into(),
            },
        );
        line("eval_k", ks.join(","));
        line("sparsity_threshold", format!("{:?}", self.sparsity_threshold));
        line("embed_dim", t.embed_dim.to_string());
        line("learning_rate", format!("{:?}", t.learning_rate));
        line("batch_size", t.batch_size.to_string());
        line("l2_alpha", format!("{:?}", t.l2_alpha));
        line("epochs", t.epochs.to_string());
        line("seed", t.seed.to_string());
        line("lambda", format!("{:?}", f.lambda));
        line("num_layers", f.num_layers.to_string());
        line("gamma", format!("{:?}", f.gamma));
        line("beta", format!("{:?}", f.beta));
        line("synthetic_users", s.num_users.to_string());
        line("synthetic_items", s.num_items.to_string());
        line("synthetic_interactions", s.interactions.to_string());
        line("synthetic_blocks", s.num_blocks.to_string());
        line("synthetic_noise", format!("{:?}", s.noise_frac));
        line("synthetic_seed", s.seed.to_string());
        out
    }
}
