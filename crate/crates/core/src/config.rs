//! `key = value` configuration files.

use std::collections::HashSet;
use std::path::Path;
use std::str::FromStr;

use crate::analysis::AnalysisConfig;
use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Every tunable knob of curation, training, analysis and evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EngineConfig {
    pub curation: CurationConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    /// Zero-shot softmax temperature; `None` uses the head's trained value.
    pub zero_shot_tau: Option<f64>,
}

pub const KEYS: &[&str] = &[
    "seed",
    "superbatch_size",
    "outlier_frac",
    "keep_frac",
    "per_cluster_budget",
    "K",
    "ema_alpha",
    "curation_space",
    "sinkhorn_epsilon",
    "sinkhorn_max_iters",
    "sinkhorn_tol",
    "warmup_samples",
    "kmeans_max_iters",
    "target_subset_size",
    "epochs",
    "batch_size",
    "d_shared",
    "learning_rate",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "knn_k",
    "low_density_quantile",
    "zero_shot_tau",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?} as {}", std::any::type_name::<T>())))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    match value {
        "none" | "" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

impl EngineConfig {
    /// Sets one key; the seed drives curation and training alike.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let c = &mut self.curation;
        let t = &mut self.train;
        match key {
            "seed" => {
                c.seed = parse(key, value)?;
                t.seed = c.seed;
            }
            "superbatch_size" => c.superbatch_size = parse(key, value)?,
            "outlier_frac" => c.outlier_frac = parse(key, value)?,
            "keep_frac" => c.keep_frac = parse(key, value)?,
            "per_cluster_budget" => c.per_cluster_budget = parse(key, value)?,
            "K" => c.k = parse(key, value)?,
            "ema_alpha" => c.ema_alpha = parse(key, value)?,
            "curation_space" => c.curation_space = parse(key, value)?,
            "sinkhorn_epsilon" => c.sinkhorn.epsilon = parse(key, value)?,
            "sinkhorn_max_iters" => c.sinkhorn.max_iters = parse(key, value)?,
            "sinkhorn_tol" => c.sinkhorn.tol = parse(key, value)?,
            "warmup_samples" => c.warmup_samples = parse(key, value)?,
            "kmeans_max_iters" => c.kmeans_max_iters = parse(key, value)?,
            "target_subset_size" => c.target_subset_size = optional(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "d_shared" => t.d_shared = parse(key, value)?,
            "learning_rate" => t.optimizer.lr = parse(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = parse(key, value)?,
            "adam_beta1" => t.optimizer.beta1 = parse(key, value)?,
            "adam_beta2" => t.optimizer.beta2 = parse(key, value)?,
            "adam_eps" => t.optimizer.eps = parse(key, value)?,
            "knn_k" => self.analysis.knn_k = parse(key, value)?,
            "low_density_quantile" => self.analysis.low_density_quantile = parse(key, value)?,
            "zero_shot_tau" => {
                self.zero_shot_tau = match value {
                    "trained" => None,
                    v => Some(parse(key, v)?),
                }
            }
            other => return Err(Error::config(other, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.curation.validate()?;
        let t = &self.train;
        let bad = |key: &str, why: &str| Err(Error::config(key, why));
        if t.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if t.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if t.d_shared == 0 {
            return bad("d_shared", "must be positive");
        }
        if !(t.optimizer.lr > 0.0 && t.optimizer.lr.is_finite()) {
            return bad("learning_rate", "must be positive");
        }
        if !(t.optimizer.weight_decay >= 0.0 && t.optimizer.weight_decay.is_finite()) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(0.0..1.0).contains(&t.optimizer.beta1) {
            return bad("adam_beta1", "must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&t.optimizer.beta2) {
            return bad("adam_beta2", "must be in [0, 1)");
        }
        if !(t.optimizer.eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if self.analysis.knn_k == 0 {
            return bad("knn_k", "must be positive");
        }
        let q = self.analysis.low_density_quantile;
        if !(q > 0.0 && q <= 1.0) {
            return bad("low_density_quantile", "must be in (0, 1]");
        }
        if let Some(tau) = self.zero_shot_tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return bad("zero_shot_tau", "must be positive or \"trained\"");
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_config(&text)
    }

    /// Canonical text form; parsing it gives back the same config.
    pub fn to_text(&self) -> String {
        let c = &self.curation;
        let t = &self.train;
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let space = serde_json::to_value(c.curation_space).expect("space serializes");
        let mut out = String::new();
        let mut put = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        put("seed", c.seed.to_string());
        put("superbatch_size", c.superbatch_size.to_string());
        put("outlier_frac", c.outlier_frac.to_string());
        put("keep_frac", c.keep_frac.to_string());
        put("per_cluster_budget", c.per_cluster_budget.to_string());
        put("K", c.k.to_string());
        put("ema_alpha", c.ema_alpha.to_string());
        put("curation_space", space.as_str().expect("string").to_string());
        put("sinkhorn_epsilon", c.sinkhorn.epsilon.to_string());
        put("sinkhorn_max_iters", c.sinkhorn.max_iters.to_string());
        put("sinkhorn_tol", c.sinkhorn.tol.to_string());
        put("warmup_samples", c.warmup_samples.to_string());
        put("kmeans_max_iters", c.kmeans_max_iters.to_string());
        put("target_subset_size", opt(c.target_subset_size));
        put("epochs", t.epochs.to_string());
        put("batch_size", t.batch_size.to_string());
        put("d_shared", t.d_shared.to_string());
        put("learning_rate", t.optimizer.lr.to_string());
        put("weight_decay", t.optimizer.weight_decay.to_string());
        put("adam_beta1", t.optimizer.beta1.to_string());
        put("adam_beta2", t.optimizer.beta2.to_string());
        put("adam_eps", t.optimizer.eps.to_string());
        put("knn_k", self.analysis.knn_k.to_string());
        put("low_density_quantile", self.analysis.low_density_quantile.to_string());
        put("zero_shot_tau", self.zero_shot_tau.map_or("trained".to_string(), |v| v.to_string()));
        out
    }
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are
/// skipped; absent keys keep their defaults; repeated or unknown keys are
/// errors.
pub fn parse_config(text: &str) -> Result<EngineConfig> {
    let mut config = EngineConfig::default();
    let mut seen = HashSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::config(key, format!("line {}: repeated key", lineno + 1)));
        }
        config.set(key, value)?;
    }
    config.validate()?;
    Ok(config)
}
