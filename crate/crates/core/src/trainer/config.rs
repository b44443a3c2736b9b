//! Flat `key = value` training configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::objective::HyperParams;
use crate::propagation::LayerCombination;

/// Which model the pipeline trains. Baselines are configuration collapses
/// of the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[default]
    Frgcf,
    /// Single view on all train interactions, no auxiliary terms.
    LightGcn,
    /// Single view on I&F train interactions only, no auxiliary terms.
    LightGcnIf,
}

impl ModelKind {
    pub fn uses_iu_view(self) -> bool {
        self == Self::Frgcf
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frgcf" => Ok(Self::Frgcf),
            "lightgcn" => Ok(Self::LightGcn),
            "lightgcn-if" => Ok(Self::LightGcnIf),
            _ => Err(Error::Config(format!("unknown model {s:?} (frgcf|lightgcn|lightgcn-if)"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Frgcf => "frgcf",
            Self::LightGcn => "lightgcn",
            Self::LightGcnIf => "lightgcn-if",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hp: HyperParams,
    pub model: ModelKind,
    pub lr: f64,
    /// L2 decay folded into the Adam gradient; 0 disables it.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Cutoff for the validation Recall@n.
    pub eval_n: usize,
    /// Fraction of each user's I&F train edges carved out for validation.
    pub validation_fraction: f64,
    pub kmeans_iters: usize,
    pub layer_combination: LayerCombination,
    /// Emit a step record every this many steps; 0 logs epochs only.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hp: HyperParams::default(),
            model: ModelKind::Frgcf,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 2048,
            max_epochs: 500,
            patience: 20,
            seed: 2024,
            eval_every: 1,
            eval_n: 20,
            validation_fraction: 0.1,
            kmeans_iters: 25,
            layer_combination: LayerCombination::Mean,
            log_every: 0,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "dim",
    "layers",
    "layer_combination",
    "lambda_frcl",
    "lambda_macro",
    "lambda_dis",
    "tau",
    "mu",
    "centroids",
    "lr",
    "weight_decay",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "eval_every",
    "eval_n",
    "validation_fraction",
    "kmeans_iters",
    "log_every",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. Cross-field checks are
    /// left to [`TrainConfig::validate`] so overrides can still repair them.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut errors = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errors.push(format!("line {}: expected key = value", no + 1));
                continue;
            };
            if let Err(e) = cfg.set(k.trim(), v.trim()) {
                errors.push(format!("line {}: {}", no + 1, config_message(e)));
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Applies one override. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let hp = &mut self.hp;
        match key {
            "model" => self.model = value.parse()?,
            "dim" => hp.dim = parse(key, value)?,
            "layers" => hp.layers = parse(key, value)?,
            "layer_combination" => self.layer_combination = value.parse()?,
            "lambda_frcl" => hp.lambda_frcl = parse(key, value)?,
            "lambda_macro" => hp.lambda_macro = parse(key, value)?,
            "lambda_dis" => hp.lambda_dis = parse(key, value)?,
            "tau" => hp.tau = parse(key, value)?,
            "mu" => hp.mu = parse(key, value)?,
            "centroids" => hp.centroids = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "eval_n" => self.eval_n = parse(key, value)?,
            "validation_fraction" => self.validation_fraction = parse(key, value)?,
            "kmeans_iters" => self.kmeans_iters = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides, collecting every bad one.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut errors = Vec::new();
        for o in overrides {
            let o = o.as_ref();
            match o.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = self.set(k.trim(), v.trim()) {
                        errors.push(config_message(e));
                    }
                }
                None => errors.push(format!("override {o:?} is not key=value")),
            }
        }
        if !errors.is_empty() {
            return Err(Error::Config(errors.join("; ")));
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        let mut bad = Vec::new();
        if !(self.lr.is_finite() && self.lr > 0.0) {
            bad.push("lr must be > 0");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            bad.push("weight_decay must be >= 0");
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be >= 1");
        }
        if self.patience == 0 {
            bad.push("patience must be >= 1");
        }
        if self.eval_every == 0 {
            bad.push("eval_every must be >= 1");
        }
        if self.eval_n == 0 {
            bad.push("eval_n must be >= 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bad.push("validation_fraction must be in [0, 1)");
        }
        if self.kmeans_iters == 0 {
            bad.push("kmeans_iters must be >= 1");
        }
        if !self.model.uses_iu_view() && self.hp.uses_ssl() {
            bad.push("baseline models take no auxiliary terms; set lambda_* = 0");
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Forces the collapse that defines a baseline model.
    pub fn for_model(mut self, model: ModelKind) -> Self {
        self.model = model;
        if !model.uses_iu_view() {
            self.hp.lambda_frcl = 0.0;
            self.hp.lambda_macro = 0.0;
            self.hp.lambda_dis = 0.0;
        }
        self
    }

    /// Canonical text form; parses back to an identical config.
    pub fn to_text(&self) -> String {
        let hp = &self.hp;
        let values: Vec<(&str, String)> = vec![
            ("model", self.model.to_string()),
            ("dim", hp.dim.to_string()),
            ("layers", hp.layers.to_string()),
            ("layer_combination", self.layer_combination.to_string()),
            ("lambda_frcl", hp.lambda_frcl.to_string()),
            ("lambda_macro", hp.lambda_macro.to_string()),
            ("lambda_dis", hp.lambda_dis.to_string()),
            ("tau", hp.tau.to_string()),
            ("mu", hp.mu.to_string()),
            ("centroids", hp.centroids.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("eval_n", self.eval_n.to_string()),
            ("validation_fraction", self.validation_fraction.to_string()),
            ("kmeans_iters", self.kmeans_iters.to_string()),
            ("log_every", self.log_every.to_string()),
        ];
        debug_assert_eq!(values.len(), CONFIG_KEYS.len());
        values.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hash of everything that influences the trained parameters.
    /// `max_epochs`, `patience` and `log_every` are left out so a run can
    /// be resumed with a longer budget.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for line in self.to_text().lines() {
            let key = line.split('=').next().unwrap_or("").trim();
            if !matches!(key, "max_epochs" | "patience" | "log_every") {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        hex::encode(h.finalize())
    }
}

fn config_message(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}
