//! Pipeline configuration: `key = value` file, then command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stormcast_core::cells::{DEFAULT_AREA_LIMIT_KM2, DEFAULT_RADIUS_KM, DEFAULT_THRESHOLD_DBZ};
use stormcast_core::eval::DEFAULT_TRAIN_FRAC;
use stormcast_core::forest::DEFAULT_TREES;
use stormcast_core::grid_io::DEFAULT_STEP_SECONDS;
use stormcast_core::mlp::{DEFAULT_BATCH, DEFAULT_DROPOUT, DEFAULT_EPOCHS};
use stormcast_core::resample::DEFAULT_K;
use stormcast_core::tracking::{DEFAULT_ALPHA, DEFAULT_ITERATIONS, DEFAULT_MAX_MATCH_KM};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Rfc,
    Mlp,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rfc" => Ok(Self::Rfc),
            "mlp" => Ok(Self::Mlp),
            _ => bail!("model must be rfc or mlp, got '{s}'"),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Rfc => "rfc",
            Self::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub store_dir: PathBuf,
    /// Defaults to `<store>/scenario/frames`.
    pub frames_dir: Option<PathBuf>,
    /// Defaults to `<store>/models`.
    pub models_dir: Option<PathBuf>,
    /// Scenario description used by `synth`.
    pub scenario: Option<PathBuf>,
    /// Spacing of the radar frames.
    pub step_seconds: i64,
    pub threshold_dbz: f64,
    pub area_limit: f64,
    pub radius: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub max_match_km: f64,
    pub model: ModelKind,
    pub smote: bool,
    pub smote_k: usize,
    pub filter_complete: bool,
    pub n_trees: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    pub seed: Option<u64>,
    pub train_frac: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            store_dir: PathBuf::from("store"),
            frames_dir: None,
            models_dir: None,
            scenario: None,
            step_seconds: DEFAULT_STEP_SECONDS,
            threshold_dbz: DEFAULT_THRESHOLD_DBZ,
            area_limit: DEFAULT_AREA_LIMIT_KM2,
            radius: DEFAULT_RADIUS_KM,
            alpha: DEFAULT_ALPHA,
            iterations: DEFAULT_ITERATIONS,
            max_match_km: DEFAULT_MAX_MATCH_KM,
            model: ModelKind::Rfc,
            smote: true,
            smote_k: DEFAULT_K,
            filter_complete: false,
            n_trees: DEFAULT_TREES,
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            dropout: DEFAULT_DROPOUT,
            seed: None,
            train_frac: DEFAULT_TRAIN_FRAC,
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Some(true),
        "false" | "no" | "off" | "0" => Some(false),
        _ => None,
    }
}

impl PipelineConfig {
    /// Applies one setting. Paths in a config file are taken relative to
    /// `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let path = |v: &str| match base {
            Some(b) if Path::new(v).is_relative() => b.join(v),
            _ => PathBuf::from(v),
        };
        macro_rules! num {
            () => {
                value.parse().with_context(|| format!("bad value for {key}: '{value}'"))?
            };
        }
        let flag = || parse_bool(value).with_context(|| format!("bad value for {key}: '{value}'"));
        match key {
            "store_dir" => self.store_dir = path(value),
            "frames_dir" => self.frames_dir = Some(path(value)),
            "models_dir" => self.models_dir = Some(path(value)),
            "scenario" => self.scenario = Some(path(value)),
            "step_seconds" => self.step_seconds = num!(),
            "threshold_dbz" => self.threshold_dbz = num!(),
            "area_limit" => self.area_limit = num!(),
            "radius" => self.radius = num!(),
            "alpha" => self.alpha = num!(),
            "iterations" => self.iterations = num!(),
            "max_match_km" => self.max_match_km = num!(),
            "model" => self.model = ModelKind::parse(value)?,
            "smote" => self.smote = flag()?,
            "smote_k" => self.smote_k = num!(),
            "filter_complete" => self.filter_complete = flag()?,
            "n_trees" => self.n_trees = num!(),
            "epochs" => self.epochs = num!(),
            "batch_size" => self.batch_size = num!(),
            "dropout" => self.dropout = num!(),
            "seed" => self.seed = Some(num!()),
            "train_frac" => self.train_frac = num!(),
            _ => bail!("unknown key '{key}'"),
        }
        Ok(())
    }

    pub fn parse(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, base)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str, base: Option<&Path>) -> Result<()> {
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("config line {}: expected key = value", k + 1))?;
            self.set(key.trim(), value.trim(), base)
                .with_context(|| format!("config line {}", k + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text, path.parent())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| -> Result<()> {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{name} must be positive, got {v}");
            }
            Ok(())
        };
        if !self.threshold_dbz.is_finite() {
            bail!("threshold_dbz must be finite");
        }
        if self.step_seconds <= 0 {
            bail!("step_seconds must be positive, got {}", self.step_seconds);
        }
        positive("area_limit", self.area_limit)?;
        positive("radius", self.radius)?;
        positive("alpha", self.alpha)?;
        positive("max_match_km", self.max_match_km)?;
        if self.iterations == 0 {
            bail!("iterations must be at least 1");
        }
        if self.smote_k == 0 {
            bail!("smote_k must be at least 1");
        }
        if self.n_trees == 0 {
            bail!("n_trees must be at least 1");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            bail!("epochs and batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            bail!("dropout must lie in [0, 1), got {}", self.dropout);
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            bail!("train_frac must lie in (0, 1), got {}", self.train_frac);
        }
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .context("a seed is required: set `seed` in the config file or pass --seed")
    }

    pub fn frames_dir(&self) -> PathBuf {
        self.frames_dir
            .clone()
            .unwrap_or_else(|| self.store_dir.join("scenario").join("frames"))
    }

    pub fn models_dir(&self) -> PathBuf {
        self.models_dir.clone().unwrap_or_else(|| self.store_dir.join("models"))
    }

    pub fn model_path(&self) -> PathBuf {
        self.models_dir().join(format!("model.{}", self.model.as_str()))
    }
}
