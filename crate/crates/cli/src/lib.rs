//! The `stormcast` command line: one subcommand per pipeline stage over a
//! file-backed store.

pub mod config;
pub mod report;
pub mod stages;
pub mod store;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "stormcast", version, about = "Storm cell nowcasting and damage classification pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Settings that override the config file.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// `key = value` config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true)]
    pub frames_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub models_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub threshold_dbz: Option<f64>,
    #[arg(long, global = true)]
    pub area_limit: Option<f64>,
    #[arg(long, global = true)]
    pub radius: Option<f64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub iterations: Option<usize>,
    #[arg(long, global = true)]
    pub max_match_km: Option<f64>,
    /// rfc or mlp
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Oversample the training split with SMOTE (true/false)
    #[arg(long, global = true)]
    pub smote: Option<String>,
    /// Drop samples with missing features before splitting (true/false)
    #[arg(long, global = true)]
    pub filter_complete: Option<String>,
    #[arg(long, global = true)]
    pub train_frac: Option<f64>,
    #[arg(long, global = true)]
    pub trees: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario (frames, strikes, stations, outages)
    Synth {
        /// Scenario description; built-in defaults when omitted
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Contour and cluster every frame into storm cells
    Detect,
    /// Estimate flow, link cells into tracks and forecast them
    Track,
    /// Build labeled feature vectors for every cell
    Featurize,
    /// Split, optionally oversample, and fit the model
    Train,
    /// Score the held-out split
    Evaluate,
    /// Classify a feature file in batch
    Predict {
        /// Defaults to the featurized dataset
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to predict/predictions.csv in the store
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Render the confusion matrix and training history
    Report,
}

impl Overrides {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        let set = |cfg: &mut PipelineConfig, key: &str, v: Option<String>| match v {
            Some(v) => cfg.set(key, &v, None),
            None => Ok(()),
        };
        let s = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let n = |v: Option<f64>| v.map(|x| x.to_string());
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        set(&mut cfg, "store_dir", s(&self.store))?;
        set(&mut cfg, "frames_dir", s(&self.frames_dir))?;
        set(&mut cfg, "models_dir", s(&self.models_dir))?;
        set(&mut cfg, "seed", self.seed.map(|x| x.to_string()))?;
        set(&mut cfg, "threshold_dbz", n(self.threshold_dbz))?;
        set(&mut cfg, "area_limit", n(self.area_limit))?;
        set(&mut cfg, "radius", n(self.radius))?;
        set(&mut cfg, "alpha", n(self.alpha))?;
        set(&mut cfg, "iterations", u(self.iterations))?;
        set(&mut cfg, "max_match_km", n(self.max_match_km))?;
        set(&mut cfg, "model", self.model.clone())?;
        set(&mut cfg, "smote", self.smote.clone())?;
        set(&mut cfg, "filter_complete", self.filter_complete.clone())?;
        set(&mut cfg, "train_frac", n(self.train_frac))?;
        set(&mut cfg, "n_trees", u(self.trees))?;
        set(&mut cfg, "epochs", u(self.epochs))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn dispatch(cfg: &PipelineConfig, command: &Command) -> Result<String> {
    match command {
        Command::Synth { scenario } => stages::synth(cfg, scenario.as_deref()),
        Command::Detect => stages::detect(cfg),
        Command::Track => stages::track(cfg),
        Command::Featurize => stages::featurize(cfg),
        Command::Train => stages::train(cfg),
        Command::Evaluate => stages::evaluate(cfg),
        Command::Predict { input, output } => stages::predict(cfg, input.as_deref(), output.as_deref()),
        Command::Report => stages::report(cfg),
    }
}

/// Runs one invocation and returns the process exit status: 0 on success,
/// 2 on a usage error, 1 when the stage fails.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let start = Instant::now();
    let result = cli.overrides.resolve().and_then(|cfg| dispatch(&cfg, &cli.command));
    match result {
        Ok(summary) => {
            println!("{summary} [{:.2} s]", start.elapsed().as_secs_f64());
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}
