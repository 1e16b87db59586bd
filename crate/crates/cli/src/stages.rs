//! The pipeline stages. Each reads its inputs from the store, writes its
//! outputs and manifest, and returns a one-line summary.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use log::info;
use stormcast_core::cells::{
    cells_from_records, cluster_storm_objects, extract_storm_objects, format_object_records,
    parse_object_records, StormCell,
};
use stormcast_core::dataset::{Dataset, Sample, CLASS_COUNT, FEATURE_COUNT};
use stormcast_core::eval::{split, ConfusionMatrix, MetricsReport};
use stormcast_core::features::{
    featurize as featurize_cell, filter_complete, label_cell, parse_observations, parse_strikes,
    parse_transformers, ObservationIndex, Strike, DEFAULT_LABEL_WINDOW_S, LIGHTNING_WINDOW_S,
};
use stormcast_core::forest::{fit_forest, ForestModel};
use stormcast_core::grid_io::{load_sequence, FrameSequence, ReflectivityGrid};
use stormcast_core::mlp::{history_csv, train_mlp, MlpModel, TrainConfig};
use stormcast_core::resample::smote;
use stormcast_core::synth::{
    generate_scenario, ScenarioConfig, FRAMES_DIR, OBSERVATIONS_FILE, STRIKES_FILE, TRANSFORMERS_FILE,
};
use stormcast_core::tracking::{
    format_forecasts, format_tracks, forecast_path, horn_schunck_flow, parse_tracks, FlowField, Track, Tracker,
};

use crate::config::{ModelKind, PipelineConfig};
use crate::report;
use crate::store::{StageRecord, Store};

pub const SCENARIO_DIR: &str = "scenario";
pub const DETECT_DIR: &str = "detect";
pub const TRACKS_FILE: &str = "track/tracks.txt";
pub const FORECASTS_FILE: &str = "track/forecasts.txt";
pub const FEATURES_FILE: &str = "featurize/features.csv";
pub const TRAIN_FILE: &str = "train/train.csv";
pub const VALIDATION_FILE: &str = "train/validation.csv";
pub const PROVENANCE_FILE: &str = "train/smote_provenance.txt";
pub const HISTORY_FILE: &str = "train/history.csv";
pub const METRICS_FILE: &str = "evaluate/metrics.txt";
pub const CONFUSION_FILE: &str = "evaluate/confusion.csv";
pub const PREDICTIONS_FILE: &str = "predict/predictions.csv";
pub const REPORT_DIR: &str = "report";

fn store(cfg: &PipelineConfig) -> Store {
    Store::new(&cfg.store_dir)
}

fn read(path: &Path, producer: &str) -> Result<String> {
    Store::require(path, producer)?;
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn objects_path(store: &Store, ts: i64) -> PathBuf {
    store.path(DETECT_DIR).join(format!("frame_{ts:012}.objects"))
}

fn load_frames(cfg: &PipelineConfig) -> Result<FrameSequence> {
    let dir = cfg.frames_dir();
    Store::require(&dir, "synth")?;
    load_sequence(&dir, cfg.step_seconds).with_context(|| format!("loading frames from {}", dir.display()))
}

fn load_cells(store: &Store, grid: &ReflectivityGrid) -> Result<Vec<StormCell>> {
    let path = objects_path(store, grid.timestamp());
    let records = parse_object_records(&read(&path, "detect")?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cells_from_records(&records, grid.timestamp(), grid.projection()))
}

fn load_dataset(path: &Path, producer: &str) -> Result<Dataset> {
    Store::require(path, producer)?;
    Dataset::load(path).with_context(|| format!("reading {}", path.display()))
}

pub fn synth(cfg: &PipelineConfig, scenario_path: Option<&Path>) -> Result<String> {
    let seed = cfg.seed()?;
    let path = scenario_path.map(Path::to_path_buf).or_else(|| cfg.scenario.clone());
    let mut scenario_cfg = match &path {
        Some(p) => {
            Store::require(p, "synth --scenario <file>")?;
            ScenarioConfig::load(p).with_context(|| format!("reading scenario {}", p.display()))?
        }
        None => ScenarioConfig::default(),
    };
    scenario_cfg.seed = seed;
    let scenario = generate_scenario(&scenario_cfg)?;
    let store = store(cfg);
    let out = store.path(SCENARIO_DIR);
    store.reset_dir(&out)?;
    let frames_dir = cfg.frames_dir();
    if frames_dir != out.join(FRAMES_DIR) {
        store.reset_dir(&frames_dir)?;
    }
    scenario.write_dir(&out, &scenario_cfg)?;
    if frames_dir != out.join(FRAMES_DIR) {
        fs::remove_dir_all(out.join(FRAMES_DIR))?;
        scenario.frames.write_dir(&frames_dir)?;
    }
    let mut rec = StageRecord::default();
    rec.param("seed", seed);
    if let Some(p) = &path {
        rec.input(p);
    }
    rec.output(&out);
    if !frames_dir.starts_with(&out) {
        rec.output(&frames_dir);
    }
    store.record("synth", &rec)?;
    Ok(format!(
        "synth: {} frames, {} strikes, {} transformers, {} outages, {} labelable cells",
        scenario.frames.len(),
        scenario.strikes.len(),
        scenario.transformers.transformers().len(),
        scenario.transformers.outages().len(),
        scenario.labeled_cells
    ))
}

pub fn detect(cfg: &PipelineConfig) -> Result<String> {
    let frames = load_frames(cfg)?;
    let store = store(cfg);
    let out = store.path(DETECT_DIR);
    store.reset_dir(&out)?;
    let (mut n_objects, mut n_cells) = (0, 0);
    for grid in frames.frames() {
        let objects = extract_storm_objects(grid, cfg.threshold_dbz);
        let clustering = cluster_storm_objects(&objects, cfg.area_limit, cfg.radius, grid.timestamp(), grid.projection());
        n_objects += objects.len();
        n_cells += clustering.cells.len();
        store.write(&objects_path(&store, grid.timestamp()), format_object_records(&objects, &clustering))?;
    }
    let mut rec = StageRecord::default();
    rec.param("threshold_dbz", cfg.threshold_dbz);
    rec.param("area_limit", cfg.area_limit);
    rec.param("radius", cfg.radius);
    rec.input(cfg.frames_dir());
    rec.output(&out);
    store.record("detect", &rec)?;
    Ok(format!("detect: {} frames, {n_objects} storm objects, {n_cells} cells", frames.len()))
}

pub fn track(cfg: &PipelineConfig) -> Result<String> {
    let frames = load_frames(cfg)?;
    let store = store(cfg);
    let mut tracker = Tracker::new(cfg.max_match_km);
    let mut last_flow: HashMap<i64, FlowField> = HashMap::new();
    let mut prev: Option<&ReflectivityGrid> = None;
    for grid in frames.frames() {
        let cells = load_cells(&store, grid)?;
        let flow = match prev {
            Some(p) => horn_schunck_flow(p, grid, cfg.alpha, cfg.iterations)?,
            None => FlowField::zeros(grid.rows(), grid.cols(), grid.cell_size_km()),
        };
        tracker.step(&cells, prev.map(|_| &flow));
        last_flow.insert(grid.timestamp(), flow);
        prev = Some(grid);
    }
    let tracks = tracker.into_tracks();
    let forecasts: Vec<_> = tracks
        .iter()
        .map(|t| forecast_path(t, &last_flow[&t.last().timestamp]))
        .collect();
    let tracks_path = store.path(TRACKS_FILE);
    let forecasts_path = store.path(FORECASTS_FILE);
    store.reset_dir(tracks_path.parent().expect("has parent"))?;
    store.write(&tracks_path, format_tracks(&tracks))?;
    store.write(&forecasts_path, format_forecasts(&forecasts))?;
    let mut rec = StageRecord::default();
    rec.param("alpha", cfg.alpha);
    rec.param("iterations", cfg.iterations);
    rec.param("max_match_km", cfg.max_match_km);
    rec.input(cfg.frames_dir());
    rec.input(store.path(DETECT_DIR));
    rec.output(&tracks_path);
    rec.output(&forecasts_path);
    store.record("track", &rec)?;
    Ok(format!("track: {} tracks, {} forecasts", tracks.len(), forecasts.len()))
}

/// The track as it stood when it reached `(timestamp, cell_id)`.
fn track_until(index: &HashMap<(i64, u32), (usize, usize)>, tracks: &[Track], ts: i64, cell: u32) -> Option<Track> {
    let &(t, k) = index.get(&(ts, cell))?;
    Some(Track {
        track_id: tracks[t].track_id,
        observations: tracks[t].observations[..=k].to_vec(),
    })
}

pub fn featurize(cfg: &PipelineConfig) -> Result<String> {
    let frames = load_frames(cfg)?;
    let store = store(cfg);
    let scenario = store.path(SCENARIO_DIR);
    let tracks_path = store.path(TRACKS_FILE);
    let tracks = parse_tracks(&read(&tracks_path, "track")?).map_err(|e| anyhow!(e))?;
    let strikes_path = scenario.join(STRIKES_FILE);
    let obs_path = scenario.join(OBSERVATIONS_FILE);
    let transformers_path = scenario.join(TRANSFORMERS_FILE);
    let mut strikes: Vec<Strike> = parse_strikes(&read(&strikes_path, "synth")?)?;
    strikes.sort_by_key(|s| s.timestamp);
    let observations = ObservationIndex::new(&parse_observations(&read(&obs_path, "synth")?)?);
    let transformers = parse_transformers(&read(&transformers_path, "synth")?)?;

    let mut index = HashMap::new();
    for (t, track) in tracks.iter().enumerate() {
        for (k, o) in track.observations.iter().enumerate() {
            index.insert((o.timestamp, o.cell_id), (t, k));
        }
    }
    let mut samples: Vec<Sample> = Vec::new();
    let mut unlabelable = 0;
    for grid in frames.frames() {
        let ts = grid.timestamp();
        let lo = strikes.partition_point(|s| s.timestamp < ts - LIGHTNING_WINDOW_S);
        let hi = strikes.partition_point(|s| s.timestamp <= ts);
        for cell in load_cells(&store, grid)? {
            let track = track_until(&index, &tracks, ts, cell.cell_id)
                .with_context(|| format!("cell {} at {ts} is missing from {}", cell.cell_id, tracks_path.display()))?;
            let Some(label) = label_cell(&cell, &transformers, ts, DEFAULT_LABEL_WINDOW_S) else {
                unlabelable += 1;
                continue;
            };
            samples.push(featurize_cell(&cell, &track, grid, &strikes[lo..hi], &observations).into_sample(label));
        }
    }
    let data = Dataset::new(samples);
    let out = store.path(FEATURES_FILE);
    store.reset_dir(out.parent().expect("has parent"))?;
    data.save(&out)?;
    let mut rec = StageRecord::default();
    for p in [cfg.frames_dir(), store.path(DETECT_DIR), tracks_path, strikes_path, obs_path, transformers_path] {
        rec.input(p);
    }
    rec.output(&out);
    store.record("featurize", &rec)?;
    let counts = data.class_counts();
    Ok(format!(
        "featurize: {} samples (classes {:?}), {unlabelable} cells without transformers skipped",
        data.len(),
        counts
    ))
}

pub fn train(cfg: &PipelineConfig) -> Result<String> {
    let seed = cfg.seed()?;
    let store = store(cfg);
    let features = store.path(FEATURES_FILE);
    let mut data = load_dataset(&features, "featurize")?;
    if cfg.filter_complete {
        data = Dataset::new(filter_complete(&data.samples));
    }
    let (train, validation) = split(&data, cfg.train_frac, seed)?;
    let train_dir = store.path("train");
    store.reset_dir(&train_dir)?;
    train.save(store.path(TRAIN_FILE))?;
    validation.save(store.path(VALIDATION_FILE))?;
    let fit_on = if cfg.smote {
        let out = smote(&train, cfg.smote_k, seed).context("oversampling the training split")?;
        store.write(&store.path(PROVENANCE_FILE), out.provenance_lines())?;
        out.data
    } else {
        train.clone()
    };
    let model_path = cfg.model_path();
    let detail = match cfg.model {
        ModelKind::Rfc => {
            let model = fit_forest(&fit_on, cfg.n_trees, seed)?;
            store.write(&model_path, model.to_bytes())?;
            format!("{} trees", model.n_trees())
        }
        ModelKind::Mlp => {
            let tc = TrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                dropout: cfg.dropout,
                seed,
                ..TrainConfig::default()
            };
            let (model, history) = train_mlp(&fit_on, Some(&validation), &tc)?;
            store.write(&model_path, model.to_bytes())?;
            store.write(&store.path(HISTORY_FILE), history_csv(&history))?;
            let last = history.last().expect("at least one epoch");
            format!("{} epochs, final loss {:.4}", history.len(), last.loss)
        }
    };
    let mut rec = StageRecord::default();
    rec.param("model", cfg.model.as_str());
    rec.param("seed", seed);
    rec.param("smote", cfg.smote);
    rec.param("filter_complete", cfg.filter_complete);
    rec.param("train_frac", cfg.train_frac);
    rec.input(&features);
    rec.output(&train_dir);
    rec.output(&model_path);
    store.record("train", &rec)?;
    Ok(format!(
        "train: {} on {} samples ({} after oversampling), {} held out; {detail}",
        cfg.model.as_str(),
        train.len(),
        fit_on.len(),
        validation.len()
    ))
}

enum Model {
    Forest(ForestModel),
    Mlp(MlpModel),
}

impl Model {
    fn load(cfg: &PipelineConfig) -> Result<Self> {
        let path = cfg.model_path();
        Store::require(&path, "train")?;
        let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        let ctx = || format!("loading {}", path.display());
        Ok(match cfg.model {
            ModelKind::Rfc => Self::Forest(ForestModel::read_from(bytes.as_slice()).with_context(ctx)?),
            ModelKind::Mlp => Self::Mlp(MlpModel::read_from(bytes.as_slice()).with_context(ctx)?),
        })
    }

    fn scores(&self, xs: &[[f64; FEATURE_COUNT]]) -> Result<Vec<[f64; CLASS_COUNT]>> {
        Ok(match self {
            Self::Forest(m) => m.predict_proba_batch(xs)?,
            Self::Mlp(m) => xs.iter().map(|x| m.predict_proba(x)).collect::<Result<_, _>>()?,
        })
    }
}

pub fn evaluate(cfg: &PipelineConfig) -> Result<String> {
    let store = store(cfg);
    let val_path = store.path(VALIDATION_FILE);
    let validation = load_dataset(&val_path, "train")?;
    let model = Model::load(cfg)?;
    let xs: Vec<_> = validation.samples.iter().map(|s| s.features).collect();
    let report = MetricsReport::from_scores(&validation.labels(), &model.scores(&xs)?)?;
    let metrics = store.path(METRICS_FILE);
    let confusion = store.path(CONFUSION_FILE);
    store.reset_dir(metrics.parent().expect("has parent"))?;
    store.write(&metrics, format!("model: {}\n{}", cfg.model.as_str(), report.to_text()))?;
    store.write(&confusion, report.confusion.to_csv())?;
    let mut rec = StageRecord::default();
    rec.input(&val_path);
    rec.input(cfg.model_path());
    rec.output(&metrics);
    rec.output(&confusion);
    store.record("evaluate", &rec)?;
    Ok(format!(
        "evaluate: {} samples, accuracy {:.4}, f1_micro {:.4}, auc {}",
        validation.len(),
        report.accuracy,
        report.f1_micro,
        report.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"))
    ))
}

/// Classifies a dataset file. Throughput goes to the summary only, so the
/// stored predictions stay reproducible.
pub fn predict(cfg: &PipelineConfig, input: Option<&Path>, output: Option<&Path>) -> Result<String> {
    let store = store(cfg);
    let input = input.map_or_else(|| store.path(FEATURES_FILE), Path::to_path_buf);
    let data = load_dataset(&input, "featurize")?;
    let model = Model::load(cfg)?;
    let xs: Vec<_> = data.samples.iter().map(|s| s.features).collect();
    let start = Instant::now();
    let scores = model.scores(&xs)?;
    let elapsed = start.elapsed().as_secs_f64();
    let mut text = String::from("index,predicted,p0,p1,p2,p3\n");
    for (i, p) in scores.iter().enumerate() {
        let class = stormcast_core::forest::argmax(p).value();
        text.push_str(&format!("{i},{class},{},{},{},{}\n", p[0], p[1], p[2], p[3]));
    }
    let out = output.map_or_else(|| store.path(PREDICTIONS_FILE), Path::to_path_buf);
    store.write(&out, text)?;
    let mut rec = StageRecord::default();
    rec.input(&input);
    rec.input(cfg.model_path());
    rec.output(&out);
    store.record("predict", &rec)?;
    let rate = if elapsed > 0.0 { data.len() as f64 / elapsed } else { f64::INFINITY };
    info!("predict: {} samples in {elapsed:.3} s", data.len());
    Ok(format!(
        "predict: classified {} samples in {elapsed:.3} s ({rate:.0} samples/s)",
        data.len()
    ))
}

pub fn report(cfg: &PipelineConfig) -> Result<String> {
    let store = store(cfg);
    let confusion_path = store.path(CONFUSION_FILE);
    let cm = ConfusionMatrix::from_csv(&read(&confusion_path, "evaluate")?)?;
    let dir = store.path(REPORT_DIR);
    store.reset_dir(&dir)?;
    let mut rec = StageRecord::default();
    rec.input(&confusion_path);
    report::confusion_png(&cm).save(dir.join("confusion.png"))?;
    store.write(&dir.join("confusion.txt"), report::confusion_text(&cm))?;
    let mut made = vec!["confusion.png", "confusion.txt"];
    let history_path = store.path(HISTORY_FILE);
    if history_path.exists() {
        let rows = report::parse_history(&fs::read_to_string(&history_path)?)?;
        report::history_png(&rows).save(dir.join("history.png"))?;
        rec.input(&history_path);
        made.push("history.png");
    }
    rec.output(&dir);
    store.record("report", &rec)?;
    Ok(format!("report: wrote {} to {}", made.join(", "), dir.display()))
}
