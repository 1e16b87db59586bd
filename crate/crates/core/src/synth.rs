//! Synthetic scenarios: radar frames with drifting storms, lightning, ground
//! stations, transformers and outages, plus a direct labeled-feature
//! generator that skips the radar stages.
//!
//! A scenario config is a text file of `key = value` lines; `#` starts a
//! comment. Ranges are written `lo,hi`. Explicit storms use one
//! `storm = x,y,sigma_x,sigma_y,peak,vx,vy,start,lifetime` line each, with
//! positions in km, velocities in km per frame and times in frames. When
//! `damage_c` is `auto` the outage offset is fitted so the share of class 0
//! among labeled cells matches the first prior.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use thiserror::Error;

use crate::cells::{
    cluster_storm_objects, extract_storm_objects, DEFAULT_AREA_LIMIT_KM2, DEFAULT_RADIUS_KM,
    DEFAULT_THRESHOLD_DBZ,
};
use crate::dataset::{DamageClass, Dataset, Sample, CLASS_COUNT, FEATURE_COUNT};
use crate::features::{
    format_observations, format_strikes, format_transformers, GroundObservation, Outage, Strike,
    Transformer, TransformerSet, DEFAULT_LABEL_WINDOW_S,
};
use crate::geo::{Point, Projection};
use crate::grid_io::{FrameSequence, GridError, ReflectivityGrid};

/// Class counts behind the default priors.
pub const PAPER_CLASS_COUNTS: [u64; CLASS_COUNT] = [551_029, 4_919, 4_286, 3_337];

pub fn paper_priors() -> [f64; CLASS_COUNT] {
    let total: u64 = PAPER_CLASS_COUNTS.iter().sum();
    PAPER_CLASS_COUNTS.map(|c| c as f64 / total as f64)
}

/// Reflectivity a damage event needs under the transformer.
pub const DAMAGE_MIN_DBZ: f64 = 35.0;

const STREAM_STORMS: u64 = 1;
const STREAM_LIGHTNING: u64 = 2;
const STREAM_STATIONS: u64 = 3;
const STREAM_TRANSFORMERS: u64 = 4;
const STREAM_OUTAGES: u64 = 5;
const STREAM_NOISE: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// dB per neper halved: a Gaussian in linear reflectivity loses this many
/// dBZ per unit of squared normalized distance.
const DBZ_PER_HALF_NEPER: f64 = 5.0 / std::f64::consts::LN_10;

/// A drifting anisotropic Gaussian bump in linear reflectivity, so in dBZ
/// it falls off quadratically from the peak.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StormSpec {
    pub x: f64,
    pub y: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    /// Rotation of the footprint axes, radians.
    pub angle: f64,
    pub peak_dbz: f64,
    pub vx: f64,
    pub vy: f64,
    pub start: usize,
    pub lifetime: usize,
}

impl StormSpec {
    pub fn is_active(&self, frame: usize) -> bool {
        frame >= self.start && frame < self.start + self.lifetime
    }

    pub fn center(&self, frame: usize) -> Point {
        let dt = frame as f64 - self.start as f64;
        (self.x + self.vx * dt, self.y + self.vy * dt)
    }

    pub fn dbz_at(&self, frame: usize, p: Point) -> f64 {
        let (cx, cy) = self.center(frame);
        let (dx, dy) = (p.0 - cx, p.1 - cy);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        self.peak_dbz - DBZ_PER_HALF_NEPER * (u * u / (self.sigma_x * self.sigma_x) + v * v / (self.sigma_y * self.sigma_y))
    }

    /// Distance beyond which the storm is below 0 dBZ.
    fn reach_km(&self) -> f64 {
        (self.peak_dbz.max(0.0) / DBZ_PER_HALF_NEPER).sqrt() * self.sigma_x.max(self.sigma_y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    pub cell_size_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub start_timestamp: i64,
    pub step_seconds: i64,
    pub n_frames: usize,
    /// Randomly drawn storms, in addition to `storms`.
    pub storm_count: usize,
    pub storm_sigma_km: (f64, f64),
    pub storm_peak_dbz: (f64, f64),
    /// Share of random storms drawing their peak from `severe_peak_dbz`.
    pub severe_fraction: f64,
    pub severe_peak_dbz: (f64, f64),
    pub storm_speed_km: (f64, f64),
    pub storm_lifetime_frames: (usize, usize),
    pub storms: Vec<StormSpec>,
    pub noise_max_dbz: f64,
    /// Expected strikes per frame per dBZ of storm peak above 40.
    pub lightning_rate: f64,
    pub transformer_density_per_km2: f64,
    pub station_count: usize,
    pub station_missing_rate: f64,
    pub damage_a: f64,
    pub damage_b: f64,
    /// `None` means fit it against `priors[0]`.
    pub damage_c: Option<f64>,
    pub priors: [f64; CLASS_COUNT],
    /// Class overlap for the direct generator: 0 gives disjoint supports.
    pub overlap: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            rows: 128,
            cols: 128,
            cell_size_km: 1.0,
            origin_lat: 60.0,
            origin_lon: 24.0,
            start_timestamp: 1_500_000_000,
            step_seconds: 300,
            n_frames: 48,
            storm_count: 30,
            storm_sigma_km: (1.5, 3.0),
            storm_peak_dbz: (38.0, 46.0),
            severe_fraction: 0.02,
            severe_peak_dbz: (50.0, 65.0),
            storm_speed_km: (0.0, 3.0),
            storm_lifetime_frames: (6, 24),
            storms: Vec::new(),
            noise_max_dbz: 10.0,
            lightning_rate: 0.3,
            transformer_density_per_km2: 0.5,
            station_count: 20,
            station_missing_rate: 0.05,
            damage_a: 1.0,
            damage_b: 2.0,
            damage_c: None,
            priors: paper_priors(),
            overlap: 0.0,
        }
    }
}

fn parse_pair<T: std::str::FromStr>(v: &str) -> Option<(T, T)> {
    let (a, b) = v.split_once(',')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_list(v: &str) -> Option<Vec<f64>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn fmt_storm(s: &StormSpec) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        s.x, s.y, s.sigma_x, s.sigma_y, s.peak_dbz, s.vx, s.vy, s.start, s.lifetime
    )
}

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let mut cfg = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| SynthError::Parse { line: k + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key = value, got '{line}'")))?;
            let (key, value) = (key.trim(), value.trim());
            let invalid = || bad(format!("bad value for {key}: '{value}'"));
            macro_rules! num {
                () => {
                    value.parse().map_err(|_| invalid())?
                };
            }
            macro_rules! pair {
                () => {
                    parse_pair(value).ok_or_else(invalid)?
                };
            }
            match key {
                "seed" => cfg.seed = num!(),
                "rows" => cfg.rows = num!(),
                "cols" => cfg.cols = num!(),
                "cell_size_km" => cfg.cell_size_km = num!(),
                "origin_lat" => cfg.origin_lat = num!(),
                "origin_lon" => cfg.origin_lon = num!(),
                "start_timestamp" => cfg.start_timestamp = num!(),
                "step_seconds" => cfg.step_seconds = num!(),
                "n_frames" => cfg.n_frames = num!(),
                "storm_count" => cfg.storm_count = num!(),
                "storm_sigma_km" => cfg.storm_sigma_km = pair!(),
                "storm_peak_dbz" => cfg.storm_peak_dbz = pair!(),
                "severe_fraction" => cfg.severe_fraction = num!(),
                "severe_peak_dbz" => cfg.severe_peak_dbz = pair!(),
                "storm_speed_km" => cfg.storm_speed_km = pair!(),
                "storm_lifetime_frames" => cfg.storm_lifetime_frames = pair!(),
                "storm" => {
                    let v = parse_list(value).filter(|v| v.len() == 9).ok_or_else(invalid)?;
                    if v[7] < 0.0 || v[8] < 0.0 || v[7].fract() != 0.0 || v[8].fract() != 0.0 {
                        return Err(invalid());
                    }
                    cfg.storms.push(StormSpec {
                        x: v[0],
                        y: v[1],
                        sigma_x: v[2],
                        sigma_y: v[3],
                        angle: 0.0,
                        peak_dbz: v[4],
                        vx: v[5],
                        vy: v[6],
                        start: v[7] as usize,
                        lifetime: v[8] as usize,
                    });
                }
                "noise_max_dbz" => cfg.noise_max_dbz = num!(),
                "lightning_rate" => cfg.lightning_rate = num!(),
                "transformer_density_per_km2" => cfg.transformer_density_per_km2 = num!(),
                "station_count" => cfg.station_count = num!(),
                "station_missing_rate" => cfg.station_missing_rate = num!(),
                "damage_a" => cfg.damage_a = num!(),
                "damage_b" => cfg.damage_b = num!(),
                "damage_c" => {
                    cfg.damage_c = if value == "auto" { None } else { Some(num!()) };
                }
                "priors" => {
                    let v = parse_list(value).filter(|v| v.len() == CLASS_COUNT).ok_or_else(invalid)?;
                    cfg.priors.copy_from_slice(&v);
                }
                "overlap" => cfg.overlap = num!(),
                _ => return Err(bad(format!("unknown key '{key}'"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("rows", self.rows.to_string());
        kv("cols", self.cols.to_string());
        kv("cell_size_km", self.cell_size_km.to_string());
        kv("origin_lat", self.origin_lat.to_string());
        kv("origin_lon", self.origin_lon.to_string());
        kv("start_timestamp", self.start_timestamp.to_string());
        kv("step_seconds", self.step_seconds.to_string());
        kv("n_frames", self.n_frames.to_string());
        kv("storm_count", self.storm_count.to_string());
        kv("storm_sigma_km", format!("{},{}", self.storm_sigma_km.0, self.storm_sigma_km.1));
        kv("storm_peak_dbz", format!("{},{}", self.storm_peak_dbz.0, self.storm_peak_dbz.1));
        kv("severe_fraction", self.severe_fraction.to_string());
        kv("severe_peak_dbz", format!("{},{}", self.severe_peak_dbz.0, self.severe_peak_dbz.1));
        kv("storm_speed_km", format!("{},{}", self.storm_speed_km.0, self.storm_speed_km.1));
        kv(
            "storm_lifetime_frames",
            format!("{},{}", self.storm_lifetime_frames.0, self.storm_lifetime_frames.1),
        );
        for s in &self.storms {
            kv("storm", fmt_storm(s));
        }
        kv("noise_max_dbz", self.noise_max_dbz.to_string());
        kv("lightning_rate", self.lightning_rate.to_string());
        kv("transformer_density_per_km2", self.transformer_density_per_km2.to_string());
        kv("station_count", self.station_count.to_string());
        kv("station_missing_rate", self.station_missing_rate.to_string());
        kv("damage_a", self.damage_a.to_string());
        kv("damage_b", self.damage_b.to_string());
        kv("damage_c", self.damage_c.map_or("auto".to_string(), |c| c.to_string()));
        let p: Vec<String> = self.priors.iter().map(f64::to_string).collect();
        kv("priors", p.join(","));
        kv("overlap", self.overlap.to_string());
        out
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |m: String| Err(SynthError::Invalid(m));
        if self.rows == 0 || self.cols == 0 {
            return fail(format!("grid must be non-empty, got {}x{}", self.rows, self.cols));
        }
        if !(self.cell_size_km > 0.0 && self.cell_size_km.is_finite()) {
            return fail(format!("cell_size_km must be positive, got {}", self.cell_size_km));
        }
        if self.step_seconds <= 0 {
            return fail(format!("step_seconds must be positive, got {}", self.step_seconds));
        }
        if self.n_frames == 0 {
            return fail("n_frames must be at least 1".into());
        }
        let ordered = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ordered(self.storm_sigma_km) || self.storm_sigma_km.0 <= 0.0 {
            return fail("storm_sigma_km must be a positive lo,hi range".into());
        }
        if !ordered(self.storm_peak_dbz)
            || !ordered(self.severe_peak_dbz)
            || !ordered(self.storm_speed_km)
            || self.storm_speed_km.0 < 0.0
        {
            return fail("storm ranges must be ordered lo,hi".into());
        }
        let (l0, l1) = self.storm_lifetime_frames;
        if l0 == 0 || l0 > l1 {
            return fail("storm_lifetime_frames must be a positive lo,hi range".into());
        }
        if !(0.0..=1.0).contains(&self.severe_fraction) {
            return fail("severe_fraction must lie in [0, 1]".into());
        }
        for s in &self.storms {
            if !(s.sigma_x > 0.0 && s.sigma_y > 0.0) || s.lifetime == 0 {
                return fail(format!("storm {} needs positive sigmas and lifetime", fmt_storm(s)));
            }
        }
        for (name, v) in [
            ("noise_max_dbz", self.noise_max_dbz),
            ("lightning_rate", self.lightning_rate),
            ("transformer_density_per_km2", self.transformer_density_per_km2),
            ("damage_a", self.damage_a),
            ("damage_b", self.damage_b),
            ("overlap", self.overlap),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be a non-negative number, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.station_missing_rate) {
            return fail("station_missing_rate must lie in [0, 1]".into());
        }
        if self.priors.iter().any(|p| !(*p >= 0.0)) || (self.priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("priors must be non-negative and sum to 1, got {:?}", self.priors));
        }
        Ok(())
    }

    pub fn projection(&self) -> Projection {
        Projection::new(self.origin_lat, self.origin_lon)
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Explicit storms followed by `storm_count` random ones.
pub fn draw_storms(config: &ScenarioConfig) -> Vec<StormSpec> {
    let mut rng = config.rng(STREAM_STORMS);
    let width = config.cols as f64 * config.cell_size_km;
    let height = config.rows as f64 * config.cell_size_km;
    let mut storms = config.storms.clone();
    for _ in 0..config.storm_count {
        let severe = rng.random_bool(config.severe_fraction);
        let peak = uniform(&mut rng, if severe { config.severe_peak_dbz } else { config.storm_peak_dbz });
        let speed = uniform(&mut rng, config.storm_speed_km);
        let heading = rng.random_range(0.0..2.0 * PI);
        let (l0, l1) = config.storm_lifetime_frames;
        storms.push(StormSpec {
            x: rng.random_range(0.0..width),
            y: rng.random_range(0.0..height),
            sigma_x: uniform(&mut rng, config.storm_sigma_km),
            sigma_y: uniform(&mut rng, config.storm_sigma_km),
            angle: rng.random_range(0.0..PI),
            peak_dbz: peak,
            vx: speed * heading.cos(),
            vy: speed * heading.sin(),
            start: rng.random_range(0..config.n_frames),
            lifetime: rng.random_range(l0..=l1),
        });
    }
    storms
}

fn cell_center(config: &ScenarioConfig, row: usize, col: usize) -> Point {
    let c = config.cell_size_km;
    ((col as f64 + 0.5) * c, (config.rows as f64 - row as f64 - 0.5) * c)
}

fn cell_at(config: &ScenarioConfig, p: Point) -> Option<(usize, usize)> {
    let c = config.cell_size_km;
    if p.0 < 0.0 || p.1 < 0.0 {
        return None;
    }
    let col = (p.0 / c) as usize;
    let from_south = (p.1 / c) as usize;
    (col < config.cols && from_south < config.rows).then(|| (config.rows - 1 - from_south, col))
}

/// Renders frame `frame`: uniform background noise, storms combined by max.
pub fn render_frame(config: &ScenarioConfig, storms: &[StormSpec], frame: usize) -> Result<ReflectivityGrid, SynthError> {
    let mut rng = config.rng(STREAM_NOISE + frame as u64);
    let mut values: Vec<f64> = (0..config.rows * config.cols)
        .map(|_| {
            if config.noise_max_dbz > 0.0 {
                rng.random_range(0.0..config.noise_max_dbz)
            } else {
                0.0
            }
        })
        .collect();
    let c = config.cell_size_km;
    for s in storms.iter().filter(|s| s.is_active(frame)) {
        let (cx, cy) = s.center(frame);
        let reach = s.reach_km();
        let col_lo = ((cx - reach) / c).floor().max(0.0) as usize;
        let col_hi = (((cx + reach) / c).ceil().max(0.0) as usize).min(config.cols);
        // y grows northwards, rows southwards.
        let south = ((cy - reach) / c).floor().max(0.0) as usize;
        let north = (((cy + reach) / c).ceil().max(0.0) as usize).min(config.rows);
        if col_lo >= col_hi || south >= north {
            continue;
        }
        for from_south in south..north {
            let row = config.rows - 1 - from_south;
            for col in col_lo..col_hi {
                let v = s.dbz_at(frame, cell_center(config, row, col));
                let slot = &mut values[row * config.cols + col];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    let ts = config.start_timestamp + frame as i64 * config.step_seconds;
    Ok(ReflectivityGrid::new(
        ts,
        config.rows,
        config.cols,
        c,
        config.origin_lat,
        config.origin_lon,
        values.into_iter().map(|v| v as f32).collect(),
    )?)
}

/// Strikes per frame, each stamped within the frame's preceding step.
fn draw_lightning(config: &ScenarioConfig, storms: &[StormSpec]) -> Vec<Vec<Strike>> {
    let mut rng = config.rng(STREAM_LIGHTNING);
    let proj = config.projection();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    (0..config.n_frames)
        .map(|frame| {
            let ts = config.start_timestamp + frame as i64 * config.step_seconds;
            let mut strikes = Vec::new();
            for s in storms.iter().filter(|s| s.is_active(frame)) {
                let rate = config.lightning_rate * (s.peak_dbz - 40.0);
                if !(rate > 0.0) {
                    continue;
                }
                let n = Poisson::new(rate).map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
                let (cx, cy) = s.center(frame);
                let (sn, cs) = s.angle.sin_cos();
                for _ in 0..n {
                    let u = 0.5 * s.sigma_x * std.sample(&mut rng);
                    let v = 0.5 * s.sigma_y * std.sample(&mut rng);
                    let (x, y) = (cx + cs * u - sn * v, cy + sn * u + cs * v);
                    let (lat, lon) = proj.to_latlon(x, y);
                    let back = rng.random_range(0..config.step_seconds);
                    strikes.push(Strike {
                        lat,
                        lon,
                        timestamp: ts - back,
                    });
                }
            }
            strikes
        })
        .collect()
}

/// Strike density per km^2 over each cell's 3x3 neighbourhood.
fn lightning_density(config: &ScenarioConfig, strikes: &[Strike]) -> Vec<f64> {
    let proj = config.projection();
    let (rows, cols) = (config.rows, config.cols);
    let mut counts = vec![0.0; rows * cols];
    for s in strikes {
        if let Some((r, c)) = cell_at(config, proj.to_km(s.lat, s.lon)) {
            counts[r * cols + c] += 1.0;
        }
    }
    let area = config.cell_size_km * config.cell_size_km;
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (mut sum, mut n) = (0.0, 0.0);
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    sum += counts[rr * cols + cc];
                    n += 1.0;
                }
            }
            out[r * cols + c] = sum / (n * area);
        }
    }
    out
}

fn draw_transformers(config: &ScenarioConfig) -> Vec<Transformer> {
    let mut rng = config.rng(STREAM_TRANSFORMERS);
    let width = config.cols as f64 * config.cell_size_km;
    let height = config.rows as f64 * config.cell_size_km;
    let mean = config.transformer_density_per_km2 * width * height;
    let n = if mean > 0.0 {
        Poisson::new(mean).map(|p| p.sample(&mut rng) as u64).unwrap_or(0)
    } else {
        0
    };
    let proj = config.projection();
    (1..=n)
        .map(|id| {
            let (lat, lon) = proj.to_latlon(rng.random_range(0.0..width), rng.random_range(0.0..height));
            Transformer { id, lat, lon }
        })
        .collect()
}

fn draw_observations(config: &ScenarioConfig, frames: &[ReflectivityGrid]) -> Vec<GroundObservation> {
    let mut rng = config.rng(STREAM_STATIONS);
    let width = config.cols as f64 * config.cell_size_km;
    let height = config.rows as f64 * config.cell_size_km;
    let proj = config.projection();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let stations: Vec<(u32, Point, [bool; 6], f64)> = (0..config.station_count)
        .map(|i| {
            let p = (rng.random_range(0.0..width), rng.random_range(0.0..height));
            let capable: [bool; 6] = std::array::from_fn(|_| rng.random_bool(0.85));
            let climate = rng.random_range(-5.0..5.0);
            (i as u32 + 1, p, capable, climate)
        })
        .collect();
    let mut out = Vec::new();
    for grid in frames {
        for &(id, p, capable, climate) in &stations {
            let local = cell_at(config, p)
                .map(|(r, c)| f64::from(grid.get(r, c)).max(0.0))
                .unwrap_or(0.0);
            let storm = (local - 20.0).max(0.0);
            let mut n = || noise.sample(&mut rng);
            let values = [
                15.0 + climate - 0.2 * storm + n(),
                1010.0 - 0.3 * storm + 2.0 * n(),
                (4.0 + 0.3 * storm + 1.5 * n()).max(0.0),
                0.0,
                (0.2 * storm + 0.3 * n()).max(0.0),
                0.0,
            ];
            let dir = rng.random_range(0.0..360.0);
            let mut field = |k: usize, v: f64| {
                (capable[k] && !rng.random_bool(config.station_missing_rate)).then_some(v)
            };
            let (lat, lon) = proj.to_latlon(p.0, p.1);
            out.push(GroundObservation {
                station_id: id,
                lat,
                lon,
                timestamp: grid.timestamp(),
                temperature_c: field(0, values[0]),
                pressure_hpa: field(1, values[1]),
                wind_speed_ms: field(2, values[2]),
                wind_dir_deg: field(3, dir),
                precip_mm: field(4, values[4]),
                snow_depth_cm: field(5, values[5]),
            });
        }
    }
    out
}

/// A transformer under at least `DAMAGE_MIN_DBZ` in one frame, with the
/// uniform draws that decide whether and when it fails.
#[derive(Debug, Clone, Copy)]
struct DamageEvent {
    transformer: usize,
    timestamp: i64,
    dbz: f64,
    lightning: f64,
    u: f64,
    delay: i64,
    duration: i64,
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Outage probability for a transformer at `dbz` with local lightning
/// density `lightning` (strikes per km^2).
pub fn outage_probability(a: f64, b: f64, c: f64, dbz: f64, lightning: f64) -> f64 {
    logistic(a * (dbz - DAMAGE_MIN_DBZ) + b * lightning - c)
}

fn damage_events(
    config: &ScenarioConfig,
    frames: &[ReflectivityGrid],
    strikes: &[Vec<Strike>],
    transformers: &[Transformer],
) -> Vec<DamageEvent> {
    let proj = config.projection();
    let cells: Vec<Option<(usize, usize)>> = transformers
        .iter()
        .map(|t| cell_at(config, proj.to_km(t.lat, t.lon)))
        .collect();
    let mut rng = config.rng(STREAM_OUTAGES);
    let mut events = Vec::new();
    for (grid, frame_strikes) in frames.iter().zip(strikes) {
        let density = lightning_density(config, frame_strikes);
        for (k, cell) in cells.iter().enumerate() {
            let Some((r, c)) = *cell else { continue };
            let dbz = f64::from(grid.get(r, c));
            if dbz < DAMAGE_MIN_DBZ {
                continue;
            }
            events.push(DamageEvent {
                transformer: k,
                timestamp: grid.timestamp(),
                dbz,
                lightning: density[r * config.cols + c],
                u: rng.random(),
                delay: rng.random_range(0..300),
                duration: rng.random_range(300..=3600),
            });
        }
    }
    events
}

/// Outage intervals per transformer, overlapping intervals merged.
fn outage_intervals(events: &[DamageEvent], n: usize, a: f64, b: f64, c: f64) -> Vec<Vec<(i64, i64)>> {
    let mut per: Vec<Vec<(i64, i64)>> = vec![Vec::new(); n];
    for e in events {
        if e.u < outage_probability(a, b, c, e.dbz, e.lightning) {
            let start = e.timestamp + e.delay;
            per[e.transformer].push((start, start + e.duration));
        }
    }
    for v in per.iter_mut() {
        v.sort_unstable();
        let mut merged: Vec<(i64, i64)> = Vec::with_capacity(v.len());
        for &(s, e) in v.iter() {
            match merged.last_mut() {
                Some(last) if s <= last.1 => last.1 = last.1.max(e),
                _ => merged.push((s, e)),
            }
        }
        *v = merged;
    }
    per
}

/// Labelable detected cells: timestamp and the transformers under them.
fn labeled_cells(config: &ScenarioConfig, frames: &[ReflectivityGrid], transformers: &[Transformer]) -> Vec<(i64, Vec<usize>)> {
    let set = TransformerSet::new(transformers.to_vec(), Vec::new()).expect("unique ids");
    let proj = config.projection();
    frames
        .par_iter()
        .map(|grid| {
            let objects = extract_storm_objects(grid, DEFAULT_THRESHOLD_DBZ);
            let clustering =
                cluster_storm_objects(&objects, DEFAULT_AREA_LIMIT_KM2, DEFAULT_RADIUS_KM, grid.timestamp(), proj);
            clustering
                .cells
                .iter()
                .map(|cell| (grid.timestamp(), set.under_cell(cell)))
                .filter(|(_, under)| !under.is_empty())
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect()
}

fn class_shares(cells: &[(i64, Vec<usize>)], intervals: &[Vec<(i64, i64)>]) -> [f64; CLASS_COUNT] {
    let mut counts = [0usize; CLASS_COUNT];
    for (ts, under) in cells {
        let (from, to) = (*ts, ts + DEFAULT_LABEL_WINDOW_S);
        let out = under
            .iter()
            .filter(|&&k| intervals[k].iter().any(|&(s, e)| s <= to && e >= from))
            .count();
        counts[DamageClass::from_counts(out, under.len()).index()] += 1;
    }
    let n = cells.len().max(1) as f64;
    counts.map(|c| c as f64 / n)
}

/// Bisects the outage offset so the class-0 share reaches `target`. The
/// share only grows with the offset because the draws are fixed.
fn calibrate_offset(
    events: &[DamageEvent],
    cells: &[(i64, Vec<usize>)],
    n_transformers: usize,
    a: f64,
    b: f64,
    target: f64,
) -> f64 {
    let share0 = |c: f64| class_shares(cells, &outage_intervals(events, n_transformers, a, b, c))[0];
    let (mut lo, mut hi) = (-40.0, 80.0);
    if share0(hi) < target || share0(lo) >= target {
        warn!("class-0 target {target} not reachable; using the nearest bound");
        return if share0(lo) >= target { lo } else { hi };
    }
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if share0(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    // Of the two brackets, keep the one whose share is closer.
    if (share0(lo) - target).abs() < (share0(hi) - target).abs() {
        lo
    } else {
        hi
    }
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub frames: FrameSequence,
    pub strikes: Vec<Strike>,
    pub observations: Vec<GroundObservation>,
    pub transformers: TransformerSet,
    pub storms: Vec<StormSpec>,
    /// The outage offset used, fitted or configured.
    pub damage_c: f64,
    /// Class shares over labelable detected cells.
    pub class_shares: [f64; CLASS_COUNT],
    pub labeled_cells: usize,
}

pub const FRAMES_DIR: &str = "frames";
pub const STRIKES_FILE: &str = "strikes.txt";
pub const OBSERVATIONS_FILE: &str = "observations.txt";
pub const TRANSFORMERS_FILE: &str = "transformers.txt";
pub const SUMMARY_FILE: &str = "scenario.txt";

impl Scenario {
    /// Writes frames, record files and a summary under `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, config: &ScenarioConfig) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.frames.write_dir(dir.join(FRAMES_DIR))?;
        std::fs::write(dir.join(STRIKES_FILE), format_strikes(&self.strikes))?;
        std::fs::write(dir.join(OBSERVATIONS_FILE), format_observations(&self.observations))?;
        std::fs::write(dir.join(TRANSFORMERS_FILE), format_transformers(&self.transformers))?;
        let mut summary = config.to_text();
        let shares: Vec<String> = self.class_shares.iter().map(f64::to_string).collect();
        let _ = writeln!(summary, "# fitted damage_c = {}", self.damage_c);
        let _ = writeln!(summary, "# labeled cells = {}", self.labeled_cells);
        let _ = writeln!(summary, "# class shares = {}", shares.join(","));
        std::fs::write(dir.join(SUMMARY_FILE), summary)?;
        Ok(())
    }
}

pub fn generate_scenario(config: &ScenarioConfig) -> Result<Scenario, SynthError> {
    config.validate()?;
    let storms = draw_storms(config);
    let frames = (0..config.n_frames)
        .into_par_iter()
        .map(|f| render_frame(config, &storms, f))
        .collect::<Result<Vec<_>, _>>()?;
    let strikes_by_frame = draw_lightning(config, &storms);
    let transformers = draw_transformers(config);
    let observations = draw_observations(config, &frames);
    let events = damage_events(config, &frames, &strikes_by_frame, &transformers);
    let cells = labeled_cells(config, &frames, &transformers);
    let (a, b) = (config.damage_a, config.damage_b);
    let c = match config.damage_c {
        Some(c) => c,
        None if cells.is_empty() => {
            warn!("no labelable cells; outage offset left at 0");
            0.0
        }
        None => calibrate_offset(&events, &cells, transformers.len(), a, b, config.priors[0]),
    };
    let intervals = outage_intervals(&events, transformers.len(), a, b, c);
    let shares = class_shares(&cells, &intervals);
    info!(
        "scenario: {} frames, {} storms, {} transformers, {} labelable cells, c = {c:.4}",
        frames.len(),
        storms.len(),
        transformers.len(),
        cells.len()
    );
    let outages = intervals
        .iter()
        .enumerate()
        .flat_map(|(k, v)| {
            let id = transformers[k].id;
            v.iter().map(move |&(start, end)| Outage {
                transformer_id: id,
                start,
                end,
            })
        })
        .collect();
    Ok(Scenario {
        frames: FrameSequence::new(frames, config.step_seconds)?,
        strikes: strikes_by_frame.into_iter().flatten().collect(),
        observations,
        transformers: TransformerSet::new(transformers, outages).expect("generated ids are unique"),
        storms,
        damage_c: c,
        class_shares: shares,
        labeled_cells: cells.len(),
    })
}

/// Per-feature (offset, spacing between class centres) for the direct
/// generator, in the units of the real features.
const DIRECT_LAYOUT: [(f64, f64); FEATURE_COUNT] = [
    (30.0, 25.0),
    (600.0, 400.0),
    (0.0, 0.4),
    (42.0, 6.0),
    (35.0, 0.5),
    (38.0, 3.0),
    (37.5, 3.0),
    (2.0, 1.5),
    (60.0, 0.2),
    (24.0, 0.3),
    (15.0, -2.0),
    (1010.0, -3.0),
    (4.0, 3.0),
    (90.0, 60.0),
    (0.5, 2.0),
    (0.0, 0.1),
];

/// Labeled samples drawn straight from per-class boxes. Class `k` puts
/// feature `j` at `offset_j + spacing_j * (k + w * (U - 0.5))` with
/// `w = 0.9 + 2.1 * overlap`, so overlap 0 keeps classes disjoint in every
/// feature.
pub fn generate_dataset_direct(config: &ScenarioConfig, n: usize) -> Dataset {
    let mut rng = config.rng(STREAM_STORMS + 100);
    let weights = WeightedIndex::new(config.priors).expect("validated priors");
    let w = 0.9 + 2.1 * config.overlap;
    let samples = (0..n)
        .map(|_| {
            let k = weights.sample(&mut rng);
            let features: [f64; FEATURE_COUNT] = std::array::from_fn(|j| {
                let (offset, spacing) = DIRECT_LAYOUT[j];
                offset + spacing * (k as f64 + w * (rng.random::<f64>() - 0.5))
            });
            Sample::new(features, DamageClass::ALL[k])
        })
        .collect();
    Dataset::new(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            rows: 48,
            cols: 48,
            n_frames: 6,
            storm_count: 4,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn default_priors_are_normalized_paper_counts() {
        let p = paper_priors();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((p[0] - 0.978).abs() < 5e-4);
        assert!((p[3] - 0.0059).abs() < 5e-5);
        ScenarioConfig::default().validate().unwrap();
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = small();
        cfg.storms.push(StormSpec {
            x: 10.0,
            y: 12.5,
            sigma_x: 4.0,
            sigma_y: 3.0,
            angle: 0.0,
            peak_dbz: 50.0,
            vx: 1.0,
            vy: -0.5,
            start: 2,
            lifetime: 3,
        });
        cfg.damage_c = Some(4.5);
        assert_eq!(ScenarioConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_line() {
        let err = ScenarioConfig::parse("seed = 3\n# note\nrows = lots\n").unwrap_err();
        assert_eq!(err.to_string(), "line 3: bad value for rows: 'lots'");
        let err = ScenarioConfig::parse("colour = red\n").unwrap_err();
        assert!(err.to_string().contains("unknown key 'colour'"));
        let err = ScenarioConfig::parse("priors = 0.5,0.5,0.5,0\n").unwrap_err();
        assert!(matches!(err, SynthError::Invalid(_)));
        assert!(ScenarioConfig::parse("storm = 1,2,3\n").is_err());
    }

    #[test]
    fn zero_storms_stay_below_threshold() {
        let cfg = ScenarioConfig {
            storm_count: 0,
            ..small()
        };
        let s = generate_scenario(&cfg).unwrap();
        assert_eq!(s.frames.len(), 6);
        for g in s.frames.frames() {
            assert!(g.values().iter().all(|&v| (0.0..35.0).contains(&v)));
            assert!(extract_storm_objects(g, 35.0).is_empty());
        }
        assert!(s.strikes.is_empty());
        assert!(s.transformers.outages().is_empty());
    }

    #[test]
    fn stationary_storm_is_detected_every_frame() {
        let cfg = ScenarioConfig {
            storm_count: 0,
            n_frames: 8,
            storms: vec![StormSpec {
                x: 24.0,
                y: 24.0,
                sigma_x: 4.0,
                sigma_y: 4.0,
                angle: 0.0,
                peak_dbz: 50.0,
                vx: 0.0,
                vy: 0.0,
                start: 1,
                lifetime: 5,
            }],
            ..small()
        };
        let s = generate_scenario(&cfg).unwrap();
        for (f, g) in s.frames.frames().iter().enumerate() {
            let objects = extract_storm_objects(g, 35.0);
            let cells = cluster_storm_objects(&objects, 20.0, 2.0, g.timestamp(), g.projection()).cells;
            assert_eq!(!cells.is_empty(), (1..6).contains(&f), "frame {f}");
        }
    }

    #[test]
    fn scenario_is_deterministic_and_well_formed() {
        let cfg = small();
        let a = generate_scenario(&cfg).unwrap();
        let b = generate_scenario(&cfg).unwrap();
        for (x, y) in a.frames.frames().iter().zip(b.frames.frames()) {
            assert_eq!(x.to_bytes(), y.to_bytes());
        }
        assert_eq!(format_strikes(&a.strikes), format_strikes(&b.strikes));
        assert_eq!(format_observations(&a.observations), format_observations(&b.observations));
        assert_eq!(format_transformers(&a.transformers), format_transformers(&b.transformers));
        assert!(a.transformers.outages().iter().all(|o| o.start <= o.end));
        for o in &a.observations {
            o.validate().unwrap();
        }
        let other = generate_scenario(&ScenarioConfig { seed: 2, ..cfg }).unwrap();
        assert_ne!(a.frames.frames()[3].to_bytes(), other.frames.frames()[3].to_bytes());
    }

    #[test]
    fn outage_probability_rises_with_reflectivity_and_lightning() {
        let p = |dbz, l| outage_probability(0.4, 2.0, 5.0, dbz, l);
        assert!(p(40.0, 0.0) < p(50.0, 0.0));
        assert!(p(50.0, 0.0) < p(50.0, 1.0));
        assert!((outage_probability(0.4, 2.0, 0.0, 35.0, 0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn interval_merge() {
        let ev = |t, delay, duration| DamageEvent {
            transformer: 0,
            timestamp: t,
            dbz: 60.0,
            lightning: 0.0,
            u: 0.0,
            delay,
            duration,
        };
        let events = [ev(0, 10, 400), ev(300, 0, 400), ev(2000, 5, 300)];
        let iv = outage_intervals(&events, 1, 1.0, 0.0, 0.0);
        assert_eq!(iv[0], vec![(10, 700), (2005, 2305)]);
    }

    #[test]
    fn calibrated_class_zero_share_tracks_prior() {
        let cfg = ScenarioConfig {
            rows: 96,
            cols: 96,
            n_frames: 40,
            storm_count: 60,
            priors: [0.8, 0.1, 0.05, 0.05],
            ..ScenarioConfig::default()
        };
        let s = generate_scenario(&cfg).unwrap();
        assert!(s.labeled_cells > 200, "{} labeled", s.labeled_cells);
        assert!((s.class_shares[0] - 0.8).abs() < 0.02, "{:?}", s.class_shares);
    }

    #[test]
    fn direct_dataset_counts_and_separation() {
        let cfg = ScenarioConfig {
            priors: [0.25; 4],
            ..ScenarioConfig::default()
        };
        let d = generate_dataset_direct(&cfg, 1000);
        assert_eq!(d, generate_dataset_direct(&cfg, 1000));
        // 99.9% interval of Binomial(1000, 0.25): 250 +- 3.29 * 13.7.
        for c in d.class_counts() {
            assert!((205..=295).contains(&c), "{c}");
        }
        // Disjoint supports: class ranges on feature 0 never meet.
        let mut ranges = [(f64::MAX, f64::MIN); 4];
        for s in &d.samples {
            let r = &mut ranges[s.label.index()];
            r.0 = r.0.min(s.features[0]);
            r.1 = r.1.max(s.features[0]);
        }
        for k in 0..3 {
            assert!(ranges[k].1 < ranges[k + 1].0);
        }
    }
}
