//! Per-cell feature vectors, ground-station joins and damage labels.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::cells::{DbzStats, StormCell};
use crate::dataset::{DamageClass, Sample, FEATURE_COUNT};
use crate::geo::{self, Point};
use crate::grid_io::ReflectivityGrid;
use crate::tracking::Track;

/// Trailing window for counting lightning strikes.
pub const LIGHTNING_WINDOW_S: i64 = 300;
/// Window after the frame time in which an outage counts toward the label.
pub const DEFAULT_LABEL_WINDOW_S: i64 = 300;

pub mod idx {
    pub const AREA: usize = 0;
    pub const AGE: usize = 1;
    pub const LIGHTNING: usize = 2;
    pub const MAX_DBZ: usize = 3;
    pub const MIN_DBZ: usize = 4;
    pub const MEAN_DBZ: usize = 5;
    pub const MEDIAN_DBZ: usize = 6;
    pub const STD_DBZ: usize = 7;
    pub const LAT: usize = 8;
    pub const LON: usize = 9;
    pub const TEMPERATURE: usize = 10;
    pub const PRESSURE: usize = 11;
    pub const WIND_SPEED: usize = 12;
    pub const WIND_DIR: usize = 13;
    pub const PRECIP: usize = 14;
    pub const SNOW_DEPTH: usize = 15;
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid record: {0}")]
    Invalid(String),
    #[error("{kind} line {line}: {message}")]
    Parse {
        kind: &'static str,
        line: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strike {
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundObservation {
    pub station_id: u32,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
    pub temperature_c: Option<f64>,
    pub pressure_hpa: Option<f64>,
    pub wind_speed_ms: Option<f64>,
    pub wind_dir_deg: Option<f64>,
    pub precip_mm: Option<f64>,
    pub snow_depth_cm: Option<f64>,
}

impl GroundObservation {
    fn fields(&self) -> [Option<f64>; 6] {
        [
            self.temperature_c,
            self.pressure_hpa,
            self.wind_speed_ms,
            self.wind_dir_deg,
            self.precip_mm,
            self.snow_depth_cm,
        ]
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if let Some(d) = self.wind_dir_deg {
            if !(0.0..360.0).contains(&d) {
                return Err(FeatureError::Invalid(format!(
                    "station {} wind direction {d} outside [0, 360)",
                    self.station_id
                )));
            }
        }
        if self.fields().iter().flatten().any(|v| !v.is_finite()) {
            return Err(FeatureError::Invalid(format!(
                "station {} has a non-finite value",
                self.station_id
            )));
        }
        Ok(())
    }
}

/// Observations grouped by station, each station's series sorted by time.
#[derive(Debug, Clone, Default)]
pub struct ObservationIndex {
    stations: Vec<(u32, f64, f64, Vec<GroundObservation>)>,
}

impl ObservationIndex {
    pub fn new(observations: &[GroundObservation]) -> Self {
        let mut by_station: HashMap<u32, Vec<GroundObservation>> = HashMap::new();
        for o in observations {
            by_station.entry(o.station_id).or_default().push(o.clone());
        }
        let mut stations: Vec<_> = by_station
            .into_iter()
            .map(|(id, mut obs)| {
                obs.sort_by_key(|o| o.timestamp);
                (id, obs[0].lat, obs[0].lon, obs)
            })
            .collect();
        stations.sort_by_key(|s| s.0);
        Self { stations }
    }

    /// Observation from the nearest station (great-circle, ties to the lower
    /// station id) closest in time to `ts` (ties to the earlier record).
    pub fn nearest(&self, lat: f64, lon: f64, ts: i64) -> Option<&GroundObservation> {
        let (_, _, _, series) = self
            .stations
            .iter()
            .map(|s| (geo::haversine_km(lat, lon, s.1, s.2), s))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1 .0.cmp(&b.1 .0)))?
            .1;
        series.iter().min_by_key(|o| ((o.timestamp - ts).abs(), o.timestamp))
    }
}

/// The sixteen model inputs for one cell at one time, zero-filled, with a
/// bit mask of the values that were absent.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; FEATURE_COUNT],
    pub missing_mask: u16,
}

impl FeatureVector {
    pub fn is_missing(&self, i: usize) -> bool {
        self.missing_mask & (1 << i) != 0
    }

    pub fn into_sample(self, label: DamageClass) -> Sample {
        Sample {
            features: self.values,
            mask: self.missing_mask,
            label,
        }
    }
}

/// Computes the feature vector of `cell` on its source frame `grid`.
pub fn featurize(
    cell: &StormCell,
    track: &Track,
    grid: &ReflectivityGrid,
    strikes: &[Strike],
    observations: &ObservationIndex,
) -> FeatureVector {
    let mut values = [0.0; FEATURE_COUNT];
    let mut mask = 0u16;

    values[idx::AREA] = cell.total_area_km2;
    values[idx::AGE] = track.age_seconds() as f64;

    let ts = cell.timestamp;
    let boxes: Vec<_> = cell.polygons.iter().map(|r| geo::bounds(r)).collect();
    let inside = |p: Point| {
        cell.polygons.iter().zip(&boxes).any(|(ring, &(x0, y0, x1, y1))| {
            p.0 >= x0 && p.0 <= x1 && p.1 >= y0 && p.1 <= y1 && geo::point_in_ring(p, ring)
        })
    };
    let count = strikes
        .iter()
        .filter(|s| s.timestamp >= ts - LIGHTNING_WINDOW_S && s.timestamp <= ts)
        .filter(|s| inside(cell.projection.to_km(s.lat, s.lon)))
        .count();
    if cell.total_area_km2 > 0.0 {
        values[idx::LIGHTNING] = count as f64 / cell.total_area_km2;
    }

    let stats = DbzStats::over_rings(grid, &cell.polygons).unwrap_or_default();
    values[idx::MAX_DBZ] = stats.max;
    values[idx::MIN_DBZ] = stats.min;
    values[idx::MEAN_DBZ] = stats.mean;
    values[idx::MEDIAN_DBZ] = stats.median;
    values[idx::STD_DBZ] = stats.std;

    let (lat, lon) = cell.centroid_latlon();
    values[idx::LAT] = lat;
    values[idx::LON] = lon;

    let ground = observations.nearest(lat, lon, ts).map(GroundObservation::fields);
    for k in 0..6 {
        let i = idx::TEMPERATURE + k;
        match ground.and_then(|g| g[k]).filter(|v| v.is_finite()) {
            Some(v) => values[i] = v,
            None => mask |= 1 << i,
        }
    }

    FeatureVector {
        values,
        missing_mask: mask,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transformer {
    pub id: u64,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outage {
    pub transformer_id: u64,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, Default)]
pub struct TransformerSet {
    transformers: Vec<Transformer>,
    outages: Vec<Outage>,
    by_id: HashMap<u64, Vec<(i64, i64)>>,
}

impl TransformerSet {
    pub fn new(transformers: Vec<Transformer>, outages: Vec<Outage>) -> Result<Self, FeatureError> {
        let mut by_id: HashMap<u64, Vec<(i64, i64)>> = HashMap::new();
        for t in &transformers {
            if by_id.insert(t.id, Vec::new()).is_some() {
                return Err(FeatureError::Invalid(format!("duplicate transformer id {}", t.id)));
            }
        }
        for o in &outages {
            if o.start > o.end {
                return Err(FeatureError::Invalid(format!(
                    "outage on {} ends before it starts",
                    o.transformer_id
                )));
            }
            by_id
                .get_mut(&o.transformer_id)
                .ok_or_else(|| {
                    FeatureError::Invalid(format!("outage on unknown transformer {}", o.transformer_id))
                })?
                .push((o.start, o.end));
        }
        Ok(Self {
            transformers,
            outages,
            by_id,
        })
    }

    pub fn transformers(&self) -> &[Transformer] {
        &self.transformers
    }

    pub fn outages(&self) -> &[Outage] {
        &self.outages
    }

    /// Whether any outage of the transformer overlaps `[from, to]`.
    pub fn is_out(&self, transformer_id: u64, from: i64, to: i64) -> bool {
        self.by_id
            .get(&transformer_id)
            .is_some_and(|v| v.iter().any(|&(s, e)| s <= to && e >= from))
    }

    /// Indices of transformers inside the cell's member polygons.
    pub fn under_cell(&self, cell: &StormCell) -> Vec<usize> {
        let boxes: Vec<_> = cell.polygons.iter().map(|r| geo::bounds(r)).collect();
        self.transformers
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                let p = cell.projection.to_km(t.lat, t.lon);
                cell.polygons.iter().zip(&boxes).any(|(ring, &(x0, y0, x1, y1))| {
                    p.0 >= x0 && p.0 <= x1 && p.1 >= y0 && p.1 <= y1 && geo::point_in_ring(p, ring)
                })
            })
            .map(|(i, _)| i)
            .collect()
    }
}

/// Damage class from the share of transformers under the cell with an
/// outage overlapping `[at, at + window_s]`. `None` when no transformer lies
/// under the cell, so the sample cannot be labeled.
pub fn label_cell(
    cell: &StormCell,
    transformers: &TransformerSet,
    at: i64,
    window_s: i64,
) -> Option<DamageClass> {
    let under = transformers.under_cell(cell);
    if under.is_empty() {
        return None;
    }
    let out = under
        .iter()
        .filter(|&&i| transformers.is_out(transformers.transformers[i].id, at, at + window_s))
        .count();
    Some(DamageClass::from_counts(out, under.len()))
}

/// Keeps the samples with no missing values, in order.
pub fn filter_complete(samples: &[Sample]) -> Vec<Sample> {
    samples.iter().filter(|s| s.is_complete()).cloned().collect()
}

// ---- line-delimited record files ----

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// `lat lon timestamp` per line.
pub fn format_strikes(strikes: &[Strike]) -> String {
    let mut out = String::new();
    for s in strikes {
        let _ = writeln!(out, "{} {} {}", s.lat, s.lon, s.timestamp);
    }
    out
}

/// `station_id lat lon timestamp temperature pressure wind_speed wind_dir
/// precip snow_depth` per line, `NA` for absent values.
pub fn format_observations(obs: &[GroundObservation]) -> String {
    let mut out = String::new();
    for o in obs {
        let _ = write!(out, "{} {} {} {}", o.station_id, o.lat, o.lon, o.timestamp);
        for v in o.fields() {
            let _ = write!(out, " {}", opt(v));
        }
        out.push('\n');
    }
    out
}

/// `T id lat lon` lines followed by `O transformer_id start end` lines.
pub fn format_transformers(set: &TransformerSet) -> String {
    let mut out = String::new();
    for t in &set.transformers {
        let _ = writeln!(out, "T {} {} {}", t.id, t.lat, t.lon);
    }
    for o in &set.outages {
        let _ = writeln!(out, "O {} {} {}", o.transformer_id, o.start, o.end);
    }
    out
}

fn fields(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> + '_ {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| (k + 1, l.split_whitespace().collect()))
}

fn num<T: std::str::FromStr>(kind: &'static str, line: usize, s: &str) -> Result<T, FeatureError> {
    s.parse().map_err(|_| FeatureError::Parse {
        kind,
        line,
        message: format!("bad value '{s}'"),
    })
}

pub fn parse_strikes(text: &str) -> Result<Vec<Strike>, FeatureError> {
    const K: &str = "strikes";
    fields(text)
        .map(|(line, f)| {
            if f.len() != 3 {
                return Err(FeatureError::Parse {
                    kind: K,
                    line,
                    message: "expected 3 fields".into(),
                });
            }
            Ok(Strike {
                lat: num(K, line, f[0])?,
                lon: num(K, line, f[1])?,
                timestamp: num(K, line, f[2])?,
            })
        })
        .collect()
}

pub fn parse_observations(text: &str) -> Result<Vec<GroundObservation>, FeatureError> {
    const K: &str = "observations";
    fields(text)
        .map(|(line, f)| {
            if f.len() != 10 {
                return Err(FeatureError::Parse {
                    kind: K,
                    line,
                    message: "expected 10 fields".into(),
                });
            }
            let o = |s: &str| -> Result<Option<f64>, FeatureError> {
                if s == "NA" {
                    Ok(None)
                } else {
                    num(K, line, s).map(Some)
                }
            };
            let obs = GroundObservation {
                station_id: num(K, line, f[0])?,
                lat: num(K, line, f[1])?,
                lon: num(K, line, f[2])?,
                timestamp: num(K, line, f[3])?,
                temperature_c: o(f[4])?,
                pressure_hpa: o(f[5])?,
                wind_speed_ms: o(f[6])?,
                wind_dir_deg: o(f[7])?,
                precip_mm: o(f[8])?,
                snow_depth_cm: o(f[9])?,
            };
            obs.validate().map_err(|e| FeatureError::Parse {
                kind: K,
                line,
                message: e.to_string(),
            })?;
            Ok(obs)
        })
        .collect()
}

pub fn parse_transformers(text: &str) -> Result<TransformerSet, FeatureError> {
    const K: &str = "transformers";
    let mut transformers = Vec::new();
    let mut outages = Vec::new();
    for (line, f) in fields(text) {
        match (f.first().copied(), f.len()) {
            (Some("T"), 4) => transformers.push(Transformer {
                id: num(K, line, f[1])?,
                lat: num(K, line, f[2])?,
                lon: num(K, line, f[3])?,
            }),
            (Some("O"), 4) => outages.push(Outage {
                transformer_id: num(K, line, f[1])?,
                start: num(K, line, f[2])?,
                end: num(K, line, f[3])?,
            }),
            _ => {
                return Err(FeatureError::Parse {
                    kind: K,
                    line,
                    message: "expected 'T id lat lon' or 'O id start end'".into(),
                })
            }
        }
    }
    TransformerSet::new(transformers, outages)
}
