//! Dense motion estimation, cell tracking and path forecasts.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::cells::StormCell;
use crate::geo::Point;
use crate::grid_io::ReflectivityGrid;

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_ITERATIONS: usize = 100;
pub const DEFAULT_MAX_MATCH_KM: f64 = 10.0;
/// Forecast positions per path: +5 min through +120 min.
pub const FORECAST_STEPS: usize = 24;
pub const FORECAST_STEP_MINUTES: i64 = 5;

#[derive(Debug, Error, PartialEq)]
pub enum TrackingError {
    #[error("frame shapes differ: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("invalid flow parameters: {0}")]
    Parameters(String),
}

/// Motion between two frames in grid cells per frame interval.
/// `u` points east (+column), `v` points north (-row).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub rows: usize,
    pub cols: usize,
    pub cell_size_km: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(rows: usize, cols: usize, cell_size_km: f64) -> Self {
        Self {
            rows,
            cols,
            cell_size_km,
            u: vec![0.0; rows * cols],
            v: vec![0.0; rows * cols],
        }
    }

    /// Builds a field by evaluating `f(x_km, y_km) -> (u, v)` at cell centers.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        cell_size_km: f64,
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> Self {
        let mut field = Self::zeros(rows, cols, cell_size_km);
        for r in 0..rows {
            for c in 0..cols {
                let x = (c as f64 + 0.5) * cell_size_km;
                let y = (rows as f64 - r as f64 - 0.5) * cell_size_km;
                let (u, v) = f(x, y);
                field.u[r * cols + c] = u;
                field.v[r * cols + c] = v;
            }
        }
        field
    }

    /// Bilinear sample at a grid km point, clamped to the outermost centers.
    /// Returns motion in cells per frame.
    pub fn sample(&self, p: Point) -> (f64, f64) {
        let fc = (p.0 / self.cell_size_km - 0.5).clamp(0.0, (self.cols - 1) as f64);
        let fr = (self.rows as f64 - 0.5 - p.1 / self.cell_size_km).clamp(0.0, (self.rows - 1) as f64);
        let (c0, r0) = (fc.floor() as usize, fr.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(self.cols - 1), (r0 + 1).min(self.rows - 1));
        let (tc, tr) = (fc - c0 as f64, fr - r0 as f64);
        let lerp = |a: &[f64]| {
            let top = a[r0 * self.cols + c0] * (1.0 - tc) + a[r0 * self.cols + c1] * tc;
            let bot = a[r1 * self.cols + c0] * (1.0 - tc) + a[r1 * self.cols + c1] * tc;
            top * (1.0 - tr) + bot * tr
        };
        (lerp(&self.u), lerp(&self.v))
    }

    /// Displacement in km over one frame interval at `p`.
    pub fn displacement_km(&self, p: Point) -> Point {
        let (u, v) = self.sample(p);
        (u * self.cell_size_km, v * self.cell_size_km)
    }
}

/// Horn-Schunck optical flow with a fixed number of Jacobi iterations.
///
/// Brightness derivatives use the averaged first differences over the
/// 2x2x2 cube spanning both frames; the flow average uses the 1/6 (edge) and
/// 1/12 (corner) weights. Borders replicate the outermost cells and no-data
/// cells count as 0 dBZ.
pub fn horn_schunck_flow(
    prev: &ReflectivityGrid,
    next: &ReflectivityGrid,
    alpha: f64,
    iterations: usize,
) -> Result<FlowField, TrackingError> {
    if !prev.same_shape(next) {
        return Err(TrackingError::ShapeMismatch(
            prev.rows(),
            prev.cols(),
            next.rows(),
            next.cols(),
        ));
    }
    if !(alpha > 0.0 && alpha.is_finite()) || iterations == 0 {
        return Err(TrackingError::Parameters(format!(
            "alpha {alpha} must be positive and iterations {iterations} at least 1"
        )));
    }
    let (rows, cols) = (prev.rows(), prev.cols());
    let n = rows * cols;
    let e0: Vec<f64> = (0..n).map(|i| prev.value_or(i / cols, i % cols, 0.0)).collect();
    let e1: Vec<f64> = (0..n).map(|i| next.value_or(i / cols, i % cols, 0.0)).collect();
    let at = |e: &[f64], r: usize, c: usize| e[r.min(rows - 1) * cols + c.min(cols - 1)];

    let mut ex = vec![0.0; n];
    let mut ey = vec![0.0; n];
    let mut et = vec![0.0; n];
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let mut dx = 0.0;
            let mut dy = 0.0;
            for e in [&e0, &e1] {
                dx += at(e, r, c + 1) - at(e, r, c) + at(e, r + 1, c + 1) - at(e, r + 1, c);
                dy += at(e, r + 1, c) - at(e, r, c) + at(e, r + 1, c + 1) - at(e, r, c + 1);
            }
            let mut dt = 0.0;
            for (rr, cc) in [(r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)] {
                dt += at(&e1, rr, cc) - at(&e0, rr, cc);
            }
            ex[i] = dx / 4.0;
            ey[i] = dy / 4.0;
            et[i] = dt / 4.0;
        }
    }

    // Row-direction flow (positive = south) during iteration.
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut u_next = vec![0.0; n];
    let mut v_next = vec![0.0; n];
    let a2 = alpha * alpha;
    let clamp = |r: isize, c: isize| -> usize {
        let r = r.clamp(0, rows as isize - 1) as usize;
        let c = c.clamp(0, cols as isize - 1) as usize;
        r * cols + c
    };
    for _ in 0..iterations {
        u_next
            .par_chunks_mut(cols)
            .zip(v_next.par_chunks_mut(cols))
            .enumerate()
            .for_each(|(r, (urow, vrow))| {
                let r = r as isize;
                for c in 0..cols as isize {
                    let mut ub = 0.0;
                    let mut vb = 0.0;
                    for (dr, dc) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                        let j = clamp(r + dr, c + dc);
                        ub += u[j] / 6.0;
                        vb += v[j] / 6.0;
                    }
                    for (dr, dc) in [(-1, -1), (-1, 1), (1, -1), (1, 1)] {
                        let j = clamp(r + dr, c + dc);
                        ub += u[j] / 12.0;
                        vb += v[j] / 12.0;
                    }
                    let i = r as usize * cols + c as usize;
                    let num = ex[i] * ub + ey[i] * vb + et[i];
                    let den = a2 + ex[i] * ex[i] + ey[i] * ey[i];
                    urow[c as usize] = ub - ex[i] * num / den;
                    vrow[c as usize] = vb - ey[i] * num / den;
                }
            });
        std::mem::swap(&mut u, &mut u_next);
        std::mem::swap(&mut v, &mut v_next);
    }
    for x in v.iter_mut() {
        *x = -*x;
    }
    Ok(FlowField {
        rows,
        cols,
        cell_size_km: prev.cell_size_km(),
        u,
        v,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub timestamp: i64,
    pub cell_id: u32,
    pub centroid: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub track_id: u64,
    pub observations: Vec<Observation>,
}

impl Track {
    pub fn new(track_id: u64, first: Observation) -> Self {
        Self {
            track_id,
            observations: vec![first],
        }
    }

    pub fn last(&self) -> &Observation {
        self.observations.last().expect("track has observations")
    }

    pub fn first(&self) -> &Observation {
        &self.observations[0]
    }

    pub fn age_seconds(&self) -> i64 {
        self.last().timestamp - self.first().timestamp
    }
}

/// Extends prior tracks with this frame's cells.
///
/// Each prior track's last centroid is advected by `flow`; (track, cell)
/// pairs within `max_match_km` are matched greedily by ascending distance.
/// Unmatched cells open new tracks with ids taken from `next_track_id`.
/// Unmatched prior tracks are not returned.
pub fn associate_tracks(
    prev_tracks: &[Track],
    cells: &[StormCell],
    flow: Option<&FlowField>,
    max_match_km: f64,
    next_track_id: &mut u64,
) -> Vec<Track> {
    let predicted: Vec<Point> = prev_tracks
        .iter()
        .map(|t| {
            let p = t.last().centroid;
            match flow {
                Some(f) => {
                    let d = f.displacement_km(p);
                    (p.0 + d.0, p.1 + d.1)
                }
                None => p,
            }
        })
        .collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (ti, p) in predicted.iter().enumerate() {
        for (ci, cell) in cells.iter().enumerate() {
            let d = ((p.0 - cell.centroid.0).powi(2) + (p.1 - cell.centroid.1).powi(2)).sqrt();
            if d <= max_match_km {
                pairs.push((d, ti, ci));
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(prev_tracks[a.1].track_id.cmp(&prev_tracks[b.1].track_id))
            .then(cells[a.2].cell_id.cmp(&cells[b.2].cell_id))
    });

    let mut track_match: Vec<Option<usize>> = vec![None; prev_tracks.len()];
    let mut cell_taken = vec![false; cells.len()];
    for (_, ti, ci) in pairs {
        if track_match[ti].is_none() && !cell_taken[ci] {
            track_match[ti] = Some(ci);
            cell_taken[ci] = true;
        }
    }

    let observe = |c: &StormCell| Observation {
        timestamp: c.timestamp,
        cell_id: c.cell_id,
        centroid: c.centroid,
    };
    let mut out = Vec::with_capacity(cells.len());
    for (t, m) in prev_tracks.iter().zip(&track_match) {
        if let Some(ci) = m {
            let mut t = t.clone();
            t.observations.push(observe(&cells[*ci]));
            out.push(t);
        }
    }
    for (ci, cell) in cells.iter().enumerate() {
        if !cell_taken[ci] {
            out.push(Track::new(*next_track_id, observe(cell)));
            *next_track_id += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForecastPath {
    pub track_id: u64,
    pub start_timestamp: i64,
    pub start: Point,
    /// Positions at +5, +10, ..., +120 minutes.
    pub positions: Vec<Point>,
}

/// Repeatedly advects the track's last centroid through a frozen flow field,
/// clamping each position to the grid extent.
pub fn forecast_path(track: &Track, flow: &FlowField) -> ForecastPath {
    let width = flow.cols as f64 * flow.cell_size_km;
    let height = flow.rows as f64 * flow.cell_size_km;
    let last = track.last();
    let mut p = last.centroid;
    let mut positions = Vec::with_capacity(FORECAST_STEPS);
    for _ in 0..FORECAST_STEPS {
        let d = flow.displacement_km(p);
        p = ((p.0 + d.0).clamp(0.0, width), (p.1 + d.1).clamp(0.0, height));
        positions.push(p);
    }
    ForecastPath {
        track_id: track.track_id,
        start_timestamp: last.timestamp,
        start: last.centroid,
        positions,
    }
}

/// Follows tracks through a sequence of per-frame cells.
#[derive(Debug, Default)]
pub struct Tracker {
    pub max_match_km: f64,
    active: Vec<Track>,
    finished: Vec<Track>,
    next_id: u64,
}

impl Tracker {
    pub fn new(max_match_km: f64) -> Self {
        Self {
            max_match_km,
            ..Default::default()
        }
    }

    /// Feeds one frame; `flow` is the motion from the previous frame.
    pub fn step(&mut self, cells: &[StormCell], flow: Option<&FlowField>) {
        let next = associate_tracks(&self.active, cells, flow, self.max_match_km, &mut self.next_id);
        let continued: std::collections::HashSet<u64> = next.iter().map(|t| t.track_id).collect();
        for t in self.active.drain(..) {
            if !continued.contains(&t.track_id) {
                self.finished.push(t);
            }
        }
        self.active = next;
    }

    pub fn active(&self) -> &[Track] {
        &self.active
    }

    /// All tracks, ordered by id.
    pub fn into_tracks(self) -> Vec<Track> {
        let mut all = self.finished;
        all.extend(self.active);
        all.sort_by_key(|t| t.track_id);
        all
    }
}

/// `track_id timestamp cell_id x y age_seconds`, one line per observation.
/// Age is measured from the track's first observation.
pub fn format_tracks(tracks: &[Track]) -> String {
    let mut out = String::new();
    for t in tracks {
        let t0 = t.first().timestamp;
        for o in &t.observations {
            let _ = writeln!(
                out,
                "{} {} {} {:.6} {:.6} {}",
                t.track_id,
                o.timestamp,
                o.cell_id,
                o.centroid.0,
                o.centroid.1,
                o.timestamp - t0
            );
        }
    }
    out
}

pub fn parse_tracks(text: &str) -> Result<Vec<Track>, String> {
    let mut tracks: Vec<Track> = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || format!("tracks line {}: malformed '{line}'", k + 1);
        if f.len() != 6 {
            return Err(bad());
        }
        let id: u64 = f[0].parse().map_err(|_| bad())?;
        let obs = Observation {
            timestamp: f[1].parse().map_err(|_| bad())?,
            cell_id: f[2].parse().map_err(|_| bad())?,
            centroid: (f[3].parse().map_err(|_| bad())?, f[4].parse().map_err(|_| bad())?),
        };
        match tracks.last_mut() {
            Some(t) if t.track_id == id => {
                if obs.timestamp <= t.last().timestamp {
                    return Err(format!("tracks line {}: timestamps not increasing", k + 1));
                }
                t.observations.push(obs);
            }
            _ => tracks.push(Track::new(id, obs)),
        }
    }
    Ok(tracks)
}

/// `track_id +minutes x y`, one line per forecast position.
pub fn format_forecasts(paths: &[ForecastPath]) -> String {
    let mut out = String::new();
    for p in paths {
        for (k, (x, y)) in p.positions.iter().enumerate() {
            let _ = writeln!(
                out,
                "{} +{} {x:.6} {y:.6}",
                p.track_id,
                (k as i64 + 1) * FORECAST_STEP_MINUTES
            );
        }
    }
    out
}
