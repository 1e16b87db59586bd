//! Radar reflectivity frames and their on-disk format.
//!
//! A frame file is a three-part record:
//!
//! ```text
//! STORMGRID v1
//! <timestamp> <rows> <cols> <cell_size_km> <origin_lat> <origin_lon>
//! DATA
//! <rows * cols little-endian f32, row-major, north row first>
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::geo::Projection;

/// Reflectivity value marking cells without a measurement.
pub const NO_DATA: f32 = -327.68;

/// Default spacing between consecutive frames (5 minutes).
pub const DEFAULT_STEP_SECONDS: i64 = 300;

/// File extension used for frame files inside a sequence directory.
pub const FRAME_EXTENSION: &str = "grid";

const MAGIC: &str = "STORMGRID v1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("{path}: parse error at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("no frame files found in {0}")]
    EmptySequence(PathBuf),
    #[error("duplicate frame timestamp {0}")]
    DuplicateTimestamp(i64),
    #[error("gap in frame sequence between {after} and {before}; missing timestamps {missing:?}")]
    Gap {
        after: i64,
        before: i64,
        missing: Vec<i64>,
    },
    #[error("frame at {timestamp} is not aligned to the {step} s cadence (previous frame {previous})")]
    Misaligned {
        previous: i64,
        timestamp: i64,
        step: i64,
    },
}

/// Returns true when `v` is the no-data sentinel.
#[inline]
pub fn is_no_data(v: f32) -> bool {
    v.to_bits() == NO_DATA.to_bits()
}

/// One timestamped reflectivity composite on a regular km grid.
///
/// Row 0 is the northern edge. Grid coordinates in km have `x` growing east
/// from the western edge and `y` growing north from the southern edge, so the
/// center of cell `(row, col)` sits at
/// `((col + 0.5) * cell, (rows - row - 0.5) * cell)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectivityGrid {
    timestamp: i64,
    rows: usize,
    cols: usize,
    cell_size_km: f64,
    origin_lat: f64,
    origin_lon: f64,
    values: Vec<f32>,
}

impl ReflectivityGrid {
    pub fn new(
        timestamp: i64,
        rows: usize,
        cols: usize,
        cell_size_km: f64,
        origin_lat: f64,
        origin_lon: f64,
        values: Vec<f32>,
    ) -> Result<Self, GridError> {
        let grid = Self {
            timestamp,
            rows,
            cols,
            cell_size_km,
            origin_lat,
            origin_lon,
            values,
        };
        grid.validate()?;
        Ok(grid)
    }

    /// A grid filled with a single value.
    pub fn filled(
        timestamp: i64,
        rows: usize,
        cols: usize,
        cell_size_km: f64,
        value: f32,
    ) -> Result<Self, GridError> {
        Self::new(timestamp, rows, cols, cell_size_km, 0.0, 0.0, vec![value; rows * cols])
    }

    fn validate(&self) -> Result<(), GridError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(GridError::Invalid(format!(
                "rows and cols must be positive, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.values.len() != self.rows * self.cols {
            return Err(GridError::Invalid(format!(
                "expected {} values, got {}",
                self.rows * self.cols,
                self.values.len()
            )));
        }
        if !(self.cell_size_km > 0.0 && self.cell_size_km.is_finite()) {
            return Err(GridError::Invalid(format!(
                "cell_size_km must be positive, got {}",
                self.cell_size_km
            )));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(GridError::Invalid("origin must be finite".into()));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::Invalid(format!("non-finite value at index {i}")));
        }
        Ok(())
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn cell_size_km(&self) -> f64 {
        self.cell_size_km
    }

    pub fn origin_lat(&self) -> f64 {
        self.origin_lat
    }

    pub fn origin_lon(&self) -> f64 {
        self.origin_lon
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols + col]
    }

    /// Value with the sentinel mapped to `fill`.
    #[inline]
    pub fn value_or(&self, row: usize, col: usize, fill: f64) -> f64 {
        let v = self.get(row, col);
        if is_no_data(v) {
            fill
        } else {
            f64::from(v)
        }
    }

    pub fn width_km(&self) -> f64 {
        self.cols as f64 * self.cell_size_km
    }

    pub fn height_km(&self) -> f64 {
        self.rows as f64 * self.cell_size_km
    }

    /// Center of a cell in grid km coordinates.
    #[inline]
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size_km,
            (self.rows as f64 - row as f64 - 0.5) * self.cell_size_km,
        )
    }

    /// The cell containing a grid km point, if it lies on the grid.
    pub fn cell_at(&self, x_km: f64, y_km: f64) -> Option<(usize, usize)> {
        let col = (x_km / self.cell_size_km).floor();
        let row_from_south = (y_km / self.cell_size_km).floor();
        if col < 0.0 || row_from_south < 0.0 {
            return None;
        }
        let (col, row_from_south) = (col as usize, row_from_south as usize);
        if col >= self.cols || row_from_south >= self.rows {
            return None;
        }
        Some((self.rows - 1 - row_from_south, col))
    }

    pub fn projection(&self) -> Projection {
        Projection::new(self.origin_lat, self.origin_lon)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Encodes the frame in the file format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!(
            "{MAGIC}\n{} {} {} {} {} {}\nDATA\n",
            self.timestamp, self.rows, self.cols, self.cell_size_km, self.origin_lat, self.origin_lon
        );
        let mut out = Vec::with_capacity(header.len() + 4 * self.values.len());
        out.extend_from_slice(header.as_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a frame; `path` is only used for error context.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, GridError> {
        let parse_err = |location: String, message: String| GridError::Parse {
            path: path.to_path_buf(),
            location,
            message,
        };
        let mut lines = Vec::with_capacity(3);
        let mut offset = 0;
        while lines.len() < 3 {
            let rest = &bytes[offset..];
            let Some(end) = rest.iter().position(|&b| b == b'\n') else {
                return Err(parse_err(
                    format!("line {}", lines.len() + 1),
                    "unexpected end of header".into(),
                ));
            };
            let line = std::str::from_utf8(&rest[..end]).map_err(|_| {
                parse_err(format!("line {}", lines.len() + 1), "header is not UTF-8".into())
            })?;
            lines.push(line.trim_end_matches('\r'));
            offset += end + 1;
        }
        if lines[0] != MAGIC {
            return Err(parse_err(
                "line 1".into(),
                format!("expected '{MAGIC}', found '{}'", lines[0]),
            ));
        }
        let fields: Vec<&str> = lines[1].split_whitespace().collect();
        if fields.len() != 6 {
            return Err(parse_err(
                "line 2".into(),
                format!("expected 6 header fields, found {}", fields.len()),
            ));
        }
        fn field<T: std::str::FromStr>(
            s: &str,
            name: &str,
        ) -> Result<T, (String, String)> {
            s.parse::<T>()
                .map_err(|_| ("line 2".to_string(), format!("invalid {name} '{s}'")))
        }
        let header = (|| {
            Ok::<_, (String, String)>((
                field::<i64>(fields[0], "timestamp")?,
                field::<usize>(fields[1], "rows")?,
                field::<usize>(fields[2], "cols")?,
                field::<f64>(fields[3], "cell_size_km")?,
                field::<f64>(fields[4], "origin_lat")?,
                field::<f64>(fields[5], "origin_lon")?,
            ))
        })()
        .map_err(|(l, m)| parse_err(l, m))?;
        let (timestamp, rows, cols, cell_size_km, origin_lat, origin_lon) = header;
        if lines[2] != "DATA" {
            return Err(parse_err(
                "line 3".into(),
                format!("expected 'DATA', found '{}'", lines[2]),
            ));
        }
        let payload = &bytes[offset..];
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| parse_err("line 2".into(), "grid dimensions overflow".into()))?;
        if !payload.len().is_multiple_of(4) || payload.len() / 4 != expected {
            return Err(parse_err(
                format!("byte offset {offset}"),
                format!(
                    "expected {expected} values, found {} bytes ({} values)",
                    payload.len(),
                    payload.len() / 4
                ),
            ));
        }
        let mut values = Vec::with_capacity(expected);
        for (i, chunk) in payload.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            if !v.is_finite() {
                return Err(parse_err(
                    format!("byte offset {}", offset + 4 * i),
                    format!("non-finite value at index {i}"),
                ));
            }
            values.push(v);
        }
        Self::new(timestamp, rows, cols, cell_size_km, origin_lat, origin_lon, values).map_err(
            |e| parse_err("line 2".into(), e.to_string()),
        )
    }
}

pub fn load_frame(path: impl AsRef<Path>) -> Result<ReflectivityGrid, GridError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| GridError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ReflectivityGrid::from_bytes(&bytes, path)
}

pub fn write_frame(grid: &ReflectivityGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let path = path.as_ref();
    grid.validate()?;
    let io_err = |source| GridError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut file = fs::File::create(path).map_err(io_err)?;
    file.write_all(&grid.to_bytes()).map_err(io_err)?;
    Ok(())
}

/// Canonical file name for a frame inside a sequence directory.
pub fn frame_file_name(timestamp: i64) -> String {
    format!("frame_{timestamp:012}.{FRAME_EXTENSION}")
}

/// Time-ordered frames at a fixed cadence.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<ReflectivityGrid>,
    step_seconds: i64,
}

impl FrameSequence {
    /// Sorts the frames by timestamp and checks the cadence.
    pub fn new(mut frames: Vec<ReflectivityGrid>, step_seconds: i64) -> Result<Self, GridError> {
        if step_seconds <= 0 {
            return Err(GridError::Invalid(format!(
                "step_seconds must be positive, got {step_seconds}"
            )));
        }
        frames.sort_by_key(|f| f.timestamp);
        for pair in frames.windows(2) {
            let (a, b) = (pair[0].timestamp, pair[1].timestamp);
            if a == b {
                return Err(GridError::DuplicateTimestamp(a));
            }
            let diff = b - a;
            if diff == step_seconds {
                continue;
            }
            if diff % step_seconds == 0 {
                return Err(GridError::Gap {
                    after: a,
                    before: b,
                    missing: (1..diff / step_seconds).map(|k| a + k * step_seconds).collect(),
                });
            }
            return Err(GridError::Misaligned {
                previous: a,
                timestamp: b,
                step: step_seconds,
            });
        }
        Ok(Self {
            frames,
            step_seconds,
        })
    }

    pub fn frames(&self) -> &[ReflectivityGrid] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<ReflectivityGrid> {
        self.frames
    }

    pub fn step_seconds(&self) -> i64 {
        self.step_seconds
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Time covered from the first to the last frame.
    pub fn span_seconds(&self) -> i64 {
        match (self.frames.first(), self.frames.last()) {
            (Some(a), Some(b)) => b.timestamp - a.timestamp,
            _ => 0,
        }
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), GridError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| GridError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        for frame in &self.frames {
            write_frame(frame, dir.join(frame_file_name(frame.timestamp)))?;
        }
        Ok(())
    }
}

/// Loads every `*.grid` file in `dir` into a validated sequence.
pub fn load_sequence(dir: impl AsRef<Path>, step_seconds: i64) -> Result<FrameSequence, GridError> {
    let dir = dir.as_ref();
    let io_err = |source| GridError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let path = entry.map_err(io_err)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == FRAME_EXTENSION) {
            paths.push(path);
        }
    }
    if paths.is_empty() {
        return Err(GridError::EmptySequence(dir.to_path_buf()));
    }
    let frames = paths
        .iter()
        .map(load_frame)
        .collect::<Result<Vec<_>, _>>()?;
    FrameSequence::new(frames, step_seconds)
}
