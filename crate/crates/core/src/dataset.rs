//! Labeled sample collections and the dataset CSV format.
//!
//! The CSV has a header row, the sixteen feature columns, a `mask` column with
//! the missing-value bits as four hex digits (bit `i` is feature `i`), and a
//! `label` column holding the damage class.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const FEATURE_COUNT: usize = 16;
pub const CLASS_COUNT: usize = 4;

pub const FEATURE_NAMES: [&str; FEATURE_COUNT] = [
    "area_km2",
    "age_seconds",
    "lightning_density_per_km2",
    "max_dbz",
    "min_dbz",
    "mean_dbz",
    "median_dbz",
    "std_dbz",
    "lat",
    "lon",
    "temperature_c",
    "pressure_hpa",
    "wind_speed_ms",
    "wind_dir_deg",
    "precip_mm",
    "snow_depth_cm",
];

/// Damage class 0 (none) through 3 (most severe).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DamageClass(u8);

impl DamageClass {
    pub const ALL: [DamageClass; CLASS_COUNT] =
        [DamageClass(0), DamageClass(1), DamageClass(2), DamageClass(3)];

    pub fn new(value: u8) -> Option<Self> {
        (value < CLASS_COUNT as u8).then_some(Self(value))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Class of an outage share in `[0, 1]`: 0 for exactly zero, then the
    /// half-open bands (0, 0.1], (0.1, 0.5], (0.5, 1].
    pub fn from_share(share: f64) -> Self {
        if share <= 0.0 {
            Self(0)
        } else if share <= 0.10 {
            Self(1)
        } else if share <= 0.50 {
            Self(2)
        } else {
            Self(3)
        }
    }

    /// Exact version of [`DamageClass::from_share`] for `out / total`.
    pub fn from_counts(out: usize, total: usize) -> Self {
        debug_assert!(total > 0 && out <= total);
        if out == 0 {
            Self(0)
        } else if out * 10 <= total {
            Self(1)
        } else if out * 2 <= total {
            Self(2)
        } else {
            Self(3)
        }
    }
}

impl fmt::Display for DamageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: [f64; FEATURE_COUNT],
    /// Bit `i` set when feature `i` was absent before zero-fill.
    pub mask: u16,
    pub label: DamageClass,
}

impl Sample {
    pub fn new(features: [f64; FEATURE_COUNT], label: DamageClass) -> Self {
        Self {
            features,
            mask: 0,
            label,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.mask == 0
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("bad header: {0}")]
    Header(String),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> [usize; CLASS_COUNT] {
        let mut counts = [0; CLASS_COUNT];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<DamageClass> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DatasetError> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = FEATURE_NAMES.to_vec();
        header.extend(["mask", "label"]);
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec: Vec<String> = s.features.iter().map(|v| v.to_string()).collect();
            rec.push(format!("{:04x}", s.mask));
            rec.push(s.label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, DatasetError> {
        let mut r = csv::Reader::from_reader(reader);
        let header = r.headers()?.clone();
        let expected: Vec<&str> = FEATURE_NAMES.iter().copied().chain(["mask", "label"]).collect();
        if header.iter().collect::<Vec<_>>() != expected {
            return Err(DatasetError::Header(format!(
                "expected {} columns: {}",
                expected.len(),
                expected.join(",")
            )));
        }
        let mut samples = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec?;
            let row = k + 2;
            let bad = |message: String| DatasetError::Row { row, message };
            let mut features = [0.0; FEATURE_COUNT];
            for (i, f) in features.iter_mut().enumerate() {
                let v: f64 = rec[i]
                    .parse()
                    .map_err(|_| bad(format!("bad {} '{}'", FEATURE_NAMES[i], &rec[i])))?;
                if !v.is_finite() {
                    return Err(bad(format!("non-finite {}", FEATURE_NAMES[i])));
                }
                *f = v;
            }
            let mask = u16::from_str_radix(&rec[FEATURE_COUNT], 16)
                .map_err(|_| bad(format!("bad mask '{}'", &rec[FEATURE_COUNT])))?;
            let label = rec[FEATURE_COUNT + 1]
                .parse::<u8>()
                .ok()
                .and_then(DamageClass::new)
                .ok_or_else(|| bad(format!("bad label '{}'", &rec[FEATURE_COUNT + 1])))?;
            samples.push(Sample {
                features,
                mask,
                label,
            });
        }
        Ok(Self { samples })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(file))
    }
}
