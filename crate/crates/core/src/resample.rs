//! SMOTE oversampling up to a fully balanced class distribution.

use std::fmt::Write as _;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DamageClass, Dataset, Sample, CLASS_COUNT, FEATURE_COUNT};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SmoteError {
    #[error("class {0} has {1} sample(s); at least 2 are needed to interpolate")]
    TooFewSamples(DamageClass, usize),
    #[error("k must be at least 1")]
    ZeroK,
}

/// Where a synthetic sample came from: indices into the input dataset and
/// the interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Provenance {
    pub class: DamageClass,
    pub base: usize,
    pub neighbor: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoteOutput {
    /// Original samples in input order, then synthetic samples by class.
    pub data: Dataset,
    /// One entry per synthetic sample, aligned with the tail of `data`.
    pub provenance: Vec<Provenance>,
}

impl SmoteOutput {
    /// `class i zi lambda` per synthetic sample.
    pub fn provenance_lines(&self) -> String {
        let mut out = String::new();
        for p in &self.provenance {
            let _ = writeln!(out, "{} {} {} {}", p.class, p.base, p.neighbor, p.lambda);
        }
        out
    }
}

fn dist2(a: &[f64; FEATURE_COUNT], b: &[f64; FEATURE_COUNT]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` nearest other members (positions into `members`), ties to the
/// lower position.
fn nearest(samples: &[Sample], members: &[usize], pos: usize, k: usize) -> Vec<usize> {
    let x = &samples[members[pos]].features;
    let mut d: Vec<(f64, usize)> = members
        .iter()
        .enumerate()
        .filter(|&(p, _)| p != pos)
        .map(|(p, &m)| (dist2(x, &samples[m].features), p))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, p)| p).collect()
}

/// `base + lambda * (neighbor - base)`, clamped to the segment per coordinate.
pub fn interpolate(
    base: &[f64; FEATURE_COUNT],
    neighbor: &[f64; FEATURE_COUNT],
    lambda: f64,
) -> [f64; FEATURE_COUNT] {
    let mut out = [0.0; FEATURE_COUNT];
    for j in 0..FEATURE_COUNT {
        let (a, b) = (base[j], neighbor[j]);
        out[j] = (a + lambda * (b - a)).clamp(a.min(b), a.max(b));
    }
    out
}

/// Oversamples every class below the majority count until all classes match
/// it. Absent classes are left absent.
pub fn smote(data: &Dataset, k: usize, seed: u64) -> Result<SmoteOutput, SmoteError> {
    if k == 0 {
        return Err(SmoteError::ZeroK);
    }
    let counts = data.class_counts();
    let target = counts.iter().copied().max().unwrap_or(0);
    let mut members: [Vec<usize>; CLASS_COUNT] = Default::default();
    for (i, s) in data.samples.iter().enumerate() {
        members[s.label.index()].push(i);
    }
    for class in DamageClass::ALL {
        let n = counts[class.index()];
        if n > 0 && n < target && n < 2 {
            return Err(SmoteError::TooFewSamples(class, n));
        }
    }

    let mut samples = data.samples.clone();
    let mut provenance = Vec::new();
    for class in DamageClass::ALL {
        let m = &members[class.index()];
        let deficit = target - m.len();
        if m.is_empty() {
            if target > 0 {
                warn!("class {class} is absent and cannot be oversampled");
            }
            continue;
        }
        if deficit == 0 {
            continue;
        }
        let k_eff = k.min(m.len() - 1);
        if k_eff < k {
            warn!("class {class}: k clamped from {k} to {k_eff}");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class.index() as u64);
        let mut neighbors: Vec<Option<Vec<usize>>> = vec![None; m.len()];
        for _ in 0..deficit {
            let pos = rng.random_range(0..m.len());
            let nn = neighbors[pos].get_or_insert_with(|| nearest(&data.samples, m, pos, k_eff));
            let pick = nn[rng.random_range(0..nn.len())];
            let lambda: f64 = rng.random();
            let (base, neighbor) = (&data.samples[m[pos]], &data.samples[m[pick]]);
            samples.push(Sample {
                features: interpolate(&base.features, &neighbor.features, lambda),
                mask: base.mask | neighbor.mask,
                label: class,
            });
            provenance.push(Provenance {
                class,
                base: m[pos],
                neighbor: m[pick],
                lambda,
            });
        }
    }
    Ok(SmoteOutput {
        data: Dataset::new(samples),
        provenance,
    })
}
