//! Train/validation split and classification metrics.

use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DamageClass, Dataset, CLASS_COUNT};

pub const DEFAULT_TRAIN_FRAC: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("cannot split {0} sample(s); need at least 2")]
    TooFewSamples(usize),
    #[error("train fraction {0} is outside (0, 1)")]
    BadFraction(f64),
    #[error("{truth} true labels but {pred} predictions")]
    LengthMismatch { truth: usize, pred: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("score for sample {0} is not finite")]
    NonFiniteScore(usize),
    #[error("no class has both positive and negative samples")]
    NoScorableClass,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Shuffles with `seed` and puts the first `floor(n * train_frac)` samples
/// into the training set.
pub fn split(data: &Dataset, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset), EvalError> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(EvalError::BadFraction(train_frac));
    }
    let n = data.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (n as f64 * train_frac).floor() as usize;
    let pick = |idx: &[usize]| Dataset::new(idx.iter().map(|&i| data.samples[i].clone()).collect());
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; CLASS_COUNT]; CLASS_COUNT],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..CLASS_COUNT).map(|c| self.counts[c][c]).sum()
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }

    pub fn accuracy(&self) -> Result<f64, EvalError> {
        match self.total() {
            0 => Err(EvalError::Empty),
            t => Ok(self.trace() as f64 / t as f64),
        }
    }

    /// Recall per true class; `None` where the class has no samples.
    pub fn per_class_accuracy(&self) -> [Option<f64>; CLASS_COUNT] {
        std::array::from_fn(|c| match self.support(c) {
            0 => None,
            s => Some(self.counts[c][c] as f64 / s as f64),
        })
    }

    /// Each row divided by its sum; empty rows stay zero.
    pub fn row_normalized(&self) -> [[f64; CLASS_COUNT]; CLASS_COUNT] {
        std::array::from_fn(|r| {
            let s = self.support(r);
            std::array::from_fn(|c| if s == 0 { 0.0 } else { self.counts[r][c] as f64 / s as f64 })
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true,pred_0,pred_1,pred_2,pred_3\n");
        for (r, row) in self.counts.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            let _ = writeln!(out, "{r},{}", cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut cm = Self::default();
        let mut rows = 0;
        for (k, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| EvalError::Parse { line: k + 1, message };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != CLASS_COUNT + 1 {
                return Err(bad(format!("expected {} fields", CLASS_COUNT + 1)));
            }
            let r: usize = fields[0].parse().map_err(|_| bad(format!("bad class '{}'", fields[0])))?;
            if r >= CLASS_COUNT {
                return Err(bad(format!("class {r} out of range")));
            }
            for c in 0..CLASS_COUNT {
                cm.counts[r][c] = fields[c + 1]
                    .parse()
                    .map_err(|_| bad(format!("bad count '{}'", fields[c + 1])))?;
            }
            rows += 1;
        }
        if rows != CLASS_COUNT {
            return Err(EvalError::Parse {
                line: 0,
                message: format!("expected {CLASS_COUNT} rows, found {rows}"),
            });
        }
        Ok(cm)
    }
}

pub fn confusion(truth: &[DamageClass], pred: &[DamageClass]) -> Result<ConfusionMatrix, EvalError> {
    if truth.len() != pred.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (t, p) in truth.iter().zip(pred) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

/// F1 from true positives, false positives and false negatives pooled over
/// all classes.
pub fn f1_micro(cm: &ConfusionMatrix) -> Result<f64, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let tp = cm.trace();
    let fp: u64 = (0..CLASS_COUNT).map(|c| (0..CLASS_COUNT).filter(|&r| r != c).map(|r| cm.counts[r][c]).sum::<u64>()).sum();
    let fn_: u64 = (0..CLASS_COUNT).map(|r| cm.support(r) - cm.counts[r][r]).sum();
    Ok((2 * tp) as f64 / (2 * tp + fp + fn_) as f64)
}

/// Mann-Whitney AUC of positives over negatives, ties counted as one half.
fn binary_auc(scores: &[(f64, bool)]) -> f64 {
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_pos = sorted.iter().filter(|s| s.1).count() as f64;
    let n_neg = sorted.len() as f64 - n_pos;
    // Twice the positive rank sum, kept in integers of half-ranks.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // Ranks i+1..=j+1 share the mean (i + j + 2) / 2.
        let pos = sorted[i..=j].iter().filter(|s| s.1).count() as u128;
        rank_sum2 += pos * (i + j + 2) as u128;
        i = j + 1;
    }
    let u2 = rank_sum2 as f64 - n_pos * (n_pos + 1.0);
    u2 / (2.0 * n_pos * n_neg)
}

/// One-vs-rest ROC AUC per class, macro-averaged over classes that have
/// both positives and negatives.
pub fn auc_ovr(truth: &[DamageClass], scores: &[[f64; CLASS_COUNT]]) -> Result<f64, EvalError> {
    if truth.len() != scores.len() {
        return Err(EvalError::LengthMismatch {
            truth: truth.len(),
            pred: scores.len(),
        });
    }
    if let Some(i) = scores.iter().position(|s| s.iter().any(|v| !v.is_finite())) {
        return Err(EvalError::NonFiniteScore(i));
    }
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..CLASS_COUNT {
        let col: Vec<(f64, bool)> = truth.iter().zip(scores).map(|(t, s)| (s[c], t.index() == c)).collect();
        let pos = col.iter().filter(|s| s.1).count();
        if pos == 0 || pos == col.len() {
            warn!("class {c} skipped in AUC: no {} samples", if pos == 0 { "positive" } else { "negative" });
            continue;
        }
        sum += binary_auc(&col);
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::NoScorableClass);
    }
    Ok(sum / used as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `None` when no class could be scored.
    pub auc: Option<f64>,
    pub f1_micro: f64,
    pub per_class_accuracy: [Option<f64>; CLASS_COUNT],
    pub confusion: ConfusionMatrix,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| v.to_string())
}

fn parse_opt(s: &str) -> Option<Option<f64>> {
    if s == "nan" {
        Some(None)
    } else {
        s.parse().ok().map(Some)
    }
}

impl MetricsReport {
    /// Predictions are the argmax of `scores`.
    pub fn from_scores(truth: &[DamageClass], scores: &[[f64; CLASS_COUNT]]) -> Result<Self, EvalError> {
        let pred: Vec<DamageClass> = scores.iter().map(crate::forest::argmax).collect();
        let cm = confusion(truth, &pred)?;
        let auc = match auc_ovr(truth, scores) {
            Ok(a) => Some(a),
            Err(EvalError::NoScorableClass) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            accuracy: cm.accuracy()?,
            auc,
            f1_micro: f1_micro(&cm)?,
            per_class_accuracy: cm.per_class_accuracy(),
            confusion: cm,
        })
    }

    /// `key: value` lines; the matrix itself goes to its own CSV.
    pub fn to_text(&self) -> String {
        let per: Vec<String> = self.per_class_accuracy.iter().map(|v| fmt_opt(*v)).collect();
        format!(
            "samples: {}\naccuracy: {}\nauc: {}\nf1_micro: {}\nper_class_accuracy: {}\n",
            self.confusion.total(),
            self.accuracy,
            fmt_opt(self.auc),
            self.f1_micro,
            per.join(" ")
        )
    }

    pub fn from_text(text: &str, confusion: ConfusionMatrix) -> Result<Self, EvalError> {
        let mut accuracy = None;
        let mut auc = None;
        let mut f1 = None;
        let mut per = None;
        for (k, line) in text.lines().enumerate() {
            let bad = |message: String| EvalError::Parse { line: k + 1, message };
            let Some((key, value)) = line.split_once(": ") else {
                continue;
            };
            let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad {key} '{v}'")));
            match key {
                "accuracy" => accuracy = Some(num(value)?),
                "f1_micro" => f1 = Some(num(value)?),
                "auc" => auc = Some(parse_opt(value).ok_or_else(|| bad(format!("bad auc '{value}'")))?),
                "per_class_accuracy" => {
                    let v: Vec<Option<f64>> = value
                        .split(' ')
                        .map(|s| parse_opt(s).ok_or_else(|| bad(format!("bad accuracy '{s}'"))))
                        .collect::<Result<_, _>>()?;
                    let arr: [Option<f64>; CLASS_COUNT] = v
                        .try_into()
                        .map_err(|_| bad(format!("expected {CLASS_COUNT} per-class values")))?;
                    per = Some(arr);
                }
                _ => {}
            }
        }
        let missing = |key: &str| EvalError::Parse {
            line: 0,
            message: format!("missing {key}"),
        };
        Ok(Self {
            accuracy: accuracy.ok_or_else(|| missing("accuracy"))?,
            auc: auc.ok_or_else(|| missing("auc"))?,
            f1_micro: f1.ok_or_else(|| missing("f1_micro"))?,
            per_class_accuracy: per.ok_or_else(|| missing("per_class_accuracy"))?,
            confusion,
        })
    }
}

/// O(n^2) pairwise AUC over all (positive, negative) pairs, for testing.
pub fn pairwise_auc_oracle(truth: &[DamageClass], scores: &[[f64; CLASS_COUNT]]) -> Option<f64> {
    let mut sum = 0.0;
    let mut used = 0;
    for c in 0..CLASS_COUNT {
        let mut credit = 0.0;
        let mut pairs = 0u64;
        for (i, ti) in truth.iter().enumerate() {
            if ti.index() != c {
                continue;
            }
            for (j, tj) in truth.iter().enumerate() {
                if tj.index() == c {
                    continue;
                }
                pairs += 1;
                let (a, b) = (scores[i][c], scores[j][c]);
                credit += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        if pairs > 0 {
            sum += credit / pairs as f64;
            used += 1;
        }
    }
    (used > 0).then(|| sum / used as f64)
}
