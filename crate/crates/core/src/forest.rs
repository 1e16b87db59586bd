//! Random forest classifier grown with Gini impurity and no size limit.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::{DamageClass, Dataset, CLASS_COUNT, FEATURE_COUNT};

pub const DEFAULT_TREES: usize = 100;
/// Candidate features per split: floor(sqrt(16)).
pub const FEATURES_PER_SPLIT: usize = 4;

const MAGIC: &[u8] = b"SCFOREST v1\n";
const LEAF: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum ForestError {
    #[error("histogram is empty")]
    EmptyHistogram,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("forest needs at least one tree")]
    NoTrees,
    #[error("input feature {0} is not finite")]
    NonFinite(usize),
    #[error("model io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model: {0}")]
    Format(String),
}

/// Gini impurity `sum p_i (1 - p_i)` of a class-count histogram.
pub fn gini(histogram: &[u64]) -> Result<f64, ForestError> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(ForestError::EmptyHistogram);
    }
    let t = total as f64;
    Ok(histogram
        .iter()
        .map(|&c| {
            let p = c as f64 / t;
            p * (1.0 - p)
        })
        .sum())
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node {
    threshold: f64,
    /// Split feature, or `LEAF`.
    feature: u32,
    /// Left child, or the leaf index for leaves.
    left: u32,
    right: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
    leaves: Vec<[u32; CLASS_COUNT]>,
    leaf_probs: Vec<[f64; CLASS_COUNT]>,
}

impl DecisionTree {
    fn from_parts(nodes: Vec<Node>, leaves: Vec<[u32; CLASS_COUNT]>) -> Self {
        let leaf_probs = leaves
            .iter()
            .map(|h| {
                let total: u32 = h.iter().sum();
                let mut p = [0.0; CLASS_COUNT];
                for (pi, &c) in p.iter_mut().zip(h) {
                    *pi = f64::from(c) / f64::from(total);
                }
                p
            })
            .collect();
        Self {
            nodes,
            leaves,
            leaf_probs,
        }
    }

    #[inline]
    fn leaf_index(&self, x: &[f64; FEATURE_COUNT]) -> usize {
        let mut n = &self.nodes[0];
        while n.feature != LEAF {
            let next = if x[n.feature as usize] <= n.threshold {
                n.left
            } else {
                n.right
            };
            n = &self.nodes[next as usize];
        }
        n.left as usize
    }

    /// Class distribution of the leaf reached by `x`.
    pub fn predict_proba(&self, x: &[f64; FEATURE_COUNT]) -> [f64; CLASS_COUNT] {
        self.leaf_probs[self.leaf_index(x)]
    }

    /// Class histogram of the leaf reached by `x`.
    pub fn leaf_histogram(&self, x: &[f64; FEATURE_COUNT]) -> [u32; CLASS_COUNT] {
        self.leaves[self.leaf_index(x)]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn depth(&self) -> usize {
        let mut best = 0;
        let mut stack = vec![(0usize, 0usize)];
        while let Some((i, d)) = stack.pop() {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                best = best.max(d);
            } else {
                stack.push((n.left as usize, d + 1));
                stack.push((n.right as usize, d + 1));
            }
        }
        best
    }

    /// (feature, threshold) of every internal node.
    pub fn splits(&self) -> Vec<(usize, f64)> {
        self.nodes
            .iter()
            .filter(|n| n.feature != LEAF)
            .map(|n| (n.feature as usize, n.threshold))
            .collect()
    }
}

/// Split quality `sum_L c^2 / n_L + sum_R c^2 / n_R` held as an exact
/// fraction `num / den`.
#[derive(Debug, Clone, Copy)]
struct Score {
    num: u128,
    den: u128,
}

impl Score {
    fn new(sq_left: u64, n_left: u64, sq_right: u64, n_right: u64) -> Self {
        Self {
            num: u128::from(sq_left) * u128::from(n_right) + u128::from(sq_right) * u128::from(n_left),
            den: u128::from(n_left) * u128::from(n_right),
        }
    }

    fn greater(&self, other: &Score) -> bool {
        self.num * other.den > other.num * self.den
    }
}

fn sum_sq(h: &[u64; CLASS_COUNT]) -> u64 {
    h.iter().map(|c| c * c).sum()
}

struct Split {
    feature: usize,
    threshold: f64,
    score: Score,
}

struct TreeBuilder<'a> {
    x: &'a [[f64; FEATURE_COUNT]],
    y: &'a [u8],
    nodes: Vec<Node>,
    leaves: Vec<[u32; CLASS_COUNT]>,
    rng: ChaCha8Rng,
    mtry: usize,
    scratch: Vec<(f64, u8)>,
}

impl TreeBuilder<'_> {
    fn histogram(&self, idx: &[u32]) -> [u64; CLASS_COUNT] {
        let mut h = [0u64; CLASS_COUNT];
        for &i in idx {
            h[self.y[i as usize] as usize] += 1;
        }
        h
    }

    fn best_split_on(&mut self, idx: &[u32], feature: usize, parent: &[u64; CLASS_COUNT]) -> Option<Split> {
        self.scratch.clear();
        self.scratch
            .extend(idx.iter().map(|&i| (self.x[i as usize][feature], self.y[i as usize])));
        self.scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        let n = self.scratch.len() as u64;
        let mut left = [0u64; CLASS_COUNT];
        let mut best: Option<Split> = None;
        for k in 0..self.scratch.len() - 1 {
            let (v, label) = self.scratch[k];
            left[label as usize] += 1;
            let next = self.scratch[k + 1].0;
            if v >= next {
                continue;
            }
            let mut right = *parent;
            for c in 0..CLASS_COUNT {
                right[c] -= left[c];
            }
            let nl = k as u64 + 1;
            let score = Score::new(sum_sq(&left), nl, sum_sq(&right), n - nl);
            if best.as_ref().is_none_or(|b| score.greater(&b.score)) {
                let mut threshold = v / 2.0 + next / 2.0;
                if !(threshold >= v && threshold < next) {
                    threshold = v;
                }
                best = Some(Split {
                    feature,
                    threshold,
                    score,
                });
            }
        }
        best
    }

    fn choose_split(&mut self, idx: &[u32], parent: &[u64; CLASS_COUNT]) -> Option<Split> {
        let mut order: Vec<usize> = (0..FEATURE_COUNT).collect();
        order.shuffle(&mut self.rng);
        let n = idx.len() as u64;
        let parent_score = Score {
            num: u128::from(sum_sq(parent)),
            den: u128::from(n),
        };
        let mut best: Option<Split> = None;
        for (k, &f) in order.iter().enumerate() {
            // Past the first `mtry` candidates, keep drawing only until a
            // split that lowers impurity turns up.
            if k >= self.mtry && best.is_some() {
                break;
            }
            if let Some(s) = self.best_split_on(idx, f, parent) {
                if s.score.greater(&parent_score)
                    && best.as_ref().is_none_or(|b| s.score.greater(&b.score))
                {
                    best = Some(s);
                }
            }
        }
        best
    }

    fn push_leaf(&mut self, node: usize, h: &[u64; CLASS_COUNT]) {
        let leaf = self.leaves.len() as u32;
        self.leaves.push(h.map(|c| c as u32));
        self.nodes[node] = Node {
            threshold: 0.0,
            feature: LEAF,
            left: leaf,
            right: leaf,
        };
    }

    fn build(mut self, mut idx: Vec<u32>) -> DecisionTree {
        let placeholder = Node {
            threshold: 0.0,
            feature: LEAF,
            left: 0,
            right: 0,
        };
        self.nodes.push(placeholder);
        let mut stack = vec![(0usize, 0usize, idx.len())];
        while let Some((node, lo, hi)) = stack.pop() {
            let slice = &idx[lo..hi];
            let h = self.histogram(slice);
            let pure = h.iter().filter(|&&c| c > 0).count() <= 1;
            if pure || slice.len() < 2 {
                self.push_leaf(node, &h);
                continue;
            }
            let Some(split) = self.choose_split(slice, &h) else {
                self.push_leaf(node, &h);
                continue;
            };
            let slice = &mut idx[lo..hi];
            let (l, r): (Vec<u32>, Vec<u32>) = slice
                .iter()
                .partition(|&&i| self.x[i as usize][split.feature] <= split.threshold);
            let mid = lo + l.len();
            slice[..l.len()].copy_from_slice(&l);
            slice[l.len()..].copy_from_slice(&r);
            let left = self.nodes.len();
            self.nodes.push(placeholder);
            self.nodes.push(placeholder);
            self.nodes[node] = Node {
                threshold: split.threshold,
                feature: split.feature as u32,
                left: left as u32,
                right: left as u32 + 1,
            };
            stack.push((left + 1, mid, hi));
            stack.push((left, lo, mid));
        }
        DecisionTree::from_parts(self.nodes, self.leaves)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub seed: u64,
}

impl ForestModel {
    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Mean of the per-tree leaf class distributions.
    pub fn predict_proba(&self, x: &[f64; FEATURE_COUNT]) -> Result<[f64; CLASS_COUNT], ForestError> {
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(ForestError::NonFinite(j));
        }
        Ok(self.proba_unchecked(x))
    }

    fn proba_unchecked(&self, x: &[f64; FEATURE_COUNT]) -> [f64; CLASS_COUNT] {
        let mut sum = [0.0; CLASS_COUNT];
        for t in &self.trees {
            let p = t.predict_proba(x);
            for c in 0..CLASS_COUNT {
                sum[c] += p[c];
            }
        }
        let n = self.trees.len() as f64;
        sum.map(|s| s / n)
    }

    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> Result<DamageClass, ForestError> {
        self.predict_proba(x).map(|p| argmax(&p))
    }

    pub fn predict_proba_batch(
        &self,
        xs: &[[f64; FEATURE_COUNT]],
    ) -> Result<Vec<[f64; CLASS_COUNT]>, ForestError> {
        for x in xs {
            if let Some(j) = x.iter().position(|v| !v.is_finite()) {
                return Err(ForestError::NonFinite(j));
            }
        }
        // Tree-major over blocks keeps one tree's nodes in cache while it
        // scores the block. Each sample still sums its trees in order, so the
        // result matches `predict_proba` bit for bit.
        const BLOCK: usize = 2048;
        let n = self.trees.len() as f64;
        let mut out = vec![[0.0; CLASS_COUNT]; xs.len()];
        out.par_chunks_mut(BLOCK)
            .zip(xs.par_chunks(BLOCK))
            .for_each(|(sums, block)| {
                for t in &self.trees {
                    for (sum, x) in sums.iter_mut().zip(block) {
                        let p = &t.leaf_probs[t.leaf_index(x)];
                        for c in 0..CLASS_COUNT {
                            sum[c] += p[c];
                        }
                    }
                }
                for sum in sums.iter_mut() {
                    *sum = sum.map(|s| s / n);
                }
            });
        Ok(out)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ForestError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.trees.len() as u32)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u32::<LittleEndian>(FEATURE_COUNT as u32)?;
        w.write_u32::<LittleEndian>(CLASS_COUNT as u32)?;
        for t in &self.trees {
            w.write_u32::<LittleEndian>(t.nodes.len() as u32)?;
            for n in &t.nodes {
                w.write_u32::<LittleEndian>(n.feature)?;
                w.write_f64::<LittleEndian>(n.threshold)?;
                w.write_u32::<LittleEndian>(n.left)?;
                w.write_u32::<LittleEndian>(n.right)?;
            }
            w.write_u32::<LittleEndian>(t.leaves.len() as u32)?;
            for h in &t.leaves {
                for &c in h {
                    w.write_u32::<LittleEndian>(c)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ForestError> {
        let bad = |m: &str| ForestError::Format(m.to_string());
        let mut magic = [0u8; MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(bad("not an SCFOREST v1 model"));
        }
        let n_trees = r.read_u32::<LittleEndian>()? as usize;
        let seed = r.read_u64::<LittleEndian>()?;
        if r.read_u32::<LittleEndian>()? as usize != FEATURE_COUNT
            || r.read_u32::<LittleEndian>()? as usize != CLASS_COUNT
        {
            return Err(bad("unexpected feature or class count"));
        }
        let mut trees = Vec::with_capacity(n_trees);
        for _ in 0..n_trees {
            let n_nodes = r.read_u32::<LittleEndian>()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes);
            for _ in 0..n_nodes {
                let feature = r.read_u32::<LittleEndian>()?;
                let threshold = r.read_f64::<LittleEndian>()?;
                let left = r.read_u32::<LittleEndian>()?;
                let right = r.read_u32::<LittleEndian>()?;
                nodes.push(Node {
                    threshold,
                    feature,
                    left,
                    right,
                });
            }
            let n_leaves = r.read_u32::<LittleEndian>()? as usize;
            let mut leaves = Vec::with_capacity(n_leaves);
            for _ in 0..n_leaves {
                let mut h = [0u32; CLASS_COUNT];
                for c in h.iter_mut() {
                    *c = r.read_u32::<LittleEndian>()?;
                }
                if h.iter().sum::<u32>() == 0 {
                    return Err(bad("empty leaf"));
                }
                leaves.push(h);
            }
            for n in &nodes {
                let ok = if n.feature == LEAF {
                    (n.left as usize) < n_leaves
                } else {
                    (n.feature as usize) < FEATURE_COUNT
                        && (n.left as usize) < n_nodes
                        && (n.right as usize) < n_nodes
                };
                if !ok {
                    return Err(bad("node references out of range"));
                }
            }
            if nodes.is_empty() {
                return Err(bad("empty tree"));
            }
            trees.push(DecisionTree::from_parts(nodes, leaves));
        }
        Ok(Self { trees, seed })
    }
}

/// Index of the largest probability, ties to the lower class.
pub fn argmax(p: &[f64; CLASS_COUNT]) -> DamageClass {
    let mut best = 0;
    for c in 1..CLASS_COUNT {
        if p[c] > p[best] {
            best = c;
        }
    }
    DamageClass::ALL[best]
}

/// Trains `n_trees` trees, each on a bootstrap resample of `train` drawn
/// from its own sub-seed.
pub fn fit_forest(train: &Dataset, n_trees: usize, seed: u64) -> Result<ForestModel, ForestError> {
    fit_forest_with(train, n_trees, seed, FEATURES_PER_SPLIT)
}

pub fn fit_forest_with(
    train: &Dataset,
    n_trees: usize,
    seed: u64,
    features_per_split: usize,
) -> Result<ForestModel, ForestError> {
    if train.is_empty() {
        return Err(ForestError::EmptyDataset);
    }
    if n_trees == 0 {
        return Err(ForestError::NoTrees);
    }
    let x: Vec<[f64; FEATURE_COUNT]> = train.samples.iter().map(|s| s.features).collect();
    let y: Vec<u8> = train.samples.iter().map(|s| s.label.value()).collect();
    let n = x.len();
    let trees = (0..n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let idx: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
            TreeBuilder {
                x: &x,
                y: &y,
                nodes: Vec::new(),
                leaves: Vec::new(),
                rng,
                mtry: features_per_split.clamp(1, FEATURE_COUNT),
                scratch: Vec::with_capacity(n),
            }
            .build(idx)
        })
        .collect();
    Ok(ForestModel { trees, seed })
}
