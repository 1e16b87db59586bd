//! Fully connected ReLU network with a softmax output, trained with Adam on
//! cross-entropy.

use std::fmt::Write as _;
use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dataset::{DamageClass, Dataset, CLASS_COUNT, FEATURE_COUNT};
use crate::forest::argmax;

pub const DEFAULT_LAYERS: [usize; 5] = [FEATURE_COUNT, 20, 16, 8, CLASS_COUNT];
pub const DEFAULT_DROPOUT: f64 = 0.1;
/// Dropout follows this many leading hidden layers.
pub const DROPOUT_LAYERS: usize = 2;
pub const DEFAULT_BATCH: usize = 256;
pub const DEFAULT_EPOCHS: usize = 1000;
/// Probability floor inside the log of the cross-entropy.
pub const PROB_FLOOR: f64 = 1e-12;

const MAGIC: &[u8] = b"SCMLP v1\n";

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("invalid network: {0}")]
    Shape(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("loss became non-finite in epoch {0}")]
    NonFiniteLoss(usize),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("input feature {0} is not finite")]
    NonFiniteInput(usize),
    #[error("model io: {0}")]
    Io(#[from] io::Error),
    #[error("malformed model: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn glorot(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (o, row) in self.weights.chunks_exact(self.inputs).enumerate() {
            let mut z = self.bias[o];
            for (w, v) in row.iter().zip(x) {
                z += w * v;
            }
            out.push(z);
        }
    }
}

/// Per-feature z-score fitted on the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn fit(data: &Dataset) -> Self {
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; FEATURE_COUNT];
        for s in &data.samples {
            for (m, v) in mean.iter_mut().zip(&s.features) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; FEATURE_COUNT];
        for s in &data.samples {
            for j in 0..FEATURE_COUNT {
                std[j] += (s.features[j] - mean[j]).powi(2);
            }
        }
        // Constant columns are only centred.
        std.iter_mut().for_each(|v| {
            *v = (*v / n).sqrt();
            if !(*v > 0.0) {
                *v = 1.0;
            }
        });
        Self { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `-sum p_i ln q_i` with `q` clamped to `[PROB_FLOOR, 1]`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi != 0.0)
        .map(|(pi, qi)| -pi * qi.clamp(PROB_FLOOR, 1.0).ln())
        .sum()
}

/// Cross-entropy against a one-hot target.
fn nll(q: &[f64], label: usize) -> f64 {
    -q[label].clamp(PROB_FLOOR, 1.0).ln()
}

/// Gradients laid out like the layers: weights then bias, per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros(layers: &[Layer]) -> Self {
        Self {
            weights: layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }
}

/// Inverted-dropout multipliers for each hidden layer of one sample.
pub type DropoutMask = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<Layer>,
    pub dropout: f64,
    pub scaler: Option<Scaler>,
}

impl MlpModel {
    /// Glorot-uniform weights and zero biases for `sizes[0] -> ... -> sizes[n]`.
    pub fn new(sizes: &[usize], dropout: f64, seed: u64) -> Result<Self, MlpError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(MlpError::Shape(format!("layer sizes {sizes:?}")));
        }
        if sizes[0] != FEATURE_COUNT || sizes[sizes.len() - 1] != CLASS_COUNT {
            return Err(MlpError::Shape(format!(
                "network must map {FEATURE_COUNT} inputs to {CLASS_COUNT} outputs"
            )));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(MlpError::Shape(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes.windows(2).map(|w| Layer::glorot(w[0], w[1], &mut rng)).collect();
        Ok(Self {
            layers,
            dropout,
            scaler: None,
        })
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    fn hidden_count(&self) -> usize {
        self.layers.len() - 1
    }

    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        match &self.scaler {
            Some(s) => s.transform(x),
            None => x.to_vec(),
        }
    }

    /// Class probabilities for raw (unscaled) features, dropout off.
    pub fn predict_proba(&self, x: &[f64; FEATURE_COUNT]) -> Result<[f64; CLASS_COUNT], MlpError> {
        if let Some(j) = x.iter().position(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteInput(j));
        }
        let q = self.forward(&self.prepare(x), None).0;
        let mut p = [0.0; CLASS_COUNT];
        p.copy_from_slice(&q);
        Ok(p)
    }

    pub fn predict(&self, x: &[f64; FEATURE_COUNT]) -> Result<DamageClass, MlpError> {
        self.predict_proba(x).map(|p| argmax(&p))
    }

    /// Returns the softmax output and all layer activations, the input first.
    /// Hidden activations are post-ReLU and post-mask.
    fn forward(&self, x: &[f64], mask: Option<&DropoutMask>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut z = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.apply(&acts[l], &mut z);
            if l < self.hidden_count() {
                let mut a: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
                if let Some(m) = mask {
                    for (v, k) in a.iter_mut().zip(&m[l]) {
                        *v *= k;
                    }
                }
                acts.push(a);
            } else {
                let q = softmax(&z);
                return (q, acts);
            }
        }
        unreachable!("network has an output layer")
    }

    /// Smallest |pre-activation| of any hidden unit over `xs`. ReLU has no
    /// derivative at 0, so finite differences with a step near this margin
    /// straddle a kink and disagree with any analytic gradient.
    pub fn kink_margin(&self, xs: &[Vec<f64>], masks: Option<&[DropoutMask]>) -> f64 {
        let mut margin = f64::INFINITY;
        let mut z = Vec::new();
        for (i, x) in xs.iter().enumerate() {
            let acts = self.forward(x, masks.map(|m| &m[i])).1;
            for (l, layer) in self.layers[..self.hidden_count()].iter().enumerate() {
                layer.apply(&acts[l], &mut z);
                margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            }
        }
        margin
    }

    /// Draws inverted-dropout multipliers: 0 with probability `p`, otherwise
    /// `1 / (1 - p)`.
    pub fn draw_mask(&self, rng: &mut impl Rng) -> DropoutMask {
        let keep = 1.0 - self.dropout;
        self.layers[..self.hidden_count()]
            .iter()
            .enumerate()
            .map(|(l, layer)| {
                (0..layer.outputs)
                    .map(|_| {
                        if l >= DROPOUT_LAYERS || self.dropout == 0.0 {
                            1.0
                        } else if rng.random_bool(keep) {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Mean cross-entropy over already-scaled inputs and its gradient.
    /// `masks`, when given, holds one dropout mask per sample.
    pub fn loss_and_gradient(
        &self,
        xs: &[Vec<f64>],
        labels: &[usize],
        masks: Option<&[DropoutMask]>,
    ) -> (f64, Gradients) {
        let mut grads = Gradients::zeros(&self.layers);
        let n = xs.len() as f64;
        let mut loss = 0.0;
        for (i, (x, &y)) in xs.iter().zip(labels).enumerate() {
            let mask = masks.map(|m| &m[i]);
            let (q, acts) = self.forward(x, mask);
            loss += nll(&q, y);
            let mut delta: Vec<f64> = q.iter().enumerate().map(|(c, &p)| (p - f64::from(c == y)) / n).collect();
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input = &acts[l];
                let gw = &mut grads.weights[l];
                for (o, &d) in delta.iter().enumerate() {
                    grads.bias[l][o] += d;
                    if d != 0.0 {
                        for (g, a) in gw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                            *g += d * a;
                        }
                    }
                }
                if l == 0 {
                    break;
                }
                // acts[l] is post-ReLU and post-mask; a zero there kills the
                // gradient, otherwise the mask multiplier passes through.
                let mut back = vec![0.0; layer.inputs];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    for (b, w) in back.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                        *b += d * w;
                    }
                }
                let m = mask.map(|m| &m[l - 1]);
                for (j, b) in back.iter_mut().enumerate() {
                    if input[j] <= 0.0 {
                        *b = 0.0;
                    } else if let Some(m) = m {
                        *b *= m[j];
                    }
                }
                delta = back;
            }
        }
        (loss / n, grads)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), MlpError> {
        w.write_all(MAGIC)?;
        let sizes = self.sizes();
        w.write_u32::<LittleEndian>(sizes.len() as u32)?;
        for s in sizes {
            w.write_u32::<LittleEndian>(s as u32)?;
        }
        w.write_f64::<LittleEndian>(self.dropout)?;
        for l in &self.layers {
            for &v in l.weights.iter().chain(&l.bias) {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        match &self.scaler {
            None => w.write_u8(0)?,
            Some(s) => {
                w.write_u8(1)?;
                for &v in s.mean.iter().chain(&s.std) {
                    w.write_f64::<LittleEndian>(v)?;
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

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, MlpError> {
        let mut magic = [0u8; MAGIC.len()];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(MlpError::Format("not an SCMLP v1 model".into()));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        if !(2..=64).contains(&n) {
            return Err(MlpError::Format(format!("{n} layer sizes")));
        }
        let sizes = (0..n)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let dropout = r.read_f64::<LittleEndian>()?;
        let mut model = Self::new(&sizes, dropout, 0).map_err(|e| MlpError::Format(e.to_string()))?;
        for l in model.layers.iter_mut() {
            for v in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *v = r.read_f64::<LittleEndian>()?;
            }
        }
        model.scaler = match r.read_u8()? {
            0 => None,
            1 => {
                let mut read = || {
                    (0..FEATURE_COUNT)
                        .map(|_| r.read_f64::<LittleEndian>())
                        .collect::<Result<Vec<_>, _>>()
                };
                let mean = read()?;
                let std = read()?;
                Some(Scaler { mean, std })
            }
            f => return Err(MlpError::Format(format!("scaler flag {f}"))),
        };
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
    m: Gradients,
    v: Gradients,
}

impl AdamState {
    pub fn new(model: &MlpModel) -> Self {
        Self {
            alpha: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Gradients::zeros(&model.layers),
            v: Gradients::zeros(&model.layers),
        }
    }
}

fn check_finite(grads: &Gradients) -> Result<(), MlpError> {
    for (l, (w, b)) in grads.weights.iter().zip(&grads.bias).enumerate() {
        if w.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteGradient(format!("layer {l} weights")));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(MlpError::NonFiniteGradient(format!("layer {l} bias")));
        }
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(model: &mut MlpModel, grads: &Gradients, state: &mut AdamState) -> Result<(), MlpError> {
    check_finite(grads)?;
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (l, layer) in model.layers.iter_mut().enumerate() {
        let blocks = [
            (&mut layer.weights, &grads.weights[l], &mut state.m.weights[l], &mut state.v.weights[l]),
            (&mut layer.bias, &grads.bias[l], &mut state.m.bias[l], &mut state.v.bias[l]),
        ];
        for (p, g, m, v) in blocks {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= state.alpha * mh / (vh.sqrt() + state.epsilon);
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub layers: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Fit a z-score on the training features and store it in the model.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS.to_vec(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            learning_rate: 0.001,
            dropout: DEFAULT_DROPOUT,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlpError> {
        if self.batch_size == 0 {
            return Err(MlpError::Shape("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(MlpError::Shape("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MlpError::Shape(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// `epoch,loss,accuracy,val_loss,val_accuracy`, validation columns empty
/// when no validation set was given.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,accuracy,val_loss,val_accuracy\n");
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for h in history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            h.epoch,
            h.loss,
            h.accuracy,
            opt(h.val_loss),
            opt(h.val_accuracy)
        );
    }
    out
}

/// Mean loss and accuracy with dropout off.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> (f64, f64) {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in &data.samples {
        let q = model.forward(&model.prepare(&s.features), None).0;
        loss += nll(&q, s.label.index());
        let mut p = [0.0; CLASS_COUNT];
        p.copy_from_slice(&q);
        correct += usize::from(argmax(&p) == s.label);
    }
    let n = data.len().max(1) as f64;
    (loss / n, correct as f64 / n)
}

pub fn train_mlp(
    train: &Dataset,
    validation: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<(MlpModel, Vec<EpochStats>), MlpError> {
    if train.is_empty() {
        return Err(MlpError::EmptyDataset);
    }
    config.validate()?;
    let mut model = MlpModel::new(&config.layers, config.dropout, config.seed)?;
    if config.standardize {
        model.scaler = Some(Scaler::fit(train));
    }
    let xs: Vec<Vec<f64>> = train.samples.iter().map(|s| model.prepare(&s.features)).collect();
    let ys: Vec<usize> = train.samples.iter().map(|s| s.label.index()).collect();
    let mut adam = AdamState::new(&model);
    adam.alpha = config.learning_rate;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| xs[i].clone()).collect();
            let by: Vec<usize> = batch.iter().map(|&i| ys[i]).collect();
            let masks: Vec<DropoutMask> = batch.iter().map(|_| model.draw_mask(&mut rng)).collect();
            let (loss, grads) = model.loss_and_gradient(&bx, &by, Some(&masks));
            if !loss.is_finite() {
                return Err(MlpError::NonFiniteLoss(epoch));
            }
            adam_step(&mut model, &grads, &mut adam)?;
        }
        let (loss, accuracy) = evaluate(&model, train);
        if !loss.is_finite() {
            return Err(MlpError::NonFiniteLoss(epoch));
        }
        let (val_loss, val_accuracy) = match validation {
            Some(v) if !v.is_empty() => {
                let (l, a) = evaluate(&model, v);
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.push(EpochStats {
            epoch,
            loss,
            accuracy,
            val_loss,
            val_accuracy,
        });
    }
    Ok((model, history))
}

fn param_mut(m: &mut MlpModel, layer: usize, bias: bool, i: usize) -> &mut f64 {
    if bias {
        &mut m.layers[layer].bias[i]
    } else {
        &mut m.layers[layer].weights[i]
    }
}

/// Worst relative error between the analytic gradient and central
/// differences with step `h`, over every parameter. Relative error is
/// `|a - n| / max(|a| + |n|, floor)`.
pub fn gradient_check(
    model: &MlpModel,
    xs: &[Vec<f64>],
    labels: &[usize],
    masks: Option<&[DropoutMask]>,
    h: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = model.loss_and_gradient(xs, labels, masks);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let loss_at = |m: &MlpModel| m.loss_and_gradient(xs, labels, masks).0;
    for l in 0..model.layers.len() {
        for (is_bias, analytic) in [(false, &grads.weights[l]), (true, &grads.bias[l])] {
            for i in 0..analytic.len() {
                let orig = *param_mut(&mut probe, l, is_bias, i);
                *param_mut(&mut probe, l, is_bias, i) = orig + h;
                let up = loss_at(&probe);
                *param_mut(&mut probe, l, is_bias, i) = orig - h;
                let down = loss_at(&probe);
                *param_mut(&mut probe, l, is_bias, i) = orig;
                let numeric = (up - down) / (2.0 * h);
                let a = analytic[i];
                let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
    }
    worst
}
