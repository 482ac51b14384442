//! Feed-forward speaker classifier, segment embeddings and the
//! similarity-gated online update.
//!
//! The network maps one MFCC frame to `num_classes` logits through ReLU
//! hidden layers. The logits double as the speaker embedding; the softmax of
//! the logits gives class probabilities. Parameters live in one flat vector,
//! layer by layer, each layer storing its `out × in` weights row-major
//! followed by its biases. That layout is what federated averaging operates
//! on.

use std::collections::{BTreeMap, VecDeque};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterSet, Segment};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "qsdiar-model";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub input_dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl ModelArch {
    pub fn new(input_dim: usize, hidden_sizes: Vec<usize>, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_sizes,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArch("input_dim must be positive".into()));
        }
        if self.hidden_sizes.is_empty() {
            return Err(Error::InvalidArch(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(Error::InvalidArch("hidden layers must be non-empty".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArch("need at least two classes".into()));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden_sizes);
        sizes.push(self.num_classes);
        sizes.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Embedding length, equal to the class count.
    pub fn embedding_dim(&self) -> usize {
        self.num_classes
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    pub arch: ModelArch,
    pub version: u64,
    pub params: Vec<f64>,
}

impl ModelWeights {
    pub fn zeros(arch: ModelArch) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.param_count()];
        Ok(Self {
            arch,
            version: 0,
            params,
        })
    }

    fn check_input(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.arch.input_dim,
                got: frame.len(),
            });
        }
        Ok(())
    }

    /// Pre-softmax outputs for one frame.
    pub fn logits(&self, frame: &[f64]) -> Result<Vec<f64>> {
        self.check_input(frame)?;
        let mut act = frame.to_vec();
        let shapes = self.arch.layer_shapes();
        let last = shapes.len() - 1;
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = &self.params[offset..offset + fan_in * fan_out];
            let b = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            offset += fan_in * fan_out + fan_out;
            act = affine(w, b, &act, fan_in, fan_out);
            if l < last {
                act.iter_mut().for_each(|z| *z = z.max(0.0));
            }
        }
        Ok(act)
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], fan_in: usize, fan_out: usize) -> Vec<f64> {
    (0..fan_out)
        .map(|o| {
            let row = &w[o * fan_in..(o + 1) * fan_in];
            b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

/// Weights drawn uniformly from `±sqrt(6 / fan_in)`, biases zero.
pub fn init_model(arch: ModelArch, seed: u64) -> Result<ModelWeights> {
    let mut w = ModelWeights::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut offset = 0;
    for (fan_in, fan_out) in w.arch.layer_shapes() {
        let limit = (6.0 / fan_in as f64).sqrt();
        for p in &mut w.params[offset..offset + fan_in * fan_out] {
            *p = rng.random_range(-limit..limit);
        }
        offset += fan_in * fan_out + fan_out;
    }
    Ok(w)
}

/// Returns `(embedding, probabilities)` for one frame.
pub fn forward(w: &ModelWeights, frame: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let logits = w.logits(frame)?;
    let probs = softmax(&logits);
    Ok((logits, probs))
}

fn check_labels(w: &ModelWeights, rows: &[&[f64]], labels: &[usize]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }
    if rows.len() != labels.len() {
        return Err(Error::LengthMismatch(rows.len(), labels.len()));
    }
    let k = w.arch.num_classes;
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: k,
        });
    }
    for r in rows {
        w.check_input(r)?;
    }
    Ok(())
}

/// Mean cross-entropy over the given frames and its gradient with respect to
/// the flat parameter vector.
pub fn loss_and_gradient(
    w: &ModelWeights,
    rows: &[&[f64]],
    labels: &[usize],
) -> Result<(f64, Vec<f64>)> {
    check_labels(w, rows, labels)?;
    let mut grad = vec![0.0; w.params.len()];
    let mut loss = 0.0;
    let shapes = w.arch.layer_shapes();
    let offsets: Vec<usize> = shapes
        .iter()
        .scan(0, |acc, (i, o)| {
            let start = *acc;
            *acc += i * o + o;
            Some(start)
        })
        .collect();
    let last = shapes.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(shapes.len() + 1);

    for (row, &label) in rows.iter().zip(labels) {
        acts.clear();
        acts.push(row.to_vec());
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let off = offsets[l];
            let wl = &w.params[off..off + fan_in * fan_out];
            let bl = &w.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let mut z = affine(wl, bl, &acts[l], fan_in, fan_out);
            if l < last {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        let logits = &acts[last + 1];
        loss += log_sum_exp(logits) - logits[label];

        let mut delta = softmax(logits);
        delta[label] -= 1.0;
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let input = &acts[l];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + o * fan_in..off + (o + 1) * fan_in];
                for (gi, xi) in g.iter_mut().zip(input) {
                    *gi += d * xi;
                }
                grad[off + fan_in * fan_out + o] += d;
            }
            if l == 0 {
                break;
            }
            let wl = &w.params[off..off + fan_in * fan_out];
            let mut back = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (bi, wi) in back.iter_mut().zip(&wl[o * fan_in..(o + 1) * fan_in]) {
                    *bi += d * wi;
                }
            }
            // ReLU derivative from the stored (post-activation) values
            for (bi, a) in back.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *bi = 0.0;
                }
            }
            delta = back;
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

pub fn mean_loss(w: &ModelWeights, rows: &[&[f64]], labels: &[usize]) -> Result<f64> {
    check_labels(w, rows, labels)?;
    let mut total = 0.0;
    for (row, &label) in rows.iter().zip(labels) {
        let z = w.logits(row)?;
        total += log_sum_exp(&z) - z[label];
    }
    Ok(total / rows.len() as f64)
}

pub fn accuracy(w: &ModelWeights, rows: &[&[f64]], labels: &[usize]) -> Result<f64> {
    check_labels(w, rows, labels)?;
    let mut correct = 0usize;
    for (row, &label) in rows.iter().zip(labels) {
        if argmax(&w.logits(row)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Index of the largest entry, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// `lr0 · decay^step`. A missing `decay` means a constant rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    #[serde(default = "no_decay")]
    pub decay: f64,
}

fn no_decay() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            lr0: lr,
            decay: 1.0,
        }
    }

    pub fn at(&self, step: usize) -> f64 {
        self.lr0 * self.decay.powi(step as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
        }
    }
}

/// Mini-batch Adam on mean cross-entropy. Returns the mean training loss of
/// every epoch, measured while training.
pub fn train_local<R: Rng>(
    w: &mut ModelWeights,
    rows: &[&[f64]],
    labels: &[usize],
    opt: &mut Adam,
    lr: f64,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_labels(w, rows, labels)?;
    if opt.m.len() != w.params.len() {
        return Err(Error::ArchMismatch);
    }
    let batch = cfg.batch_size.max(1);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_rows: Vec<&[f64]> = Vec::with_capacity(batch);
    let mut batch_labels: Vec<usize> = Vec::with_capacity(batch);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            batch_rows.clear();
            batch_labels.clear();
            batch_rows.extend(chunk.iter().map(|&i| rows[i]));
            batch_labels.extend(chunk.iter().map(|&i| labels[i]));
            let (loss, grad) = loss_and_gradient(w, &batch_rows, &batch_labels)?;
            epoch_loss += loss * chunk.len() as f64;
            opt.apply(&mut w.params, &grad, lr);
        }
        history.push(epoch_loss / rows.len() as f64);
    }
    w.version += 1;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub values: Vec<f64>,
    pub source: String,
}

/// Mean pre-softmax output over the segment's frames.
pub fn embed_segment(
    w: &ModelWeights,
    rows: &[&[f64]],
    source: impl Into<String>,
) -> Result<Embedding> {
    if rows.is_empty() {
        return Err(Error::EmptySegment);
    }
    let mut sum = vec![0.0; w.arch.embedding_dim()];
    for r in rows {
        for (s, z) in sum.iter_mut().zip(w.logits(r)?) {
            *s += z;
        }
    }
    let n = rows.len() as f64;
    Ok(Embedding {
        values: sum.into_iter().map(|s| s / n).collect(),
        source: source.into(),
    })
}

/// Average pairwise cosine similarity between every `td` and every `cd`
/// embedding.
pub fn cosine_similarity(td: &[Embedding], cd: &[Embedding]) -> Result<f64> {
    if td.is_empty() || cd.is_empty() {
        return Err(Error::EmptySet);
    }
    let dim = td[0].values.len();
    let norm = |e: &Embedding| -> Result<f64> {
        if e.values.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: e.values.len(),
            });
        }
        let n = e.values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::ZeroNormEmbedding);
        }
        Ok(n)
    };
    let td_norms = td.iter().map(norm).collect::<Result<Vec<_>>>()?;
    let cd_norms = cd.iter().map(norm).collect::<Result<Vec<_>>>()?;
    let mut total = 0.0;
    for (c, cn) in cd.iter().zip(&cd_norms) {
        for (t, tn) in td.iter().zip(&td_norms) {
            let dot: f64 = c.values.iter().zip(&t.values).map(|(a, b)| a * b).sum();
            total += (dot / (cn * tn)).clamp(-1.0, 1.0);
        }
    }
    Ok(total / (td.len() * cd.len()) as f64)
}

/// Argmax of the frame-averaged softmax and that mean probability. Ties go
/// to the lowest speaker id.
pub fn predict_cluster(w: &ModelWeights, rows: &[&[f64]]) -> Result<(usize, f64)> {
    if rows.is_empty() {
        return Err(Error::EmptyCluster);
    }
    let mut mean = vec![0.0; w.arch.num_classes];
    for r in rows {
        let (_, p) = forward(w, r)?;
        mean.iter_mut().zip(p).for_each(|(m, p)| *m += p);
    }
    let n = rows.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let s = argmax(&mean);
    Ok((s, mean[s]))
}

pub const DEFAULT_BANK_CAP: usize = 200;

/// Training-data embeddings per speaker, oldest evicted first once a speaker
/// holds `cap` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingBank {
    pub cap: usize,
    entries: BTreeMap<usize, VecDeque<Embedding>>,
}

impl EmbeddingBank {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            entries: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, speaker: usize, e: Embedding) {
        let list = self.entries.entry(speaker).or_default();
        if list.len() == self.cap {
            list.pop_front();
        }
        list.push_back(e);
    }

    pub fn get(&self, speaker: usize) -> Vec<Embedding> {
        self.entries
            .get(&speaker)
            .map(|l| l.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub fn len(&self, speaker: usize) -> usize {
        self.entries.get(&speaker).map_or(0, VecDeque::len)
    }

    pub fn speakers(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.values().all(VecDeque::is_empty)
    }
}

/// Fills a bank with embeddings of consecutive `chunk`-frame blocks of each
/// speaker's labelled frames.
pub fn seed_bank(
    w: &ModelWeights,
    rows: &[&[f64]],
    labels: &[usize],
    chunk: usize,
    cap: usize,
) -> Result<EmbeddingBank> {
    check_labels(w, rows, labels)?;
    let mut by_speaker: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (r, &l) in rows.iter().zip(labels) {
        by_speaker.entry(l).or_default().push(r);
    }
    let mut bank = EmbeddingBank::new(cap);
    for (speaker, frames) in by_speaker {
        for (i, block) in frames.chunks(chunk.max(1)).enumerate() {
            bank.push(
                speaker,
                embed_segment(w, block, format!("train:{speaker}:{i}"))?,
            );
        }
    }
    Ok(bank)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OnlineConfig {
    pub tau: f64,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            tau: 0.5,
            lr: LrSchedule::constant(1e-3),
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateDecision {
    pub cluster_id: usize,
    pub speaker: usize,
    pub confidence: f64,
    /// `None` when the bank holds nothing for the predicted speaker.
    pub similarity: Option<f64>,
    pub updated: bool,
}

/// Predicts a speaker for every cluster and, when the cluster's segment
/// embeddings are similar enough to the bank entries of that speaker, trains
/// one epoch on the cluster labelled as that speaker and adds its embeddings
/// to the bank.
pub fn online_update(
    w: &mut ModelWeights,
    clusters: &ClusterSet,
    segments: &[Segment],
    bank: &mut EmbeddingBank,
    cfg: &OnlineConfig,
    opt: &mut Adam,
) -> Result<Vec<UpdateDecision>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut decisions = Vec::with_capacity(clusters.len());
    let mut updates = 0;
    for (cluster_id, members) in clusters.clusters.iter().enumerate() {
        let rows: Vec<&[f64]> = members
            .iter()
            .flat_map(|&s| segments[s].rows.iter().copied())
            .collect();
        let (speaker, confidence) = predict_cluster(w, &rows)?;
        let cd = members
            .iter()
            .filter(|&&s| !segments[s].is_empty())
            .map(|&s| embed_segment(w, &segments[s].rows, format!("segment:{s}")))
            .collect::<Result<Vec<_>>>()?;
        let td = bank.get(speaker);
        let similarity = if td.is_empty() {
            None
        } else {
            Some(cosine_similarity(&td, &cd)?)
        };
        let updated = similarity.is_some_and(|s| s >= cfg.tau);
        if updated {
            let labels = vec![speaker; rows.len()];
            let train = TrainConfig {
                epochs: 1,
                batch_size: cfg.batch_size,
            };
            train_local(w, &rows, &labels, opt, cfg.lr.at(updates), &train, &mut rng)?;
            updates += 1;
            for e in cd {
                bank.push(speaker, e);
            }
        }
        decisions.push(UpdateDecision {
            cluster_id,
            speaker,
            confidence,
            similarity,
            updated,
        });
    }
    Ok(decisions)
}

/// Text checkpoint: a header, the layer sizes, the version, then one
/// parameter per line. Values are written in shortest round-trip form so a
/// reload is bit-exact.
pub fn save_checkpoint<W: Write>(w: &ModelWeights, mut out: W) -> Result<()> {
    writeln!(out, "{CHECKPOINT_MAGIC} {CHECKPOINT_FORMAT}")?;
    let sizes: Vec<String> = std::iter::once(w.arch.input_dim)
        .chain(w.arch.hidden_sizes.iter().copied())
        .chain(std::iter::once(w.arch.num_classes))
        .map(|s| s.to_string())
        .collect();
    writeln!(out, "layers {}", sizes.join(" "))?;
    writeln!(out, "version {}", w.version)?;
    writeln!(out, "params {}", w.params.len())?;
    for p in &w.params {
        writeln!(out, "{p:?}")?;
    }
    Ok(())
}

pub fn load_checkpoint<R: BufRead>(input: R) -> Result<ModelWeights> {
    let bad = |m: &str| Error::MalformedCheckpoint(m.to_string());
    let mut lines = input.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad("unexpected end of file"))?
            .map_err(Error::from)
    };

    let header = next()?;
    if header != format!("{CHECKPOINT_MAGIC} {CHECKPOINT_FORMAT}") {
        return Err(bad("unrecognised header"));
    }
    let layers = next()?;
    let sizes = layers
        .strip_prefix("layers ")
        .ok_or_else(|| bad("missing layers line"))?
        .split_whitespace()
        .map(|s| s.parse::<usize>().map_err(|_| bad("bad layer size")))
        .collect::<Result<Vec<_>>>()?;
    if sizes.len() < 3 {
        return Err(bad("need input, hidden and output sizes"));
    }
    let arch = ModelArch::new(
        sizes[0],
        sizes[1..sizes.len() - 1].to_vec(),
        sizes[sizes.len() - 1],
    );
    let version = next()?
        .strip_prefix("version ")
        .and_then(|v| v.parse::<u64>().ok())
        .ok_or_else(|| bad("bad version line"))?;
    let count = next()?
        .strip_prefix("params ")
        .and_then(|v| v.parse::<usize>().ok())
        .ok_or_else(|| bad("bad params line"))?;
    let mut w = ModelWeights::zeros(arch)?;
    if count != w.params.len() {
        return Err(bad("parameter count does not match layer sizes"));
    }
    for p in w.params.iter_mut() {
        *p = next()?
            .trim()
            .parse::<f64>()
            .map_err(|_| bad("bad parameter value"))?;
    }
    w.version = version;
    Ok(w)
}
