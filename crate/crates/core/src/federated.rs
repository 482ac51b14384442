//! Federated training of the speaker identifier across simulated devices.
//!
//! Every round each client trains on its own frames, clients are shuffled
//! into groups, and a randomly chosen arbitrator per group replaces the
//! members' models with the sample-weighted average of the group. Only
//! weights leave a client; frames never do.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identifier::{
    accuracy, init_model, mean_loss, train_local, Adam, LrSchedule, ModelArch, ModelWeights,
    TrainConfig,
};
use crate::seed::{self, Purpose};

/// Frames with speaker labels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabeledFrames {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl LabeledFrames {
    pub fn new(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(Error::LengthMismatch(rows.len(), labels.len()));
        }
        Ok(Self { rows, labels })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn views(&self) -> Vec<&[f64]> {
        self.rows.iter().map(Vec::as_slice).collect()
    }

    pub fn push(&mut self, row: Vec<f64>, label: usize) {
        self.rows.push(row);
        self.labels.push(label);
    }

    /// Distinct labels in ascending order.
    pub fn classes(&self) -> Vec<usize> {
        let mut c = self.labels.clone();
        c.sort_unstable();
        c.dedup();
        c
    }

    fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &l) in self.labels.iter().enumerate() {
            out.entry(l).or_default().push(i);
        }
        out
    }

    fn select(&self, idx: &[usize]) -> LabeledFrames {
        LabeledFrames {
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Per-class shuffled split; `fraction` of every class goes to the
    /// second set.
    pub fn stratified_split(&self, fraction: f64, seed: u64) -> (LabeledFrames, LabeledFrames) {
        let mut rng = seed::stream(seed, Purpose::Split, 0);
        let (mut keep, mut held) = (Vec::new(), Vec::new());
        for (_, mut idx) in self.by_class() {
            idx.shuffle(&mut rng);
            let n_held = (fraction * idx.len() as f64).round() as usize;
            held.extend_from_slice(&idx[..n_held]);
            keep.extend_from_slice(&idx[n_held..]);
        }
        (self.select(&keep), self.select(&held))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    NonIid,
    Iid,
    Centralized,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::NonIid => "non_iid",
            Mode::Iid => "iid",
            Mode::Centralized => "centralized",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_iid" | "non-iid" => Ok(Mode::NonIid),
            "iid" => Ok(Mode::Iid),
            "centralized" => Ok(Mode::Centralized),
            other => Err(Error::InvalidConfig(format!("unknown mode '{other}'"))),
        }
    }
}

/// Client `i` gets the frames of the `i`-th speaker (speakers in ascending
/// label order). With fewer clients than speakers, speakers are dealt out
/// round-robin.
pub fn partition_non_iid(corpus: &LabeledFrames, num_clients: usize) -> Result<Vec<LabeledFrames>> {
    let classes = corpus.by_class();
    if num_clients > classes.len() {
        return Err(Error::TooManyClients {
            clients: num_clients,
            speakers: classes.len(),
        });
    }
    if num_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    let mut out = vec![LabeledFrames::default(); num_clients];
    for (j, (_, idx)) in classes.into_iter().enumerate() {
        let part = corpus.select(&idx);
        let target = &mut out[j % num_clients];
        target.rows.extend(part.rows);
        target.labels.extend(part.labels);
    }
    Ok(out)
}

/// Every class is shuffled and dealt out in contiguous, near-equal slices.
pub fn partition_iid(
    corpus: &LabeledFrames,
    num_clients: usize,
    seed: u64,
) -> Result<Vec<LabeledFrames>> {
    if num_clients == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    let mut rng = seed::stream(seed, Purpose::Partition, 0);
    let mut out = vec![LabeledFrames::default(); num_clients];
    for (class, mut idx) in corpus.by_class() {
        if idx.len() < num_clients {
            return Err(Error::InsufficientData(format!(
                "class {class} has {} frames for {num_clients} clients",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n = idx.len();
        for (i, client) in out.iter_mut().enumerate() {
            let part = corpus.select(&idx[i * n / num_clients..(i + 1) * n / num_clients]);
            client.rows.extend(part.rows);
            client.labels.extend(part.labels);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GroupAssignment {
    pub round: usize,
    pub groups: Vec<Vec<usize>>,
    pub arbitrators: Vec<usize>,
}

/// Shuffles the clients into `floor(m / group_size)` groups. Leftover
/// clients are spread one per group from the last group backwards, so group
/// sizes differ by at most one.
pub fn form_groups(
    client_ids: &[usize],
    group_size: usize,
    round: usize,
    seed: u64,
) -> Result<GroupAssignment> {
    let m = client_ids.len();
    if group_size == 0 || group_size > m {
        return Err(Error::BadGroupSize {
            group_size,
            clients: m,
        });
    }
    let mut rng = seed::stream(seed, Purpose::Grouping, round as u32);
    let mut ids = client_ids.to_vec();
    ids.shuffle(&mut rng);
    let k = m / group_size;
    let extra = m % group_size;
    let mut sizes = vec![group_size + extra / k; k];
    for s in sizes.iter_mut().rev().take(extra % k) {
        *s += 1;
    }
    let mut groups = Vec::with_capacity(k);
    let mut rest = ids.as_slice();
    for s in sizes {
        let (g, tail) = rest.split_at(s);
        groups.push(g.to_vec());
        rest = tail;
    }
    let arbitrators = groups
        .iter()
        .map(|g| *g.choose(&mut rng).expect("non-empty group"))
        .collect();
    Ok(GroupAssignment {
        round,
        groups,
        arbitrators,
    })
}

/// Sample-weighted parameter average with weights `n_i / Σ n`.
pub fn aggregate(models: &[&ModelWeights], counts: &[usize]) -> Result<ModelWeights> {
    if models.is_empty() {
        return Err(Error::EmptyData);
    }
    if models.len() != counts.len() {
        return Err(Error::LengthMismatch(models.len(), counts.len()));
    }
    if counts.contains(&0) {
        return Err(Error::InsufficientData(
            "every client needs at least one sample".into(),
        ));
    }
    let arch = &models[0].arch;
    if models
        .iter()
        .any(|m| &m.arch != arch || m.params.len() != models[0].params.len())
    {
        return Err(Error::ArchMismatch);
    }
    let total: usize = counts.iter().sum();
    let weights: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
    let mut params: Vec<f64> = models[0].params.iter().map(|p| weights[0] * p).collect();
    for (m, w) in models.iter().zip(&weights).skip(1) {
        for (acc, p) in params.iter_mut().zip(&m.params) {
            *acc += w * p;
        }
    }
    Ok(ModelWeights {
        arch: arch.clone(),
        version: models.iter().map(|m| m.version).max().unwrap_or(0) + 1,
        params,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederatedConfig {
    pub num_clients: usize,
    pub group_size: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub mode: Mode,
    pub hidden_sizes: Vec<usize>,
    /// Share of every class kept aside for evaluation.
    pub heldout_fraction: f64,
    pub seed: u64,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            num_clients: 12,
            group_size: 4,
            rounds: 20,
            local_epochs: 1,
            batch_size: 32,
            lr0: 1.0,
            lr_decay: 0.9,
            mode: Mode::NonIid,
            hidden_sizes: vec![64, 64],
            heldout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl FederatedConfig {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            lr0: self.lr0,
            decay: self.lr_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::InvalidConfig("group_size must be at least 1".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig("lr0 must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        if !(self.heldout_fraction > 0.0 && self.heldout_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "heldout_fraction must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

pub fn lr_schedule(round: usize, cfg: &FederatedConfig) -> f64 {
    cfg.lr_schedule().at(round)
}

/// A simulated device. Its frames stay private; only the model is exposed.
#[derive(Debug, Clone)]
pub struct ClientDevice {
    id: usize,
    data: LabeledFrames,
    model: ModelWeights,
    opt: Adam,
}

impl ClientDevice {
    pub fn new(id: usize, data: LabeledFrames, model: ModelWeights) -> Self {
        let opt = Adam::new(model.params.len());
        Self {
            id,
            data,
            model,
            opt,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }

    pub fn model(&self) -> &ModelWeights {
        &self.model
    }

    pub fn set_model(&mut self, model: ModelWeights) {
        self.model = model;
    }

    /// Distinct labels held locally.
    pub fn label_set(&self) -> Vec<usize> {
        self.data.classes()
    }

    fn train(&mut self, lr: f64, cfg: &TrainConfig, seed: u64) -> Result<()> {
        if cfg.epochs == 0 {
            return Ok(());
        }
        let mut rng = seed::stream(seed, Purpose::LocalTraining, self.id as u32);
        let rows = self.data.views();
        train_local(
            &mut self.model,
            &rows,
            &self.data.labels,
            &mut self.opt,
            lr,
            cfg,
            &mut rng,
        )?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub group_size: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FederatedNetworkState {
    pub clients: Vec<ClientDevice>,
    pub round: usize,
    pub history: Vec<RoundRecord>,
    pub last_groups: Option<GroupAssignment>,
    heldout: LabeledFrames,
}

impl FederatedNetworkState {
    /// Splits off the held-out set, partitions the rest according to the
    /// mode and gives every client the same initial model.
    pub fn new(corpus: &LabeledFrames, arch: ModelArch, cfg: &FederatedConfig) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyData);
        }
        let (train, heldout) = corpus.stratified_split(cfg.heldout_fraction, cfg.seed);
        let parts = match cfg.mode {
            Mode::NonIid => partition_non_iid(&train, cfg.num_clients)?,
            Mode::Iid => partition_iid(&train, cfg.num_clients, cfg.seed)?,
            Mode::Centralized => vec![train],
        };
        let init = init_model(arch, seed::derive(cfg.seed, Purpose::Init, 0))?;
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(i, data)| ClientDevice::new(i, data, init.clone()))
            .collect();
        Ok(Self {
            clients,
            round: 0,
            history: Vec::new(),
            last_groups: None,
            heldout,
        })
    }

    pub fn heldout_len(&self) -> usize {
        self.heldout.len()
    }

    /// Mean held-out accuracy and loss over the clients' models.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        let rows = self.heldout.views();
        let labels = &self.heldout.labels;
        let mut cache: Vec<(&ModelWeights, (f64, f64))> = Vec::new();
        let (mut acc, mut loss) = (0.0, 0.0);
        for c in &self.clients {
            let score = match cache.iter().find(|(m, _)| *m == c.model()) {
                Some((_, s)) => *s,
                None => {
                    let s = (
                        accuracy(c.model(), &rows, labels)?,
                        mean_loss(c.model(), &rows, labels)?,
                    );
                    cache.push((c.model(), s));
                    s
                }
            };
            acc += score.0;
            loss += score.1;
        }
        let n = self.clients.len() as f64;
        Ok((acc / n, loss / n))
    }

    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["round", "mode", "group_size", "accuracy", "loss", "lr"])?;
        for r in &self.history {
            w.write_record(&[
                r.round.to_string(),
                r.mode.as_str().to_string(),
                r.group_size.to_string(),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.loss),
                format!("{:.6}", r.lr),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One round: local training, grouping, per-group aggregation and
/// broadcast, then evaluation.
pub fn run_round(
    state: &mut FederatedNetworkState,
    cfg: &FederatedConfig,
    seed: u64,
) -> Result<()> {
    let lr = lr_schedule(state.round, cfg);
    let train_cfg = TrainConfig {
        epochs: cfg.local_epochs,
        batch_size: cfg.batch_size,
    };
    let round_seed = seed::derive(seed, Purpose::LocalTraining, state.round as u32);
    state
        .clients
        .par_iter_mut()
        .map(|c| c.train(lr, &train_cfg, round_seed))
        .collect::<Result<Vec<()>>>()?;

    let ids: Vec<usize> = (0..state.clients.len()).collect();
    let group_size = cfg.group_size.min(ids.len());
    let groups = form_groups(&ids, group_size, state.round, seed)?;
    for group in &groups.groups {
        let models: Vec<&ModelWeights> = group.iter().map(|&i| state.clients[i].model()).collect();
        let counts: Vec<usize> = group
            .iter()
            .map(|&i| state.clients[i].sample_count())
            .collect();
        let merged = aggregate(&models, &counts)?;
        for &i in group {
            state.clients[i].set_model(merged.clone());
        }
    }
    state.last_groups = Some(groups);
    state.round += 1;
    let (accuracy, loss) = state.evaluate()?;
    state.history.push(RoundRecord {
        round: state.round,
        mode: cfg.mode,
        group_size,
        accuracy,
        loss,
        lr,
    });
    Ok(())
}

/// Builds the network and runs `cfg.rounds` rounds.
pub fn simulate(
    corpus: &LabeledFrames,
    arch: ModelArch,
    cfg: &FederatedConfig,
) -> Result<FederatedNetworkState> {
    let mut state = FederatedNetworkState::new(corpus, arch, cfg)?;
    for _ in 0..cfg.rounds {
        run_round(&mut state, cfg, cfg.seed)?;
    }
    Ok(state)
}
