//! End-to-end diarization: features, quasi-silences, change points,
//! clusters, speaker labels and scores.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::clustering::{
    cluster_segments, segments_between, ClusterSet, Segment, DEFAULT_MIN_SEGMENT_FRAMES,
};
use crate::divergence::{BicConfig, ComputeCounter, CounterSnapshot};
use crate::error::{Error, Result, Stage, StageExt};
use crate::federated::{
    simulate, FederatedConfig, FederatedNetworkState, LabeledFrames, Mode, RoundRecord,
};
use crate::frontend::{extract_features, AudioSignal, FeatureMatrix, MfccConfig};
use crate::identifier::{
    online_update, predict_cluster, seed_bank, Adam, EmbeddingBank, ModelArch, ModelWeights,
    OnlineConfig, DEFAULT_BANK_CAP,
};
use crate::metrics::{
    average_seg_scores, corpus_scores, id_scores, match_change_points, seg_scores,
    AveragedSegScores, MatchResult, DEFAULT_COLLAR_SEC,
};
use crate::seed::{self, Purpose};
use crate::segmentation::{segment, ChangePoint, Method, SegConfig};
use crate::silence::{
    detect_quasi_silences, energy_track, silence_mask, QuasiSilenceRegion, SilenceConfig,
};
use crate::synth::{speaker_pool, synth_speech, GroundTruth, SpeakerProfile, Variation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteringConfig {
    pub min_segment_frames: usize,
    pub bic: BicConfig,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        Self {
            min_segment_frames: DEFAULT_MIN_SEGMENT_FRAMES,
            bic: BicConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdentifyConfig {
    /// Run the similarity-gated online update while labelling clusters.
    pub online_update: bool,
    pub online: OnlineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mfcc: MfccConfig,
    pub silence: SilenceConfig,
    pub segmentation: SegConfig,
    pub clustering: ClusteringConfig,
    pub identify: IdentifyConfig,
    pub collar_sec: f64,
    pub out_dir: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mfcc: MfccConfig::default(),
            silence: SilenceConfig::default(),
            segmentation: SegConfig::default(),
            clustering: ClusteringConfig::default(),
            identify: IdentifyConfig::default(),
            collar_sec: DEFAULT_COLLAR_SEC,
            out_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, sample_rate_hz: u32) -> Result<()> {
        self.mfcc.validate(sample_rate_hz).stage(Stage::Frontend)?;
        self.silence.validate().stage(Stage::Silence)?;
        self.segmentation
            .validate(self.mfcc.hop_sec())
            .stage(Stage::Segmentation)?;
        self.clustering.bic.validate().stage(Stage::Clustering)?;
        if !(self.collar_sec >= 0.0) {
            return Err(
                Error::InvalidConfig("collar_sec must be non-negative".into()).at(Stage::Metrics),
            );
        }
        Ok(())
    }
}

/// Features and quasi-silences of one recording.
#[derive(Debug, Clone)]
pub struct Analysis {
    pub features: FeatureMatrix,
    pub silences: Vec<QuasiSilenceRegion>,
    pub excluded: Vec<bool>,
    pub hop_sec: f64,
}

impl Analysis {
    pub fn frame_time(&self, frame: usize) -> f64 {
        frame as f64 * self.hop_sec
    }
}

pub fn analyze(audio: &AudioSignal, cfg: &PipelineConfig) -> Result<Analysis> {
    let (frames, features) = extract_features(audio, &cfg.mfcc).stage(Stage::Frontend)?;
    let energy = energy_track(&frames, &cfg.silence).stage(Stage::Silence)?;
    let silences = detect_quasi_silences(&energy, &cfg.silence);
    let excluded = silence_mask(&silences, features.len());
    Ok(Analysis {
        features,
        silences,
        excluded,
        hop_sec: frames.hop_sec(),
    })
}

/// A trained identifier, optionally with the embedding bank used by the
/// online update.
#[derive(Debug, Clone)]
pub struct Identifier {
    pub model: ModelWeights,
    pub bank: Option<EmbeddingBank>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentSummary {
    pub start_frame: usize,
    pub end_frame: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub speech_frames: usize,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub segments: Vec<usize>,
    pub speaker: Option<usize>,
    pub confidence: Option<f64>,
    pub similarity: Option<f64>,
    pub updated: bool,
    /// Majority speaker by frame count, when ground truth is known.
    pub true_speaker: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub fdr: f64,
    pub mdr: f64,
    pub f_seg: f64,
    pub purity: f64,
    pub coverage: f64,
    pub far: Option<f64>,
    pub frr: Option<f64>,
    pub f_id: Option<f64>,
    pub delta_bic_count: u64,
    pub t2_count: u64,
    pub covariance_count: u64,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiarizationResult {
    pub source_id: String,
    pub method: Method,
    pub duration_sec: f64,
    pub silences: Vec<QuasiSilenceRegion>,
    pub change_points: Vec<ChangePoint>,
    pub segments: Vec<SegmentSummary>,
    pub clusters: Vec<ClusterSummary>,
    /// Segmentation cost counters.
    pub counters: CounterSnapshot,
    pub clustering_counters: CounterSnapshot,
    pub identifier_invocations: usize,
    pub report: Option<MetricsReport>,
}

impl DiarizationResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// CSV `time_sec,frame_index,divergence_value,method`.
    pub fn write_change_points_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time_sec", "frame_index", "divergence_value", "method"])?;
        for p in &self.change_points {
            w.write_record(&[
                format!("{:.3}", p.time_sec),
                p.frame_index.to_string(),
                format!("{:.6}", p.divergence_value),
                self.method.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// CSV `segment_start_sec,segment_end_sec,cluster_id,speaker`; noise
    /// segments have an empty cluster id.
    pub fn write_clusters_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "segment_start_sec",
            "segment_end_sec",
            "cluster_id",
            "speaker",
        ])?;
        for s in &self.segments {
            let speaker = s.cluster.and_then(|c| self.clusters[c].speaker);
            w.write_record(&[
                format!("{:.3}", s.start_sec),
                format!("{:.3}", s.end_sec),
                s.cluster.map(|c| c.to_string()).unwrap_or_default(),
                speaker.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// One interval per clustered segment, labelled with the identified
    /// speaker (`spk<N>`) or, without a model, the cluster (`cluster<N>`).
    pub fn labeled_intervals(&self, file_id: &str) -> Vec<RttmEntry> {
        let round_ms = |x: f64| (x * 1000.0).round() / 1000.0;
        self.segments
            .iter()
            .filter_map(|s| {
                let c = &self.clusters[s.cluster?];
                let speaker = match c.speaker {
                    Some(id) => format!("spk{id}"),
                    None => format!("cluster{}", c.cluster_id),
                };
                Some(RttmEntry {
                    file_id: file_id.to_string(),
                    onset_sec: round_ms(s.start_sec),
                    duration_sec: round_ms(s.end_sec - s.start_sec),
                    speaker,
                })
            })
            .collect()
    }
}

/// Change points, segments and clusters of one recording.
pub fn diarize_analysis(
    analysis: &Analysis,
    source_id: &str,
    duration_sec: f64,
    cfg: &PipelineConfig,
    identifier: Option<&mut Identifier>,
    truth: Option<&GroundTruth>,
) -> Result<DiarizationResult> {
    let seg_counter = ComputeCounter::new();
    let points = segment(
        &analysis.features,
        &analysis.silences,
        &cfg.segmentation,
        &seg_counter,
    )
    .stage(Stage::Segmentation)?;

    let boundaries: Vec<usize> = points.points.iter().map(|p| p.frame_index).collect();
    let all_segments = segments_between(&analysis.features, &boundaries, &analysis.excluded);
    let segments: Vec<Segment> = all_segments.into_iter().filter(|s| !s.is_empty()).collect();

    let cluster_counter = ComputeCounter::new();
    let cluster_set = if segments.is_empty() {
        ClusterSet {
            clusters: Vec::new(),
            noise: Vec::new(),
            merge_trace: Vec::new(),
        }
    } else {
        cluster_segments(
            &segments,
            &cfg.clustering.bic,
            cfg.clustering.min_segment_frames,
            &cluster_counter,
        )
        .stage(Stage::Clustering)?
    };

    let mut summaries: Vec<ClusterSummary> = cluster_set
        .clusters
        .iter()
        .enumerate()
        .map(|(cluster_id, members)| ClusterSummary {
            cluster_id,
            segments: members.clone(),
            speaker: None,
            confidence: None,
            similarity: None,
            updated: false,
            true_speaker: truth.and_then(|t| majority_speaker(analysis, &segments, members, t)),
        })
        .collect();

    let mut identifier_invocations = 0;
    if let Some(id) = identifier {
        let labels = label_clusters(id, &cluster_set, &segments, &cfg.identify)?;
        identifier_invocations = labels.len();
        for (s, l) in summaries.iter_mut().zip(labels) {
            s.speaker = Some(l.speaker);
            s.confidence = Some(l.confidence);
            s.similarity = l.similarity;
            s.updated = l.updated;
        }
    }

    let assignment = cluster_set.assignment(segments.len());
    let segment_summaries = segments
        .iter()
        .zip(&assignment)
        .map(|(s, &cluster)| SegmentSummary {
            start_frame: s.start_frame,
            end_frame: s.end_frame,
            start_sec: analysis.frame_time(s.start_frame),
            end_sec: analysis.frame_time(s.end_frame),
            speech_frames: s.len(),
            cluster,
        })
        .collect();

    let counters = seg_counter.snapshot();
    let report = match truth {
        Some(t) => Some(score(&points.points, &summaries, t, counters, cfg).stage(Stage::Metrics)?),
        None => None,
    };

    Ok(DiarizationResult {
        source_id: source_id.to_string(),
        method: cfg.segmentation.method,
        duration_sec,
        silences: analysis.silences.clone(),
        change_points: points.points,
        segments: segment_summaries,
        clusters: summaries,
        counters,
        clustering_counters: cluster_counter.snapshot(),
        identifier_invocations,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterLabel {
    pub speaker: usize,
    pub confidence: f64,
    pub similarity: Option<f64>,
    pub updated: bool,
}

/// One identifier call per cluster, with the gated online update when it is
/// enabled and the identifier carries a bank.
pub fn label_clusters(
    id: &mut Identifier,
    clusters: &ClusterSet,
    segments: &[Segment],
    cfg: &IdentifyConfig,
) -> Result<Vec<ClusterLabel>> {
    if let (Some(bank), true) = (&mut id.bank, cfg.online_update) {
        let mut opt = Adam::new(id.model.params.len());
        let decisions = online_update(
            &mut id.model,
            clusters,
            segments,
            bank,
            &cfg.online,
            &mut opt,
        )
        .stage(Stage::Identification)?;
        return Ok(decisions
            .into_iter()
            .map(|d| ClusterLabel {
                speaker: d.speaker,
                confidence: d.confidence,
                similarity: d.similarity,
                updated: d.updated,
            })
            .collect());
    }
    clusters
        .clusters
        .iter()
        .map(|members| {
            let rows: Vec<&[f64]> = members
                .iter()
                .flat_map(|&m| segments[m].rows.iter().copied())
                .collect();
            let (speaker, confidence) =
                predict_cluster(&id.model, &rows).stage(Stage::Identification)?;
            Ok(ClusterLabel {
                speaker,
                confidence,
                similarity: None,
                updated: false,
            })
        })
        .collect()
}

pub fn run_pipeline(
    audio: &AudioSignal,
    cfg: &PipelineConfig,
    identifier: Option<&mut Identifier>,
    truth: Option<&GroundTruth>,
) -> Result<DiarizationResult> {
    cfg.validate(audio.sample_rate_hz)?;
    let analysis = analyze(audio, cfg)?;
    diarize_analysis(
        &analysis,
        &audio.source_id,
        audio.duration_sec(),
        cfg,
        identifier,
        truth,
    )
}

fn majority_speaker(
    analysis: &Analysis,
    segments: &[Segment],
    members: &[usize],
    truth: &GroundTruth,
) -> Option<usize> {
    let mut votes: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for &m in members {
        let seg = &segments[m];
        for f in seg.start_frame..seg.end_frame {
            if analysis.excluded.get(f).copied().unwrap_or(false) {
                continue;
            }
            if let Some(s) = truth.speaker_at(analysis.features.frame_times_sec[f]) {
                *votes.entry(s).or_default() += 1;
            }
        }
    }
    // highest count, lowest id on ties
    votes
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(s, _)| s)
}

fn score(
    points: &[ChangePoint],
    clusters: &[ClusterSummary],
    truth: &GroundTruth,
    counters: CounterSnapshot,
    cfg: &PipelineConfig,
) -> Result<MetricsReport> {
    let detected: Vec<f64> = points.iter().map(|p| p.time_sec).collect();
    let m = match_change_points(&truth.change_points_sec, &detected, cfg.collar_sec)?;
    let s = seg_scores(&m);
    let c = corpus_scores(std::slice::from_ref(&m))?;
    let labelled: Vec<&ClusterSummary> = clusters
        .iter()
        .filter(|c| c.true_speaker.is_some())
        .collect();
    let id = if clusters.iter().any(|c| c.speaker.is_some()) {
        let preds: Vec<Option<usize>> = labelled.iter().map(|c| c.speaker).collect();
        let truths: Vec<usize> = labelled.iter().filter_map(|c| c.true_speaker).collect();
        Some(id_scores(&preds, &truths)?)
    } else {
        None
    };
    Ok(MetricsReport {
        fdr: s.fdr,
        mdr: s.mdr,
        f_seg: s.f_seg,
        purity: c.purity,
        coverage: c.coverage,
        far: id.map(|i| i.far),
        frr: id.map(|i| i.frr),
        f_id: id.map(|i| i.f_id),
        delta_bic_count: counters.delta_bic_count,
        t2_count: counters.t2_count,
        covariance_count: counters.covariance_count,
        config: cfg.clone(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RttmEntry {
    pub file_id: String,
    pub onset_sec: f64,
    pub duration_sec: f64,
    pub speaker: String,
}

pub fn export_rttm<W: Write>(entries: &[RttmEntry], mut out: W) -> Result<()> {
    for e in entries {
        writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            e.file_id, e.onset_sec, e.duration_sec, e.speaker
        )?;
    }
    Ok(())
}

pub fn parse_rttm<R: BufRead>(input: R) -> Result<Vec<RttmEntry>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: &str| Error::MalformedRttm {
            line: i + 1,
            reason: reason.to_string(),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 || fields[0] != "SPEAKER" {
            return Err(bad("expected 10 fields starting with SPEAKER"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad time value"));
        out.push(RttmEntry {
            file_id: fields[1].to_string(),
            onset_sec: num(fields[3])?,
            duration_sec: num(fields[4])?,
            speaker: fields[7].to_string(),
        });
    }
    Ok(out)
}

/// Times from a change-point CSV with a `time_sec` column.
pub fn read_change_point_times<R: std::io::Read>(input: R) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(input);
    let col = r
        .headers()?
        .iter()
        .position(|h| h == "time_sec")
        .ok_or_else(|| Error::InvalidConfig("change-point csv has no time_sec column".into()))?;
    let mut times = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t = rec
            .get(col)
            .and_then(|v| v.parse::<f64>().ok())
            .ok_or_else(|| Error::InvalidConfig(format!("bad time_sec value in {rec:?}")))?;
        times.push(t);
    }
    Ok(times)
}

/// A recording prepared once and reused across configurations.
#[derive(Debug, Clone)]
pub struct PreparedConversation {
    pub analysis: Analysis,
    pub truth: GroundTruth,
}

pub fn prepare_corpus(
    corpus: &[(AudioSignal, GroundTruth)],
    cfg: &PipelineConfig,
) -> Result<Vec<PreparedConversation>> {
    corpus
        .iter()
        .map(|(audio, truth)| {
            Ok(PreparedConversation {
                analysis: analyze(audio, cfg)?,
                truth: truth.clone(),
            })
        })
        .collect()
}

/// Segmentation quality of one configuration over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentationEval {
    pub window: usize,
    pub stride: f64,
    pub method: Method,
    pub averages: AveragedSegScores,
    pub purity: f64,
    pub coverage: f64,
    /// Totals over the corpus.
    pub counters: CounterSnapshot,
    pub per_conversation: Vec<CounterSnapshot>,
    pub matches: Vec<MatchResult>,
}

pub fn evaluate_segmentation(
    corpus: &[PreparedConversation],
    seg: &SegConfig,
    collar_sec: f64,
) -> Result<SegmentationEval> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scores = Vec::with_capacity(corpus.len());
    let mut matches = Vec::with_capacity(corpus.len());
    let mut per_conversation = Vec::with_capacity(corpus.len());
    let mut total = CounterSnapshot::default();
    for conv in corpus {
        let counter = ComputeCounter::new();
        let points = segment(
            &conv.analysis.features,
            &conv.analysis.silences,
            seg,
            &counter,
        )
        .stage(Stage::Segmentation)?;
        let detected: Vec<f64> = points.points.iter().map(|p| p.time_sec).collect();
        let m = match_change_points(&conv.truth.change_points_sec, &detected, collar_sec)
            .stage(Stage::Metrics)?;
        scores.push(seg_scores(&m));
        matches.push(m);
        let snap = counter.snapshot();
        per_conversation.push(snap);
        total = total + snap;
    }
    let averages = average_seg_scores(&scores)?;
    let pc = corpus_scores(&matches)?;
    Ok(SegmentationEval {
        window: seg.window_frames,
        stride: seg.stride_fraction,
        method: seg.method,
        averages,
        purity: pc.purity,
        coverage: pc.coverage,
        counters: total,
        per_conversation,
        matches,
    })
}

pub const SWEEP_WINDOWS: [usize; 3] = [100, 125, 150];
pub const SWEEP_STRIDES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];

/// Every window × stride × method combination on the same corpus.
pub fn sweep(
    corpus: &[PreparedConversation],
    base: &PipelineConfig,
    windows: &[usize],
    strides: &[f64],
) -> Result<Vec<SegmentationEval>> {
    let mut rows = Vec::new();
    for &window in windows {
        for &stride in strides {
            for method in [Method::Bic, Method::T2] {
                let seg = SegConfig {
                    window_frames: window,
                    stride_fraction: stride,
                    method,
                    ..base.segmentation.clone()
                };
                rows.push(evaluate_segmentation(corpus, &seg, base.collar_sec)?);
            }
        }
    }
    Ok(rows)
}

/// CSV `window,stride,method,fdr,mdr,f_score,mean_f,purity,coverage,delta_bic_count,t2_count,covariance_count`,
/// where `f_score` is the F of the averaged rates and `mean_f` the average
/// of per-conversation F.
pub fn write_sweep_csv<W: Write>(rows: &[SegmentationEval], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "window",
        "stride",
        "method",
        "fdr",
        "mdr",
        "f_score",
        "mean_f",
        "purity",
        "coverage",
        "delta_bic_count",
        "t2_count",
        "covariance_count",
    ])?;
    for r in rows {
        w.write_record(&[
            r.window.to_string(),
            format!("{:.1}", r.stride),
            r.method.to_string(),
            format!("{:.4}", r.averages.fdr),
            format!("{:.4}", r.averages.mdr),
            format!("{:.4}", r.averages.f_of_means),
            format!("{:.4}", r.averages.mean_of_f),
            format!("{:.4}", r.purity),
            format!("{:.4}", r.coverage),
            r.counters.delta_bic_count.to_string(),
            r.counters.t2_count.to_string(),
            r.counters.covariance_count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Labelled MFCC frames for every speaker in `pool`: `utterances`
/// independent recordings of `utterance_sec` each.
pub fn speaker_frames(
    pool: &[SpeakerProfile],
    variation: &Variation,
    utterances: usize,
    utterance_sec: f64,
    mfcc: &MfccConfig,
    sample_rate_hz: u32,
    seed: u64,
) -> Result<LabeledFrames> {
    let mut out = LabeledFrames::default();
    for profile in pool {
        for u in 0..utterances {
            let mut rng = seed::stream(seed, Purpose::Corpus, (profile.id * 10_000 + u) as u32);
            let samples = synth_speech(profile, variation, utterance_sec, sample_rate_hz, &mut rng);
            let audio = AudioSignal::new(samples, sample_rate_hz, format!("spk{}-{u}", profile.id));
            let (_, features) = extract_features(&audio, mfcc).stage(Stage::Frontend)?;
            for row in features.rows() {
                out.push(row.to_vec(), profile.id);
            }
        }
    }
    Ok(out)
}

/// Synthetic single-speaker recordings used to train and seed the
/// identifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeakerCorpusConfig {
    pub speakers: usize,
    pub utterances: usize,
    pub utterance_sec: f64,
    pub sample_rate_hz: u32,
    pub variation: Variation,
    pub seed: u64,
}

impl Default for SpeakerCorpusConfig {
    fn default() -> Self {
        Self {
            speakers: 8,
            utterances: 4,
            utterance_sec: 2.0,
            sample_rate_hz: 16_000,
            variation: Variation::default(),
            seed: 0,
        }
    }
}

impl SpeakerCorpusConfig {
    pub fn pool(&self) -> Vec<SpeakerProfile> {
        speaker_pool(self.speakers, self.seed)
    }

    pub fn frames(&self, mfcc: &MfccConfig) -> Result<LabeledFrames> {
        speaker_frames(
            &self.pool(),
            &self.variation,
            self.utterances,
            self.utterance_sec,
            mfcc,
            self.sample_rate_hz,
            self.seed,
        )
    }
}

pub fn arch_for(frames: &LabeledFrames, hidden_sizes: &[usize]) -> Result<ModelArch> {
    let input_dim = frames
        .rows
        .first()
        .map(|r| r.len())
        .ok_or(Error::EmptyData)?;
    let num_classes = frames.labels.iter().max().map_or(0, |&m| m + 1);
    let arch = ModelArch::new(input_dim, hidden_sizes.to_vec(), num_classes);
    arch.validate()?;
    Ok(arch)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FedsimReport {
    pub mode: Mode,
    pub num_clients: usize,
    pub group_size: usize,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub history: Vec<RoundRecord>,
    pub federated: FederatedConfig,
    pub corpus: SpeakerCorpusConfig,
}

impl FedsimReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Trains the identifier across a simulated device network on the
/// synthetic speaker corpus.
pub fn run_fedsim(
    corpus: &SpeakerCorpusConfig,
    cfg: &FederatedConfig,
    mfcc: &MfccConfig,
) -> Result<(FedsimReport, FederatedNetworkState)> {
    let frames = corpus.frames(mfcc)?;
    let arch = arch_for(&frames, &cfg.hidden_sizes).stage(Stage::Identification)?;
    let state = simulate(&frames, arch, cfg).stage(Stage::Identification)?;
    let (final_accuracy, final_loss) = match state.history.last() {
        Some(r) => (r.accuracy, r.loss),
        None => state.evaluate().stage(Stage::Identification)?,
    };
    let report = FedsimReport {
        mode: cfg.mode,
        num_clients: state.clients.len(),
        group_size: cfg.group_size,
        final_accuracy,
        final_loss,
        history: state.history.clone(),
        federated: cfg.clone(),
        corpus: corpus.clone(),
    };
    Ok((report, state))
}

/// Identifier with an embedding bank seeded from labelled frames.
pub fn identifier_with_bank(
    model: ModelWeights,
    frames: &LabeledFrames,
    chunk: usize,
) -> Result<Identifier> {
    let bank = seed_bank(
        &model,
        &frames.views(),
        &frames.labels,
        chunk,
        DEFAULT_BANK_CAP,
    )
    .stage(Stage::Identification)?;
    Ok(Identifier {
        model,
        bank: Some(bank),
    })
}
