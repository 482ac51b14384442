//! Segmentation and identification scores.

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_COLLAR_SEC: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub true_points: Vec<f64>,
    pub detected_points: Vec<f64>,
    /// `(true, detected)` pairs in detection order.
    pub matched_pairs: Vec<(f64, f64)>,
    pub collar_sec: f64,
}

impl MatchResult {
    pub fn matched(&self) -> usize {
        self.matched_pairs.len()
    }
}

fn is_sorted(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] <= w[1])
}

/// Walks the detections in time order and pairs each with the nearest
/// still-unmatched true point within the collar; the earlier true point wins
/// a distance tie.
pub fn match_change_points(
    true_points: &[f64],
    detected: &[f64],
    collar_sec: f64,
) -> Result<MatchResult> {
    if !is_sorted(true_points) || !is_sorted(detected) {
        return Err(Error::UnsortedInput);
    }
    let mut used = vec![false; true_points.len()];
    let mut matched_pairs = Vec::new();
    for &d in detected {
        let mut best: Option<(usize, f64)> = None;
        for (i, &t) in true_points.iter().enumerate() {
            let dist = (t - d).abs();
            if used[i] || dist > collar_sec {
                continue;
            }
            if best.is_none_or(|(_, bd)| dist < bd) {
                best = Some((i, dist));
            }
        }
        if let Some((i, _)) = best {
            used[i] = true;
            matched_pairs.push((true_points[i], d));
        }
    }
    Ok(MatchResult {
        true_points: true_points.to_vec(),
        detected_points: detected.to_vec(),
        matched_pairs,
        collar_sec,
    })
}

/// Harmonic mean of `1 − a` and `1 − b`; zero when both are one.
pub fn harmonic_score(a: f64, b: f64) -> f64 {
    let denom = 2.0 - a - b;
    if denom <= 0.0 {
        return 0.0;
    }
    2.0 * (1.0 - a) * (1.0 - b) / denom
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SegScores {
    pub fdr: f64,
    pub mdr: f64,
    pub f_seg: f64,
}

impl SegScores {
    pub fn from_rates(fdr: f64, mdr: f64) -> Self {
        Self {
            fdr,
            mdr,
            f_seg: harmonic_score(fdr, mdr),
        }
    }
}

pub fn seg_scores(m: &MatchResult) -> SegScores {
    let hit = m.matched() as f64;
    let detected = m.detected_points.len() as f64;
    let truth = m.true_points.len() as f64;
    let fdr = if detected == 0.0 {
        0.0
    } else {
        (detected - hit) / detected
    };
    let mdr = if truth == 0.0 {
        0.0
    } else {
        (truth - hit) / truth
    };
    SegScores::from_rates(fdr, mdr)
}

/// Averages over conversations, reported both ways: F of the averaged
/// rates and the average of per-conversation F.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AveragedSegScores {
    pub fdr: f64,
    pub mdr: f64,
    pub f_of_means: f64,
    pub mean_of_f: f64,
}

pub fn average_seg_scores(scores: &[SegScores]) -> Result<AveragedSegScores> {
    if scores.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let n = scores.len() as f64;
    let fdr = scores.iter().map(|s| s.fdr).sum::<f64>() / n;
    let mdr = scores.iter().map(|s| s.mdr).sum::<f64>() / n;
    Ok(AveragedSegScores {
        fdr,
        mdr,
        f_of_means: harmonic_score(fdr, mdr),
        mean_of_f: scores.iter().map(|s| s.f_seg).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Tally {
    pub matched: usize,
    pub detected: usize,
    pub truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusScores {
    pub purity: f64,
    pub coverage: f64,
    pub tallies: Vec<Tally>,
}

/// Purity `Σ matched / Σ detected` and coverage `Σ matched / Σ true` over all
/// conversations. An empty denominator scores 1.
pub fn corpus_scores(results: &[MatchResult]) -> Result<CorpusScores> {
    if results.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let tallies: Vec<Tally> = results
        .iter()
        .map(|m| Tally {
            matched: m.matched(),
            detected: m.detected_points.len(),
            truth: m.true_points.len(),
        })
        .collect();
    let matched: usize = tallies.iter().map(|t| t.matched).sum();
    let detected: usize = tallies.iter().map(|t| t.detected).sum();
    let truth: usize = tallies.iter().map(|t| t.truth).sum();
    let ratio = |num: usize, den: usize| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    Ok(CorpusScores {
        purity: ratio(matched, detected),
        coverage: ratio(matched, truth),
        tallies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdScores {
    pub far: f64,
    pub frr: f64,
    pub f_id: f64,
}

/// Cluster-level identification scores. `predictions[i]` is the speaker
/// assigned to cluster `i`, or `None` if the cluster was left unassigned;
/// `truths[i]` is its true speaker.
///
/// FAR is the share of assignments naming the wrong speaker; FRR is the
/// share of clusters that did not receive their true speaker.
pub fn id_scores(predictions: &[Option<usize>], truths: &[usize]) -> Result<IdScores> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    let assigned = predictions.iter().filter(|p| p.is_some()).count();
    let correct = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| **p == Some(**t))
        .count();
    let far = if assigned == 0 {
        0.0
    } else {
        (assigned - correct) as f64 / assigned as f64
    };
    let frr = if truths.is_empty() {
        0.0
    } else {
        (truths.len() - correct) as f64 / truths.len() as f64
    };
    Ok(IdScores {
        far,
        frr,
        f_id: harmonic_score(far, frr),
    })
}
