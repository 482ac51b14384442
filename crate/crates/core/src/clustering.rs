//! Greedy agglomerative clustering of speech segments.
//!
//! Two clusters are merged when the ΔBIC between their pooled rows is
//! negative, i.e. one Gaussian explains them better than two. The pair with
//! the lowest cost is merged first until every remaining pair has a
//! non-negative cost.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::divergence::{delta_bic, BicConfig, ComputeCounter};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;

pub const DEFAULT_MIN_SEGMENT_FRAMES: usize = 25;

/// A stretch of frames between two change points. `rows` holds only the
/// frames that carry speech; `end_frame` is exclusive.
#[derive(Debug, Clone)]
pub struct Segment<'a> {
    pub start_frame: usize,
    pub end_frame: usize,
    pub rows: Vec<&'a [f64]>,
}

impl<'a> Segment<'a> {
    pub fn new(
        features: &'a FeatureMatrix,
        start_frame: usize,
        end_frame: usize,
        excluded: &[bool],
    ) -> Self {
        let rows = (start_frame..end_frame)
            .filter(|&f| !excluded.get(f).copied().unwrap_or(false))
            .map(|f| features.row(f))
            .collect();
        Self {
            start_frame,
            end_frame,
            rows,
        }
    }

    pub fn from_rows(start_frame: usize, end_frame: usize, rows: Vec<&'a [f64]>) -> Self {
        Self {
            start_frame,
            end_frame,
            rows,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Splits `[0, num_frames)` at the given boundaries into segments.
pub fn segments_between<'a>(
    features: &'a FeatureMatrix,
    boundaries: &[usize],
    excluded: &[bool],
) -> Vec<Segment<'a>> {
    let n = features.len();
    let mut edges = vec![0];
    edges.extend(boundaries.iter().copied().filter(|&b| b > 0 && b < n));
    edges.push(n);
    edges.dedup();
    edges
        .windows(2)
        .map(|w| Segment::new(features, w[0], w[1], excluded))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSet {
    /// Segment indices per cluster, ascending.
    pub clusters: Vec<Vec<usize>>,
    /// Segments too short to cluster.
    pub noise: Vec<usize>,
    /// Merges in the order they happened; `a` and `b` are the cluster slots
    /// at merge time, with the merged cluster kept in slot `a`.
    pub merge_trace: Vec<Merge>,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Cluster index of every segment; `None` for noise.
    pub fn assignment(&self, num_segments: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_segments];
        for (c, members) in self.clusters.iter().enumerate() {
            for &s in members {
                out[s] = Some(c);
            }
        }
        out
    }

    /// CSV `segment_start_sec,segment_end_sec,cluster_id`; noise segments get
    /// an empty cluster id.
    pub fn write_csv<W: Write>(&self, out: W, segments: &[Segment], hop_sec: f64) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["segment_start_sec", "segment_end_sec", "cluster_id"])?;
        for (seg, cluster) in segments.iter().zip(self.assignment(segments.len())) {
            w.write_record(&[
                format!("{:.3}", seg.start_frame as f64 * hop_sec),
                format!("{:.3}", seg.end_frame as f64 * hop_sec),
                cluster.map(|c| c.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn pooled<'a>(segments: &[Segment<'a>], members: &[usize]) -> Vec<&'a [f64]> {
    members
        .iter()
        .flat_map(|&s| segments[s].rows.iter().copied())
        .collect()
}

/// ΔBIC between the pooled rows of two clusters.
pub fn merge_cost(
    a: &[&[f64]],
    b: &[&[f64]],
    cfg: &BicConfig,
    counter: &ComputeCounter,
) -> Result<f64> {
    delta_bic(a, b, cfg, counter)
}

pub fn cluster_segments(
    segments: &[Segment],
    cfg: &BicConfig,
    min_segment_frames: usize,
    counter: &ComputeCounter,
) -> Result<ClusterSet> {
    if segments.is_empty() {
        return Err(Error::NoSegments);
    }
    let (kept, noise): (Vec<usize>, Vec<usize>) =
        (0..segments.len()).partition(|&i| segments[i].len() >= min_segment_frames.max(2));
    let mut slots: Vec<Option<Vec<usize>>> = kept.iter().map(|&i| Some(vec![i])).collect();
    let m = slots.len();

    let pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
        .collect();
    let initial: Vec<f64> = pairs
        .par_iter()
        .map(|&(a, b)| {
            merge_cost(
                &pooled(segments, &[kept[a]]),
                &pooled(segments, &[kept[b]]),
                cfg,
                counter,
            )
        })
        .collect::<Result<_>>()?;
    let mut cost = vec![vec![f64::INFINITY; m]; m];
    for (&(a, b), c) in pairs.iter().zip(initial) {
        cost[a][b] = c;
    }

    let mut merge_trace = Vec::new();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for a in 0..m {
            if slots[a].is_none() {
                continue;
            }
            for b in a + 1..m {
                if slots[b].is_none() {
                    continue;
                }
                let c = cost[a][b];
                if best.is_none_or(|(_, _, bc)| c < bc) {
                    best = Some((a, b, c));
                }
            }
        }
        let Some((a, b, c)) = best.filter(|&(_, _, c)| c < 0.0) else {
            break;
        };
        let absorbed = slots[b].take().expect("live slot");
        let merged = slots[a].as_mut().expect("live slot");
        merged.extend(absorbed);
        merged.sort_unstable();
        merge_trace.push(Merge { a, b, cost: c });

        let merged_rows = pooled(segments, merged);
        let others: Vec<usize> = (0..m).filter(|&o| o != a && slots[o].is_some()).collect();
        let updated: Vec<f64> = others
            .par_iter()
            .map(|&o| {
                let other = pooled(segments, slots[o].as_ref().expect("live slot"));
                if o < a {
                    merge_cost(&other, &merged_rows, cfg, counter)
                } else {
                    merge_cost(&merged_rows, &other, cfg, counter)
                }
            })
            .collect::<Result<_>>()?;
        for (&o, c) in others.iter().zip(updated) {
            let (lo, hi) = if o < a { (o, a) } else { (a, o) };
            cost[lo][hi] = c;
        }
    }

    let clusters = slots.into_iter().flatten().collect();
    Ok(ClusterSet {
        clusters,
        noise,
        merge_trace,
    })
}
