//! Online hardest-negative and hardest-positive selection within a batch.
//!
//! Rows are anchors and columns are candidates. The video-to-text direction uses
//! the video-by-caption matrices as-is; text-to-video uses their transposes, so
//! every selection rule below is written once, row-wise.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorKind {
    Video,
    Caption,
}

impl AnchorKind {
    pub fn flipped(self) -> Self {
        match self {
            AnchorKind::Video => AnchorKind::Caption,
            AnchorKind::Caption => AnchorKind::Video,
        }
    }
}

/// Cosine similarities between anchors (rows) and candidates (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    values: Matrix,
    anchor_kind: AnchorKind,
}

impl SimilarityMatrix {
    pub fn new(values: Matrix, anchor_kind: AnchorKind) -> Result<Self> {
        if values.as_slice().iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::invalid("similarity outside [-1, 1]"));
        }
        Ok(Self { values, anchor_kind })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn anchor_kind(&self) -> AnchorKind {
        self.anchor_kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn transpose(&self) -> Self {
        Self { values: self.values.transpose(), anchor_kind: self.anchor_kind.flipped() }
    }
}

/// Relevance values between anchors (rows) and candidates (columns), all in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceMatrix(Matrix);

impl RelevanceMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("relevance outside [0, 1]"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Matrix {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Relevance threshold separating positives (`>= tau`) from negatives (`< tau`).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Tau(f64);

impl Tau {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            Err(Error::invalid(format!("tau {value} outside [0, 1]")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Hardest non-groundtruth candidate as negative, groundtruth as positive.
    Standard,
    /// Hardest negative among candidates with relevance below tau.
    Ran,
    /// RAN negatives plus the least similar candidate with relevance at least tau as positive.
    Ranp,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Standard, Strategy::Ran, Strategy::Ranp];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::Ran => "ran",
            Strategy::Ranp => "ranp",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "standard" | "hn" => Ok(Strategy::Standard),
            "ran" => Ok(Strategy::Ran),
            "ranp" => Ok(Strategy::Ranp),
            other => Err(Error::invalid(format!("unknown strategy '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedTriplet {
    pub anchor_index: usize,
    pub negative_index: Option<usize>,
    pub positive_index: Option<usize>,
    pub skipped_negative: bool,
    pub skipped_positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinedTriplets {
    pub strategy: Strategy,
    pub rows: Vec<MinedTriplet>,
}

impl MinedTriplets {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn skipped_negatives(&self) -> usize {
        self.rows.iter().filter(|r| r.skipped_negative).count()
    }

    pub fn skip_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.skipped_negatives() as f64 / self.rows.len() as f64
        }
    }

    /// Relevance of each anchor to its mined negative, skipping anchors without one.
    pub fn negative_relevances(&self, rel: &RelevanceMatrix) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|r| r.negative_index.map(|j| rel.get(r.anchor_index, j)))
            .collect()
    }
}

fn argmax_where(row: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in row.iter().enumerate() {
        if keep(j) && best.is_none_or(|b| s > row[b]) {
            best = Some(j);
        }
    }
    best
}

fn argmin_where(row: &[f64], keep: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &s) in row.iter().enumerate() {
        if keep(j) && best.is_none_or(|b| s < row[b]) {
            best = Some(j);
        }
    }
    best
}

fn check_gt(len: usize, gt: usize) -> Result<()> {
    if len < 2 {
        return Err(Error::NoCandidate(format!("row of length {len} has no non-groundtruth candidate")));
    }
    if gt >= len {
        return Err(Error::invalid(format!("groundtruth index {gt} out of range for row of length {len}")));
    }
    Ok(())
}

fn check_lengths(sim_row: &[f64], rel_row: &[f64]) -> Result<()> {
    if sim_row.len() != rel_row.len() {
        return Err(Error::invalid(format!(
            "similarity row has {} entries but relevance row has {}",
            sim_row.len(),
            rel_row.len()
        )));
    }
    Ok(())
}

/// Most similar candidate other than the groundtruth. Ties go to the lowest index.
pub fn hardest_negative_standard(sim_row: &[f64], gt_index: usize) -> Result<usize> {
    check_gt(sim_row.len(), gt_index)?;
    Ok(argmax_where(sim_row, |j| j != gt_index).expect("row has at least two entries"))
}

/// Most similar candidate whose relevance is strictly below `tau`.
///
/// `gt_index`, when given, is removed from the pool even if its own relevance
/// falls below `tau`. Returns `None` when every candidate is relevant.
pub fn hardest_negative_ran(
    sim_row: &[f64],
    rel_row: &[f64],
    tau: Tau,
    gt_index: Option<usize>,
) -> Result<Option<usize>> {
    check_lengths(sim_row, rel_row)?;
    let t = tau.value();
    Ok(argmax_where(sim_row, |j| rel_row[j] < t && Some(j) != gt_index))
}

/// Least similar candidate other than the groundtruth, regardless of relevance.
pub fn hardest_positive_naive(sim_row: &[f64], gt_index: usize) -> Result<usize> {
    check_gt(sim_row.len(), gt_index)?;
    Ok(argmin_where(sim_row, |j| j != gt_index).expect("row has at least two entries"))
}

/// Least similar candidate whose relevance is at least `tau`. The groundtruth stays
/// in the pool, so it is returned when it is the only relevant candidate.
pub fn hardest_positive_ranp(sim_row: &[f64], rel_row: &[f64], tau: Tau) -> Result<Option<usize>> {
    check_lengths(sim_row, rel_row)?;
    let t = tau.value();
    Ok(argmin_where(sim_row, |j| rel_row[j] >= t))
}

/// Applies the row-wise selection rule of `strategy` to every anchor.
pub fn mine_batch(
    sim: &SimilarityMatrix,
    rel: &RelevanceMatrix,
    gt: &[usize],
    tau: Tau,
    strategy: Strategy,
) -> Result<MinedTriplets> {
    if sim.shape() != rel.shape() {
        return Err(Error::invalid(format!(
            "similarity shape {:?} differs from relevance shape {:?}",
            sim.shape(),
            rel.shape()
        )));
    }
    let (n_anchors, n_candidates) = sim.shape();
    if gt.len() != n_anchors {
        return Err(Error::invalid(format!(
            "groundtruth map has {} entries for {n_anchors} anchors",
            gt.len()
        )));
    }
    let mut rows = Vec::with_capacity(n_anchors);
    for (i, &g) in gt.iter().enumerate() {
        if g >= n_candidates {
            return Err(Error::invalid(format!("groundtruth index {g} out of range")));
        }
        let s = sim.row(i);
        let r = rel.row(i);
        let (negative, positive) = match strategy {
            Strategy::Standard => {
                let neg = match hardest_negative_standard(s, g) {
                    Ok(j) => Some(j),
                    Err(Error::NoCandidate(_)) => None,
                    Err(e) => return Err(e),
                };
                (neg, Some(g))
            }
            Strategy::Ran => (hardest_negative_ran(s, r, tau, Some(g))?, Some(g)),
            Strategy::Ranp => {
                (hardest_negative_ran(s, r, tau, Some(g))?, hardest_positive_ranp(s, r, tau)?)
            }
        };
        rows.push(MinedTriplet {
            anchor_index: i,
            negative_index: negative,
            positive_index: positive,
            skipped_negative: negative.is_none(),
            skipped_positive: positive.is_none(),
        });
    }
    Ok(MinedTriplets { strategy, rows })
}

/// Mining in both directions for a batch of paired items, where video `i` is
/// paired with caption `i`. Returns `(video_to_text, text_to_video)`.
pub fn mine_bidirectional(
    sim_v2t: &SimilarityMatrix,
    rel_v2t: &RelevanceMatrix,
    tau: Tau,
    strategy: Strategy,
) -> Result<(MinedTriplets, MinedTriplets)> {
    let (rows, cols) = sim_v2t.shape();
    if rows != cols {
        return Err(Error::invalid("paired batch must be square"));
    }
    let gt: Vec<usize> = (0..rows).collect();
    let v2t = mine_batch(sim_v2t, rel_v2t, &gt, tau, strategy)?;
    let t2v = mine_batch(&sim_v2t.transpose(), &rel_v2t.transpose(), &gt, tau, strategy)?;
    Ok((v2t, t2v))
}
