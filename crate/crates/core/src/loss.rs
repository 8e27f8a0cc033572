//! Hinge triplet terms over mined triplets and the per-batch loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mining::{MinedTriplets, SimilarityMatrix, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Margins {
    pub delta_n: f64,
    pub delta_p: f64,
}

impl Margins {
    pub fn new(delta_n: f64, delta_p: f64) -> Result<Self> {
        if !(delta_n >= 0.0 && delta_p >= 0.0 && delta_n.is_finite() && delta_p.is_finite()) {
            return Err(Error::invalid(format!("margins must be finite and >= 0, got ({delta_n}, {delta_p})")));
        }
        Ok(Self { delta_n, delta_p })
    }
}

impl Default for Margins {
    fn default() -> Self {
        Self { delta_n: 0.2, delta_p: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_n_sum: f64,
    pub l_p_sum: f64,
    pub active_negatives: usize,
    pub active_positives: usize,
    pub skipped: usize,
    pub batch_size: usize,
}

/// `max(0, delta_n + s_neg - s_gt)`.
pub fn triplet_term_negative(s_gt: f64, s_neg: f64, delta_n: f64) -> f64 {
    (delta_n + s_neg - s_gt).max(0.0)
}

/// `max(0, delta_p + s_neg - s_pos)`.
pub fn triplet_term_positive(s_pos: f64, s_neg: f64, delta_p: f64) -> f64 {
    (delta_p + s_neg - s_pos).max(0.0)
}

struct Resolved {
    anchor: usize,
    gt: usize,
    negative: usize,
    positive: Option<usize>,
}

/// Validates mined indices against the matrix and yields the usable rows.
/// Rows without a negative are counted as skipped.
fn resolve(
    sim: &SimilarityMatrix,
    mined: &MinedTriplets,
    gt: &[usize],
) -> Result<(Vec<Resolved>, usize)> {
    let (n_anchors, n_candidates) = sim.shape();
    if mined.len() != n_anchors || gt.len() != n_anchors {
        return Err(Error::invalid(format!(
            "mined triplets ({}) and groundtruth ({}) must cover all {n_anchors} anchors",
            mined.len(),
            gt.len()
        )));
    }
    let in_range = |j: usize| {
        if j < n_candidates {
            Ok(j)
        } else {
            Err(Error::invalid(format!("candidate index {j} out of range ({n_candidates} candidates)")))
        }
    };
    let mut rows = Vec::with_capacity(n_anchors);
    let mut skipped = 0;
    for row in &mined.rows {
        if row.anchor_index >= n_anchors {
            return Err(Error::invalid(format!("anchor index {} out of range", row.anchor_index)));
        }
        let g = in_range(gt[row.anchor_index])?;
        let Some(negative) = row.negative_index else {
            skipped += 1;
            continue;
        };
        let negative = in_range(negative)?;
        let positive = match mined.strategy {
            Strategy::Ranp => row.positive_index.map(in_range).transpose()?,
            Strategy::Standard | Strategy::Ran => None,
        };
        rows.push(Resolved { anchor: row.anchor_index, gt: g, negative, positive });
    }
    Ok((rows, skipped))
}

/// Batch loss for one retrieval direction: the negative term against the
/// groundtruth for every anchor, plus the positive term against the mined
/// positive under RANP, divided by the full batch size.
pub fn batch_loss(
    sim: &SimilarityMatrix,
    mined: &MinedTriplets,
    gt: &[usize],
    margins: Margins,
) -> Result<LossBreakdown> {
    let (rows, skipped) = resolve(sim, mined, gt)?;
    let mut out = LossBreakdown { skipped, batch_size: mined.len(), ..Default::default() };
    for r in &rows {
        let s_neg = sim.get(r.anchor, r.negative);
        let l_n = triplet_term_negative(sim.get(r.anchor, r.gt), s_neg, margins.delta_n);
        out.l_n_sum += l_n;
        if l_n > 0.0 {
            out.active_negatives += 1;
        }
        if let Some(p) = r.positive {
            let l_p = triplet_term_positive(sim.get(r.anchor, p), s_neg, margins.delta_p);
            out.l_p_sum += l_p;
            if l_p > 0.0 {
                out.active_positives += 1;
            }
        }
    }
    if out.batch_size > 0 {
        out.total = (out.l_n_sum + out.l_p_sum) / out.batch_size as f64;
    }
    Ok(out)
}

/// Gradient of [`batch_loss`]'s total with respect to every similarity entry,
/// with the mined indices held fixed. Hinges exactly at zero contribute nothing.
pub fn similarity_gradient(
    sim: &SimilarityMatrix,
    mined: &MinedTriplets,
    gt: &[usize],
    margins: Margins,
) -> Result<Matrix> {
    let (rows, _) = resolve(sim, mined, gt)?;
    let (n_anchors, n_candidates) = sim.shape();
    let mut grad = Matrix::zeros(n_anchors, n_candidates);
    if mined.is_empty() {
        return Ok(grad);
    }
    let scale = 1.0 / mined.len() as f64;
    for r in &rows {
        let s_neg = sim.get(r.anchor, r.negative);
        if margins.delta_n + s_neg - sim.get(r.anchor, r.gt) > 0.0 {
            grad.add_at(r.anchor, r.negative, scale);
            grad.add_at(r.anchor, r.gt, -scale);
        }
        if let Some(p) = r.positive {
            if margins.delta_p + s_neg - sim.get(r.anchor, p) > 0.0 {
                grad.add_at(r.anchor, r.negative, scale);
                grad.add_at(r.anchor, p, -scale);
            }
        }
    }
    Ok(grad)
}

/// Sum of the video-to-text loss and `t2v_weight` times the text-to-video loss.
pub fn bidirectional_loss(
    sim_v2t: &SimilarityMatrix,
    sim_t2v: &SimilarityMatrix,
    mined_v2t: &MinedTriplets,
    mined_t2v: &MinedTriplets,
    margins: Margins,
    t2v_weight: f64,
) -> Result<LossBreakdown> {
    let (r, c) = sim_v2t.shape();
    if sim_t2v.shape() != (c, r) {
        return Err(Error::invalid(format!(
            "text-to-video shape {:?} is not the transpose of {:?}",
            sim_t2v.shape(),
            (r, c)
        )));
    }
    let gt_v2t: Vec<usize> = (0..r).collect();
    let gt_t2v: Vec<usize> = (0..c).collect();
    let a = batch_loss(sim_v2t, mined_v2t, &gt_v2t, margins)?;
    let b = batch_loss(sim_t2v, mined_t2v, &gt_t2v, margins)?;
    Ok(LossBreakdown {
        total: a.total + t2v_weight * b.total,
        l_n_sum: a.l_n_sum + b.l_n_sum,
        l_p_sum: a.l_p_sum + b.l_p_sum,
        active_negatives: a.active_negatives + b.active_negatives,
        active_positives: a.active_positives + b.active_positives,
        skipped: a.skipped + b.skipped,
        batch_size: a.batch_size,
    })
}
