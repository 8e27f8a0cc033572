//! Two-tower linear embedding model with cosine similarity.
//!
//! Each tower is a single projection matrix followed by L2 normalization.
//! Gradients of the bidirectional mined-triplet loss are computed analytically
//! with the mined indices treated as constants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{bidirectional_loss, similarity_gradient, LossBreakdown, Margins};
use crate::matrix::Matrix;
use crate::mining::{AnchorKind, MinedTriplets, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `d_v x d`: video feature to embedding.
    pub w_video: Matrix,
    /// `d_t x d`: caption feature to embedding.
    pub w_text: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub w_video: Matrix,
    pub w_text: Matrix,
}

impl ModelParams {
    /// Uniform initialization in `[-1/sqrt(d_in), 1/sqrt(d_in)]` per tower.
    pub fn init(video_dim: usize, text_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        if video_dim == 0 || text_dim == 0 || embed_dim == 0 {
            return Err(Error::InvalidConfig("model dimensions must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tower = |d_in: usize| {
            let bound = 1.0 / (d_in as f64).sqrt();
            let data = (0..d_in * embed_dim).map(|_| rng.random_range(-bound..=bound)).collect();
            Matrix::from_vec(d_in, embed_dim, data).expect("shape matches")
        };
        let w_video = tower(video_dim);
        let w_text = tower(text_dim);
        Ok(Self { w_video, w_text })
    }

    pub fn video_dim(&self) -> usize {
        self.w_video.rows()
    }

    pub fn text_dim(&self) -> usize {
        self.w_text.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.w_video.cols()
    }

    pub fn zero_gradients(&self) -> GradientSet {
        GradientSet {
            w_video: Matrix::zeros(self.w_video.rows(), self.w_video.cols()),
            w_text: Matrix::zeros(self.w_text.rows(), self.w_text.cols()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub vector: Vec<f64>,
    /// Set when the projection was the zero vector.
    pub degenerate: bool,
}

fn project(features: &[f64], w: &Matrix) -> Result<Vec<f64>> {
    if features.len() != w.rows() {
        return Err(Error::invalid(format!(
            "feature dimension {} does not match projection input {}",
            features.len(),
            w.rows()
        )));
    }
    let mut out = vec![0.0; w.cols()];
    for (a, &x) in features.iter().enumerate() {
        if x == 0.0 {
            continue;
        }
        for (o, &wk) in out.iter_mut().zip(w.row(a)) {
            *o += x * wk;
        }
    }
    Ok(out)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// L2-normalized projection of `features` through `w`.
pub fn embed(features: &[f64], w: &Matrix) -> Result<Embedding> {
    let mut v = project(features, w)?;
    let n = norm(&v);
    if n == 0.0 {
        return Ok(Embedding { vector: v, degenerate: true });
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(Embedding { vector: v, degenerate: false })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

/// `dot(u, v) / (|u| |v|)` clamped to `[-1, 1]`; zero with a flag if either input is zero.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Cosine {
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Cosine { value: 0.0, degenerate: true };
    }
    Cosine { value: (dot(u, v) / (nu * nv)).clamp(-1.0, 1.0), degenerate: false }
}

/// Feature rows for a batch of paired items: row `i` of `videos` goes with row `i` of `captions`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchFeatures {
    pub videos: Matrix,
    pub captions: Matrix,
}

struct TowerOutput {
    /// Normalized embeddings, one row per item.
    unit: Matrix,
    norms: Vec<f64>,
}

fn run_tower(features: &Matrix, w: &Matrix) -> Result<TowerOutput> {
    let mut unit = Matrix::zeros(features.rows(), w.cols());
    let mut norms = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let p = project(features.row(i), w)?;
        let n = norm(&p);
        if !n.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite embedding norm for row {i}")));
        }
        if n > 0.0 {
            for (u, x) in unit.row_mut(i).iter_mut().zip(&p) {
                *u = x / n;
            }
        }
        norms.push(n);
    }
    Ok(TowerOutput { unit, norms })
}

fn similarities(videos: &TowerOutput, captions: &TowerOutput) -> Matrix {
    let mut s = Matrix::zeros(videos.unit.rows(), captions.unit.rows());
    for i in 0..videos.unit.rows() {
        for j in 0..captions.unit.rows() {
            let v = if videos.norms[i] == 0.0 || captions.norms[j] == 0.0 {
                0.0
            } else {
                dot(videos.unit.row(i), captions.unit.row(j)).clamp(-1.0, 1.0)
            };
            s.set(i, j, v);
        }
    }
    s
}

/// All pairwise cosine similarities, videos as rows and captions as columns.
pub fn forward_batch(videos: &Matrix, captions: &Matrix, params: &ModelParams) -> Result<SimilarityMatrix> {
    if videos.rows() == 0 || captions.rows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let v = run_tower(videos, &params.w_video)?;
    let c = run_tower(captions, &params.w_text)?;
    SimilarityMatrix::new(similarities(&v, &c), AnchorKind::Video)
}

/// Embeds every row of `features` with `w`.
pub fn embed_all(features: &Matrix, w: &Matrix) -> Result<Matrix> {
    Ok(run_tower(features, w)?.unit)
}

/// Backpropagates `d loss / d unit_embedding` through L2 normalization and the
/// projection, accumulating into `grad_w`.
fn backprop_tower(
    features: &Matrix,
    tower: &TowerOutput,
    d_unit: &Matrix,
    grad_w: &mut Matrix,
) {
    let d = tower.unit.cols();
    let mut d_proj = vec![0.0; d];
    for i in 0..features.rows() {
        let n = tower.norms[i];
        if n == 0.0 {
            continue;
        }
        let e = tower.unit.row(i);
        let g = d_unit.row(i);
        let radial = dot(e, g);
        for k in 0..d {
            d_proj[k] = (g[k] - radial * e[k]) / n;
        }
        for (a, &x) in features.row(i).iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (gw, &dp) in grad_w.row_mut(a).iter_mut().zip(&d_proj) {
                *gw += x * dp;
            }
        }
    }
}

/// Loss of the batch under fixed mined triplets, and its gradients with
/// respect to both towers.
pub fn loss_gradients(
    batch: &BatchFeatures,
    params: &ModelParams,
    mined_v2t: &MinedTriplets,
    mined_t2v: &MinedTriplets,
    margins: Margins,
    t2v_weight: f64,
) -> Result<(LossBreakdown, GradientSet)> {
    let n = batch.videos.rows();
    if n == 0 || batch.captions.rows() != n {
        return Err(Error::invalid("batch must hold the same positive number of videos and captions"));
    }
    let v = run_tower(&batch.videos, &params.w_video)?;
    let c = run_tower(&batch.captions, &params.w_text)?;
    let sim = SimilarityMatrix::new(similarities(&v, &c), AnchorKind::Video)?;
    let sim_t = sim.transpose();
    let breakdown = bidirectional_loss(&sim, &sim_t, mined_v2t, mined_t2v, margins, t2v_weight)?;

    let gt: Vec<usize> = (0..n).collect();
    let mut g = similarity_gradient(&sim, mined_v2t, &gt, margins)?;
    let g_t = similarity_gradient(&sim_t, mined_t2v, &gt, margins)?;
    for i in 0..n {
        for j in 0..n {
            g.add_at(i, j, t2v_weight * g_t.get(j, i));
        }
    }

    let d = params.embed_dim();
    let mut d_video = Matrix::zeros(n, d);
    let mut d_caption = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..n {
            let gij = g.get(i, j);
            if gij == 0.0 {
                continue;
            }
            for k in 0..d {
                d_video.add_at(i, k, gij * c.unit.get(j, k));
                d_caption.add_at(j, k, gij * v.unit.get(i, k));
            }
        }
    }

    let mut grads = params.zero_gradients();
    backprop_tower(&batch.videos, &v, &d_video, &mut grads.w_video);
    backprop_tower(&batch.captions, &c, &d_caption, &mut grads.w_text);
    Ok((breakdown, grads))
}

/// `params - lr * grads`, elementwise.
pub fn sgd_step(params: &ModelParams, grads: &GradientSet, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
    }
    if !grads.w_video.is_finite() || !grads.w_text.is_finite() {
        return Err(Error::TrainingDiverged("non-finite gradient".into()));
    }
    if grads.w_video.shape() != params.w_video.shape() || grads.w_text.shape() != params.w_text.shape() {
        return Err(Error::invalid("gradient shapes do not match parameters"));
    }
    let step = |p: &Matrix, g: &Matrix| {
        let data = p.as_slice().iter().zip(g.as_slice()).map(|(p, g)| p - lr * g).collect();
        Matrix::from_vec(p.rows(), p.cols(), data).expect("shape preserved")
    };
    let next = ModelParams { w_video: step(&params.w_video, &grads.w_video), w_text: step(&params.w_text, &grads.w_text) };
    if !next.w_video.is_finite() || !next.w_text.is_finite() {
        return Err(Error::TrainingDiverged("parameters overflowed".into()));
    }
    Ok(next)
}
