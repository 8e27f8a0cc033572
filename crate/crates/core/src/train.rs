//! Training loop: sample, embed, mine, backpropagate, step, validate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{BatchSampler, CaptionPairing, Dataset, Pair, Split};
use crate::error::{Error, Result};
use crate::loss::{LossBreakdown, Margins};
use crate::matrix::Matrix;
use crate::metrics::{evaluate, MetricsReport};
use crate::mining::{mine_bidirectional, MinedTriplets, RelevanceMatrix, Strategy, Tau};
use crate::model::{forward_batch, loss_gradients, sgd_step, BatchFeatures, ModelParams};
use crate::semantics::{relevance_with, EmptyJaccard, SemanticProfile};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub tau: f64,
    pub margins: Margins,
    pub rho: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub embed_dim: usize,
    /// Weight of the text-to-video loss relative to video-to-text.
    pub t2v_weight: f64,
    pub empty_jaccard: EmptyJaccard,
    pub pairing: CaptionPairing,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Ranp,
            tau: 0.15,
            margins: Margins::default(),
            rho: 0.25,
            epochs: 50,
            batch_size: 64,
            lr: 0.1,
            seed: 0,
            embed_dim: 32,
            t2v_weight: 1.0,
            empty_jaccard: EmptyJaccard::One,
            pairing: CaptionPairing::Uniform,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        Tau::new(self.tau).map_err(|_| Error::InvalidConfig(format!("tau {} outside [0, 1]", self.tau)))?;
        Margins::new(self.margins.delta_n, self.margins.delta_p)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!("rho {} outside (0, 1]", self.rho)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if !(self.t2v_weight >= 0.0 && self.t2v_weight.is_finite()) {
            return Err(Error::InvalidConfig("t2v_weight must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub l_n_sum: f64,
    pub l_p_sum: f64,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub val: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation nDCG (the last ones without a val split).
    pub params: ModelParams,
    pub best_epoch: usize,
    pub best_val: Option<MetricsReport>,
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochLog>,
}

/// Everything one mining step needs for a batch.
pub struct PreparedBatch {
    pub features: BatchFeatures,
    pub relevance: RelevanceMatrix,
}

/// Feature rows and video-by-caption relevance for a batch of pairs.
pub fn prepare_batch(
    dataset: &Dataset,
    pairs: &[Pair],
    video_profiles: &[SemanticProfile],
    empty: EmptyJaccard,
) -> Result<PreparedBatch> {
    let videos: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let captions: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let mut rel = Matrix::zeros(pairs.len(), pairs.len());
    for (i, &v) in videos.iter().enumerate() {
        for (j, &c) in captions.iter().enumerate() {
            rel.set(i, j, relevance_with(&video_profiles[v], &dataset.captions()[c].annotation.profile, empty).value());
        }
    }
    Ok(PreparedBatch {
        features: BatchFeatures { videos: dataset.video_matrix(&videos), captions: dataset.caption_matrix(&captions) },
        relevance: RelevanceMatrix::new(rel)?,
    })
}

/// Mines both directions of a prepared batch under the current parameters.
pub fn mine_prepared(
    batch: &PreparedBatch,
    params: &ModelParams,
    tau: Tau,
    strategy: Strategy,
) -> Result<(MinedTriplets, MinedTriplets)> {
    let sim = forward_batch(&batch.features.videos, &batch.features.captions, params)?;
    mine_bidirectional(&sim, &batch.relevance, tau, strategy)
}

fn better(candidate: &MetricsReport, best: Option<&MetricsReport>) -> bool {
    best.is_none_or(|b| candidate.ndcg_avg > b.ndcg_avg)
}

/// Trains from the seeded initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let params = ModelParams::init(dataset.video_dim(), dataset.text_dim(), config.embed_dim, config.seed)?;
    train_from(dataset, config, params)
}

pub fn train_from(dataset: &Dataset, config: &TrainConfig, initial: ModelParams) -> Result<TrainOutcome> {
    config.validate()?;
    let tau = Tau::new(config.tau)?;
    let profiles = dataset.video_profiles(config.rho)?;
    let has_val = !dataset.split(Split::Val).is_empty();
    let mut sampler = BatchSampler::new(dataset, Split::Train, config.batch_size, config.seed.wrapping_add(1))?
        .with_pairing(config.pairing);

    let mut params = initial;
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut best_val = None;
    if has_val {
        best_val = Some(evaluate(&params, dataset, Split::Val, &profiles, config.empty_jaccard)?);
    }

    for epoch in 1..=config.epochs {
        for (step, pairs) in sampler.next_epoch(dataset).iter().enumerate() {
            let batch = prepare_batch(dataset, pairs, &profiles, config.empty_jaccard)?;
            let (v2t, t2v) = mine_prepared(&batch, &params, tau, config.strategy)?;
            let (loss, grads): (LossBreakdown, _) =
                loss_gradients(&batch.features, &params, &v2t, &t2v, config.margins, config.t2v_weight)?;
            if !loss.total.is_finite() {
                return Err(Error::TrainingDiverged(format!("non-finite loss at epoch {epoch}, step {step}")));
            }
            params = sgd_step(&params, &grads, config.lr)
                .map_err(|e| match e {
                    Error::TrainingDiverged(msg) => {
                        Error::TrainingDiverged(format!("{msg} at epoch {epoch}, step {step}"))
                    }
                    other => other,
                })?;
            steps.push(StepLog {
                epoch,
                step,
                total: loss.total,
                l_n_sum: loss.l_n_sum,
                l_p_sum: loss.l_p_sum,
                skipped: loss.skipped,
            });
        }
        if has_val {
            let val = evaluate(&params, dataset, Split::Val, &profiles, config.empty_jaccard)?;
            if better(&val, best_val.as_ref()) {
                best_val = Some(val);
                best_params = params.clone();
                best_epoch = epoch;
            }
            epochs.push(EpochLog { epoch, val });
        }
    }
    if !has_val {
        best_params = params;
        best_epoch = config.epochs;
    }
    Ok(TrainOutcome { params: best_params, best_epoch, best_val, steps, epochs })
}

pub fn write_step_log<W: Write>(steps: &[StepLog], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "step", "total", "l_n_sum", "l_p_sum", "skipped"])?;
    for s in steps {
        w.write_record([
            s.epoch.to_string(),
            s.step.to_string(),
            s.total.to_string(),
            s.l_n_sum.to_string(),
            s.l_p_sum.to_string(),
            s.skipped.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn write_epoch_log<W: Write>(epochs: &[EpochLog], out: W) -> Result<()> {
    use crate::metrics::fmt_pct;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "ndcg_t2v", "ndcg_v2t", "ndcg_avg", "map_t2v", "map_v2t", "map_avg"])?;
    for e in epochs {
        let v = &e.val;
        w.write_record([
            e.epoch.to_string(),
            fmt_pct(Some(v.ndcg_t2v)),
            fmt_pct(Some(v.ndcg_v2t)),
            fmt_pct(Some(v.ndcg_avg)),
            fmt_pct(v.map_t2v),
            fmt_pct(v.map_v2t),
            fmt_pct(v.map_avg),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn small() -> Dataset {
        generate_synthetic(&SyntheticConfig::preset("small").unwrap()).unwrap()
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let d = small();
        let config = TrainConfig { epochs: 0, ..Default::default() };
        let out = train(&d, &config).unwrap();
        let init = ModelParams::init(d.video_dim(), d.text_dim(), config.embed_dim, config.seed).unwrap();
        assert_eq!(out.params, init);
        assert!(out.steps.is_empty());
    }

    #[test]
    fn seeded_runs_agree() {
        let d = small();
        let config = TrainConfig { epochs: 3, batch_size: 16, ..Default::default() };
        let a = train(&d, &config).unwrap();
        let b = train(&d, &config).unwrap();
        assert_eq!(a.steps, b.steps);
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.params, b.params);
        let mut la = Vec::new();
        let mut lb = Vec::new();
        write_step_log(&a.steps, &mut la).unwrap();
        write_step_log(&b.steps, &mut lb).unwrap();
        assert_eq!(la, lb);
    }

    #[test]
    fn best_epoch_has_best_val() {
        let d = small();
        let out = train(&d, &TrainConfig { epochs: 4, batch_size: 16, ..Default::default() }).unwrap();
        let best = out.best_val.unwrap();
        for e in &out.epochs {
            assert!(e.val.ndcg_avg <= best.ndcg_avg);
        }
        // 96 train videos in batches of 16
        assert_eq!(out.steps.len(), 4 * 6);
    }

    #[test]
    fn divergence_is_reported() {
        let d = small();
        let config = TrainConfig { epochs: 2, batch_size: 16, lr: f64::MAX, ..Default::default() };
        match train(&d, &config) {
            Err(Error::TrainingDiverged(_)) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let d = small();
        for bad in [
            TrainConfig { tau: 1.5, ..Default::default() },
            TrainConfig { batch_size: 1, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { rho: 0.0, ..Default::default() },
        ] {
            assert!(matches!(train(&d, &bad), Err(Error::InvalidConfig(_))));
        }
    }
}
