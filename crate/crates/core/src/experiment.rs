//! Experiment runners behind the command line: train, evaluate, histogram, sweep.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{generate_synthetic, load_dataset, sample_batches, Dataset, Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::loss::Margins;
use crate::metrics::{evaluate, fmt_pct, MetricsReport};
use crate::mining::{Strategy, Tau};
use crate::model::ModelParams;
use crate::train::{mine_prepared, prepare_batch, train, write_epoch_log, write_step_log, TrainConfig, TrainOutcome};

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    File(PathBuf),
    Synthetic(SyntheticConfig),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::File(p) => load_dataset(p),
            DataSource::Synthetic(c) => generate_synthetic(c),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

/// Writes a JSON echo of any serializable config.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub test: Option<MetricsReport>,
}

/// Trains, then evaluates the selected parameters on the test split if it has videos.
pub fn train_and_test(dataset: &Dataset, config: &TrainConfig) -> Result<TrainRun> {
    let outcome = train(dataset, config)?;
    let test = if dataset.split(Split::Test).is_empty() {
        None
    } else {
        let profiles = dataset.video_profiles(config.rho)?;
        Some(evaluate(&outcome.params, dataset, Split::Test, &profiles, config.empty_jaccard)?)
    };
    Ok(TrainRun { outcome, test })
}

/// Trains and writes checkpoint, logs and test metrics into `out`.
pub fn run_train(dataset: &Dataset, config: &TrainConfig, out: &Path) -> Result<TrainRun> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let run = train_and_test(dataset, config)?;
    let o = &run.outcome;
    let val = o.best_val.as_ref().map(|v| v.ndcg_avg);
    Checkpoint::new(&o.params, config, dataset, o.best_epoch, val).save(out.join("checkpoint.json"))?;
    write_step_log(&o.steps, create(&out.join("train_log.csv"))?)?;
    write_epoch_log(&o.epochs, create(&out.join("val_log.csv"))?)?;
    if let Some(test) = &run.test {
        test.write_csv(create(&out.join("test_metrics.csv"))?)?;
    }
    Ok(run)
}

/// Evaluates a checkpoint on one split of a compatible dataset.
pub fn run_eval(checkpoint: &Checkpoint, dataset: &Dataset, split: Split, transpose: bool) -> Result<MetricsReport> {
    checkpoint.check_compatible(dataset)?;
    let params = checkpoint.params()?;
    let profiles = dataset.video_profiles(checkpoint.config.rho)?;
    let report = evaluate(&params, dataset, split, &profiles, checkpoint.config.empty_jaccard)?;
    Ok(if transpose { report.swapped() } else { report })
}

/// Relevance of mined hard negatives binned by integer percent.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `counts[b]` holds negatives with `floor(100 * rel) == b`, for `b` in `0..=100`.
    pub counts: Vec<u64>,
    /// Mined negatives with relevance strictly above zero.
    pub nonzero: u64,
    /// Anchors for which no negative was eligible.
    pub skipped: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Self { counts: vec![0; 101], nonzero: 0, skipped: 0 }
    }

    pub fn add(&mut self, rel: f64) {
        self.counts[Self::bin(rel)] += 1;
        if rel > 0.0 {
            self.nonzero += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Bin of a relevance value. The small epsilon keeps exact fractions such as
    /// 0.29 from falling into the bin below through rounding error.
    pub fn bin(rel: f64) -> usize {
        ((100.0 * rel + 1e-9).floor() as usize).min(100)
    }

    pub fn mass_from(&self, bin: usize) -> u64 {
        self.counts.iter().skip(bin).sum()
    }

    /// Share of mined negatives with non-zero relevance.
    pub fn nonzero_fraction(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        self.nonzero as f64 / total as f64
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["bin", "count", "fraction"])?;
        let total = self.total().max(1) as f64;
        for (b, &c) in self.counts.iter().enumerate() {
            w.write_record([b.to_string(), c.to_string(), format!("{:.6}", c as f64 / total)])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

impl Default for Histogram {
    fn default() -> Self {
        Self::new()
    }
}

/// One epoch of mining over the training split without parameter updates.
/// Both retrieval directions contribute.
pub fn mined_negative_histogram(dataset: &Dataset, config: &TrainConfig, params: &ModelParams) -> Result<Histogram> {
    config.validate()?;
    let tau = Tau::new(config.tau)?;
    let profiles = dataset.video_profiles(config.rho)?;
    let mut hist = Histogram::new();
    for pairs in sample_batches(dataset, Split::Train, config.batch_size, config.seed.wrapping_add(1))? {
        let batch = prepare_batch(dataset, &pairs, &profiles, config.empty_jaccard)?;
        let (v2t, t2v) = mine_prepared(&batch, params, tau, config.strategy)?;
        let rel_t = batch.relevance.transpose();
        for (mined, rel) in [(&v2t, &batch.relevance), (&t2v, &rel_t)] {
            for r in mined.negative_relevances(rel) {
                hist.add(r);
            }
            hist.skipped += mined.skipped_negatives() as u64;
        }
    }
    Ok(hist)
}

/// Checks the relevance-aware cutoff: no mined negative at or above the tau bin.
pub fn check_ran_cutoff(hist: &Histogram, tau: f64) -> Result<()> {
    let cutoff = Histogram::bin(tau);
    let above = hist.mass_from(cutoff);
    if above > 0 {
        return Err(Error::InvalidInput(format!("{above} mined negatives fall in bins >= {cutoff}")));
    }
    Ok(())
}

/// Which grid a sweep runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grid {
    /// Standard once, then RAN and RANP at each threshold.
    Tau,
    /// RANP at the base threshold with varying positive margins.
    Margins,
}

pub const DEFAULT_TAUS: [f64; 3] = [0.75, 0.40, 0.15];
pub const DEFAULT_DELTA_PS: [f64; 5] = [0.10, 0.15, 0.20, 0.25, 0.30];

/// Expands a grid into one training config per row, all sharing `base.seed`.
pub fn grid_configs(base: &TrainConfig, grid: Grid, strategies: &[Strategy], taus: &[f64], delta_ps: &[f64]) -> Vec<TrainConfig> {
    match grid {
        Grid::Tau => {
            let mut out = Vec::new();
            for &strategy in strategies {
                if strategy == Strategy::Standard {
                    out.push(TrainConfig { strategy, ..base.clone() });
                } else {
                    out.extend(taus.iter().map(|&tau| TrainConfig { strategy, tau, ..base.clone() }));
                }
            }
            out
        }
        Grid::Margins => delta_ps
            .iter()
            .map(|&delta_p| TrainConfig {
                margins: Margins { delta_n: base.margins.delta_n, delta_p },
                ..base.clone()
            })
            .collect(),
    }
}

pub struct SweepRow {
    pub config: TrainConfig,
    pub test: MetricsReport,
}

/// Trains every grid point in parallel and evaluates each on the test split.
pub fn run_sweep(dataset: &Dataset, configs: &[TrainConfig]) -> Result<Vec<SweepRow>> {
    if dataset.split(Split::Test).is_empty() {
        return Err(Error::invalid("sweep needs a non-empty test split"));
    }
    configs
        .par_iter()
        .map(|c| {
            let run = train_and_test(dataset, c)?;
            Ok(SweepRow { config: c.clone(), test: run.test.expect("test split checked") })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "strategy", "tau", "delta_n", "delta_p", "ndcg_t2v", "ndcg_v2t", "ndcg_avg", "map_t2v", "map_v2t", "map_avg",
    ])?;
    for r in rows {
        let c = &r.config;
        let t = &r.test;
        let tau = if c.strategy == Strategy::Standard { "-".to_string() } else { c.tau.to_string() };
        w.write_record([
            c.strategy.to_string(),
            tau,
            c.margins.delta_n.to_string(),
            c.margins.delta_p.to_string(),
            fmt_pct(Some(t.ndcg_t2v)),
            fmt_pct(Some(t.ndcg_v2t)),
            fmt_pct(Some(t.ndcg_avg)),
            fmt_pct(t.map_t2v),
            fmt_pct(t.map_v2t),
            fmt_pct(t.map_avg),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticConfig::preset("small").unwrap()).unwrap()
    }

    #[test]
    fn binning_floors_to_percent() {
        assert_eq!(Histogram::bin(0.0), 0);
        assert_eq!(Histogram::bin(0.749999), 74);
        assert_eq!(Histogram::bin(0.75), 75);
        assert_eq!(Histogram::bin(0.29), 29);
        assert_eq!(Histogram::bin(1.0 / 6.0), 16);
        assert_eq!(Histogram::bin(1.0), 100);
    }

    #[test]
    fn histogram_total_matches_mined_negatives() {
        let d = small();
        let config = TrainConfig { strategy: Strategy::Ran, tau: 0.5, batch_size: 16, ..TrainConfig::default() };
        let params = ModelParams::init(d.video_dim(), d.text_dim(), config.embed_dim, config.seed).unwrap();
        let h = mined_negative_histogram(&d, &config, &params).unwrap();
        let anchors = 2 * d.split(Split::Train).len() as u64;
        assert_eq!(h.total() + h.skipped, anchors);
        check_ran_cutoff(&h, 0.5).unwrap();
    }

    #[test]
    fn disjoint_data_puts_all_mass_in_bin_zero() {
        let d = generate_synthetic(&SyntheticConfig::preset("disjoint").unwrap()).unwrap();
        let config = TrainConfig { strategy: Strategy::Standard, batch_size: 16, ..TrainConfig::default() };
        let params = ModelParams::init(d.video_dim(), d.text_dim(), 8, 0).unwrap();
        let h = mined_negative_histogram(&d, &config, &params).unwrap();
        assert!(h.total() > 0);
        assert_eq!(h.counts[0], h.total());
        assert_eq!(h.nonzero, 0);
    }

    #[test]
    fn grids_have_expected_shapes() {
        let base = TrainConfig::default();
        let t = grid_configs(&base, Grid::Tau, &Strategy::ALL, &DEFAULT_TAUS, &DEFAULT_DELTA_PS);
        assert_eq!(t.len(), 7);
        assert_eq!(t[0].strategy, Strategy::Standard);
        assert_eq!((t[4].strategy, t[4].tau), (Strategy::Ranp, 0.75));
        let m = grid_configs(&base, Grid::Margins, &Strategy::ALL, &DEFAULT_TAUS, &DEFAULT_DELTA_PS);
        assert_eq!(m.len(), 5);
        assert!(m.iter().all(|c| c.margins.delta_n == 0.2 && c.strategy == base.strategy));
    }

    #[test]
    fn singleton_sweep_equals_train_then_eval() {
        let d = small();
        let config = TrainConfig { epochs: 2, batch_size: 16, embed_dim: 8, ..TrainConfig::default() };
        let rows = run_sweep(&d, std::slice::from_ref(&config)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        run_train(&d, &config, dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path().join("checkpoint.json")).unwrap();
        let report = run_eval(&ck, &d, Split::Test, false).unwrap();
        assert_eq!(rows[0].test, report);
        let swapped = run_eval(&ck, &d, Split::Test, true).unwrap();
        assert_eq!(swapped.ndcg_t2v, report.ndcg_v2t);
    }
}
