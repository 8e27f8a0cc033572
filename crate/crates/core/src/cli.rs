//! Command-line interface. Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::ffi::OsString;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::{Split, SyntheticConfig};
use crate::error::{Error, Result};
use crate::experiment::{
    check_ran_cutoff, grid_configs, mined_negative_histogram, run_eval, run_sweep, run_train, write_json,
    write_sweep_csv, DataSource, Grid, DEFAULT_DELTA_PS, DEFAULT_TAUS,
};
use crate::loss::Margins;
use crate::mining::Strategy;
use crate::model::ModelParams;
use crate::train::TrainConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ranp", version, about = "Relevance-aware triplet mining for video-text retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, logs and test metrics.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Swap the t2v and v2t columns.
        #[arg(long)]
        transpose: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of relevance between anchors and their mined hard negatives.
    Hist {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Mine with these weights instead of the seeded initialization.
        #[arg(long)]
        trained: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per grid point and tabulate test metrics.
    Sweep {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, value_enum, default_value = "tau")]
        grid: GridArg,
        #[arg(long, value_delimiter = ',', default_value = "standard,ran,ranp")]
        strategies: Vec<Strategy>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_TAUS.to_vec())]
        taus: Vec<f64>,
        #[arg(long = "delta-ps", value_delimiter = ',', default_values_t = DEFAULT_DELTA_PS.to_vec())]
        delta_ps: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridArg {
    Tau,
    Margins,
}

impl From<GridArg> for Grid {
    fn from(g: GridArg) -> Self {
        match g {
            GridArg::Tau => Grid::Tau,
            GridArg::Margins => Grid::Margins,
        }
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// JSONL dataset file.
    #[arg(long, conflicts_with = "synthetic")]
    pub dataset: Option<PathBuf>,
    /// Synthetic preset: default, small or disjoint.
    #[arg(long)]
    pub synthetic: Option<String>,
    /// Override the preset's class reuse probability.
    #[arg(long)]
    pub overlap_rate: Option<f64>,
    /// Override the preset's generator seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
}

impl DataArgs {
    pub fn source(&self) -> Result<DataSource> {
        match (&self.dataset, &self.synthetic) {
            (Some(path), None) => {
                if self.overlap_rate.is_some() || self.data_seed.is_some() {
                    return Err(Error::InvalidConfig("--overlap-rate and --data-seed need --synthetic".into()));
                }
                Ok(DataSource::File(path.clone()))
            }
            (None, Some(preset)) => {
                let mut c = SyntheticConfig::preset(preset)?;
                if let Some(o) = self.overlap_rate {
                    c.overlap_rate = o;
                }
                if let Some(s) = self.data_seed {
                    c.seed = s;
                }
                Ok(DataSource::Synthetic(c))
            }
            _ => Err(Error::InvalidConfig("exactly one of --dataset or --synthetic is required".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "ranp")]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 0.15)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.2)]
    pub delta_n: f64,
    #[arg(long, default_value_t = 0.2)]
    pub delta_p: f64,
    #[arg(long, default_value_t = 0.25)]
    pub rho: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().embed_dim)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub t2v_weight: f64,
}

impl TrainArgs {
    pub fn config(&self) -> Result<TrainConfig> {
        let config = TrainConfig {
            strategy: self.strategy,
            tau: self.tau,
            margins: Margins { delta_n: self.delta_n, delta_p: self.delta_p },
            rho: self.rho,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
            embed_dim: self.embed_dim,
            t2v_weight: self.t2v_weight,
            ..TrainConfig::default()
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Serialize)]
struct Echo<'a, E: Serialize> {
    command: &'a str,
    data: &'a DataSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    train: Option<&'a TrainConfig>,
    #[serde(flatten)]
    extra: E,
}

fn prepare_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Train { data, train, out } => {
            let source = data.source()?;
            let config = train.config()?;
            let dataset = source.load()?;
            prepare_out(&out)?;
            write_json(&Echo { command: "train", data: &source, train: Some(&config), extra: () }, &out.join("config.json"))?;
            let run = run_train(&dataset, &config, &out)?;
            println!("best epoch {}", run.outcome.best_epoch);
            if let Some(test) = run.test {
                println!("test {test}");
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, split, transpose, out } => {
            let source = data.source()?;
            let ck = Checkpoint::load(&checkpoint)?;
            let dataset = source.load()?;
            prepare_out(&out)?;
            #[derive(Serialize)]
            struct Extra<'a> {
                checkpoint: &'a Path,
                split: Split,
                transpose: bool,
            }
            let extra = Extra { checkpoint: &checkpoint, split, transpose };
            write_json(&Echo { command: "eval", data: &source, train: Some(&ck.config), extra }, &out.join("config.json"))?;
            let report = run_eval(&ck, &dataset, split, transpose)?;
            report.write_csv(create(&out.join("metrics.csv"))?)?;
            println!("{split} {report}");
            Ok(())
        }
        Command::Hist { data, train, trained, out } => {
            let source = data.source()?;
            let config = train.config()?;
            let dataset = source.load()?;
            let params = match &trained {
                Some(path) => {
                    let ck = Checkpoint::load(path)?;
                    ck.check_compatible(&dataset)?;
                    ck.params()?
                }
                None => ModelParams::init(dataset.video_dim(), dataset.text_dim(), config.embed_dim, config.seed)?,
            };
            prepare_out(&out)?;
            #[derive(Serialize)]
            struct Extra<'a> {
                trained: Option<&'a Path>,
            }
            let extra = Extra { trained: trained.as_deref() };
            write_json(&Echo { command: "hist", data: &source, train: Some(&config), extra }, &out.join("config.json"))?;
            let hist = mined_negative_histogram(&dataset, &config, &params)?;
            hist.write_csv(create(&out.join("hist.csv"))?)?;
            println!(
                "mined {} negatives, {} skipped, {:.2}% with relevance > 0",
                hist.total(),
                hist.skipped,
                100.0 * hist.nonzero_fraction()
            );
            if config.strategy == Strategy::Ran {
                check_ran_cutoff(&hist, config.tau)?;
                println!("bins >= {} are empty", crate::experiment::Histogram::bin(config.tau));
            }
            Ok(())
        }
        Command::Sweep { data, train, grid, strategies, taus, delta_ps, out } => {
            let source = data.source()?;
            let base = train.config()?;
            let grid = Grid::from(grid);
            let configs = grid_configs(&base, grid, &strategies, &taus, &delta_ps);
            for c in &configs {
                c.validate()?;
            }
            if configs.is_empty() {
                return Err(Error::InvalidConfig("empty grid".into()));
            }
            let dataset = source.load()?;
            prepare_out(&out)?;
            #[derive(Serialize)]
            struct Extra<'a> {
                grid: Grid,
                points: &'a [TrainConfig],
            }
            let extra = Extra { grid, points: &configs };
            write_json(&Echo { command: "sweep", data: &source, train: Some(&base), extra }, &out.join("config.json"))?;
            let rows = run_sweep(&dataset, &configs)?;
            write_sweep_csv(&rows, create(&out.join("sweep.csv"))?)?;
            for r in &rows {
                let tau = if r.config.strategy == Strategy::Standard { "-".to_string() } else { r.config.tau.to_string() };
                println!("{} tau {} dp {}: {}", r.config.strategy, tau, r.config.margins.delta_p, r.test);
            }
            Ok(())
        }
    }
}
