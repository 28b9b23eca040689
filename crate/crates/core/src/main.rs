use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tornn::bench::{
    build_task, detect_groups, parse_task, read_records_json, run_experiment, summarize, write_summary_csv,
    ExperimentConfig, ModelConfig, ModelKind, SummaryRow, TaskConfig,
};
use tornn::timeseries::{
    count_spectral_peaks, psd_estimate, read_series_csv, write_series_csv, write_spectrum_csv, SeriesMeta,
    TimeSeries, DEFAULT_OVERLAP, DEFAULT_PROMINENCE, DEFAULT_SEGMENT_LEN,
};
use tornn::Result;

#[derive(Parser)]
#[command(
    name = "tornn",
    version,
    about = "Grouped bandpass RNNs on superimposed-oscillator forecasting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a task series as `t,value` CSV.
    Gen {
        #[command(flatten)]
        task: TaskArgs,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Welch spectrum of a task series (or a `t,value` CSV) and its peak count.
    Spectrum {
        #[command(flatten)]
        task: TaskArgs,
        /// Analyse this series instead of generating one.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Noise seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_SEGMENT_LEN)]
        segment: usize,
        #[arg(long, default_value_t = DEFAULT_PROMINENCE)]
        prominence: f64,
        /// `freq,power` CSV destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one model for a single trial.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        model: ModelArg,
    },
    /// Run the multi-trial experiment and print the summary.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Restrict to these models (repeatable).
        #[arg(long, value_enum)]
        model: Vec<ModelArg>,
        /// Trials per model.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Summarize one or more `*_records.json` files.
    Summarize {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TaskArgs {
    /// x2, x3, x5 or x7.
    #[arg(long, default_value = "x2", value_parser = parse_task)]
    task: usize,
    /// Add white noise at the default ratio.
    #[arg(long)]
    noise: bool,
    /// Base angular frequency.
    #[arg(long)]
    phi: Option<f64>,
}

impl TaskArgs {
    fn apply(&self, cfg: &mut TaskConfig) {
        cfg.k = self.task;
        cfg.noise = self.noise;
        if let Some(phi) = self.phi {
            cfg.phi = phi;
        }
    }

    fn config(&self) -> TaskConfig {
        let mut cfg = TaskConfig::default();
        self.apply(&mut cfg);
        cfg
    }
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Task (overrides the config's task when given).
    #[arg(long, value_parser = parse_task)]
    task: Option<usize>,
    /// Use the noisy variant of the task.
    #[arg(long)]
    noise: bool,
    /// Base seed; trial t uses seed + t.
    #[arg(long)]
    seed: Option<u64>,
    /// Group count for TORNN and ESN (default: detected spectral peaks).
    #[arg(long)]
    groups: Option<usize>,
    /// Directory for records, curves, plot data and summary.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(k) = self.task {
            cfg.task.k = k;
        }
        if self.noise {
            cfg.task.noise = true;
        }
        if let Some(seed) = self.seed {
            cfg.base_seed = seed;
        }
        if self.groups.is_some() {
            cfg.groups = self.groups;
        }
        if self.out.is_some() {
            cfg.out_dir = self.out.clone();
        }
        if self.jobs.is_some() {
            cfg.jobs = self.jobs;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Tornn,
    Ernn,
    Esn,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Tornn => ModelKind::Tornn,
            ModelArg::Ernn => ModelKind::Ernn,
            ModelArg::Esn => ModelKind::Esn,
        }
    }
}

/// Keeps the configured settings of `kinds`, adding defaults for kinds the
/// config does not mention.
fn select_models(cfg: &mut ExperimentConfig, kinds: &[ModelKind]) {
    if kinds.is_empty() {
        return;
    }
    cfg.models = kinds
        .iter()
        .map(|&k| {
            cfg.models
                .iter()
                .find(|m| m.kind() == k)
                .copied()
                .unwrap_or_else(|| ModelConfig::default_for(k))
        })
        .collect();
}

fn print_summary(rows: &[SummaryRow]) {
    println!(
        "{:<10} {:<6} {:>12} {:>12} {:>8} {:>8}",
        "task", "model", "mean_nrmse", "std_nrmse", "trials", "failed"
    );
    for r in rows {
        println!(
            "{:<10} {:<6} {:>12.6} {:>12.6} {:>8} {:>8}",
            r.task, r.model, r.mean_nrmse, r.std_nrmse, r.n_trials, r.n_failed
        );
    }
}

fn spectrum(
    task: &TaskArgs,
    input: Option<&Path>,
    seed: u64,
    segment: usize,
    prominence: f64,
    out: Option<&Path>,
) -> Result<()> {
    let ts = match input {
        Some(path) => TimeSeries::new(
            read_series_csv(path)?,
            SeriesMeta {
                k: 0,
                phi: 0.0,
                noise_ratio: 0.0,
                seed: 0,
            },
        )?,
        None => build_task(&task.config(), seed)?.observed,
    };
    let sp = psd_estimate(ts.values(), segment, DEFAULT_OVERLAP)?;
    let peaks = count_spectral_peaks(&sp, prominence)?;
    if let Some(out) = out {
        write_spectrum_csv(out, &sp)?;
    }
    println!("segments: {}", sp.segments);
    println!("peaks: {peaks}");
    if input.is_some() {
        println!("suggested groups: {}", detect_groups(&ts, true)?);
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { task, seed, out } => {
            let data = build_task(&task.config(), seed)?;
            write_series_csv(&out, data.observed.values())?;
            println!(
                "wrote {} samples of {} to {}",
                data.observed.len(),
                data.id,
                out.display()
            );
        }
        Command::Spectrum {
            task,
            input,
            seed,
            segment,
            prominence,
            out,
        } => spectrum(&task, input.as_deref(), seed, segment, prominence, out.as_deref())?,
        Command::Train { run, model } => {
            let mut cfg = run.experiment()?;
            select_models(&mut cfg, &[model.into()]);
            cfg.trials = 1;
            let out = run_experiment(&cfg)?;
            let r = &out.records[0];
            match (&r.test_nrmse, &r.failure) {
                (Some(v), _) => println!("{} {} seed {}: test NRMSE {v:.6}", r.task, r.model, r.seed),
                (None, Some(msg)) => println!("{} {} seed {}: failed: {msg}", r.task, r.model, r.seed),
                (None, None) => unreachable!("records without a score carry a failure"),
            }
            if !r.gamma1.is_empty() {
                println!("gamma1 {:?}", r.gamma1);
                println!("gamma2 {:?}", r.gamma2);
            }
            if let Some(hp) = &r.esn {
                println!("esn {hp:?}");
            }
        }
        Command::Bench { run, model, trials } => {
            let mut cfg = run.experiment()?;
            let kinds: Vec<ModelKind> = model.into_iter().map(Into::into).collect();
            select_models(&mut cfg, &kinds);
            if let Some(t) = trials {
                cfg.trials = t;
            }
            let out = run_experiment(&cfg)?;
            println!(
                "task {} ({} groups, series {})",
                out.task,
                out.groups,
                &out.series_hash[..12]
            );
            print_summary(&summarize(&out.records));
        }
        Command::Summarize { records, out } => {
            let mut all = Vec::new();
            for path in &records {
                all.extend(read_records_json(path)?);
            }
            let rows = summarize(&all);
            if let Some(out) = out {
                write_summary_csv(&out, &rows)?;
            }
            print_summary(&rows);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
