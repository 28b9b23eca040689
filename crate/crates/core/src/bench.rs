//! Multi-trial experiments: task construction, per-trial training and
//! evaluation, summaries and plot data.
//!
//! A task's series is built once and shared by every model and trial, so all
//! records of a task carry the same series hash. Trial `i` uses seed
//! `base_seed + i` for everything random on the model side.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::esnfit::{
    fit_esn, ga_search, write_ga_trace_csv, write_hyperparams_json, EsnBounds, EsnHyperparams, GaConfig,
    GenerationStats, NEURONS_PER_COMPONENT,
};
use crate::model::{predict_scalar, Ernn, Tornn};
use crate::timeseries::{
    self, add_noise, count_spectral_peaks, gen_mso, make_supervised, nrmse, psd_estimate, SupervisedDataset,
    TimeSeries, DEFAULT_HORIZON, DEFAULT_LENGTH, DEFAULT_NOISE_RATIO, DEFAULT_OVERLAP, DEFAULT_PHI,
    DEFAULT_PROMINENCE, DEFAULT_SEGMENT_LEN, DEFAULT_SPLIT, DEFAULT_WASHOUT,
};
use crate::topology::{
    NetworkWeights, TopologyConfig, DEFAULT_NEURONS_PER_GROUP, DEFAULT_P, DEFAULT_Q, DEFAULT_RHO,
};
use crate::training::{train, write_curve_csv, CurvePoint, TrainConfig};
use crate::{Error, Result};

/// Prominence used for peak counting when only a noisy signal is available.
pub const NOISY_PROMINENCE: f64 = 0.1;

/// Hidden units of the Elman baseline (8555 trainable parameters).
pub const ERNN_HIDDEN: usize = 91;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tornn,
    Ernn,
    Esn,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Tornn => "tornn",
            ModelKind::Ernn => "ernn",
            ModelKind::Esn => "esn",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tornn" => Ok(ModelKind::Tornn),
            "ernn" => Ok(ModelKind::Ernn),
            "esn" => Ok(ModelKind::Esn),
            other => Err(Error::Parse(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    /// Number of superimposed oscillators.
    pub k: usize,
    pub noise: bool,
    pub phi: f64,
    pub length: usize,
    pub horizon: usize,
    pub washout: usize,
    pub noise_ratio: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            k: 2,
            noise: false,
            phi: DEFAULT_PHI,
            length: DEFAULT_LENGTH,
            horizon: DEFAULT_HORIZON,
            washout: DEFAULT_WASHOUT,
            noise_ratio: DEFAULT_NOISE_RATIO,
        }
    }
}

impl TaskConfig {
    pub fn new(k: usize, noise: bool) -> Self {
        Self {
            k,
            noise,
            ..Self::default()
        }
    }

    /// `x2`, `x2_noisy`, ...
    pub fn id(&self) -> String {
        if self.noise {
            format!("x{}_noisy", self.k)
        } else {
            format!("x{}", self.k)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k", "need at least one oscillator"));
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon", "must be at least 1"));
        }
        if self.noise && !(self.noise_ratio > 0.0 && self.noise_ratio.is_finite()) {
            return Err(Error::invalid(
                "noise_ratio",
                "noisy tasks need a positive finite ratio",
            ));
        }
        Ok(())
    }
}

/// Parses `x2`, `x3`, ... into an oscillator count.
pub fn parse_task(s: &str) -> Result<usize> {
    s.strip_prefix('x')
        .and_then(|k| k.parse().ok())
        .filter(|&k: &usize| k > 0)
        .ok_or_else(|| Error::Parse(format!("task must look like x2, x3, x5 or x7, got `{s}`")))
}

/// A task's data, shared by every model and trial.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub id: String,
    pub config: TaskConfig,
    /// Noiseless signal, used for group-count detection.
    pub clean: TimeSeries,
    /// Signal the models see (noisy for noisy tasks).
    pub observed: TimeSeries,
    pub dataset: SupervisedDataset,
    /// Oscillator groups detected on the noiseless spectrum.
    pub detected_groups: usize,
    /// SHA-256 of the observed values.
    pub series_hash: String,
}

pub fn build_task(cfg: &TaskConfig, noise_seed: u64) -> Result<TaskData> {
    cfg.validate()?;
    let clean = gen_mso(cfg.k, cfg.phi, cfg.length)?;
    let observed = if cfg.noise {
        add_noise(&clean, cfg.noise_ratio, noise_seed)?
    } else {
        clean.clone()
    };
    let dataset = make_supervised(observed.values(), cfg.horizon, cfg.washout, DEFAULT_SPLIT)?;
    let detected_groups = detect_groups(&clean, false)?;
    Ok(TaskData {
        id: cfg.id(),
        config: *cfg,
        series_hash: hash_values(observed.values()),
        clean,
        observed,
        dataset,
        detected_groups,
    })
}

/// Peak count of the Welch spectrum, at least 1. Noisy signals use the
/// stricter [`NOISY_PROMINENCE`].
pub fn detect_groups(ts: &TimeSeries, noisy: bool) -> Result<usize> {
    if ts.len() < 2 {
        return Err(Error::invalid("ts", "need at least two samples for a spectrum"));
    }
    // Largest power of two that fits, capped at the default segment.
    let seg = DEFAULT_SEGMENT_LEN.min(1 << (usize::BITS - 1 - ts.len().leading_zeros()));
    let sp = psd_estimate(ts.values(), seg, DEFAULT_OVERLAP)?;
    let frac = if noisy {
        NOISY_PROMINENCE
    } else {
        DEFAULT_PROMINENCE
    };
    Ok(count_spectral_peaks(&sp, frac)?.max(1))
}

pub fn hash_values(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TornnSettings {
    pub neurons_per_group: usize,
    pub p: f64,
    pub q: f64,
    pub rho: f64,
    pub train: TrainConfig,
}

impl Default for TornnSettings {
    fn default() -> Self {
        Self {
            neurons_per_group: DEFAULT_NEURONS_PER_GROUP,
            p: DEFAULT_P,
            q: DEFAULT_Q,
            rho: DEFAULT_RHO,
            train: TrainConfig::default(),
        }
    }
}

impl TornnSettings {
    fn topology(&self, groups: usize, seed: u64) -> TopologyConfig {
        TopologyConfig {
            neurons_per_group: self.neurons_per_group,
            p: self.p,
            q: self.q,
            rho: self.rho,
            ..TopologyConfig::new(groups, seed)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErnnSettings {
    pub hidden: usize,
    pub train: TrainConfig,
}

impl Default for ErnnSettings {
    fn default() -> Self {
        Self {
            hidden: ERNN_HIDDEN,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EsnSettings {
    /// Reservoir size is this times the group count.
    pub neurons_per_component: usize,
    pub bounds: EsnBounds,
    /// Its `seed` is replaced by the experiment's base seed.
    pub ga: GaConfig,
}

impl Default for EsnSettings {
    fn default() -> Self {
        Self {
            neurons_per_component: NEURONS_PER_COMPONENT,
            bounds: EsnBounds::default(),
            ga: GaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Tornn(TornnSettings),
    Ernn(ErnnSettings),
    Esn(EsnSettings),
}

impl ModelConfig {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Tornn => ModelConfig::Tornn(TornnSettings::default()),
            ModelKind::Ernn => ModelConfig::Ernn(ErnnSettings::default()),
            ModelKind::Esn => ModelConfig::Esn(EsnSettings::default()),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Tornn(_) => ModelKind::Tornn,
            ModelConfig::Ernn(_) => ModelKind::Ernn,
            ModelConfig::Esn(_) => ModelKind::Esn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Tornn(s) => {
                s.topology(1, 0).validate()?;
                s.train.validate()
            }
            ModelConfig::Ernn(s) => {
                if s.hidden == 0 {
                    return Err(Error::invalid("hidden", "must be at least 1"));
                }
                s.train.validate()
            }
            ModelConfig::Esn(s) => {
                if s.neurons_per_component == 0 {
                    return Err(Error::invalid("neurons_per_component", "must be at least 1"));
                }
                s.bounds.validate()?;
                s.ga.validate()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub models: Vec<ModelConfig>,
    pub trials: usize,
    pub base_seed: u64,
    /// Overrides the detected group count (TORNN groups, ESN size).
    pub groups: Option<usize>,
    /// Where records, summaries and plot data go; nothing is written if unset.
    pub out_dir: Option<PathBuf>,
    /// Worker threads for trials; all available cores if unset.
    pub jobs: Option<usize>,
    /// Test-range samples per plot file; the whole test range if unset.
    pub plot_window: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            models: [ModelKind::Tornn, ModelKind::Ernn, ModelKind::Esn]
                .into_iter()
                .map(ModelConfig::default_for)
                .collect(),
            trials: 10,
            base_seed: 0,
            groups: None,
            out_dir: None,
            jobs: None,
            plot_window: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials", "must be at least 1"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("models", "need at least one model"));
        }
        if self.groups == Some(0) {
            return Err(Error::invalid("groups", "must be at least 1"));
        }
        if self.jobs == Some(0) {
            return Err(Error::invalid("jobs", "must be at least 1"));
        }
        self.models.iter().try_for_each(ModelConfig::validate)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Outcome of one model on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub model: ModelKind,
    pub task: String,
    pub trial: usize,
    pub seed: u64,
    pub groups: usize,
    /// `None` when the trial failed.
    pub test_nrmse: Option<f64>,
    pub failure: Option<String>,
    pub train_seconds: f64,
    pub epochs: Option<usize>,
    /// Learned cutoffs per group (TORNN only).
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub esn: Option<EsnHyperparams>,
    pub series_hash: String,
    /// Digest of the fixed weights before and after training (TORNN only).
    pub digest_before: Option<String>,
    pub digest_after: Option<String>,
    /// Dataset index of the first test sample.
    pub test_start: usize,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
}

impl ResultRecord {
    pub fn failed(&self) -> bool {
        self.test_nrmse.is_none()
    }

    /// Prediction minus truth over the test range.
    pub fn residuals(&self) -> Vec<f64> {
        self.prediction
            .iter()
            .zip(&self.truth)
            .map(|(p, t)| p - t)
            .collect()
    }

    pub fn mean_abs_residual(&self) -> f64 {
        let r = self.residuals();
        r.iter().map(|v| v.abs()).sum::<f64>() / r.len().max(1) as f64
    }
}

/// Everything a trial produces, including the training curve.
#[derive(Debug, Clone)]
pub struct TrialOutput {
    pub record: ResultRecord,
    pub curve: Vec<CurvePoint>,
}

/// GA outcome for the ESN of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnSearch {
    pub best: EsnHyperparams,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub task: String,
    pub groups: usize,
    pub series_hash: String,
    /// Ordered by model (config order), then trial.
    pub records: Vec<ResultRecord>,
    pub esn_search: Option<EsnSearch>,
}

fn blank_record(kind: ModelKind, task: &TaskData, trial: usize, seed: u64, groups: usize) -> ResultRecord {
    ResultRecord {
        model: kind,
        task: task.id.clone(),
        trial,
        seed,
        groups,
        test_nrmse: None,
        failure: None,
        train_seconds: 0.0,
        epochs: None,
        gamma1: Vec::new(),
        gamma2: Vec::new(),
        esn: None,
        series_hash: task.series_hash.clone(),
        digest_before: None,
        digest_after: None,
        test_start: task.dataset.test.start,
        truth: Vec::new(),
        prediction: Vec::new(),
    }
}

fn failed_record(
    kind: ModelKind,
    task: &TaskData,
    trial: usize,
    seed: u64,
    groups: usize,
    err: &Error,
) -> ResultRecord {
    ResultRecord {
        failure: Some(err.to_string()),
        ..blank_record(kind, task, trial, seed, groups)
    }
}

/// Runs one model on one trial. Failures come back as failed records.
/// `esn_hp` is required for ESN models.
pub fn run_trial(
    task: &TaskData,
    model: &ModelConfig,
    groups: usize,
    trial: usize,
    seed: u64,
    esn_hp: Option<&EsnHyperparams>,
) -> TrialOutput {
    let kind = model.kind();
    match try_trial(task, model, groups, trial, seed, esn_hp) {
        Ok(out) => out,
        Err(e) => TrialOutput {
            record: failed_record(kind, task, trial, seed, groups, &e),
            curve: Vec::new(),
        },
    }
}

fn try_trial(
    task: &TaskData,
    model: &ModelConfig,
    groups: usize,
    trial: usize,
    seed: u64,
    esn_hp: Option<&EsnHyperparams>,
) -> Result<TrialOutput> {
    let ds = &task.dataset;
    let test = ds.test.clone();
    let truth = ds.targets[test.clone()].to_vec();
    let mut record = ResultRecord {
        truth,
        ..blank_record(model.kind(), task, trial, seed, groups)
    };
    let started = Instant::now();
    let mut curve = Vec::new();

    let prediction = match model {
        ModelConfig::Tornn(s) => {
            let weights = NetworkWeights::generate(&s.topology(groups, seed))?;
            record.digest_before = Some(weights.digest());
            let cfg = TrainConfig { seed, ..s.train };
            let out = train(Tornn::init(weights, 1, seed), ds, &cfg)?;
            record.digest_after = Some(out.model.weights.digest());
            record.epochs = Some(out.epochs_run);
            record.gamma1 = out.model.gammas.gamma1();
            record.gamma2 = out.model.gammas.gamma2();
            curve = out.curve;
            predict_scalar(&out.model, &ds.inputs[..test.end])?[test.clone()].to_vec()
        }
        ModelConfig::Ernn(s) => {
            let cfg = TrainConfig { seed, ..s.train };
            let out = train(Ernn::init(s.hidden, 1, 1, seed), ds, &cfg)?;
            record.epochs = Some(out.epochs_run);
            curve = out.curve;
            predict_scalar(&out.model, &ds.inputs[..test.end])?[test.clone()].to_vec()
        }
        ModelConfig::Esn(s) => {
            let hp =
                esn_hp.ok_or_else(|| Error::invalid("esn_hp", "ESN trials need searched hyperparameters"))?;
            let fitted = fit_esn(hp, s.neurons_per_component * groups, ds, seed)?;
            record.esn = Some(*hp);
            fitted.predict_range(ds, test.clone())?
        }
    };
    record.train_seconds = started.elapsed().as_secs_f64();
    let score = nrmse(&prediction, &record.truth)?;
    if !score.is_finite() {
        return Err(Error::NonFinite {
            t: test.start,
            context: "test predictions",
        });
    }
    record.test_nrmse = Some(score);
    record.prediction = prediction;
    Ok(TrialOutput { record, curve })
}

/// GA search over the ESN hyperparameters of a task, seeded by `seed`.
pub fn search_esn(task: &TaskData, settings: &EsnSettings, groups: usize, seed: u64) -> Result<EsnSearch> {
    let ga = GaConfig { seed, ..settings.ga };
    let res = ga_search(
        &task.dataset,
        settings.neurons_per_component * groups,
        &settings.bounds,
        &ga,
    )?;
    Ok(EsnSearch {
        best: res.best,
        best_fitness: res.best_fitness,
        history: res.history,
    })
}

/// Runs every model for every trial on the configured task. Writes records,
/// summary, curves, GA trace and plot data when `out_dir` is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let task = build_task(&cfg.task, cfg.base_seed)?;
    let groups = cfg.groups.unwrap_or(task.detected_groups);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::invalid("jobs", e.to_string()))?;

    pool.install(|| {
        // One search per task; every ESN trial reuses its result.
        let esn_search = match cfg.models.iter().find_map(|m| match m {
            ModelConfig::Esn(s) => Some(s),
            _ => None,
        }) {
            Some(s) => Some(search_esn(&task, s, groups, cfg.base_seed)),
            None => None,
        };
        let (esn_hp, esn_err) = match &esn_search {
            Some(Ok(s)) => (Some(s.best), None),
            Some(Err(e)) => (None, Some(e.to_string())),
            None => (None, None),
        };

        let units: Vec<(usize, usize)> = (0..cfg.models.len())
            .flat_map(|m| (0..cfg.trials).map(move |t| (m, t)))
            .collect();
        let outputs: Vec<TrialOutput> = units
            .par_iter()
            .map(|&(m, trial)| {
                let model = &cfg.models[m];
                let seed = cfg.base_seed.wrapping_add(trial as u64);
                if let (ModelKind::Esn, Some(msg)) = (model.kind(), &esn_err) {
                    let err = Error::invalid("esn_search", msg.clone());
                    return TrialOutput {
                        record: failed_record(ModelKind::Esn, &task, trial, seed, groups, &err),
                        curve: Vec::new(),
                    };
                }
                run_trial(&task, model, groups, trial, seed, esn_hp.as_ref())
            })
            .collect();

        let esn_search = esn_search.and_then(|r| r.ok());
        if let Some(dir) = &cfg.out_dir {
            write_outputs(dir, &task, &outputs, esn_search.as_ref(), cfg.plot_window)?;
        }
        Ok(ExperimentOutput {
            task: task.id.clone(),
            groups,
            series_hash: task.series_hash.clone(),
            records: outputs.into_iter().map(|o| o.record).collect(),
            esn_search,
        })
    })
}

fn write_outputs(
    dir: &Path,
    task: &TaskData,
    outputs: &[TrialOutput],
    esn: Option<&EsnSearch>,
    plot_window: Option<usize>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let records: Vec<ResultRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    write_records_json(&dir.join(format!("{}_records.json", task.id)), &records)?;
    for o in outputs.iter().filter(|o| !o.curve.is_empty()) {
        let r = &o.record;
        write_curve_csv(
            &dir.join(format!("{}_{}_{}_curve.csv", r.task, r.model, r.trial)),
            &o.curve,
        )?;
    }
    if let Some(s) = esn {
        write_ga_trace_csv(&dir.join(format!("{}_esn_ga.csv", task.id)), &s.history)?;
        write_hyperparams_json(&dir.join(format!("{}_esn_best.json", task.id)), &s.best)?;
    }
    emit_plot_data(&records, dir, plot_window)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: String,
    pub model: ModelKind,
    pub mean_nrmse: f64,
    /// Population standard deviation.
    pub std_nrmse: f64,
    /// Successful trials.
    pub n_trials: usize,
    pub n_failed: usize,
}

/// Mean and population standard deviation of the test NRMSE per
/// (task, model), in order of first appearance. Failed trials are counted
/// in `n_failed` and excluded from the statistics.
pub fn summarize(records: &[ResultRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, ModelKind)> = Vec::new();
    let mut groups: HashMap<(String, ModelKind), (Vec<f64>, usize)> = HashMap::new();
    for r in records {
        let key = (r.task.clone(), r.model);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), 0)
        });
        match r.test_nrmse {
            Some(v) => entry.0.push(v),
            None => entry.1 += 1,
        }
    }
    order
        .into_iter()
        .map(|key| {
            let (values, n_failed) = &groups[&key];
            let (mean, std) = if values.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (timeseries::mean(values), timeseries::std_dev(values))
            };
            SummaryRow {
                task: key.0,
                model: key.1,
                mean_nrmse: mean,
                std_nrmse: std,
                n_trials: values.len(),
                n_failed: *n_failed,
            }
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 6] = ["task", "model", "mean_nrmse", "std_nrmse", "n_trials", "n_failed"];

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = timeseries::csv_writer(path)?;
    timeseries::write_row(&mut w, path, SUMMARY_HEADER)?;
    for r in rows {
        timeseries::write_row(
            &mut w,
            path,
            [
                r.task.clone(),
                r.model.to_string(),
                r.mean_nrmse.to_string(),
                r.std_nrmse.to_string(),
                r.n_trials.to_string(),
                r.n_failed.to_string(),
            ],
        )?;
    }
    timeseries::flush(w, path)
}

fn open_csv(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let found = reader
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    if found != header {
        return Err(Error::Parse(format!(
            "{}: expected header `{}`",
            path.display(),
            header.join(",")
        )));
    }
    Ok(reader)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut reader = open_csv(path, &SUMMARY_HEADER)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let model: String = timeseries::parse_field(&record, 1, path)?;
        rows.push(SummaryRow {
            task: timeseries::parse_field(&record, 0, path)?,
            model: model.parse()?,
            mean_nrmse: timeseries::parse_field(&record, 2, path)?,
            std_nrmse: timeseries::parse_field(&record, 3, path)?,
            n_trials: timeseries::parse_field(&record, 4, path)?,
            n_failed: timeseries::parse_field(&record, 5, path)?,
        });
    }
    Ok(rows)
}

pub fn write_records_json(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let text = serde_json::to_string(records)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records_json(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn plot_file_name(r: &ResultRecord) -> String {
    format!("{}_{}_{}.csv", r.task, r.model, r.trial)
}

/// One `{task}_{model}_{trial}.csv` per successful record with columns
/// `t,truth,prediction,residual` (t is the dataset index), plus
/// `summary.csv`. Returns the written paths, summary last.
pub fn emit_plot_data(records: &[ResultRecord], dir: &Path, window: Option<usize>) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for r in records.iter().filter(|r| !r.failed()) {
        let path = dir.join(plot_file_name(r));
        let n = window.unwrap_or(r.truth.len()).min(r.truth.len());
        let mut w = timeseries::csv_writer(&path)?;
        timeseries::write_row(&mut w, &path, PLOT_HEADER)?;
        for i in 0..n {
            let (y, p) = (r.truth[i], r.prediction[i]);
            timeseries::write_row(
                &mut w,
                &path,
                [
                    (r.test_start + i).to_string(),
                    y.to_string(),
                    p.to_string(),
                    (p - y).to_string(),
                ],
            )?;
        }
        timeseries::flush(w, &path)?;
        written.push(path);
    }
    let summary = dir.join("summary.csv");
    write_summary_csv(&summary, &summarize(records))?;
    written.push(summary);
    Ok(written)
}

const PLOT_HEADER: [&str; 4] = ["t", "truth", "prediction", "residual"];

#[derive(Debug, Clone, PartialEq)]
pub struct PlotData {
    pub t: Vec<usize>,
    pub truth: Vec<f64>,
    pub prediction: Vec<f64>,
    pub residual: Vec<f64>,
}

pub fn read_plot_csv(path: &Path) -> Result<PlotData> {
    let mut reader = open_csv(path, &PLOT_HEADER)?;
    let mut out = PlotData {
        t: Vec::new(),
        truth: Vec::new(),
        prediction: Vec::new(),
        residual: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        out.t.push(timeseries::parse_field(&record, 0, path)?);
        out.truth.push(timeseries::parse_field(&record, 1, path)?);
        out.prediction.push(timeseries::parse_field(&record, 2, path)?);
        out.residual.push(timeseries::parse_field(&record, 3, path)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(task: &str, model: ModelKind, trial: usize, nrmse: Option<f64>) -> ResultRecord {
        let task_cfg = TaskConfig {
            length: 400,
            ..TaskConfig::default()
        };
        let data = build_task(&task_cfg, 0).unwrap();
        let mut r = failed_record(model, &data, trial, trial as u64, 2, &Error::ConstantTruth);
        r.task = task.into();
        r.test_nrmse = nrmse;
        if nrmse.is_some() {
            r.failure = None;
            r.truth = vec![0.5, -0.25, 1.0];
            r.prediction = vec![0.25, 0.0, 1.5];
        }
        r
    }

    #[test]
    fn summary_uses_population_std() {
        let rows = summarize(&[
            record("x2", ModelKind::Tornn, 0, Some(0.1)),
            record("x2", ModelKind::Tornn, 1, Some(0.3)),
        ]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean_nrmse - 0.2).abs() < 1e-15);
        assert!((rows[0].std_nrmse - 0.1).abs() < 1e-15);
    }

    #[test]
    fn single_record_has_zero_std() {
        let rows = summarize(&[record("x3", ModelKind::Ernn, 0, Some(0.4))]);
        assert_eq!(rows[0].std_nrmse, 0.0);
        assert_eq!(rows[0].n_trials, 1);
    }

    #[test]
    fn failures_are_counted_not_averaged() {
        let rows = summarize(&[
            record("x2", ModelKind::Esn, 0, Some(0.2)),
            record("x2", ModelKind::Esn, 1, None),
            record("x2", ModelKind::Tornn, 0, None),
        ]);
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].n_trials, rows[0].n_failed), (1, 1));
        assert_eq!(rows[0].mean_nrmse, 0.2);
        assert_eq!((rows[1].n_trials, rows[1].n_failed), (0, 1));
        assert!(rows[1].mean_nrmse.is_nan());
    }

    #[test]
    fn residuals_are_prediction_minus_truth() {
        let r = record("x2", ModelKind::Tornn, 0, Some(0.1));
        assert_eq!(r.residuals(), vec![-0.25, 0.25, 0.5]);
    }

    #[test]
    fn task_ids_and_parsing() {
        assert_eq!(TaskConfig::new(5, false).id(), "x5");
        assert_eq!(TaskConfig::new(7, true).id(), "x7_noisy");
        assert_eq!(parse_task("x3").unwrap(), 3);
        assert!(parse_task("3").is_err());
        assert!(parse_task("x0").is_err());
        assert_eq!("ERNN".parse::<ModelKind>().unwrap(), ModelKind::Ernn);
    }

    #[test]
    fn config_defaults_mirror_table() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.trials, 10);
        let ModelConfig::Tornn(t) = cfg.models[0] else {
            panic!()
        };
        assert_eq!((t.neurons_per_group, t.p, t.q, t.rho), (20, 0.4, 0.1, 0.95));
        assert_eq!((t.train.lambda, t.train.tau_tnc), (1e-5, 10));
        let ModelConfig::Ernn(e) = cfg.models[1] else {
            panic!()
        };
        assert_eq!((e.hidden, e.train.lambda, e.train.tau_tnc), (91, 1e-5, 10));
    }

    #[test]
    fn config_json_fills_defaults() {
        let cfg = ExperimentConfig::from_json(
            r#"{"task": {"k": 3}, "models": [{"kind": "ernn", "hidden": 8}], "trials": 2}"#,
        )
        .unwrap();
        assert_eq!(cfg.task.k, 3);
        assert_eq!(cfg.task.horizon, 15);
        assert_eq!(
            cfg.models,
            vec![ModelConfig::Ernn(ErnnSettings {
                hidden: 8,
                ..Default::default()
            })]
        );
        let back = ExperimentConfig::from_json(&serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.trials = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.models = vec![ModelConfig::Tornn(TornnSettings {
            p: 0.1,
            q: 0.4,
            ..Default::default()
        })];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn detected_groups_match_oscillators() {
        for k in [2, 3] {
            let data = build_task(&TaskConfig::new(k, false), 0).unwrap();
            assert_eq!(data.detected_groups, k);
        }
    }
}
