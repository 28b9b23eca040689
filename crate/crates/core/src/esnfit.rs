//! Echo state network baseline: teacher-forced state harvesting, ridge
//! regression readout and a real-coded genetic search over the reservoir
//! hyperparameters.

use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::{gen_feedback_weights, EsnCell, EsnModel, EsnState, Readout, Recurrent};
use crate::rng::{self, streams, Rng};
use crate::timeseries::{self, nrmse, SupervisedDataset};
use crate::topology::{assign_weights, gen_input_weights, gen_uniform_mask, rescale_with_fallback};
use crate::{Error, Result};

/// Fitness assigned to candidates whose evaluation fails or diverges.
pub const WORST_FITNESS: f64 = 1e3;

/// Reservoir neurons per oscillator component.
pub const NEURONS_PER_COMPONENT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsnHyperparams {
    /// Spectral radius.
    pub rho: f64,
    /// Reservoir connectivity.
    pub r: f64,
    /// State-update noise standard deviation.
    pub xi: f64,
    pub omega_i: f64,
    /// Teacher scaling.
    pub omega_o: f64,
    /// Feedback scaling.
    pub omega_f: f64,
    /// Ridge regularization.
    pub lambda: f64,
}

pub const GENES: usize = 7;

impl EsnHyperparams {
    pub fn to_array(&self) -> [f64; GENES] {
        [
            self.rho,
            self.r,
            self.xi,
            self.omega_i,
            self.omega_o,
            self.omega_f,
            self.lambda,
        ]
    }

    pub fn from_array(a: [f64; GENES]) -> Self {
        Self {
            rho: a[0],
            r: a[1],
            xi: a[2],
            omega_i: a[3],
            omega_o: a[4],
            omega_f: a[5],
            lambda: a[6],
        }
    }
}

/// Box constraints of the search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EsnBounds {
    pub lower: EsnHyperparams,
    pub upper: EsnHyperparams,
}

impl Default for EsnBounds {
    fn default() -> Self {
        Self {
            lower: EsnHyperparams {
                rho: 0.1,
                r: 0.1,
                xi: 0.0,
                omega_i: 0.1,
                omega_o: 0.1,
                omega_f: 0.1,
                lambda: 0.0,
            },
            upper: EsnHyperparams {
                rho: 1.5,
                r: 0.5,
                xi: 0.1,
                omega_i: 1.0,
                omega_o: 1.0,
                omega_f: 1.0,
                lambda: 0.5,
            },
        }
    }
}

impl EsnBounds {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        if lo
            .iter()
            .zip(&hi)
            .any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite())
        {
            return Err(Error::invalid(
                "bounds",
                "need finite lower <= upper for every gene",
            ));
        }
        if lo[0] <= 0.0 || lo[1] < 0.0 || hi[1] > 1.0 || lo[2] < 0.0 || lo[4] <= 0.0 || lo[6] < 0.0 {
            return Err(Error::invalid("bounds", "range outside the admissible domain"));
        }
        Ok(())
    }

    pub fn contains(&self, hp: &EsnHyperparams) -> bool {
        let (lo, hi, v) = (self.lower.to_array(), self.upper.to_array(), hp.to_array());
        (0..GENES).all(|i| lo[i] <= v[i] && v[i] <= hi[i])
    }

    pub fn midpoint(&self) -> EsnHyperparams {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        EsnHyperparams::from_array(std::array::from_fn(|i| 0.5 * (lo[i] + hi[i])))
    }

    fn clip(&self, genes: &mut [f64; GENES]) {
        let (lo, hi) = (self.lower.to_array(), self.upper.to_array());
        for i in 0..GENES {
            genes[i] = genes[i].clamp(lo[i], hi[i]);
        }
    }
}

/// Reservoir of `size` neurons: Bernoulli(`r`) mask over standard normals,
/// rescaled to spectral radius `rho`; dense normal inputs; uniform feedback.
pub fn build_reservoir(hp: &EsnHyperparams, size: usize, seed: u64) -> Result<EsnCell> {
    let mask = gen_uniform_mask(size, hp.r, seed)?;
    let w_r = rescale_with_fallback(&assign_weights(&mask, seed), hp.rho)?;
    Ok(EsnCell {
        w_r,
        w_i: gen_input_weights(1, size, seed)?,
        w_f: gen_feedback_weights(size, 1, seed),
        leak: 1.0,
        input_scaling: hp.omega_i,
        feedback_scaling: hp.omega_f,
        state_noise: hp.xi,
    })
}

/// Teacher-forced states: the feedback path receives `omega_o * targets[t-1]`.
/// Rows are the steps from `washout` on; the last column is a constant 1.
/// Also returns the reservoir state after the final step.
pub fn harvest_states(
    cell: &EsnCell,
    inputs: &[f64],
    targets: &[f64],
    teacher_scaling: f64,
    washout: usize,
    rng: &mut Rng,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if inputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "harvest targets",
            expected: inputs.len(),
            actual: targets.len(),
        });
    }
    if washout >= inputs.len() {
        return Err(Error::invalid(
            "washout",
            format!("washout {washout} leaves no rows from {} steps", inputs.len()),
        ));
    }
    let h = cell.size();
    let mut states = DMatrix::zeros(inputs.len() - washout, h + 1);
    let mut x = DVector::zeros(h);
    let mut fb = 0.0;
    for (t, &u) in inputs.iter().enumerate() {
        x = cell.step(&x, &[u], &[fb], rng).map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite { t, context },
            other => other,
        })?;
        if t >= washout {
            let row = t - washout;
            for j in 0..h {
                states[(row, j)] = x[j];
            }
            states[(row, h)] = 1.0;
        }
        fb = teacher_scaling * targets[t];
    }
    Ok((states, x))
}

/// Solves `min ||S w - y||^2 + lambda ||w||^2` through a QR factorization of
/// the stacked system `[S; sqrt(lambda) I]`. The bias column is penalized
/// like every other column.
pub fn ridge_readout(states: &DMatrix<f64>, targets: &[f64], lambda: f64) -> Result<DVector<f64>> {
    let (rows, cols) = states.shape();
    if rows == 0 {
        return Err(Error::invalid("states", "need at least one row"));
    }
    if targets.len() != rows {
        return Err(Error::DimensionMismatch {
            context: "ridge targets",
            expected: rows,
            actual: targets.len(),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda", "must be non-negative"));
    }
    let mut a = DMatrix::zeros(rows + cols, cols);
    a.rows_mut(0, rows).copy_from(states);
    let s = lambda.sqrt();
    for j in 0..cols {
        a[(rows + j, j)] = s;
    }
    let mut b = DVector::zeros(rows + cols);
    b.rows_mut(0, rows).copy_from_slice(targets);

    let qr = a.qr();
    let r = qr.r();
    let diag_max = r.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diag_min = r.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(diag_min > 1e-10 * diag_max) {
        return Err(Error::SingularSystem { lambda });
    }
    qr.q_tr_mul(&mut b);
    r.solve_upper_triangular(&b.rows(0, cols).into_owned())
        .ok_or(Error::SingularSystem { lambda })
}

/// An ESN with a fitted readout and the state reached at the end of the
/// teacher-forced fitting pass.
#[derive(Debug, Clone)]
pub struct FittedEsn {
    pub model: EsnModel,
    pub hyperparams: EsnHyperparams,
    end_state: DVector<f64>,
    fit_end: usize,
}

/// Fits the readout on `ds.train` (states warmed up over the washout).
pub fn fit_esn(hp: &EsnHyperparams, size: usize, ds: &SupervisedDataset, seed: u64) -> Result<FittedEsn> {
    let cell = build_reservoir(hp, size, seed)?;
    let mut noise = rng::seeded(seed, streams::ESN_STATE_NOISE);
    let end = ds.train.end;
    let (states, end_state) = harvest_states(
        &cell,
        &ds.inputs[..end],
        &ds.targets[..end],
        hp.omega_o,
        ds.train.start,
        &mut noise,
    )?;
    let scaled: Vec<f64> = ds.targets[ds.train.clone()]
        .iter()
        .map(|d| hp.omega_o * d)
        .collect();
    let w = ridge_readout(&states, &scaled, hp.lambda)?;
    let h = cell.size();
    let readout = Readout {
        w_o: DMatrix::from_column_slice(h, 1, &w.as_slice()[..h]),
        bias: DVector::from_element(1, w[h]),
    };
    Ok(FittedEsn {
        model: EsnModel {
            cell: EsnCell {
                state_noise: 0.0,
                ..cell
            },
            readout,
            teacher_scaling: hp.omega_o,
            noise_seed: seed,
        },
        hyperparams: *hp,
        end_state,
        fit_end: end,
    })
}

impl FittedEsn {
    /// Free-running predictions from the end of the fitting pass up to (not
    /// including) index `until`, feeding back the model's own output.
    pub fn predict_free(&self, ds: &SupervisedDataset, until: usize) -> Result<Vec<f64>> {
        if until < self.fit_end || until > ds.len() {
            return Err(Error::invalid("until", "outside the free-running range"));
        }
        let mut state = EsnState {
            x: self.end_state.clone(),
            y_prev: DVector::from_element(1, self.model.teacher_scaling * ds.targets[self.fit_end - 1]),
            rng: rng::seeded(self.model.noise_seed, streams::ESN_STATE_NOISE),
        };
        let mut out = Vec::with_capacity(until - self.fit_end);
        for (t, &u) in ds.inputs[self.fit_end..until].iter().enumerate() {
            let (next, y) = self.model.step(&state, &[u]).map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite {
                    t: t + self.fit_end,
                    context,
                },
                other => other,
            })?;
            out.push(y[0]);
            state = next;
        }
        Ok(out)
    }

    /// Predictions over `range`, which must start at or after the fit end.
    pub fn predict_range(&self, ds: &SupervisedDataset, range: Range<usize>) -> Result<Vec<f64>> {
        if range.start < self.fit_end {
            return Err(Error::invalid("range", "starts inside the fitting range"));
        }
        let all = self.predict_free(ds, range.end)?;
        Ok(all[range.start - self.fit_end..].to_vec())
    }

    pub fn nrmse_on(&self, ds: &SupervisedDataset, range: Range<usize>) -> Result<f64> {
        let preds = self.predict_range(ds, range.clone())?;
        nrmse(&preds, &ds.targets[range])
    }
}

/// Validation NRMSE averaged over reservoir seeds; failures score
/// [`WORST_FITNESS`].
pub fn fitness(hp: &EsnHyperparams, size: usize, ds: &SupervisedDataset, seeds: &[u64]) -> f64 {
    let scores: Vec<f64> = seeds
        .iter()
        .map(|&s| {
            fit_esn(hp, size, ds, s)
                .and_then(|f| f.nrmse_on(ds, ds.validation.clone()))
                .ok()
                .filter(|v| v.is_finite())
                .map_or(WORST_FITNESS, |v| v.min(WORST_FITNESS))
        })
        .collect();
    timeseries::mean(&scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    pub mutation_rate: f64,
    /// Mutation standard deviation as a fraction of each gene's range.
    pub mutation_scale: f64,
    pub elitism: usize,
    pub tournament: usize,
    /// Reservoir seeds averaged per fitness evaluation.
    pub eval_seeds: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 20,
            generations: 30,
            crossover_rate: 0.9,
            mutation_rate: 0.1,
            mutation_scale: 0.1,
            elitism: 2,
            tournament: 3,
            eval_seeds: 3,
            seed: 0,
        }
    }
}

impl GaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 {
            return Err(Error::invalid("population", "must be at least 2"));
        }
        if self.generations == 0 || self.tournament == 0 || self.eval_seeds == 0 {
            return Err(Error::invalid(
                "ga",
                "generations, tournament and eval_seeds must be positive",
            ));
        }
        for (name, v) in [
            ("crossover_rate", self.crossover_rate),
            ("mutation_rate", self.mutation_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if !(self.mutation_scale >= 0.0) {
            return Err(Error::invalid("mutation_scale", "must be non-negative"));
        }
        if self.elitism > self.population {
            return Err(Error::invalid("elitism", "cannot exceed the population"));
        }
        Ok(())
    }

    pub fn eval_seeds(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64)
            .map(|j| self.seed.wrapping_mul(1000).wrapping_add(j))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub generation: usize,
    /// Best fitness seen so far (monotone non-increasing).
    pub best_nrmse: f64,
    /// Mean fitness of the current population.
    pub mean_nrmse: f64,
}

#[derive(Debug, Clone)]
pub struct GaResult {
    pub best: EsnHyperparams,
    pub best_fitness: f64,
    pub history: Vec<GenerationStats>,
    /// Every genome evaluated, in evaluation order.
    pub evaluated: Vec<(EsnHyperparams, f64)>,
}

fn random_genome(bounds: &EsnBounds, rng: &mut Rng) -> [f64; GENES] {
    let (lo, hi) = (bounds.lower.to_array(), bounds.upper.to_array());
    std::array::from_fn(|i| {
        if hi[i] > lo[i] {
            rng.gen_range(lo[i]..=hi[i])
        } else {
            lo[i]
        }
    })
}

fn tournament<'a>(pop: &'a [([f64; GENES], f64)], size: usize, rng: &mut Rng) -> &'a [f64; GENES] {
    let mut best: Option<&([f64; GENES], f64)> = None;
    for _ in 0..size {
        let c = pop.choose(rng).unwrap();
        if best.map_or(true, |b| c.1 < b.1) {
            best = Some(c);
        }
    }
    &best.unwrap().0
}

/// Genetic search starting from a uniformly random population.
pub fn ga_search(
    ds: &SupervisedDataset,
    size: usize,
    bounds: &EsnBounds,
    cfg: &GaConfig,
) -> Result<GaResult> {
    bounds.validate()?;
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed, streams::GA);
    let initial: Vec<EsnHyperparams> = (0..cfg.population)
        .map(|_| EsnHyperparams::from_array(random_genome(bounds, &mut rng)))
        .collect();
    ga_search_from(ds, size, bounds, cfg, initial)
}

/// Genetic search from a given initial population: tournament selection,
/// uniform crossover, Gaussian mutation clipped to the bounds, elitism.
pub fn ga_search_from(
    ds: &SupervisedDataset,
    size: usize,
    bounds: &EsnBounds,
    cfg: &GaConfig,
    initial: Vec<EsnHyperparams>,
) -> Result<GaResult> {
    bounds.validate()?;
    cfg.validate()?;
    if initial.len() != cfg.population {
        return Err(Error::DimensionMismatch {
            context: "initial population",
            expected: cfg.population,
            actual: initial.len(),
        });
    }
    if let Some(bad) = initial.iter().find(|hp| !bounds.contains(hp)) {
        return Err(Error::invalid(
            "initial",
            format!("genome {bad:?} outside bounds"),
        ));
    }
    let seeds = cfg.eval_seeds();
    let evaluate = |genomes: &[[f64; GENES]]| -> Vec<f64> {
        genomes
            .par_iter()
            .map(|g| fitness(&EsnHyperparams::from_array(*g), size, ds, &seeds))
            .collect()
    };

    // the GA stream is advanced past initialization so that the operators
    // never reuse the draws that produced the initial population
    let mut rng = rng::seeded(cfg.seed, streams::GA);
    for _ in 0..cfg.population {
        random_genome(bounds, &mut rng);
    }
    let (lo, hi) = (bounds.lower.to_array(), bounds.upper.to_array());
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let genomes: Vec<[f64; GENES]> = initial.iter().map(|h| h.to_array()).collect();
    let scores = evaluate(&genomes);
    let mut evaluated: Vec<(EsnHyperparams, f64)> = genomes
        .iter()
        .zip(&scores)
        .map(|(g, s)| (EsnHyperparams::from_array(*g), *s))
        .collect();
    let mut pop: Vec<([f64; GENES], f64)> = genomes.into_iter().zip(scores).collect();
    let mut best = best_of(&pop);
    let mut history = vec![stats(0, best.1, &pop)];

    for generation in 1..cfg.generations {
        pop.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut children = Vec::with_capacity(cfg.population - cfg.elitism);
        while children.len() < cfg.population - cfg.elitism {
            let a = *tournament(&pop, cfg.tournament, &mut rng);
            let b = *tournament(&pop, cfg.tournament, &mut rng);
            let mut child = a;
            if rng.gen_bool(cfg.crossover_rate) {
                for i in 0..GENES {
                    if rng.gen_bool(0.5) {
                        child[i] = b[i];
                    }
                }
            }
            for i in 0..GENES {
                if rng.gen_bool(cfg.mutation_rate) {
                    let z: f64 = std_normal.sample(&mut rng);
                    child[i] += z * cfg.mutation_scale * (hi[i] - lo[i]);
                }
            }
            bounds.clip(&mut child);
            children.push(child);
        }
        let scores = evaluate(&children);
        evaluated.extend(
            children
                .iter()
                .zip(&scores)
                .map(|(g, s)| (EsnHyperparams::from_array(*g), *s)),
        );
        let mut next: Vec<([f64; GENES], f64)> = pop[..cfg.elitism].to_vec();
        next.extend(children.into_iter().zip(scores));
        pop = next;
        let gen_best = best_of(&pop);
        if gen_best.1 < best.1 {
            best = gen_best;
        }
        history.push(stats(generation, best.1, &pop));
    }

    Ok(GaResult {
        best: EsnHyperparams::from_array(best.0),
        best_fitness: best.1,
        history,
        evaluated,
    })
}

fn best_of(pop: &[([f64; GENES], f64)]) -> ([f64; GENES], f64) {
    *pop.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap()
}

fn stats(generation: usize, best: f64, pop: &[([f64; GENES], f64)]) -> GenerationStats {
    GenerationStats {
        generation,
        best_nrmse: best,
        mean_nrmse: pop.iter().map(|p| p.1).sum::<f64>() / pop.len() as f64,
    }
}

/// `generation,best_nrmse,mean_nrmse`.
pub fn write_ga_trace_csv(path: &Path, history: &[GenerationStats]) -> Result<()> {
    let mut w = timeseries::csv_writer(path)?;
    timeseries::write_row(&mut w, path, ["generation", "best_nrmse", "mean_nrmse"])?;
    for s in history {
        timeseries::write_row(
            &mut w,
            path,
            [
                s.generation.to_string(),
                s.best_nrmse.to_string(),
                s.mean_nrmse.to_string(),
            ],
        )?;
    }
    timeseries::flush(w, path)
}

pub fn write_hyperparams_json(path: &Path, hp: &EsnHyperparams) -> Result<()> {
    let text = serde_json::to_string_pretty(hp)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
