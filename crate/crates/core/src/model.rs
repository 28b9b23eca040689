//! Forward dynamics of the three recurrent cells and the affine readout.
//!
//! Bandpass (TORNN) neuron `n` in group `k`:
//!
//! ```text
//! x'  <- tanh((1 - g1_k) x'_n + g1_k (W_r x)_n + (W_i u)_n)
//! x'' <- (1 - g2_k) x''_n + g2_k x'
//! x   <- x' - x''
//! ```
//!
//! where `g1_k = sigmoid(theta1_k)` and `g2_k = sigmoid(theta2_k)` are shared
//! by every neuron of the group.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rng::{self, streams, Rng};
use crate::topology::{DenseMatrix, NetworkWeights, TopologyConfig};
use crate::{Error, Result};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid kept strictly inside (0, 1); plain `sigmoid` rounds to 1.0 past ~37.
fn cutoff(theta: f64) -> f64 {
    sigmoid(theta).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Unconstrained cutoff parameters, two per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
}

impl GammaParams {
    pub fn from_thetas(theta1: Vec<f64>, theta2: Vec<f64>) -> Result<Self> {
        if theta1.len() != theta2.len() {
            return Err(Error::DimensionMismatch {
                context: "theta2 length",
                expected: theta1.len(),
                actual: theta2.len(),
            });
        }
        Ok(Self { theta1, theta2 })
    }

    /// Builds parameters whose sigmoids equal the given gammas.
    pub fn from_gammas(gamma1: &[f64], gamma2: &[f64]) -> Result<Self> {
        let check = |g: &f64| *g > 0.0 && *g < 1.0;
        if !gamma1.iter().all(check) || !gamma2.iter().all(check) {
            return Err(Error::invalid("gamma", "values must lie in (0, 1)"));
        }
        Self::from_thetas(
            gamma1.iter().map(|&g| logit(g)).collect(),
            gamma2.iter().map(|&g| logit(g)).collect(),
        )
    }

    /// Per-group gammas drawn uniformly from (0.05, 0.95).
    pub fn init_random(groups: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, streams::THETA);
        let mut draw = |_| logit(rng.gen_range(0.05..0.95));
        let theta1 = (0..groups).map(&mut draw).collect();
        let theta2 = (0..groups).map(&mut draw).collect();
        Self { theta1, theta2 }
    }

    pub fn groups(&self) -> usize {
        self.theta1.len()
    }

    pub fn gamma1(&self) -> Vec<f64> {
        self.theta1.iter().map(|&t| cutoff(t)).collect()
    }

    pub fn gamma2(&self) -> Vec<f64> {
        self.theta2.iter().map(|&t| cutoff(t)).collect()
    }
}

/// Internal filter states and the exposed bandpass state, all of length `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub x_prime: DVector<f64>,
    pub x_second: DVector<f64>,
    pub x: DVector<f64>,
}

impl ModelState {
    pub fn zeros(h: usize) -> Self {
        Self {
            x_prime: DVector::zeros(h),
            x_second: DVector::zeros(h),
            x: DVector::zeros(h),
        }
    }
}

/// Affine readout `y = W_o^T x + bias` with `W_o` of shape `H x O`.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    pub w_o: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Readout {
    pub fn zeros(h: usize, o: usize) -> Self {
        Self {
            w_o: DMatrix::zeros(h, o),
            bias: DVector::zeros(o),
        }
    }

    /// Weights from `N(0, 1/sqrt(O))` (standard deviation), zero bias.
    pub fn init_random(h: usize, o: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, streams::READOUT);
        let normal = Normal::new(0.0, 1.0 / (o as f64).sqrt()).unwrap();
        Self {
            w_o: DMatrix::from_fn(h, o, |_, _| normal.sample(&mut rng)),
            bias: DVector::zeros(o),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_o.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.w_o.ncols()
    }

    pub fn parameter_count(&self) -> usize {
        self.w_o.len() + self.bias.len()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = self.bias.clone();
        y.gemv_tr(1.0, &self.w_o, x, 1.0);
        y
    }
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

fn ensure_finite(v: &DVector<f64>, context: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { t: 0, context })
    }
}

/// One bandpass step. The recurrent term reads the full exposed state `x` of
/// every neuron; only the recurrent term is scaled by `gamma1`.
pub fn tornn_step(
    state: &ModelState,
    u: &[f64],
    weights: &NetworkWeights,
    gammas: &GammaParams,
    readout: &Readout,
) -> Result<(ModelState, DVector<f64>)> {
    let h = weights.total_neurons();
    check_dim("tornn state", h, state.x.len())?;
    check_dim("tornn input", weights.w_i.ncols(), u.len())?;
    check_dim("tornn groups", weights.groups(), gammas.groups())?;
    check_dim("tornn readout", h, readout.hidden())?;

    let g1 = gammas.gamma1();
    let g2 = gammas.gamma2();
    let mut pre = DVector::zeros(h);
    pre.gemv(1.0, &weights.w_i, &DVector::from_column_slice(u), 0.0);
    let mut rec = DVector::zeros(h);
    rec.gemv(1.0, &weights.w_r, &state.x, 0.0);

    let mut next = ModelState::zeros(h);
    for n in 0..h {
        let k = weights.group_of[n];
        let xp = ((1.0 - g1[k]) * state.x_prime[n] + g1[k] * rec[n] + pre[n]).tanh();
        let xs = (1.0 - g2[k]) * state.x_second[n] + g2[k] * xp;
        next.x_prime[n] = xp;
        next.x_second[n] = xs;
        next.x[n] = xp - xs;
    }
    ensure_finite(&next.x, "tornn state")?;
    let y = readout.apply(&next.x);
    Ok((next, y))
}

/// Trainable bandpass network: fixed weights, cutoffs and readout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tornn {
    pub weights: NetworkWeights,
    pub gammas: GammaParams,
    pub readout: Readout,
}

impl Tornn {
    pub fn new(weights: NetworkWeights, gammas: GammaParams, readout: Readout) -> Result<Self> {
        check_dim("tornn groups", weights.groups(), gammas.groups())?;
        check_dim("tornn readout", weights.total_neurons(), readout.hidden())?;
        Ok(Self {
            weights,
            gammas,
            readout,
        })
    }

    /// Random cutoffs and readout for the given fixed weights.
    pub fn init(weights: NetworkWeights, outputs: usize, seed: u64) -> Self {
        let gammas = GammaParams::init_random(weights.groups(), seed);
        let readout = Readout::init_random(weights.total_neurons(), outputs, seed);
        Self {
            weights,
            gammas,
            readout,
        }
    }

    /// `2K + H*O + O`.
    pub fn trainable_parameter_count(&self) -> usize {
        2 * self.gammas.groups() + self.readout.parameter_count()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TornnCheckpoint {
            topology: self.weights.config,
            recurrent: (&self.weights.w_r).into(),
            input: (&self.weights.w_i).into(),
            theta1: self.gammas.theta1.clone(),
            theta2: self.gammas.theta2.clone(),
            readout: ReadoutDoc::from(&self.readout),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TornnCheckpoint = serde_json::from_str(text)?;
        let h = doc.topology.total_neurons();
        let weights = NetworkWeights {
            config: doc.topology,
            w_r: doc.recurrent.to_matrix()?,
            w_i: doc.input.to_matrix()?,
            group_of: (0..h).map(|n| doc.topology.group_of(n)).collect(),
        };
        check_dim("checkpoint recurrent rows", h, weights.w_r.nrows())?;
        Self::new(
            weights,
            GammaParams::from_thetas(doc.theta1, doc.theta2)?,
            doc.readout.to_readout()?,
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TornnCheckpoint {
    topology: TopologyConfig,
    recurrent: DenseMatrix,
    input: DenseMatrix,
    theta1: Vec<f64>,
    theta2: Vec<f64>,
    readout: ReadoutDoc,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReadoutDoc {
    w_o: DenseMatrix,
    bias: Vec<f64>,
}

impl From<&Readout> for ReadoutDoc {
    fn from(r: &Readout) -> Self {
        Self {
            w_o: (&r.w_o).into(),
            bias: r.bias.iter().copied().collect(),
        }
    }
}

impl ReadoutDoc {
    fn to_readout(&self) -> Result<Readout> {
        let w_o = self.w_o.to_matrix()?;
        check_dim("readout bias", w_o.ncols(), self.bias.len())?;
        Ok(Readout {
            w_o,
            bias: DVector::from_vec(self.bias.clone()),
        })
    }
}

/// Leaky ESN reservoir with input scaling, output feedback and state noise.
///
/// `x <- tanh((1 - g) x + g W_r x + w_i W_i u + w_f W_f y_prev) + xi * n`
#[derive(Debug, Clone, PartialEq)]
pub struct EsnCell {
    pub w_r: DMatrix<f64>,
    pub w_i: DMatrix<f64>,
    /// `H x O`, uniform in `[-1, 1]`.
    pub w_f: DMatrix<f64>,
    pub leak: f64,
    pub input_scaling: f64,
    pub feedback_scaling: f64,
    pub state_noise: f64,
}

impl EsnCell {
    pub fn size(&self) -> usize {
        self.w_r.nrows()
    }

    pub fn step(&self, x: &DVector<f64>, u: &[f64], y_prev: &[f64], rng: &mut Rng) -> Result<DVector<f64>> {
        let h = self.size();
        check_dim("esn state", h, x.len())?;
        check_dim("esn input", self.w_i.ncols(), u.len())?;
        check_dim("esn feedback", self.w_f.ncols(), y_prev.len())?;
        if !(self.leak > 0.0 && self.leak <= 1.0) {
            return Err(Error::invalid(
                "leak",
                format!("must lie in (0, 1], got {}", self.leak),
            ));
        }
        let mut pre = x * (1.0 - self.leak);
        pre.gemv(self.leak, &self.w_r, x, 1.0);
        pre.gemv(self.input_scaling, &self.w_i, &DVector::from_column_slice(u), 1.0);
        if self.feedback_scaling != 0.0 {
            pre.gemv(
                self.feedback_scaling,
                &self.w_f,
                &DVector::from_column_slice(y_prev),
                1.0,
            );
        }
        pre.apply(|v| *v = v.tanh());
        if self.state_noise > 0.0 {
            for v in pre.iter_mut() {
                let g: f64 = StandardNormal.sample(rng);
                *v += self.state_noise * g;
            }
        }
        ensure_finite(&pre, "esn state")?;
        Ok(pre)
    }
}

pub fn gen_feedback_weights(h: usize, o: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::seeded(seed, streams::ESN_FEEDBACK);
    DMatrix::from_fn(h, o, |_, _| rng.gen_range(-1.0..=1.0))
}

/// One ESN step followed by the readout. `y_prev` is the previous output in
/// teacher-scaled units.
pub fn esn_step(
    cell: &EsnCell,
    x: &DVector<f64>,
    u: &[f64],
    y_prev: &[f64],
    readout: &Readout,
    rng: &mut Rng,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let next = cell.step(x, u, y_prev, rng)?;
    let y = readout.apply(&next);
    Ok((next, y))
}

/// Elman network with every weight trainable.
///
/// `h <- tanh(W_r h + W_i u + b_r)`, `y = W_o^T h + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ernn {
    pub w_r: DMatrix<f64>,
    pub w_i: DMatrix<f64>,
    pub b_r: DVector<f64>,
    pub readout: Readout,
}

impl Ernn {
    /// Weights into a layer of `d` units drawn from `N(0, 1/sqrt(d))`
    /// (standard deviation); biases start at zero.
    pub fn init(hidden: usize, inputs: usize, outputs: usize, seed: u64) -> Self {
        let mut rng = rng::seeded(seed, streams::ERNN);
        let hidden_dist = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).unwrap();
        let w_r = DMatrix::from_fn(hidden, hidden, |_, _| hidden_dist.sample(&mut rng));
        let w_i = DMatrix::from_fn(hidden, inputs, |_, _| hidden_dist.sample(&mut rng));
        Self {
            w_r,
            w_i,
            b_r: DVector::zeros(hidden),
            readout: Readout::init_random(hidden, outputs, seed),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_r.nrows()
    }

    /// `H^2 + H*I + H + H*O + O`.
    pub fn trainable_parameter_count(&self) -> usize {
        self.w_r.len() + self.w_i.len() + self.b_r.len() + self.readout.parameter_count()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = ErnnCheckpoint {
            recurrent: (&self.w_r).into(),
            input: (&self.w_i).into(),
            recurrent_bias: self.b_r.iter().copied().collect(),
            readout: (&self.readout).into(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ErnnCheckpoint = serde_json::from_str(text)?;
        let w_r = doc.recurrent.to_matrix()?;
        let w_i = doc.input.to_matrix()?;
        let readout = doc.readout.to_readout()?;
        check_dim("ernn recurrent", w_r.nrows(), w_r.ncols())?;
        check_dim("ernn input rows", w_r.nrows(), w_i.nrows())?;
        check_dim("ernn bias", w_r.nrows(), doc.recurrent_bias.len())?;
        check_dim("ernn readout", w_r.nrows(), readout.hidden())?;
        Ok(Self {
            w_r,
            w_i,
            b_r: DVector::from_vec(doc.recurrent_bias),
            readout,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ErnnCheckpoint {
    recurrent: DenseMatrix,
    input: DenseMatrix,
    recurrent_bias: Vec<f64>,
    readout: ReadoutDoc,
}

pub fn ernn_step(model: &Ernn, h: &DVector<f64>, u: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
    check_dim("ernn state", model.hidden(), h.len())?;
    check_dim("ernn input", model.w_i.ncols(), u.len())?;
    let mut pre = model.b_r.clone();
    pre.gemv(1.0, &model.w_r, h, 1.0);
    pre.gemv(1.0, &model.w_i, &DVector::from_column_slice(u), 1.0);
    pre.apply(|v| *v = v.tanh());
    ensure_finite(&pre, "ernn state")?;
    let y = model.readout.apply(&pre);
    Ok((pre, y))
}

/// A recurrent model that can be folded over an input sequence.
pub trait Recurrent {
    type State: Clone;

    fn input_dim(&self) -> usize;
    fn initial_state(&self) -> Self::State;
    fn step(&self, state: &Self::State, u: &[f64]) -> Result<(Self::State, DVector<f64>)>;
}

impl Recurrent for Tornn {
    type State = ModelState;

    fn input_dim(&self) -> usize {
        self.weights.w_i.ncols()
    }

    fn initial_state(&self) -> ModelState {
        ModelState::zeros(self.weights.total_neurons())
    }

    fn step(&self, state: &ModelState, u: &[f64]) -> Result<(ModelState, DVector<f64>)> {
        tornn_step(state, u, &self.weights, &self.gammas, &self.readout)
    }
}

impl Recurrent for Ernn {
    type State = DVector<f64>;

    fn input_dim(&self) -> usize {
        self.w_i.ncols()
    }

    fn initial_state(&self) -> DVector<f64> {
        DVector::zeros(self.hidden())
    }

    fn step(&self, state: &DVector<f64>, u: &[f64]) -> Result<(DVector<f64>, DVector<f64>)> {
        ernn_step(self, state, u)
    }
}

/// ESN state: reservoir activations, last output (teacher-scaled) and the
/// trajectory's own noise generator.
#[derive(Debug, Clone)]
pub struct EsnState {
    pub x: DVector<f64>,
    pub y_prev: DVector<f64>,
    pub rng: Rng,
}

/// ESN in free-running mode: the readout output is fed back.
#[derive(Debug, Clone, PartialEq)]
pub struct EsnModel {
    pub cell: EsnCell,
    pub readout: Readout,
    /// Teacher scaling: targets are multiplied by this before fitting.
    pub teacher_scaling: f64,
    pub noise_seed: u64,
}

impl Recurrent for EsnModel {
    type State = EsnState;

    fn input_dim(&self) -> usize {
        self.cell.w_i.ncols()
    }

    fn initial_state(&self) -> EsnState {
        EsnState {
            x: DVector::zeros(self.cell.size()),
            y_prev: DVector::zeros(self.readout.outputs()),
            rng: rng::seeded(self.noise_seed, streams::ESN_STATE_NOISE),
        }
    }

    /// Emits the prediction in target units (scaled output divided by the
    /// teacher scaling).
    fn step(&self, state: &EsnState, u: &[f64]) -> Result<(EsnState, DVector<f64>)> {
        let mut rng = state.rng.clone();
        let (x, y) = esn_step(
            &self.cell,
            &state.x,
            u,
            state.y_prev.as_slice(),
            &self.readout,
            &mut rng,
        )?;
        let prediction = &y / self.teacher_scaling;
        Ok((EsnState { x, y_prev: y, rng }, prediction))
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub outputs: Vec<DVector<f64>>,
}

/// Folds `model.step` over `inputs` (flat, `input_dim` values per step).
pub fn run_sequence<M: Recurrent>(
    model: &M,
    inputs: &[f64],
    initial: Option<M::State>,
) -> Result<Trajectory<M::State>> {
    let dim = model.input_dim();
    if inputs.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            context: "input sequence (multiple of input_dim)",
            expected: dim * (inputs.len() / dim + 1),
            actual: inputs.len(),
        });
    }
    let steps = inputs.len() / dim;
    let mut state = initial.unwrap_or_else(|| model.initial_state());
    let mut states = Vec::with_capacity(steps);
    let mut outputs = Vec::with_capacity(steps);
    for (t, u) in inputs.chunks(dim).enumerate() {
        let (next, y) = model.step(&state, u).map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite { t, context },
            other => other,
        })?;
        states.push(next.clone());
        outputs.push(y);
        state = next;
    }
    Ok(Trajectory { states, outputs })
}

/// Scalar predictions of a single-output model over the whole input sequence.
pub fn predict_scalar<M: Recurrent>(model: &M, inputs: &[f64]) -> Result<Vec<f64>> {
    let dim = model.input_dim();
    let mut state = model.initial_state();
    let mut out = Vec::with_capacity(inputs.len() / dim);
    for (t, u) in inputs.chunks(dim).enumerate() {
        let (next, y) = model.step(&state, u).map_err(|e| match e {
            Error::NonFinite { context, .. } => Error::NonFinite { t, context },
            other => other,
        })?;
        out.push(y[0]);
        state = next;
    }
    Ok(out)
}
