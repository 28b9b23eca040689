//! Truncated backpropagation through time with Adam and early stopping.
//!
//! Training walks the training range in consecutive windows of `tau_tnc`
//! steps. The recurrent state is carried from one window into the next, but
//! gradients stop at window boundaries: the state entering a window is a
//! constant. The loss of a window is the mean squared error of its outputs
//! plus `lambda * ||W_o||^2`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{Ernn, ModelState, Readout, Recurrent, Tornn};
use crate::timeseries::{nrmse, SupervisedDataset};
use crate::{Error, Result};

/// Validation NRMSE above this aborts training.
pub const DIVERGENCE_NRMSE: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub tau_tnc: usize,
    /// L2 coefficient on the readout weights (not the bias).
    pub lambda: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip. Off by default.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau_tnc: 10,
            lambda: 1e-5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 2000,
            patience: 50,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_tnc == 0 {
            return Err(Error::invalid("tau_tnc", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta", "beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs", "must be at least 1"));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::invalid("clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Gradients of a window loss. Fields that do not apply to a model kind are
/// empty (`d_theta*`) or `None` (`d_w_r`, `d_w_i`, `d_b_r`).
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub loss: f64,
    pub d_theta1: Vec<f64>,
    pub d_theta2: Vec<f64>,
    pub d_w_r: Option<DMatrix<f64>>,
    pub d_w_i: Option<DMatrix<f64>>,
    pub d_b_r: Option<DVector<f64>>,
    pub d_w_o: DMatrix<f64>,
    pub d_bias: DVector<f64>,
}

impl GradientBundle {
    /// Flattened in the same order as [`Trainable::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.d_theta1);
        out.extend_from_slice(&self.d_theta2);
        if let Some(m) = &self.d_w_r {
            out.extend_from_slice(m.as_slice());
        }
        if let Some(m) = &self.d_w_i {
            out.extend_from_slice(m.as_slice());
        }
        if let Some(v) = &self.d_b_r {
            out.extend_from_slice(v.as_slice());
        }
        out.extend_from_slice(self.d_w_o.as_slice());
        out.extend_from_slice(self.d_bias.as_slice());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.flatten().iter().all(|g| g.is_finite())
    }
}

/// Mean squared error plus `lambda * sum(W_o^2)`.
pub fn loss(outputs: &[f64], targets: &[f64], w_o: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    if outputs.is_empty() {
        return Err(Error::invalid("window", "empty window"));
    }
    if outputs.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            context: "loss targets",
            expected: outputs.len(),
            actual: targets.len(),
        });
    }
    let mse = outputs
        .iter()
        .zip(targets)
        .map(|(y, d)| (y - d) * (y - d))
        .sum::<f64>()
        / outputs.len() as f64;
    Ok(mse + lambda * w_o.norm_squared())
}

/// A model with a flat trainable parameter vector and exact window gradients.
pub trait Trainable: Recurrent + Clone {
    fn parameters(&self) -> Vec<f64>;
    fn set_parameters(&mut self, params: &[f64]) -> Result<()>;
    fn readout(&self) -> &Readout;

    /// Loss and gradients of one truncation window starting from `state`,
    /// together with the state at the end of the window.
    fn tbptt_gradients(
        &self,
        inputs: &[f64],
        targets: &[f64],
        state: &Self::State,
        lambda: f64,
    ) -> Result<(GradientBundle, Self::State)>;

    /// Current per-group cutoffs, for models that have them.
    fn gamma_snapshot(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Digest of the weights that must never change during training.
    fn frozen_digest(&self) -> Option<String> {
        None
    }
}

fn check_window(inputs: &[f64], targets: &[f64], input_dim: usize, outputs: usize) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::invalid("window", "empty window"));
    }
    if outputs != 1 {
        return Err(Error::invalid("readout", "training supports a single output"));
    }
    if inputs.len() != targets.len() * input_dim {
        return Err(Error::DimensionMismatch {
            context: "window inputs",
            expected: targets.len() * input_dim,
            actual: inputs.len(),
        });
    }
    Ok(())
}

fn non_finite(t: usize, context: &'static str) -> Error {
    Error::NonFinite { t, context }
}

impl Trainable for Tornn {
    /// `[theta1 (K), theta2 (K), W_o (column-major), bias]`.
    fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.trainable_parameter_count());
        p.extend_from_slice(&self.gammas.theta1);
        p.extend_from_slice(&self.gammas.theta2);
        p.extend_from_slice(self.readout.w_o.as_slice());
        p.extend_from_slice(self.readout.bias.as_slice());
        p
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "tornn parameters",
                expected: self.trainable_parameter_count(),
                actual: params.len(),
            });
        }
        let k = self.gammas.groups();
        let n_wo = self.readout.w_o.len();
        self.gammas.theta1.copy_from_slice(&params[..k]);
        self.gammas.theta2.copy_from_slice(&params[k..2 * k]);
        self.readout
            .w_o
            .as_mut_slice()
            .copy_from_slice(&params[2 * k..2 * k + n_wo]);
        self.readout
            .bias
            .as_mut_slice()
            .copy_from_slice(&params[2 * k + n_wo..]);
        Ok(())
    }

    fn readout(&self) -> &Readout {
        &self.readout
    }

    fn tbptt_gradients(
        &self,
        inputs: &[f64],
        targets: &[f64],
        state: &ModelState,
        lambda: f64,
    ) -> Result<(GradientBundle, ModelState)> {
        let w = &self.weights;
        let h = w.total_neurons();
        let dim = w.w_i.ncols();
        check_window(inputs, targets, dim, self.readout.outputs())?;
        if state.x.len() != h {
            return Err(Error::DimensionMismatch {
                context: "window state",
                expected: h,
                actual: state.x.len(),
            });
        }
        let len = targets.len();
        let g1_group = self.gammas.gamma1();
        let g2_group = self.gammas.gamma2();
        let g1: Vec<f64> = w.group_of.iter().map(|&k| g1_group[k]).collect();
        let g2: Vec<f64> = w.group_of.iter().map(|&k| g2_group[k]).collect();
        let w_o = self.readout.w_o.column(0);
        let bias = self.readout.bias[0];

        // forward, keeping every intermediate; index 0 is the entering state
        let mut xp = Vec::with_capacity(len + 1);
        let mut xs = Vec::with_capacity(len + 1);
        let mut xs_state = Vec::with_capacity(len + 1);
        let mut rec = Vec::with_capacity(len);
        let mut ys = Vec::with_capacity(len);
        xp.push(state.x_prime.clone());
        xs.push(state.x_second.clone());
        xs_state.push(state.x.clone());
        for t in 0..len {
            let u = DVector::from_column_slice(&inputs[t * dim..(t + 1) * dim]);
            let mut r = DVector::zeros(h);
            r.gemv(1.0, &w.w_r, &xs_state[t], 0.0);
            let mut drive = DVector::zeros(h);
            drive.gemv(1.0, &w.w_i, &u, 0.0);
            let mut new_p = DVector::zeros(h);
            let mut new_s = DVector::zeros(h);
            let mut new_x = DVector::zeros(h);
            for n in 0..h {
                let p = ((1.0 - g1[n]) * xp[t][n] + g1[n] * r[n] + drive[n]).tanh();
                let s = (1.0 - g2[n]) * xs[t][n] + g2[n] * p;
                new_p[n] = p;
                new_s[n] = s;
                new_x[n] = p - s;
            }
            let y = w_o.dot(&new_x) + bias;
            if !y.is_finite() {
                return Err(non_finite(t, "tornn forward"));
            }
            ys.push(y);
            rec.push(r);
            xp.push(new_p);
            xs.push(new_s);
            xs_state.push(new_x);
        }
        let loss_value = loss(&ys, targets, &self.readout.w_o, lambda)?;

        // backward
        let mut c_xp = vec![0.0; h];
        let mut c_xs = vec![0.0; h];
        let mut c_x = DVector::zeros(h);
        let mut tmp = DVector::zeros(h);
        let mut d_g1 = vec![0.0; h];
        let mut d_g2 = vec![0.0; h];
        let mut d_w_o = DVector::zeros(h);
        let mut d_bias = 0.0;
        let scale = 2.0 / len as f64;
        for t in (1..=len).rev() {
            let e = scale * (ys[t - 1] - targets[t - 1]);
            d_w_o.axpy(e, &xs_state[t], 1.0);
            d_bias += e;
            for n in 0..h {
                let gx = e * w_o[n] + c_x[n];
                let gxs = c_xs[n] - gx;
                let gxp = c_xp[n] + gx + g2[n] * gxs;
                d_g2[n] += gxs * (xp[t][n] - xs[t - 1][n]);
                let ga = gxp * (1.0 - xp[t][n] * xp[t][n]);
                d_g1[n] += ga * (rec[t - 1][n] - xp[t - 1][n]);
                c_xp[n] = ga * (1.0 - g1[n]);
                c_xs[n] = gxs * (1.0 - g2[n]);
                tmp[n] = g1[n] * ga;
            }
            c_x.gemv_tr(1.0, &w.w_r, &tmp, 0.0);
            if !c_x.iter().all(|v| v.is_finite()) {
                return Err(non_finite(t - 1, "tornn backward"));
            }
        }
        d_w_o.axpy(2.0 * lambda, &w_o, 1.0);

        let k = self.gammas.groups();
        let mut d_theta1 = vec![0.0; k];
        let mut d_theta2 = vec![0.0; k];
        for n in 0..h {
            let g = w.group_of[n];
            d_theta1[g] += d_g1[n];
            d_theta2[g] += d_g2[n];
        }
        for g in 0..k {
            d_theta1[g] *= g1_group[g] * (1.0 - g1_group[g]);
            d_theta2[g] *= g2_group[g] * (1.0 - g2_group[g]);
        }

        let end = ModelState {
            x_prime: xp.pop().unwrap(),
            x_second: xs.pop().unwrap(),
            x: xs_state.pop().unwrap(),
        };
        let bundle = GradientBundle {
            loss: loss_value,
            d_theta1,
            d_theta2,
            d_w_r: None,
            d_w_i: None,
            d_b_r: None,
            d_w_o: DMatrix::from_column_slice(h, 1, d_w_o.as_slice()),
            d_bias: DVector::from_element(1, d_bias),
        };
        if !bundle.is_finite() {
            return Err(non_finite(0, "tornn gradients"));
        }
        Ok((bundle, end))
    }

    fn gamma_snapshot(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.gammas.gamma1(), self.gammas.gamma2()))
    }

    fn frozen_digest(&self) -> Option<String> {
        Some(self.weights.digest())
    }
}

impl Trainable for Ernn {
    /// `[W_r, W_i, b_r, W_o, bias]`, matrices column-major.
    fn parameters(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.trainable_parameter_count());
        p.extend_from_slice(self.w_r.as_slice());
        p.extend_from_slice(self.w_i.as_slice());
        p.extend_from_slice(self.b_r.as_slice());
        p.extend_from_slice(self.readout.w_o.as_slice());
        p.extend_from_slice(self.readout.bias.as_slice());
        p
    }

    fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.trainable_parameter_count() {
            return Err(Error::DimensionMismatch {
                context: "ernn parameters",
                expected: self.trainable_parameter_count(),
                actual: params.len(),
            });
        }
        let mut rest = params;
        for dst in [
            self.w_r.as_mut_slice(),
            self.w_i.as_mut_slice(),
            self.b_r.as_mut_slice(),
            self.readout.w_o.as_mut_slice(),
            self.readout.bias.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    fn readout(&self) -> &Readout {
        &self.readout
    }

    fn tbptt_gradients(
        &self,
        inputs: &[f64],
        targets: &[f64],
        state: &DVector<f64>,
        lambda: f64,
    ) -> Result<(GradientBundle, DVector<f64>)> {
        let h = self.hidden();
        let dim = self.w_i.ncols();
        check_window(inputs, targets, dim, self.readout.outputs())?;
        if state.len() != h {
            return Err(Error::DimensionMismatch {
                context: "window state",
                expected: h,
                actual: state.len(),
            });
        }
        let len = targets.len();
        let w_o = self.readout.w_o.column(0);
        let bias = self.readout.bias[0];

        let mut hs = Vec::with_capacity(len + 1);
        let mut ys = Vec::with_capacity(len);
        hs.push(state.clone());
        for t in 0..len {
            let u = DVector::from_column_slice(&inputs[t * dim..(t + 1) * dim]);
            let mut a = self.b_r.clone();
            a.gemv(1.0, &self.w_r, &hs[t], 1.0);
            a.gemv(1.0, &self.w_i, &u, 1.0);
            a.apply(|v| *v = v.tanh());
            let y = w_o.dot(&a) + bias;
            if !y.is_finite() {
                return Err(non_finite(t, "ernn forward"));
            }
            ys.push(y);
            hs.push(a);
        }
        let loss_value = loss(&ys, targets, &self.readout.w_o, lambda)?;

        let mut d_w_r = DMatrix::zeros(h, h);
        let mut d_w_i = DMatrix::zeros(h, dim);
        let mut d_b_r = DVector::zeros(h);
        let mut d_w_o = DVector::zeros(h);
        let mut d_bias = 0.0;
        let mut carry = DVector::zeros(h);
        let mut ga = DVector::zeros(h);
        let scale = 2.0 / len as f64;
        for t in (1..=len).rev() {
            let e = scale * (ys[t - 1] - targets[t - 1]);
            d_w_o.axpy(e, &hs[t], 1.0);
            d_bias += e;
            for n in 0..h {
                let gh = e * w_o[n] + carry[n];
                ga[n] = gh * (1.0 - hs[t][n] * hs[t][n]);
            }
            let u = DVector::from_column_slice(&inputs[(t - 1) * dim..t * dim]);
            d_w_r.ger(1.0, &ga, &hs[t - 1], 1.0);
            d_w_i.ger(1.0, &ga, &u, 1.0);
            d_b_r += &ga;
            carry.gemv_tr(1.0, &self.w_r, &ga, 0.0);
            if !carry.iter().all(|v| v.is_finite()) {
                return Err(non_finite(t - 1, "ernn backward"));
            }
        }
        d_w_o.axpy(2.0 * lambda, &w_o, 1.0);

        let bundle = GradientBundle {
            loss: loss_value,
            d_theta1: Vec::new(),
            d_theta2: Vec::new(),
            d_w_r: Some(d_w_r),
            d_w_i: Some(d_w_i),
            d_b_r: Some(d_b_r),
            d_w_o: DMatrix::from_column_slice(h, 1, d_w_o.as_slice()),
            d_bias: DVector::from_element(1, d_bias),
        };
        if !bundle.is_finite() {
            return Err(non_finite(0, "ernn gradients"));
        }
        Ok((bundle, hs.pop().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First and second moment estimates plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. Increments `moments.t` before use.
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(Error::DimensionMismatch {
            context: "adam shapes",
            expected: params.len(),
            actual: grads.len(),
        });
    }
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / c1;
        let v_hat = moments.v[i] / c2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nrmse: f64,
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    /// Parameters with the best validation NRMSE.
    pub model: M,
    pub curve: Vec<CurvePoint>,
    pub best_val_nrmse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

fn advance<M: Recurrent>(model: &M, mut state: M::State, inputs: &[f64]) -> Result<M::State> {
    for (t, u) in inputs.chunks(model.input_dim()).enumerate() {
        state = model
            .step(&state, u)
            .map_err(|e| match e {
                Error::NonFinite { context, .. } => Error::NonFinite { t, context },
                other => other,
            })?
            .0;
    }
    Ok(state)
}

fn predict_from<M: Recurrent>(
    model: &M,
    mut state: M::State,
    inputs: &[f64],
) -> Result<(Vec<f64>, M::State)> {
    let mut out = Vec::with_capacity(inputs.len() / model.input_dim());
    for u in inputs.chunks(model.input_dim()) {
        let (next, y) = model.step(&state, u)?;
        out.push(y[0]);
        state = next;
    }
    Ok((out, state))
}

/// NRMSE on `range` after running the model from the zero state over every
/// input up to the end of the range.
pub fn evaluate_range<M: Recurrent>(model: &M, ds: &SupervisedDataset, range: Range<usize>) -> Result<f64> {
    let preds = crate::model::predict_scalar(model, &ds.inputs[..range.end])?;
    nrmse(&preds[range.clone()], &ds.targets[range])
}

/// NRMSE, or RMSE when the validation truth is constant and NRMSE is
/// undefined.
fn validation_score(pred: &[f64], truth: &[f64]) -> Result<f64> {
    match nrmse(pred, truth) {
        Err(Error::ConstantTruth) => {
            let mse = pred
                .iter()
                .zip(truth)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / truth.len() as f64;
            Ok(mse.sqrt())
        }
        other => other,
    }
}

fn clip(grads: &mut [f64], max_norm: f64) {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
}

/// Stateful truncated BPTT over the training range, early-stopped on
/// validation NRMSE. Returns the best-validation parameters.
pub fn train<M: Trainable>(model: M, ds: &SupervisedDataset, cfg: &TrainConfig) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    if ds.train.is_empty() || ds.validation.is_empty() {
        return Err(Error::invalid(
            "dataset",
            "need non-empty training and validation ranges",
        ));
    }
    if model.input_dim() != 1 {
        return Err(Error::invalid("model", "datasets are univariate"));
    }
    let frozen = model.frozen_digest();
    let adam = AdamConfig::from(cfg);
    let mut model = model;
    let mut params = model.parameters();
    let mut moments = Moments::zeros(params.len());
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut epochs_run = 0;

    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut state = advance(&model, model.initial_state(), &ds.inputs[..ds.train.start])?;
        let mut loss_sum = 0.0;
        let mut windows = 0usize;
        let mut start = ds.train.start;
        while start < ds.train.end {
            let end = (start + cfg.tau_tnc).min(ds.train.end);
            let (bundle, next) = model
                .tbptt_gradients(
                    &ds.inputs[start..end],
                    &ds.targets[start..end],
                    &state,
                    cfg.lambda,
                )
                .map_err(|e| Error::Diverged {
                    epoch,
                    reason: format!("window at t={start}: {e}"),
                })?;
            let mut grads = bundle.flatten();
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam_update(&mut params, &grads, &mut moments, &adam)?;
            model.set_parameters(&params)?;
            loss_sum += bundle.loss;
            windows += 1;
            state = next;
            start = end;
        }
        let train_loss = loss_sum / windows as f64;

        let (val_pred, _) = predict_from(&model, state, &ds.inputs[ds.validation.clone()])?;
        let val = validation_score(&val_pred, &ds.targets[ds.validation.clone()])?;
        if !val.is_finite() || val > DIVERGENCE_NRMSE || !train_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation NRMSE {val}, train loss {train_loss}"),
            });
        }
        let (gamma1, gamma2) = model.gamma_snapshot().unwrap_or_default();
        curve.push(CurvePoint {
            epoch,
            train_loss,
            val_nrmse: val,
            gamma1,
            gamma2,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = model.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if frozen != best.frozen_digest() {
        return Err(Error::invalid("model", "fixed weights changed during training"));
    }
    Ok(TrainOutcome {
        model: best,
        curve,
        best_val_nrmse: best_val,
        best_epoch,
        epochs_run,
    })
}

/// Writes `epoch,train_loss,val_nrmse,gamma1_1..K,gamma2_1..K`.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let k = curve.first().map_or(0, |c| c.gamma1.len());
    let mut header = String::from("epoch,train_loss,val_nrmse");
    for i in 1..=k {
        header.push_str(&format!(",gamma1_{i}"));
    }
    for i in 1..=k {
        header.push_str(&format!(",gamma2_{i}"));
    }
    let io = |e| Error::io(path, e);
    writeln!(w, "{header}").map_err(io)?;
    for c in curve {
        let mut line = format!("{},{},{}", c.epoch, c.train_loss, c.val_nrmse);
        for g in c.gamma1.iter().chain(&c.gamma2) {
            line.push_str(&format!(",{g}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Window loss of `model` from `state`, without gradients.
pub fn window_loss<M: Recurrent>(
    model: &M,
    readout: &Readout,
    inputs: &[f64],
    targets: &[f64],
    state: &M::State,
    lambda: f64,
) -> Result<f64> {
    let (ys, _) = predict_from(model, state.clone(), inputs)?;
    loss(&ys, targets, &readout.w_o, lambda)
}

/// Maximum relative error between analytic and central-difference gradients
/// over the parameters listed in `indices` (all parameters when `None`).
pub fn finite_difference_check_subset<M: Trainable>(
    model: &M,
    inputs: &[f64],
    targets: &[f64],
    state: &M::State,
    lambda: f64,
    h: f64,
    indices: Option<&[usize]>,
) -> Result<f64> {
    let (bundle, _) = model.tbptt_gradients(inputs, targets, state, lambda)?;
    let analytic = bundle.flatten();
    let base = model.parameters();
    let all: Vec<usize> = (0..base.len()).collect();
    let indices = indices.unwrap_or(&all);
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_parameters(&p)?;
        let plus = window_loss(&probe, probe.readout(), inputs, targets, state, lambda)?;
        p[i] = base[i] - h;
        probe.set_parameters(&p)?;
        let minus = window_loss(&probe, probe.readout(), inputs, targets, state, lambda)?;
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Central-difference check over every trainable parameter.
pub fn finite_difference_check<M: Trainable>(
    model: &M,
    inputs: &[f64],
    targets: &[f64],
    state: &M::State,
    lambda: f64,
    h: f64,
) -> Result<f64> {
    finite_difference_check_subset(model, inputs, targets, state, lambda, h, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GammaParams, Readout};
    use crate::topology::{NetworkWeights, TopologyConfig};

    fn small_tornn(seed: u64) -> Tornn {
        let cfg = TopologyConfig {
            groups: 2,
            neurons_per_group: 3,
            p: 0.8,
            q: 0.3,
            rho: 0.9,
            input_dim: 1,
            seed,
        };
        Tornn::init(NetworkWeights::generate(&cfg).unwrap(), 1, seed)
    }

    #[test]
    fn loss_examples() {
        let w = DMatrix::from_row_slice(2, 1, &[1.0, -2.0]);
        assert_eq!(loss(&[1.0, 2.0], &[1.0, 2.0], &w, 0.0).unwrap(), 0.0);
        assert_eq!(loss(&[0.0], &[2.0], &w, 0.0).unwrap(), 4.0);
        let l = loss(&[0.0, 1.0], &[1.0, 1.0], &w, 1e-5).unwrap();
        assert!((l - (0.5 + 1e-5 * 5.0)).abs() < 1e-15);
        assert!(loss(&[], &[], &w, 0.0).is_err());
    }

    #[test]
    fn zero_targets_zero_output_zero_readout_gradient() {
        let mut m = small_tornn(1);
        m.readout = Readout::zeros(6, 1);
        let inputs = [0.3, -0.1, 0.5, 0.2, 0.0];
        let (g, _) = m
            .tbptt_gradients(&inputs, &[0.0; 5], &ModelState::zeros(6), 0.0)
            .unwrap();
        assert!(g.d_w_o.iter().all(|v| *v == 0.0));
        assert_eq!(g.d_bias[0], 0.0);
    }

    #[test]
    fn gamma2_single_step_closed_form() {
        // K=1, N=1, W_r = 0.5, W_i = 1, entering x'' = 0, window of one step.
        let weights = NetworkWeights {
            config: TopologyConfig {
                groups: 1,
                neurons_per_group: 1,
                p: 1.0,
                q: 0.0,
                rho: 0.5,
                input_dim: 1,
                seed: 0,
            },
            w_r: DMatrix::from_element(1, 1, 0.5),
            w_i: DMatrix::from_element(1, 1, 1.0),
            group_of: vec![0],
        };
        let (g1, g2, wo, b) = (0.6, 0.3, 1.5, 0.1);
        let m = Tornn::new(
            weights,
            GammaParams::from_gammas(&[g1], &[g2]).unwrap(),
            Readout {
                w_o: DMatrix::from_element(1, 1, wo),
                bias: DVector::from_element(1, b),
            },
        )
        .unwrap();
        let state = ModelState {
            x_prime: DVector::from_element(1, 0.4),
            x_second: DVector::from_element(1, 0.0),
            x: DVector::from_element(1, 0.4),
        };
        let (u, d) = (0.2, 0.7);
        let (bundle, _) = m.tbptt_gradients(&[u], &[d], &state, 0.0).unwrap();

        // x' = tanh((1-g1) 0.4 + g1 0.5 0.4 + u); x'' = g2 x'; x = (1-g2) x'
        // y = wo (1-g2) x' + b; dL/dg2 = 2 (y-d) * (-wo x'); dtheta2 = dL/dg2 * g2 (1-g2)
        let xp = ((1.0 - g1) * 0.4 + g1 * 0.5 * 0.4 + u).tanh();
        let y = wo * (1.0 - g2) * xp + b;
        let expected = 2.0 * (y - d) * (-wo * xp) * g2 * (1.0 - g2);
        assert!((bundle.d_theta2[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn tornn_gradients_match_finite_differences() {
        for seed in 0..5 {
            let m = small_tornn(seed);
            let inputs = [0.5, -0.3, 0.8, 0.1, -0.6];
            let targets = [0.2, 0.4, -0.1, 0.3, 0.0];
            let state = ModelState {
                x_prime: DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2),
                x_second: DVector::from_fn(6, |i, _| 0.05 * i as f64 - 0.1),
                x: DVector::zeros(6),
            };
            let state = ModelState {
                x: &state.x_prime - &state.x_second,
                ..state
            };
            let err = finite_difference_check(&m, &inputs, &targets, &state, 1e-3, 1e-6).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn readout_only_quadratic_check() {
        let m = small_tornn(3);
        let k = m.gammas.groups();
        let readout_idx: Vec<usize> = (2 * k..m.trainable_parameter_count()).collect();
        let err = finite_difference_check_subset(
            &m,
            &[0.1, 0.2, 0.3],
            &[1.0, 0.0, -1.0],
            &ModelState::zeros(6),
            1e-2,
            1e-3,
            Some(&readout_idx),
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn ernn_gradients_match_finite_differences() {
        let m = Ernn::init(4, 1, 1, 2);
        let inputs = [0.5, -0.3, 0.8, 0.1, -0.6];
        let targets = [0.2, 0.4, -0.1, 0.3, 0.0];
        let state = DVector::from_fn(4, |i, _| 0.2 * i as f64 - 0.3);
        let err = finite_difference_check(&m, &inputs, &targets, &state, 1e-3, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![1.0, -2.0];
        let mut m = Moments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &AdamConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_and_second_step() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.0];
        let mut m = Moments::zeros(1);
        adam_update(&mut p, &[1.0], &mut m, &cfg).unwrap();
        // m_hat = 1, v_hat = 1
        assert!((p[0] + 0.001 / (1.0 + 1e-8)).abs() < 1e-18);

        let before = p[0];
        adam_update(&mut p, &[1.0], &mut m, &cfg).unwrap();
        // m = 0.9*0.1 + 0.1 = 0.19, v = 0.999*0.001 + 0.001 = 0.001999
        let m_hat = 0.19 / (1.0 - 0.81);
        let v_hat: f64 = 0.001999 / (1.0 - 0.998001);
        let expected = -0.001 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[0] - before - expected).abs() < 1e-15);
        assert!(adam_update(&mut p, &[1.0, 2.0], &mut m, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            tau_tnc: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            beta1: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
