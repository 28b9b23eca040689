//! Fixed random topology of the recurrent layer.
//!
//! Neurons are split into `K` contiguous groups of `N`. A link between two
//! neurons of the same group exists with probability `p`, between neurons of
//! different groups with probability `q <= p`. Existing links get standard
//! normal weights and the whole matrix is rescaled to a target spectral
//! radius. Input weights are dense standard normals.

use nalgebra::{DMatrix, DVector, Schur};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, streams};
use crate::{Error, Result};

pub const DEFAULT_NEURONS_PER_GROUP: usize = 20;
pub const DEFAULT_P: f64 = 0.4;
pub const DEFAULT_Q: f64 = 0.1;
pub const DEFAULT_RHO: f64 = 0.95;

const POWER_MAX_ITER: usize = 10_000;
const POWER_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopologyConfig {
    pub groups: usize,
    pub neurons_per_group: usize,
    /// Intra-group link probability.
    pub p: f64,
    /// Inter-group link probability.
    pub q: f64,
    pub rho: f64,
    pub input_dim: usize,
    pub seed: u64,
}

impl TopologyConfig {
    /// Defaults for `groups` groups with a scalar input.
    pub fn new(groups: usize, seed: u64) -> Self {
        Self {
            groups,
            neurons_per_group: DEFAULT_NEURONS_PER_GROUP,
            p: DEFAULT_P,
            q: DEFAULT_Q,
            rho: DEFAULT_RHO,
            input_dim: 1,
            seed,
        }
    }

    pub fn total_neurons(&self) -> usize {
        self.groups * self.neurons_per_group
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 {
            return Err(Error::invalid("K", "need at least one group"));
        }
        if self.neurons_per_group == 0 {
            return Err(Error::invalid("N", "need at least one neuron per group"));
        }
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim", "must be at least 1"));
        }
        if !(0.0 <= self.q && self.q <= self.p && self.p <= 1.0) {
            return Err(Error::invalid(
                "p, q",
                format!("need 0 <= q <= p <= 1, got p={}, q={}", self.p, self.q),
            ));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::invalid(
                "rho",
                format!("must lie in (0, 1), got {}", self.rho),
            ));
        }
        Ok(())
    }

    pub fn group_of(&self, neuron: usize) -> usize {
        neuron / self.neurons_per_group
    }
}

/// Boolean adjacency: entry `(i, j)` is a link from neuron `j` into neuron `i`.
pub fn gen_recurrent_mask(cfg: &TopologyConfig) -> Result<DMatrix<bool>> {
    cfg.validate()?;
    let n = cfg.total_neurons();
    let mut rng = rng::seeded(cfg.seed, streams::MASK);
    let mut mask = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in 0..n {
            let prob = if cfg.group_of(i) == cfg.group_of(j) {
                cfg.p
            } else {
                cfg.q
            };
            mask[(i, j)] = rng.gen_bool(prob);
        }
    }
    Ok(mask)
}

/// Uniform Bernoulli mask, used for unstructured reservoirs.
pub fn gen_uniform_mask(n: usize, density: f64, seed: u64) -> Result<DMatrix<bool>> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::invalid(
            "density",
            format!("must lie in [0, 1], got {density}"),
        ));
    }
    let mut rng = rng::seeded(seed, streams::MASK);
    let mut mask = DMatrix::from_element(n, n, false);
    for i in 0..n {
        for j in 0..n {
            mask[(i, j)] = rng.gen_bool(density);
        }
    }
    Ok(mask)
}

/// Replaces every set mask entry with a standard normal draw (row-major order).
pub fn assign_weights(mask: &DMatrix<bool>, seed: u64) -> DMatrix<f64> {
    let mut rng = rng::seeded(seed, streams::RECURRENT);
    let mut w = DMatrix::zeros(mask.nrows(), mask.ncols());
    for i in 0..mask.nrows() {
        for j in 0..mask.ncols() {
            if mask[(i, j)] {
                w[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
    }
    w
}

/// Dense `total_neurons x input_dim` matrix of standard normals.
pub fn gen_input_weights(input_dim: usize, total_neurons: usize, seed: u64) -> Result<DMatrix<f64>> {
    if input_dim == 0 || total_neurons == 0 {
        return Err(Error::invalid("dimensions", "must be positive"));
    }
    let mut rng = rng::seeded(seed, streams::INPUT);
    let mut w = DMatrix::zeros(total_neurons, input_dim);
    for i in 0..total_neurons {
        for j in 0..input_dim {
            w[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(w)
}

/// Largest eigenvalue modulus by power iteration.
///
/// Each step fits `W^2 v ~ a W v + b v` and takes the larger root modulus
/// of `z^2 - a z - b`, which resolves a dominant real eigenvalue, a dominant
/// complex-conjugate pair and a dominant `+-lambda` pair alike.
pub fn spectral_radius(w: &DMatrix<f64>) -> Result<f64> {
    let n = w.nrows();
    if n == 0 || w.ncols() != n {
        return Err(Error::DimensionMismatch {
            context: "spectral radius (square matrix)",
            expected: n,
            actual: w.ncols(),
        });
    }
    let frobenius = w.norm();
    if frobenius == 0.0 {
        return Err(Error::ZeroSpectralRadius);
    }

    let mut start_rng = rng::seeded(0x5eed, 0);
    let dist = Uniform::new(0.5, 1.5);
    let mut v = DVector::from_fn(n, |_, _| dist.sample(&mut start_rng));
    v /= v.norm();
    let mut y1 = DVector::zeros(n);
    let mut y2 = DVector::zeros(n);

    for _ in 0..POWER_MAX_ITER {
        y1.gemv(1.0, w, &v, 0.0);
        let n1 = y1.norm();
        if n1 <= 1e-14 * frobenius {
            return Err(Error::ZeroSpectralRadius);
        }
        y2.gemv(1.0, w, &y1, 0.0);
        let n2 = y2.norm();

        // single dominant real eigenvalue
        let lambda = v.dot(&y1);
        let res_real = (&y1 - lambda * &v).norm() / n1;
        if res_real < POWER_TOL {
            return Ok(lambda.abs());
        }

        // two-term recurrence
        let g00 = n1 * n1;
        let g01 = y1.dot(&v);
        let g11 = 1.0;
        let det = g00 * g11 - g01 * g01;
        if det > 1e-12 * g00 && n2 > 0.0 {
            let r0 = y1.dot(&y2);
            let r1 = v.dot(&y2);
            let a = (g11 * r0 - g01 * r1) / det;
            let b = (g00 * r1 - g01 * r0) / det;
            let res_pair = (&y2 - a * &y1 - b * &v).norm() / n2;
            if res_pair < POWER_TOL {
                let disc = a * a + 4.0 * b;
                let rho = if disc >= 0.0 {
                    let s = disc.sqrt();
                    ((a + s) / 2.0).abs().max(((a - s) / 2.0).abs())
                } else {
                    (-b).sqrt()
                };
                if rho <= 1e-12 * frobenius {
                    return Err(Error::ZeroSpectralRadius);
                }
                return Ok(rho);
            }
        }

        v.copy_from(&y1);
        v /= n1;
    }
    Err(Error::NoConvergence {
        iterations: POWER_MAX_ITER,
    })
}

const SCHUR_MAX_ITER: usize = 100_000;

/// Spectral radius from a full real Schur decomposition. nalgebra's default
/// decomposition never gives up, so the iteration count is capped here.
pub fn spectral_radius_dense(w: &DMatrix<f64>) -> Result<f64> {
    let schur = Schur::try_new(w.clone(), f64::EPSILON, SCHUR_MAX_ITER).ok_or(Error::SchurNoConvergence {
        iterations: SCHUR_MAX_ITER,
    })?;
    Ok(schur
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max))
}

/// Spectral radius as `lim ||W^k||^(1/k)`, with `k = 2^60` reached by
/// repeated squaring. The matrix is renormalized after every squaring and
/// the log norms are accumulated with weight `1/k`, so nothing overflows.
/// Slower than power iteration but it always terminates, including on
/// matrices with several dominant eigenvalues on one circle.
pub fn spectral_radius_gelfand(w: &DMatrix<f64>) -> f64 {
    let norm = w.norm();
    if norm == 0.0 || !norm.is_finite() {
        return norm;
    }
    let mut a = w / norm;
    let mut log_rho = norm.ln();
    let mut k = 1.0;
    for _ in 0..60 {
        a = &a * &a;
        k *= 2.0;
        let n = a.norm();
        if n == 0.0 {
            return 0.0;
        }
        a /= n;
        log_rho += n.ln() / k;
    }
    log_rho.exp()
}

/// Returns `(rho / spectral_radius(w)) * w`.
pub fn rescale_spectral_radius(w: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid("rho", format!("must be positive, got {rho}")));
    }
    let current = spectral_radius(w)?;
    Ok(w * (rho / current))
}

/// Like [`rescale_spectral_radius`], but falls back to
/// [`spectral_radius_gelfand`] when power iteration does not converge.
pub fn rescale_with_fallback(w: &DMatrix<f64>, rho: f64) -> Result<DMatrix<f64>> {
    match rescale_spectral_radius(w, rho) {
        Err(Error::NoConvergence { .. }) => {
            let current = spectral_radius_gelfand(w);
            if current <= 1e-12 * w.norm() {
                return Err(Error::ZeroSpectralRadius);
            }
            Ok(w * (rho / current))
        }
        other => other,
    }
}

/// Fixed (untrained) weights of a grouped recurrent layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: TopologyConfig,
    /// `H x H`, `H = N * K`.
    pub w_r: DMatrix<f64>,
    /// `H x I`.
    pub w_i: DMatrix<f64>,
    /// Group id of each neuron.
    pub group_of: Vec<usize>,
}

impl NetworkWeights {
    pub fn generate(cfg: &TopologyConfig) -> Result<Self> {
        let mask = gen_recurrent_mask(cfg)?;
        let w_r = rescale_with_fallback(&assign_weights(&mask, cfg.seed), cfg.rho)?;
        let w_i = gen_input_weights(cfg.input_dim, cfg.total_neurons(), cfg.seed)?;
        Ok(Self {
            config: *cfg,
            w_r,
            w_i,
            group_of: (0..cfg.total_neurons()).map(|n| cfg.group_of(n)).collect(),
        })
    }

    pub fn total_neurons(&self) -> usize {
        self.w_r.nrows()
    }

    pub fn groups(&self) -> usize {
        self.config.groups
    }

    /// SHA-256 over the raw bytes of `W_r` and `W_i`, hex encoded.
    pub fn digest(&self) -> String {
        digest_matrices(&[&self.w_r, &self.w_i])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = WeightsDocument {
            config: self.config,
            recurrent: DenseMatrix::from(&self.w_r),
            input: DenseMatrix::from(&self.w_i),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: WeightsDocument = serde_json::from_str(text)?;
        doc.config.validate()?;
        let w_r = doc.recurrent.to_matrix()?;
        let w_i = doc.input.to_matrix()?;
        let h = doc.config.total_neurons();
        if w_r.shape() != (h, h) || w_i.shape() != (h, doc.config.input_dim) {
            return Err(Error::Parse("weight shapes disagree with config".into()));
        }
        Ok(Self {
            config: doc.config,
            w_r,
            w_i,
            group_of: (0..h).map(|n| doc.config.group_of(n)).collect(),
        })
    }
}

pub fn digest_matrices(mats: &[&DMatrix<f64>]) -> String {
    let mut hasher = Sha256::new();
    for m in mats {
        hasher.update((m.nrows() as u64).to_le_bytes());
        hasher.update((m.ncols() as u64).to_le_bytes());
        for v in m.iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsDocument {
    config: TopologyConfig,
    recurrent: DenseMatrix,
    input: DenseMatrix,
}

/// Row-major dense matrix for JSON documents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

impl From<&DMatrix<f64>> for DenseMatrix {
    fn from(m: &DMatrix<f64>) -> Self {
        let (r, c) = m.shape();
        let values = (0..r)
            .flat_map(|i| (0..c).map(move |j| (i, j)))
            .map(|ij| m[ij])
            .collect();
        Self {
            shape: [r, c],
            values,
        }
    }
}

impl DenseMatrix {
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let [r, c] = self.shape;
        if self.values.len() != r * c {
            return Err(Error::Parse(format!(
                "matrix of shape {r}x{c} has {} values",
                self.values.len()
            )));
        }
        Ok(DMatrix::from_row_slice(r, c, &self.values))
    }
}
