//! Central finite-difference verification of analytic gradients (64-bit only).

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::autograd::{AutogradError, ParamStore, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error("finite-difference epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// A differentiable scalar objective over a parameter store.
pub trait Objective {
    fn loss(&self, params: &ParamStore<f64>, tape: &mut Tape<f64>) -> Result<Var, AutogradError>;
}

impl<F> Objective for F
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var, AutogradError>,
{
    fn loss(&self, params: &ParamStore<f64>, tape: &mut Tape<f64>) -> Result<Var, AutogradError> {
        self(params, tape)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Scalars sampled per tensor; tensors smaller than this are checked exhaustively.
    pub samples_per_tensor: usize,
    /// Denominator floor for the relative error, so near-zero gradients are
    /// compared in absolute terms.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, tolerance: 1e-4, samples_per_tensor: 20, abs_floor: 1e-6, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckResult {
    pub param_name: String,
    pub max_relative_error: f64,
    pub checked: usize,
    pub passed: bool,
}

fn eval(objective: &impl Objective, params: &ParamStore<f64>) -> Result<f64, AutogradError> {
    let mut tape = Tape::new();
    let loss = objective.loss(params, &mut tape)?;
    Ok(tape.value(loss).item())
}

/// Compares analytic gradients of every trainable tensor with
/// `(L(θ+ε) − L(θ−ε)) / 2ε` on sampled coordinates. `params` is restored
/// to its original values before returning.
pub fn finite_diff_check(
    objective: &impl Objective,
    params: &mut ParamStore<f64>,
    config: &GradCheckConfig,
) -> Result<Vec<GradCheckResult>, GradCheckError> {
    let eps = config.epsilon;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GradCheckError::BadEpsilon(eps));
    }
    let mut tape = Tape::new();
    let loss = objective.loss(params, &mut tape)?;
    let analytic = tape.backward(loss)?;
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let names: Vec<String> = params.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    let mut results = Vec::with_capacity(names.len());
    for name in names {
        let original: Tensor<f64> = (*params.get(&name)?.tensor).clone();
        let n = original.len();
        let coords: Vec<usize> = if n <= config.samples_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, config.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        let grad = analytic.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(original.shape()));
        let mut max_rel = 0.0f64;
        for &i in &coords {
            let mut plus = original.clone();
            plus.data_mut()[i] += eps;
            params.set(&name, plus)?;
            let lp = eval(objective, params)?;
            let mut minus = original.clone();
            minus.data_mut()[i] -= eps;
            params.set(&name, minus)?;
            let lm = eval(objective, params)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(config.abs_floor);
            max_rel = max_rel.max(rel);
        }
        params.set(&name, original)?;
        results.push(GradCheckResult {
            passed: max_rel <= config.tolerance,
            param_name: name,
            max_relative_error: max_rel,
            checked: coords.len(),
        });
    }
    Ok(results)
}
