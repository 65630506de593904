//! Central finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamStore;
use super::session::Session;
use super::tape::Var;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen entries of each tensor.
    /// `None` checks every entry.
    pub max_entries_per_tensor: Option<usize>,
    /// Batch-norm mode used for every evaluation.
    pub train: bool,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            epsilon: 1e-5,
            tol: 1e-4,
            max_entries_per_tensor: None,
            train: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    /// `(parameter name, max relative error)` for every trainable parameter.
    pub parameters: Vec<(String, f64)>,
    /// Max relative error for each marked input.
    pub inputs: Vec<f64>,
    pub epsilon: f64,
    pub tol: f64,
    pub checked_entries: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.parameters
            .iter()
            .map(|(_, e)| *e)
            .chain(self.inputs.iter().copied())
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.parameters.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
        for (name, err) in &self.parameters {
            let mark = if *err < self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{name:<width$}  {err:>10.3e}  {mark}")?;
        }
        for (i, err) in self.inputs.iter().enumerate() {
            let mark = if *err < self.tol { "ok" } else { "FAIL" };
            writeln!(f, "{:<width$}  {err:>10.3e}  {mark}", format!("input[{i}]"))?;
        }
        write!(
            f,
            "max rel. error {:.3e} over {} entries (eps {:e}, tol {:e}): {}",
            self.max_error(),
            self.checked_entries,
            self.epsilon,
            self.tol,
            if self.pass { "PASS" } else { "FAIL" }
        )
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(store: &mut ParamStore, inputs: &[Tensor], train: bool, f: &mut F) -> Result<f64>
where
    F: FnMut(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    let mut s = Session::inference(store, train);
    let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
    let root = f(&mut s, &vars)?;
    s.value(root).item()
}

fn pick_entries(numel: usize, limit: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match limit {
        Some(k) if k < numel => {
            let mut idx = sample(rng, numel, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..numel).collect(),
    }
}

/// Compares the analytic gradient of the scalar `f` against central
/// differences `(f(θ+ε) - f(θ-ε)) / 2ε`, for every trainable parameter in
/// `store` and every tensor in `inputs`.
///
/// `f` receives a fresh [`Session`] and the inputs bound on its tape, and
/// must return a single-element value. Parameter values are restored
/// exactly after each probe.
pub fn finite_difference_check<F>(
    store: &mut ParamStore,
    inputs: &[Tensor],
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Session<'_>, &[Var]) -> Result<Var>,
{
    if !(opts.epsilon > 0.0) || !opts.epsilon.is_finite() {
        return Err(Error::Precondition(format!("epsilon must be positive, got {}", opts.epsilon)));
    }

    // Analytic pass.
    store.zero_grad();
    let (f0, input_grads) = {
        let mut s = Session::new(store, opts.train);
        let vars: Vec<Var> = inputs.iter().map(|t| s.input(t.clone())).collect();
        let root = f(&mut s, &vars)?;
        let f0 = s.value(root).item()?;
        let grads = s.backward(root)?;
        let input_grads: Vec<Tensor> = inputs
            .iter()
            .zip(&vars)
            .map(|(t, &v)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros_like(t)))
            .collect();
        (f0, input_grads)
    };
    let f1 = evaluate(store, inputs, opts.train, &mut f)?;
    if f0.to_bits() != f1.to_bits() {
        return Err(Error::NonDeterministic { first: f0, second: f1 });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eps = opts.epsilon;
    let mut checked = 0usize;

    let ids: Vec<_> = store.trainable().map(|(id, _)| id).collect();
    let mut parameters = Vec::with_capacity(ids.len());
    for id in ids {
        let numel = store.get(id).value.numel();
        let mut worst = 0.0f64;
        for i in pick_entries(numel, opts.max_entries_per_tensor, &mut rng) {
            let analytic = store.get(id).gradient.data()[i];
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = evaluate(store, inputs, opts.train, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = evaluate(store, inputs, opts.train, &mut f);
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
        parameters.push((store.get(id).name.clone(), worst));
    }

    let mut probe = inputs.to_vec();
    let mut input_errors = Vec::with_capacity(inputs.len());
    for (k, grad) in input_grads.iter().enumerate() {
        let mut worst = 0.0f64;
        for i in pick_entries(probe[k].numel(), opts.max_entries_per_tensor, &mut rng) {
            let orig = probe[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let plus = evaluate(store, &probe, opts.train, &mut f);
            probe[k].data_mut()[i] = orig - eps;
            let minus = evaluate(store, &probe, opts.train, &mut f);
            probe[k].data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            checked += 1;
        }
        input_errors.push(worst);
    }

    let pass = parameters.iter().all(|(_, e)| *e < opts.tol) && input_errors.iter().all(|e| *e < opts.tol);
    Ok(GradCheckReport {
        parameters,
        inputs: input_errors,
        epsilon: eps,
        tol: opts.tol,
        checked_entries: checked,
        pass,
    })
}
