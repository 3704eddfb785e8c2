//! MAP fitting: per-patient AdaGrad ascent on the local ELBO alternating with
//! stochastic AdaGrad steps on the prior means.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, PatientRecord};
use crate::elbo::{elbo_packed_grad, global_prior_grad};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mean_model::covariate_vector;
use crate::mogp::inducing_grid;
use crate::params::{Block, GlobalParams, Hyperparams, LocalParams, ModelConfig, NOISE_FLOOR};
use crate::scalar::Scalar;

const MAX_REJECTIONS: usize = 10;
const GLOBAL_WINDOW: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub local_learning_rate: f64,
    pub max_global_iters: usize,
    pub max_local_iters: usize,
    pub local_rel_tol: f64,
    pub global_rel_tol: f64,
    pub minibatch_size: usize,
    pub seed: u64,
    pub adagrad_epsilon: f64,
    /// Log-location of the rate priors at initialisation; derived from the
    /// median observation gap when absent.
    pub init_log_rate: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            local_learning_rate: 0.05,
            max_global_iters: 200,
            max_local_iters: 500,
            local_rel_tol: 1e-4,
            global_rel_tol: 1e-4,
            minibatch_size: 2,
            seed: 0,
            adagrad_epsilon: 1e-8,
            init_log_rate: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, cohort_size: usize) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.learning_rate) || !pos(self.local_learning_rate) {
            return Err(Error::arg("learning rates must be positive"));
        }
        if !pos(self.local_rel_tol) || !pos(self.global_rel_tol) || !pos(self.adagrad_epsilon) {
            return Err(Error::arg("tolerances and epsilon must be positive"));
        }
        if self.minibatch_size == 0 || self.minibatch_size > cohort_size {
            return Err(Error::arg(format!(
                "minibatch size {} outside 1..={cohort_size}",
                self.minibatch_size
            )));
        }
        Ok(())
    }
}

/// `acc += g²`, `step = lr·g / (√acc + eps)`; returns `(step, acc)`.
pub fn adagrad_update<T: Scalar>(accumulator: &[T], grad: &[T], lr: T, eps: T) -> (Vec<T>, Vec<T>) {
    let acc: Vec<T> = accumulator.iter().zip(grad).map(|(&a, &g)| a + g * g).collect();
    let step = acc.iter().zip(grad).map(|(&a, &g)| lr * g / (a.sqrt() + eps)).collect();
    (step, acc)
}

/// Outcome of [`local_step`].
#[derive(Clone, Debug)]
pub struct LocalFit<T> {
    pub params: LocalParams<T>,
    pub elbo: T,
    pub iterations: usize,
}

fn fail(record: &PatientRecord<impl Scalar>, reason: impl std::fmt::Display) -> Error {
    Error::Optimization {
        patient: record.id.clone(),
        reason: reason.to_string(),
    }
}

/// AdaGrad ascent on one patient's ELBO with the globals held fixed. Returns
/// the best iterate seen.
pub fn local_step<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    model: &ModelConfig,
    config: &OptimizerConfig,
) -> Result<LocalFit<T>> {
    let (mut x, blocks) = local.pack_with_blocks();
    let eval = |x: &[T]| -> Option<(T, Vec<T>)> {
        match elbo_packed_grad(local, x, global, hyper, record, model) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => Some((f, g)),
            _ => None,
        }
    };
    let (mut f, mut g) = match elbo_packed_grad(local, &x, global, hyper, record, model) {
        Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => (f, g),
        Ok(_) => return Err(fail(record, "non-finite ELBO at the starting point")),
        Err(e) => return Err(fail(record, e)),
    };
    let lr = T::lit(config.local_learning_rate);
    let eps = T::lit(config.adagrad_epsilon);
    let tol = T::lit(config.local_rel_tol);
    let mut acc = vec![T::zero(); x.len()];
    let mut scale = [T::one(); Block::ALL.len()];
    let mut best: Option<(T, Vec<T>)> = None;
    let start = f;
    let mut rejections = 0;
    let mut iterations = 0;
    while iterations < config.max_local_iters {
        iterations += 1;
        let (step, new_acc) = adagrad_update(&acc, &g, lr, eps);
        let trial: Vec<T> = x
            .iter()
            .zip(&step)
            .zip(&blocks)
            .map(|((&xi, &si), b)| xi + scale[b.index()] * si)
            .collect();
        match eval(&trial) {
            Some((f_new, g_new)) => {
                rejections = 0;
                acc = new_acc;
                let change = (f_new - f).abs() / f.abs().max(T::one());
                x = trial;
                f = f_new;
                g = g_new;
                if f > best.as_ref().map_or(start, |b| b.0) {
                    best = Some((f, x.clone()));
                }
                if change < tol {
                    break;
                }
            }
            None => {
                rejections += 1;
                if rejections >= MAX_REJECTIONS {
                    return Err(fail(
                        record,
                        format!("{MAX_REJECTIONS} consecutive non-finite steps"),
                    ));
                }
                let half = T::lit(0.5);
                scale.iter_mut().for_each(|s| *s *= half);
            }
        }
    }
    match best {
        Some((f, x)) => Ok(LocalFit {
            params: local.unpack(&x)?,
            elbo: f,
            iterations,
        }),
        None => Ok(LocalFit {
            params: local.clone(),
            elbo: start,
            iterations,
        }),
    }
}

/// Data-driven starting point: prior means from pooled moments and each
/// patient's locals at those means.
pub fn initialize<T: Scalar>(
    cohort: &Cohort<T>,
    model: &ModelConfig,
    config: &OptimizerConfig,
) -> Result<(GlobalParams<T>, Vec<LocalParams<T>>)> {
    if cohort.is_empty() {
        return Err(Error::arg("cannot fit an empty cohort"));
    }
    let n_sig = cohort.n_signals();
    let n_tr = cohort.n_treatments();
    let gamma_dim = cohort.n_covariates() + model.basis.dim();
    let mut gamma_mean = Vec::with_capacity(n_sig);
    let mut stds = Vec::with_capacity(n_sig);
    let mut vars = Vec::with_capacity(n_sig);
    for d in 0..n_sig {
        let mut xtx = Matrix::zeros(gamma_dim, gamma_dim);
        let mut xty = vec![T::zero(); gamma_dim];
        let (mut s1, mut s2, mut n) = (T::zero(), T::zero(), 0usize);
        for p in &cohort.patients {
            let s = &p.series[d];
            for (&t, &y) in s.times().iter().zip(s.values()) {
                let c = covariate_vector(&p.covariates, model.basis, t);
                for a in 0..gamma_dim {
                    xty[a] += c[a] * y;
                    for b in 0..gamma_dim {
                        xtx.row_mut(a)[b] += c[a] * c[b];
                    }
                }
                s1 += y;
                s2 += y * y;
                n += 1;
            }
        }
        let nn = T::lit(n as f64);
        let mean = s1 / nn;
        let var = (s2 / nn - mean * mean).max(T::lit(1e-12));
        let ridge = T::lit(1e-8) * (T::one() + xtx.diagonal().iter().fold(T::zero(), |a, &b| a.max(b)));
        xtx.add_diagonal(ridge);
        let gamma = match xtx.cholesky() {
            Ok(l) => linalg::cholesky_solve_vec(&l, &xty),
            Err(_) => vec![T::zero(); gamma_dim],
        };
        gamma_mean.push(gamma);
        stds.push(var.sqrt());
        vars.push(var);
    }
    let mut gaps = Vec::new();
    let mut spans = T::zero();
    for p in &cohort.patients {
        for s in &p.series {
            gaps.extend(s.times().windows(2).map(|w| (w[1] - w[0]).to_f64_lossy()));
        }
        let (lo, hi) = p.time_span();
        spans += hi - lo;
    }
    let log_rate = match config.init_log_rate {
        Some(v) => T::lit(v),
        None => {
            gaps.retain(|g| *g > 0.0);
            gaps.sort_by(|a, b| a.total_cmp(b));
            let median = if gaps.is_empty() { 1.0 } else { gaps[gaps.len() / 2] };
            T::lit((1.0 / median).ln())
        }
    };
    let ln2 = T::LN_2();
    let mean_span = (spans / T::lit(cohort.len() as f64)).max(T::lit(1e-3));
    let log_l = (mean_span / T::lit(4.0)).ln();
    let global = GlobalParams {
        chi_mean: vec![vec![T::zero(); n_sig]; n_tr],
        log_alpha_mean: vec![vec![log_rate; n_sig + 1]; n_tr],
        log_beta_mean: vec![vec![log_rate + ln2; n_sig + 1]; n_tr],
        gamma_mean,
        omega_mean: stds.clone(),
        kappa_mean: stds,
        log_lengthscale_g_mean: log_l,
        log_lengthscale_v_mean: vec![log_l; n_sig],
    };
    let noise: Vec<T> = vars
        .iter()
        .map(|&v| (T::lit(0.1) * v).max(T::lit(10.0 * NOISE_FLOOR)))
        .collect();
    let locals = cohort
        .patients
        .iter()
        .map(|p| {
            let (lo, hi) = p.time_span();
            let z = inducing_grid(lo, hi, model.n_inducing);
            global.initial_local(noise.clone(), vec![z; n_sig + 1])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((global, locals))
}

/// Fitted cohort.
#[derive(Clone, Debug)]
pub struct FitResult<T> {
    pub locals: Vec<LocalParams<T>>,
    pub global: GlobalParams<T>,
    /// Minibatch ELBO after each iteration's local updates.
    pub trace: Vec<T>,
    pub global_iterations: usize,
    pub converged: bool,
}

fn run_local<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    model: &ModelConfig,
    config: &OptimizerConfig,
) -> Result<LocalFit<T>> {
    local_step(local, global, hyper, record, model, config).map_err(|e| match e {
        Error::Optimization { .. } => e,
        other => fail(record, other),
    })
}

/// Alternating minibatch fit from [`initialize`].
pub fn fit<T: Scalar>(
    cohort: &Cohort<T>,
    hyper: &Hyperparams,
    model: &ModelConfig,
    config: &OptimizerConfig,
) -> Result<FitResult<T>> {
    let (global, locals) = initialize(cohort, model, config)?;
    fit_from(cohort, hyper, model, config, global, locals)
}

/// Alternating minibatch fit from a given starting point.
pub fn fit_from<T: Scalar>(
    cohort: &Cohort<T>,
    hyper: &Hyperparams,
    model: &ModelConfig,
    config: &OptimizerConfig,
    mut global: GlobalParams<T>,
    mut locals: Vec<LocalParams<T>>,
) -> Result<FitResult<T>> {
    hyper.validate()?;
    config.validate(cohort.len())?;
    if locals.len() != cohort.len() {
        return Err(Error::arg("one local parameter set per patient required"));
    }
    let n = cohort.len();
    let batch = config.minibatch_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut acc = vec![T::zero(); global.pack().len()];
    let lr = T::lit(config.learning_rate);
    let eps = T::lit(config.adagrad_epsilon);
    let weight = T::lit(n as f64 / batch as f64);
    let mut history: Vec<Vec<T>> = vec![global.pack()];
    let mut trace = Vec::with_capacity(config.max_global_iters);
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_global_iters {
        iterations += 1;
        if cursor + batch > n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let members = &order[cursor..cursor + batch];
        cursor += batch;
        let fits = members
            .par_iter()
            .map(|&i| run_local(&locals[i], &global, hyper, &cohort.patients[i], model, config))
            .collect::<Result<Vec<_>>>()?;
        let mut total = T::zero();
        for (&i, f) in members.iter().zip(fits) {
            total += f.elbo;
            locals[i] = f.params;
        }
        trace.push(total);
        let grad: Vec<T> = global_prior_grad(members.iter().map(|&i| &locals[i]), &global, hyper)
            .into_iter()
            .map(|g| g * weight)
            .collect();
        let (step, new_acc) = adagrad_update(&acc, &grad, lr, eps);
        acc = new_acc;
        let x: Vec<T> = global.pack().iter().zip(&step).map(|(&a, &s)| a + s).collect();
        global = global.unpack(&x)?;
        history.push(x);
        if history.len() > GLOBAL_WINDOW {
            let old = &history[history.len() - 1 - GLOBAL_WINDOW];
            let new = &history[history.len() - 1];
            let change = old
                .iter()
                .zip(new)
                .map(|(&a, &b)| (b - a).abs() / a.abs().max(T::one()))
                .fold(T::zero(), |m, v| m.max(v));
            if change < T::lit(config.global_rel_tol) {
                converged = true;
                break;
            }
            history.remove(0);
        }
        log::debug!("iteration {iterations}: minibatch ELBO {total}");
    }
    let fits = locals
        .par_iter()
        .zip(cohort.patients.par_iter())
        .map(|(l, r)| run_local(l, &global, hyper, r, model, config))
        .collect::<Result<Vec<_>>>()?;
    let locals = fits.into_iter().map(|f| f.params).collect();
    Ok(FitResult {
        locals,
        global,
        trace,
        global_iterations: iterations,
        converged,
    })
}

/// Per-coordinate `|analytic − central difference| / max(1, |analytic|)`.
pub fn finite_diff_errors<T: Scalar, F>(objective: F, point: &[T], h: T) -> Result<Vec<T>>
where
    F: Fn(&[T]) -> Result<(T, Vec<T>)>,
{
    if !(h > T::zero()) {
        return Err(Error::arg("finite-difference step must be positive"));
    }
    let (_, grad) = objective(point)?;
    if grad.len() != point.len() {
        return Err(Error::arg("gradient length differs from point"));
    }
    let mut errors = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + h;
        let up = objective(&x)?.0;
        x[i] = point[i] - h;
        let down = objective(&x)?.0;
        x[i] = point[i];
        let fd = (up - down) / (h + h);
        errors.push((grad[i] - fd).abs() / grad[i].abs().max(T::one()));
    }
    Ok(errors)
}

/// Maximum of [`finite_diff_errors`].
pub fn finite_diff_check<T: Scalar, F>(objective: F, point: &[T], h: T) -> Result<T>
where
    F: Fn(&[T]) -> Result<(T, Vec<T>)>,
{
    Ok(finite_diff_errors(objective, point, h)?
        .into_iter()
        .fold(T::zero(), |a, b| a.max(b)))
}
