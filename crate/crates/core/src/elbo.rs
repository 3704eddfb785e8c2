//! Per-patient evidence lower bound: expected Gaussian log-likelihood under
//! the variational marginals, minus the inducing-point KL terms, plus the
//! log prior of the local parameters.

use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::data::{Cohort, PatientRecord};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::mean_model::{covariate_vector, TreatmentResponseGrad};
use crate::mogp::{Matern32Kernel, VariationalState, WhitenedState};
use crate::params::{GlobalParams, Hyperparams, LocalGrad, LocalParams, ModelConfig, PSI_EPS};
use crate::scalar::Scalar;

/// `KL(N(m, S) ‖ N(0, K))` with `K = prior_cov`.
pub fn gaussian_kl<T: Scalar>(state: &VariationalState<T>, prior_cov: &Matrix<T>) -> Result<T> {
    let m = state.len();
    if prior_cov.rows() != m || prior_cov.cols() != m {
        return Err(Error::arg("prior covariance shape differs from variational state"));
    }
    let lk = prior_cov.cholesky()?;
    let mut w = state.chol.clone();
    linalg::solve_lower_in_place(&lk, &mut w);
    let trace = w.frobenius_sq();
    let a = linalg::solve_lower_vec(&lk, &state.mean);
    let quad = linalg::dot(&a, &a);
    let logdet = linalg::cholesky_log_det(&lk) - linalg::cholesky_log_det(&state.chol);
    Ok(T::lit(0.5) * (trace + quad - T::lit(m as f64) + logdet))
}

/// `Σ_n [ln N(y_n; mean_n, σ²) − var_n / (2σ²)]`.
pub fn expected_loglik<T: Scalar>(y: &[T], mean: &[T], marginal_var: &[T], noise_var: T) -> Result<T> {
    if !(noise_var > T::zero()) {
        return Err(Error::arg(format!("noise variance must be positive, got {noise_var}")));
    }
    if y.len() != mean.len() || y.len() != marginal_var.len() {
        return Err(Error::arg("expected log-likelihood inputs differ in length"));
    }
    let norm = T::lit(-0.5) * (T::TAU() * noise_var).ln();
    let inv2 = T::one() / (noise_var + noise_var);
    Ok(y.iter()
        .zip(mean)
        .zip(marginal_var)
        .map(|((&y, &m), &v)| norm - ((y - m) * (y - m) + v) * inv2)
        .fold(T::zero(), |a, b| a + b))
}

fn ln_normal<T: Scalar>(x: T, loc: T, precision: T) -> T {
    let r = x - loc;
    T::lit(0.5) * (precision / T::TAU()).ln() - T::lit(0.5) * precision * r * r
}

/// Log-normal prior term of a positive parameter, expressed as the normal
/// density of `ln x`: the coordinate the optimiser works in.
fn ln_lognormal<T: Scalar>(x: T, loc: T) -> T {
    ln_normal(x.ln(), loc, T::one())
}

/// `d/dx` of [`ln_lognormal`].
fn ln_lognormal_grad<T: Scalar>(x: T, loc: T) -> T {
    -(x.ln() - loc) / x
}

fn clamp_psi<T: Scalar>(psi: T) -> T {
    let eps = T::lit(PSI_EPS);
    psi.max(eps).min(T::one() - eps)
}

fn ln_beta_symmetric(a: f64) -> f64 {
    2.0 * ln_gamma(a) - ln_gamma(2.0 * a)
}

/// Sum of all local prior log-densities.
pub fn log_prior_local<T: Scalar>(local: &LocalParams<T>, global: &GlobalParams<T>, hyper: &Hyperparams) -> T {
    let one = T::one();
    let a = 1.0 / hyper.lambda_psi;
    let ln_b = T::lit(ln_beta_symmetric(a));
    let am1 = T::lit(a - 1.0);
    let lam = T::lit(hyper.lambda_mix);
    let mut lp = T::zero();
    for (j, tr) in local.treatments.iter().enumerate() {
        lp += ln_lognormal(tr.shared.alpha, global.log_alpha_mean[j][0]);
        lp += ln_lognormal(tr.shared.beta, global.log_beta_mean[j][0]);
        for d in 0..tr.chi.len() {
            lp += ln_normal(tr.chi[d], global.chi_mean[j][d], one);
            let psi = clamp_psi(tr.psi[d]);
            lp += am1 * (psi.ln() + (one - psi).ln()) - ln_b;
            lp += ln_lognormal(tr.specific[d].alpha, global.log_alpha_mean[j][d + 1]);
            lp += ln_lognormal(tr.specific[d].beta, global.log_beta_mean[j][d + 1]);
        }
    }
    for (g, gm) in local.fixed.gamma.iter().zip(&global.gamma_mean) {
        for (&v, &m) in g.iter().zip(gm) {
            lp += ln_normal(v, m, one);
        }
    }
    for d in 0..local.n_signals() {
        lp += ln_normal(local.mix.omega[d], global.omega_mean[d], lam);
        lp += ln_normal(local.mix.kappa[d], global.kappa_mean[d], lam);
        lp += ln_lognormal(local.lengthscale_v[d], global.log_lengthscale_v_mean[d]);
    }
    lp += ln_lognormal(local.lengthscale_g, global.log_lengthscale_g_mean);
    lp
}

fn log_prior_grad<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    grad: &mut LocalGrad<T>,
) {
    let one = T::one();
    let am1 = T::lit(1.0 / hyper.lambda_psi - 1.0);
    let lam = T::lit(hyper.lambda_mix);
    for (j, tr) in local.treatments.iter().enumerate() {
        grad.shared[j].0 += ln_lognormal_grad(tr.shared.alpha, global.log_alpha_mean[j][0]);
        grad.shared[j].1 += ln_lognormal_grad(tr.shared.beta, global.log_beta_mean[j][0]);
        for d in 0..tr.chi.len() {
            grad.chi[j][d] -= tr.chi[d] - global.chi_mean[j][d];
            let psi = tr.psi[d];
            if psi > T::lit(PSI_EPS) && psi < one - T::lit(PSI_EPS) {
                grad.psi[j][d] += am1 * (one / psi - one / (one - psi));
            }
            grad.specific[j][d].0 += ln_lognormal_grad(tr.specific[d].alpha, global.log_alpha_mean[j][d + 1]);
            grad.specific[j][d].1 += ln_lognormal_grad(tr.specific[d].beta, global.log_beta_mean[j][d + 1]);
        }
    }
    for (d, (g, gm)) in local.fixed.gamma.iter().zip(&global.gamma_mean).enumerate() {
        for (k, (&v, &m)) in g.iter().zip(gm).enumerate() {
            grad.gamma[d][k] -= v - m;
        }
    }
    for d in 0..local.n_signals() {
        grad.omega[d] -= lam * (local.mix.omega[d] - global.omega_mean[d]);
        grad.kappa[d] -= lam * (local.mix.kappa[d] - global.kappa_mean[d]);
        grad.lengthscale_v[d] += ln_lognormal_grad(local.lengthscale_v[d], global.log_lengthscale_v_mean[d]);
    }
    grad.lengthscale_g += ln_lognormal_grad(local.lengthscale_g, global.log_lengthscale_g_mean);
}

/// Gradient of `Σ_i log p(Θ_i | Θ₀)` with respect to the global parameters,
/// in [`GlobalParams::pack`] order.
pub fn global_prior_grad<'a, T: Scalar>(
    locals: impl IntoIterator<Item = &'a LocalParams<T>>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
) -> Vec<T> {
    let lam = T::lit(hyper.lambda_mix);
    let mut g = global.clone();
    let zero = |v: &mut Vec<T>| v.iter_mut().for_each(|x| *x = T::zero());
    g.chi_mean.iter_mut().for_each(zero);
    g.log_alpha_mean.iter_mut().for_each(zero);
    g.log_beta_mean.iter_mut().for_each(zero);
    g.gamma_mean.iter_mut().for_each(zero);
    zero(&mut g.omega_mean);
    zero(&mut g.kappa_mean);
    zero(&mut g.log_lengthscale_v_mean);
    g.log_lengthscale_g_mean = T::zero();
    for local in locals {
        for (j, tr) in local.treatments.iter().enumerate() {
            g.log_alpha_mean[j][0] += tr.shared.alpha.ln() - global.log_alpha_mean[j][0];
            g.log_beta_mean[j][0] += tr.shared.beta.ln() - global.log_beta_mean[j][0];
            for d in 0..tr.chi.len() {
                g.chi_mean[j][d] += tr.chi[d] - global.chi_mean[j][d];
                g.log_alpha_mean[j][d + 1] += tr.specific[d].alpha.ln() - global.log_alpha_mean[j][d + 1];
                g.log_beta_mean[j][d + 1] += tr.specific[d].beta.ln() - global.log_beta_mean[j][d + 1];
            }
        }
        for (d, gam) in local.fixed.gamma.iter().enumerate() {
            for (k, &v) in gam.iter().enumerate() {
                g.gamma_mean[d][k] += v - global.gamma_mean[d][k];
            }
        }
        for d in 0..local.n_signals() {
            g.omega_mean[d] += lam * (local.mix.omega[d] - global.omega_mean[d]);
            g.kappa_mean[d] += lam * (local.mix.kappa[d] - global.kappa_mean[d]);
            g.log_lengthscale_v_mean[d] += local.lengthscale_v[d].ln() - global.log_lengthscale_v_mean[d];
        }
        g.log_lengthscale_g_mean += local.lengthscale_g.ln() - global.log_lengthscale_g_mean;
    }
    g.pack()
}

/// Cached quantities of one whitened latent at a set of times.
struct LatentEval<T> {
    chol_kzz: Matrix<T>,
    /// `A = L⁻¹ K_ZN`.
    a: Matrix<T>,
    /// `C = L̃ᵀ A`.
    c: Matrix<T>,
    mean: Vec<T>,
    var: Vec<T>,
}

fn eval_latent<T: Scalar>(
    kernel: &Matern32Kernel<T>,
    state: &WhitenedState<T>,
    times: &[T],
    jitter: T,
) -> Result<LatentEval<T>> {
    let chol_kzz = kernel.inducing_covariance(&state.z, jitter).cholesky()?;
    let mut a = kernel.matrix(&state.z, times);
    linalg::solve_lower_in_place(&chol_kzz, &mut a);
    let mean = a.tr_matvec(&state.mean);
    let c = state.chol.tr_matmul(&a);
    let m = a.rows();
    let var = (0..times.len())
        .map(|n| {
            let mut v = T::one();
            for k in 0..m {
                v += c[(k, n)] * c[(k, n)] - a[(k, n)] * a[(k, n)];
            }
            v.max(T::zero())
        })
        .collect();
    Ok(LatentEval {
        chol_kzz,
        a,
        c,
        mean,
        var,
    })
}

/// Accumulates the data-term gradient of one latent into `g_mean`, `g_chol`
/// and returns the lengthscale derivative.
#[allow(clippy::too_many_arguments)]
fn backprop_latent<T: Scalar>(
    kernel: &Matern32Kernel<T>,
    state: &WhitenedState<T>,
    times: &[T],
    ev: &LatentEval<T>,
    d_mean: &[T],
    d_var: &[T],
    g_mean: &mut [T],
    g_chol: &mut Matrix<T>,
) -> T {
    let m = state.len();
    let n = times.len();
    let two = T::lit(2.0);
    let (a, c) = (&ev.a, &ev.c);
    for i in 0..m {
        let row = a.row(i);
        g_mean[i] += row.iter().zip(d_mean).map(|(&x, &y)| x * y).fold(T::zero(), |p, q| p + q);
    }
    // ∂/∂L̃[i,k] = 2 Σ_n A[i,n] dvar[n] C[k,n]
    for i in 0..m {
        for k in 0..=i {
            let mut s = T::zero();
            for t in 0..n {
                s += a[(i, t)] * d_var[t] * c[(k, t)];
            }
            g_chol.row_mut(i)[k] += two * s;
        }
    }
    // adjoint of A
    let lc = state.chol.matmul(c);
    let a_bar = Matrix::from_fn(m, n, |i, t| {
        state.mean[i] * d_mean[t] + two * d_var[t] * (lc[(i, t)] - a[(i, t)])
    });
    let (_, dkzz) = kernel.matrix_with_grad(&state.z, &state.z);
    let (_, dkzn) = kernel.matrix_with_grad(&state.z, times);
    let l = &ev.chol_kzz;
    // P = L⁻¹ K̇ L⁻ᵀ, Φ(P) = lower triangle with halved diagonal, L̇ = L Φ(P)
    let mut x = dkzz;
    linalg::solve_lower_in_place(l, &mut x);
    let mut p = x.transpose();
    linalg::solve_lower_in_place(l, &mut p);
    let half = T::lit(0.5);
    let phi = Matrix::from_fn(m, m, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => half * (p[(i, j)] + p[(j, i)]),
        std::cmp::Ordering::Equal => half * p[(i, i)],
        std::cmp::Ordering::Less => T::zero(),
    });
    let l_dot = l.matmul(&phi);
    let mut a_dot = dkzn.sub(&l_dot.matmul(a));
    linalg::solve_lower_in_place(l, &mut a_dot);
    a_bar
        .as_slice()
        .iter()
        .zip(a_dot.as_slice())
        .map(|(&u, &v)| u * v)
        .fold(T::zero(), |p, q| p + q)
}

fn check_consistent<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    record: &PatientRecord<T>,
    config: &ModelConfig,
) -> Result<()> {
    let gamma_dim = record.covariates.len() + config.basis.dim();
    local.validate(record.n_signals(), record.n_treatments(), gamma_dim)?;
    global.validate(record.n_signals(), record.n_treatments(), gamma_dim)
}

/// Decomposed per-patient objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms<T> {
    pub expected_loglik: T,
    pub kl: T,
    pub log_prior: T,
}

impl<T: Scalar> ElboTerms<T> {
    pub fn total(&self) -> T {
        self.expected_loglik - self.kl + self.log_prior
    }
}

fn evaluate<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    config: &ModelConfig,
    mut grad: Option<&mut LocalGrad<T>>,
) -> Result<ElboTerms<T>> {
    let jitter = T::lit(config.jitter);
    let n_sig = record.n_signals();
    let kernel_g = Matern32Kernel::new(local.lengthscale_g)?;
    let g_times: Vec<T> = record.series.iter().flat_map(|s| s.times().iter().copied()).collect();
    let g_eval = eval_latent(&kernel_g, &local.latents[0], &g_times, jitter)?;
    let mut g_dmean = vec![T::zero(); g_times.len()];
    let mut g_dvar = vec![T::zero(); g_times.len()];
    let mut ell = T::zero();
    let mut offset = 0;
    let half = T::lit(0.5);
    let mut v_parts = Vec::with_capacity(n_sig);
    for d in 0..n_sig {
        let series = &record.series[d];
        let kernel_v = Matern32Kernel::new(local.lengthscale_v[d])?;
        let v_eval = eval_latent(&kernel_v, &local.latents[d + 1], series.times(), jitter)?;
        let (w, k) = (local.mix.omega[d], local.mix.kappa[d]);
        let s2 = local.noise_var[d];
        if !(s2 > T::zero()) {
            return Err(Error::arg("noise variance must be positive"));
        }
        let norm = -half * (T::TAU() * s2).ln();
        let inv_s2 = T::one() / s2;
        let mut v_dmean = vec![T::zero(); series.len()];
        let mut v_dvar = vec![T::zero(); series.len()];
        let mut d_s2 = T::zero();
        for (n, (&t, &y)) in series.times().iter().zip(series.values()).enumerate() {
            let c = covariate_vector(&record.covariates, config.basis, t);
            let gamma = &local.fixed.gamma[d];
            let mut mean = gamma.iter().zip(&c).map(|(&g, &x)| g * x).fold(T::zero(), |a, b| a + b);
            let mut tr_grads: Vec<TreatmentResponseGrad<T>> = Vec::new();
            for (p, sched) in local.treatments.iter().zip(&record.schedules) {
                if grad.is_some() {
                    let tg = p.response_grad(sched, d, t);
                    mean += tg.value;
                    tr_grads.push(tg);
                } else {
                    mean += p.response(sched, d, t);
                }
            }
            let (mg, vg) = (g_eval.mean[offset + n], g_eval.var[offset + n]);
            let (mv, vv) = (v_eval.mean[n], v_eval.var[n]);
            mean += w * mg + k * mv;
            let var = w * w * vg + k * k * vv;
            let r = y - mean;
            ell += norm - (r * r + var) * half * inv_s2;
            if let Some(gr) = grad.as_deref_mut() {
                let dm = r * inv_s2;
                let dv = -half * inv_s2;
                for (kk, &x) in c.iter().enumerate() {
                    gr.gamma[d][kk] += dm * x;
                }
                for (j, tg) in tr_grads.iter().enumerate() {
                    gr.chi[j][d] += dm * tg.d_chi;
                    gr.psi[j][d] += dm * tg.d_psi;
                    gr.shared[j].0 += dm * tg.d_shared.0;
                    gr.shared[j].1 += dm * tg.d_shared.1;
                    gr.specific[j][d].0 += dm * tg.d_specific.0;
                    gr.specific[j][d].1 += dm * tg.d_specific.1;
                }
                gr.omega[d] += dm * mg + dv * (w + w) * vg;
                gr.kappa[d] += dm * mv + dv * (k + k) * vv;
                g_dmean[offset + n] = w * dm;
                g_dvar[offset + n] = w * w * dv;
                v_dmean[n] = k * dm;
                v_dvar[n] = k * k * dv;
                d_s2 += -half * inv_s2 + (r * r + var) * half * inv_s2 * inv_s2;
            }
        }
        if let Some(gr) = grad.as_deref_mut() {
            gr.noise_var[d] += d_s2;
        }
        v_parts.push((kernel_v, v_eval, v_dmean, v_dvar));
        offset += series.len();
    }
    let kl = local.latents.iter().map(|s| s.kl_to_standard()).fold(T::zero(), |a, b| a + b);
    let log_prior = log_prior_local(local, global, hyper);
    if let Some(gr) = grad {
        gr.lengthscale_g += backprop_latent(
            &kernel_g,
            &local.latents[0],
            &g_times,
            &g_eval,
            &g_dmean,
            &g_dvar,
            &mut gr.latent_mean[0],
            &mut gr.latent_chol[0],
        );
        for (d, (kernel_v, v_eval, v_dmean, v_dvar)) in v_parts.iter().enumerate() {
            gr.lengthscale_v[d] += backprop_latent(
                kernel_v,
                &local.latents[d + 1],
                record.series[d].times(),
                v_eval,
                v_dmean,
                v_dvar,
                &mut gr.latent_mean[d + 1],
                &mut gr.latent_chol[d + 1],
            );
        }
        for (k, s) in local.latents.iter().enumerate() {
            for (g, &m) in gr.latent_mean[k].iter_mut().zip(&s.mean) {
                *g -= m;
            }
            for i in 0..s.len() {
                for j in 0..=i {
                    gr.latent_chol[k].row_mut(i)[j] -= s.chol[(i, j)];
                }
                gr.latent_chol[k].row_mut(i)[i] += T::one() / s.chol[(i, i)];
            }
        }
        log_prior_grad(local, global, hyper, gr);
    }
    Ok(ElboTerms {
        expected_loglik: ell,
        kl,
        log_prior,
    })
}

/// Expected log-likelihood, KL and log prior of one patient.
pub fn elbo_terms<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    config: &ModelConfig,
) -> Result<ElboTerms<T>> {
    check_consistent(local, global, record, config)?;
    evaluate(local, global, hyper, record, config, None)
}

pub fn elbo_patient<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    config: &ModelConfig,
) -> Result<T> {
    Ok(elbo_terms(local, global, hyper, record, config)?.total())
}

/// ELBO and its gradient with respect to the constrained local parameters.
pub fn elbo_patient_grad<T: Scalar>(
    local: &LocalParams<T>,
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    config: &ModelConfig,
) -> Result<(T, LocalGrad<T>)> {
    check_consistent(local, global, record, config)?;
    let mut grad = LocalGrad::zeros_like(local);
    let terms = evaluate(local, global, hyper, record, config, Some(&mut grad))?;
    Ok((terms.total(), grad))
}

/// ELBO as a function of the packed unconstrained coordinates, with gradient.
pub fn elbo_packed_grad<T: Scalar>(
    template: &LocalParams<T>,
    x: &[T],
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    record: &PatientRecord<T>,
    config: &ModelConfig,
) -> Result<(T, Vec<T>)> {
    let local = template.unpack(x)?;
    let (value, grad) = elbo_patient_grad(&local, global, hyper, record, config)?;
    Ok((value, local.pack_grad(&grad)))
}

/// Sum of per-patient ELBOs; `locals[i]` belongs to `cohort.patients[i]`.
pub fn elbo_cohort<T: Scalar>(
    locals: &[LocalParams<T>],
    global: &GlobalParams<T>,
    hyper: &Hyperparams,
    cohort: &Cohort<T>,
    config: &ModelConfig,
) -> Result<T> {
    if locals.len() != cohort.len() {
        return Err(Error::arg(format!(
            "{} local parameter sets for {} patients",
            locals.len(),
            cohort.len()
        )));
    }
    let values = locals
        .par_iter()
        .zip(cohort.patients.par_iter())
        .map(|(l, r)| {
            elbo_patient(l, global, hyper, r, config).map_err(|e| match e {
                Error::NotPositiveDefinite { .. } => Error::Optimization {
                    patient: r.id.clone(),
                    reason: e.to_string(),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(values.into_iter().fold(T::zero(), |a, b| a + b))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::{DoseEvent, ObservationSeries, TreatmentSchedule};
    use crate::mogp::{inducing_grid, variational_marginal};
    use crate::params::tests::random_local;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_record(rng: &mut ChaCha8Rng, d: usize, j: usize, n: usize, n_cov: usize) -> PatientRecord<f64> {
        let series = (0..d)
            .map(|s| {
                let mut t = 0.0;
                let times: Vec<f64> = (0..n)
                    .map(|_| {
                        t += rng.random_range(0.3..2.0);
                        t
                    })
                    .collect();
                let values = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                ObservationSeries::new(s, times, values).unwrap()
            })
            .collect();
        let schedules = (0..j)
            .map(|_| {
                let s = rng.random_range(0.0..3.0);
                TreatmentSchedule::new(vec![
                    DoseEvent::interval(s, s + rng.random_range(0.5..3.0), rng.random_range(0.2..2.0)).unwrap(),
                    DoseEvent::impulse(rng.random_range(1.0..6.0), rng.random_range(0.5..3.0)).unwrap(),
                ])
                .unwrap()
            })
            .collect();
        let covariates = (0..n_cov).map(|_| rng.random_range(-1.0..1.0)).collect();
        PatientRecord::new("p", series, schedules, covariates).unwrap()
    }

    pub(crate) fn random_global(rng: &mut ChaCha8Rng, d: usize, j: usize, gamma_dim: usize) -> GlobalParams<f64> {
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-0.5..0.5)).collect::<Vec<f64>>();
        GlobalParams {
            chi_mean: (0..j).map(|_| v(d)).collect(),
            log_alpha_mean: (0..j).map(|_| v(d + 1)).collect(),
            log_beta_mean: (0..j).map(|_| v(d + 1)).collect(),
            gamma_mean: (0..d).map(|_| v(gamma_dim)).collect(),
            omega_mean: v(d),
            kappa_mean: v(d),
            log_lengthscale_g_mean: v(1)[0],
            log_lengthscale_v_mean: v(d),
        }
    }

    /// ELBO through the direct-form marginals and KL.
    fn elbo_direct(
        local: &LocalParams<f64>,
        global: &GlobalParams<f64>,
        hyper: &Hyperparams,
        record: &PatientRecord<f64>,
        config: &ModelConfig,
    ) -> f64 {
        let jitter = config.jitter;
        let kg = Matern32Kernel::new(local.lengthscale_g).unwrap();
        let qg = local.latents[0].unwhiten(&kg, jitter).unwrap();
        let mut total = 0.0;
        for d in 0..record.n_signals() {
            let s = &record.series[d];
            let kv = Matern32Kernel::new(local.lengthscale_v[d]).unwrap();
            let qv = local.latents[d + 1].unwhiten(&kv, jitter).unwrap();
            let (mg, cg) = variational_marginal(&kg, &qg, s.times(), jitter).unwrap();
            let (mv, cv) = variational_marginal(&kv, &qv, s.times(), jitter).unwrap();
            let mix = crate::mogp::mixed_marginal((&mg, &cg), (&mv, &cv), &local.mix, d);
            let mean: Vec<f64> = s
                .times()
                .iter()
                .zip(&mix.0)
                .map(|(&t, &f)| crate::mean_model::mean_function(local, record, config.basis, d, t) + f)
                .collect();
            total += expected_loglik(s.values(), &mean, &mix.1.diagonal(), local.noise_var[d]).unwrap();
            total -= gaussian_kl(&qv, &kv.inducing_covariance(&qv.z, jitter)).unwrap();
        }
        total -= gaussian_kl(&qg, &kg.inducing_covariance(&qg.z, jitter)).unwrap();
        total + log_prior_local(local, global, hyper)
    }

    #[test]
    fn kl_examples() {
        let k = Matern32Kernel::new(1.5f64).unwrap();
        let z = inducing_grid(0.0, 4.0, 4);
        let cov = k.inducing_covariance(&z, 1e-6);
        let l = cov.cholesky().unwrap();
        let at_prior = VariationalState::new(z.clone(), vec![0.0; 4], l.clone()).unwrap();
        assert!(gaussian_kl(&at_prior, &cov).unwrap().abs() < 1e-10);
        let m = vec![0.5, -1.0, 0.2, 0.9];
        let shifted = VariationalState::new(z, m.clone(), l.clone()).unwrap();
        let want = 0.5 * linalg::dot(&m, &linalg::cholesky_solve_vec(&l, &m));
        assert!((gaussian_kl(&shifted, &cov).unwrap() - want).abs() < 1e-8);
    }

    #[test]
    fn expected_loglik_examples() {
        let v: f64 = expected_loglik(&[1.0], &[1.0], &[0.0], 1.0).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let base: f64 = expected_loglik(&[1.0, 2.0], &[0.5, 2.5], &[0.0, 0.0], 0.3).unwrap();
        let with = expected_loglik(&[1.0, 2.0], &[0.5, 2.5], &[0.0, 0.12], 0.3).unwrap();
        assert!((base - with - 0.12 / 0.6).abs() < 1e-14);
        assert!(expected_loglik::<f64>(&[1.0], &[1.0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn prior_terms_match_hand_written_densities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut local = random_local(&mut rng, 1, 1, 1, 2, (0.0, 1.0));
        let global = random_global(&mut rng, 1, 1, 1);
        let hyper = Hyperparams::default();
        let base = log_prior_local(&local, &global, &hyper);
        let dchi = 0.7;
        local.treatments[0].chi[0] = global.chi_mean[0][0] + dchi;
        let a = log_prior_local(&local, &global, &hyper);
        local.treatments[0].chi[0] = global.chi_mean[0][0];
        let b = log_prior_local(&local, &global, &hyper);
        assert!(((b - a) - 0.5 * dchi * dchi).abs() < 1e-12);
        assert!(base.is_finite());

        // Beta(0.01, 0.01) is heavier near the boundary than in the middle
        local.treatments[0].psi[0] = 0.5;
        let mid = log_prior_local(&local, &global, &hyper);
        local.treatments[0].psi[0] = PSI_EPS;
        let edge = log_prior_local(&local, &global, &hyper);
        assert!(edge > mid);
        local.treatments[0].psi[0] = 0.0;
        assert_eq!(log_prior_local(&local, &global, &hyper), edge);
    }

    #[test]
    fn prior_is_maximal_at_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let global = random_global(&mut rng, 2, 1, 2);
        let hyper = Hyperparams::default();
        let mut local = random_local(&mut rng, 2, 1, 2, 2, (0.0, 1.0));
        let mode = |loc: f64| loc.exp();
        let tr = &mut local.treatments[0];
        tr.shared = crate::lti::SecondOrderLti::new(mode(global.log_alpha_mean[0][0]), mode(global.log_beta_mean[0][0])).unwrap();
        for d in 0..2 {
            tr.chi[d] = global.chi_mean[0][d];
            tr.specific[d] = crate::lti::SecondOrderLti::new(
                mode(global.log_alpha_mean[0][d + 1]),
                mode(global.log_beta_mean[0][d + 1]),
            )
            .unwrap();
            tr.psi[d] = PSI_EPS;
        }
        local.fixed.gamma = global.gamma_mean.clone();
        local.mix.omega = global.omega_mean.clone();
        local.mix.kappa = global.kappa_mean.clone();
        local.lengthscale_g = mode(global.log_lengthscale_g_mean);
        local.lengthscale_v = global.log_lengthscale_v_mean.iter().map(|&l| mode(l)).collect();
        let best = log_prior_local(&local, &global, &hyper);
        let x = local.pack();
        let (_, blocks) = local.pack_with_blocks();
        for i in 0..x.len() {
            if !matches!(blocks[i], crate::params::Block::Treatment | crate::params::Block::Fixed | crate::params::Block::Mixing | crate::params::Block::Lengthscale) {
                continue;
            }
            for &h in &[-1e-3, 1e-3] {
                let mut y = x.clone();
                y[i] += h;
                let p = local.unpack(&y).unwrap();
                assert!(log_prior_local(&p, &global, &hyper) <= best + 1e-12, "coordinate {i}");
            }
        }
    }

    #[test]
    fn whitened_and_direct_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let record = random_record(&mut rng, 2, 2, 6, 1);
            let config = ModelConfig { n_inducing: 4, ..ModelConfig::default() };
            let (lo, hi) = record.time_span();
            let local = random_local(&mut rng, 2, 2, 2, 4, (lo, hi));
            let global = random_global(&mut rng, 2, 2, 2);
            let hyper = Hyperparams::default();
            let fast = elbo_patient(&local, &global, &hyper, &record, &config).unwrap();
            let slow = elbo_direct(&local, &global, &hyper, &record, &config);
            assert!((fast - slow).abs() < 1e-7 * (1.0 + fast.abs()), "{fast} vs {slow}");
        }
    }

    #[test]
    fn kl_vanishes_at_prior_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let record = random_record(&mut rng, 2, 0, 5, 0);
        let global = random_global(&mut rng, 2, 0, 1);
        let (lo, hi) = record.time_span();
        let z = inducing_grid(lo, hi, 3);
        let local = global.initial_local(vec![0.2, 0.3], vec![z.clone(), z.clone(), z]).unwrap();
        let terms = elbo_terms(&local, &global, &Hyperparams::default(), &record, &ModelConfig::default()).unwrap();
        assert_eq!(terms.kl, 0.0);
        assert_eq!(terms.total(), terms.expected_loglik + terms.log_prior);
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let record = random_record(&mut rng, 2, 1, 5, 1);
        let config = ModelConfig::default();
        let (lo, hi) = record.time_span();
        let local = random_local(&mut rng, 2, 1, 2, 3, (lo, hi));
        let global = random_global(&mut rng, 2, 1, 2);
        let hyper = Hyperparams::default();
        let x = local.pack();
        let (_, g) = elbo_packed_grad(&local, &x, &global, &hyper, &record, &config).unwrap();
        let f = |y: &[f64]| elbo_patient(&local.unpack(y).unwrap(), &global, &hyper, &record, &config).unwrap();
        for i in 0..x.len() {
            let h = 1e-5;
            let mut p = x.clone();
            p[i] += h;
            let mut q = x.clone();
            q[i] -= h;
            let fd = (f(&p) - f(&q)) / (2.0 * h);
            assert!((fd - g[i]).abs() / g[i].abs().max(1.0) < 1e-5, "coord {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn cohort_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = random_record(&mut rng, 1, 1, 4, 0);
        let mut b = a.clone();
        b.id = "q".into();
        let config = ModelConfig::default();
        let (lo, hi) = a.time_span();
        let local = random_local(&mut rng, 1, 1, 1, 3, (lo, hi));
        let global = random_global(&mut rng, 1, 1, 1);
        let hyper = Hyperparams::default();
        let single = elbo_patient(&local, &global, &hyper, &a, &config).unwrap();
        let one = Cohort::new(vec![a.clone()], 1, 1).unwrap();
        assert_eq!(elbo_cohort(std::slice::from_ref(&local), &global, &hyper, &one, &config).unwrap(), single);
        let two = Cohort::new(vec![a, b], 1, 1).unwrap();
        let v = elbo_cohort(&[local.clone(), local], &global, &hyper, &two, &config).unwrap();
        assert_eq!(v, 2.0 * single);
    }
}
