//! Horizon forecasts, NRMSE, Q-Q recovery correlation, bootstrap standard
//! errors, the max-effect criterion and response decompositions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, DoseKind, PatientRecord, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::mean_model::{fixed_component, mean_function, treatment_component};
use crate::mogp::{whitened_marginal_diag, Matern32Kernel};
use crate::params::{LocalParams, ModelConfig};
use crate::scalar::Scalar;
use crate::synthetic::GroundTruth;

pub const HOURS_PER_DAY: f64 = 24.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    /// Zero-based.
    pub signal: usize,
    pub horizon_days: f64,
    pub time: f64,
    pub observed: f64,
    pub predicted: f64,
}

/// Posterior mean of each signal at arbitrary times: `m_d(t) + E[f_d(t)]`.
pub fn posterior_mean<T: Scalar>(
    local: &LocalParams<T>,
    record: &PatientRecord<T>,
    model: &ModelConfig,
    d: usize,
    times: &[T],
) -> Result<Vec<T>> {
    let (g, v) = random_effect_mean(local, model, d, times)?;
    Ok(times
        .iter()
        .enumerate()
        .map(|(n, &t)| mean_function(local, record, model.basis, d, t) + g[n] + v[n])
        .collect())
}

/// `(ω_d μ_g(t), κ_d μ_v(t))`.
fn random_effect_mean<T: Scalar>(
    local: &LocalParams<T>,
    model: &ModelConfig,
    d: usize,
    times: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let jitter = T::lit(model.jitter);
    let kg = Matern32Kernel::new(local.lengthscale_g)?;
    let kv = Matern32Kernel::new(local.lengthscale_v[d])?;
    let (mg, _) = whitened_marginal_diag(&kg, &local.latents[0], times, jitter)?;
    let (mv, _) = whitened_marginal_diag(&kv, &local.latents[d + 1], times, jitter)?;
    let (w, k) = (local.mix.omega[d], local.mix.kappa[d]);
    Ok((mg.iter().map(|&x| w * x).collect(), mv.iter().map(|&x| k * x).collect()))
}

/// Forecasts of the test observations lying within `horizon_days` of the
/// last training time of their signal.
pub fn horizon_predict<T: Scalar>(
    local: &LocalParams<T>,
    train: &PatientRecord<T>,
    test: &PatientRecord<T>,
    model: &ModelConfig,
    horizon_days: f64,
) -> Result<Vec<Prediction>> {
    if train.n_signals() != test.n_signals() {
        return Err(Error::arg("train and test records differ in signal count"));
    }
    let mut out = Vec::new();
    let window = T::lit(horizon_days * HOURS_PER_DAY);
    for d in 0..test.n_signals() {
        let boundary = *train.series[d]
            .times()
            .last()
            .ok_or_else(|| Error::arg("empty training series"))?;
        let s = &test.series[d];
        let keep: Vec<usize> = (0..s.len())
            .filter(|&n| s.times()[n] > boundary && s.times()[n] - boundary <= window)
            .collect();
        if keep.is_empty() {
            continue;
        }
        let times: Vec<T> = keep.iter().map(|&n| s.times()[n]).collect();
        let pred = posterior_mean(local, test, model, d, &times)?;
        for (i, &n) in keep.iter().enumerate() {
            out.push(Prediction {
                patient_id: test.id.clone(),
                signal: d,
                horizon_days,
                time: s.times()[n].to_f64_lossy(),
                observed: s.values()[n].to_f64_lossy(),
                predicted: pred[i].to_f64_lossy(),
            });
        }
    }
    Ok(out)
}

/// Per-signal NRMSE, `None` where the signal has no predictions or zero spread.
#[derive(Clone, Debug, PartialEq)]
pub struct NrmseReport {
    pub mean: f64,
    pub per_signal: Vec<Option<f64>>,
}

fn population_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// RMSE divided by the standard deviation of the observed values, per signal,
/// then averaged over signals.
pub fn nrmse(predictions: &[Prediction], n_signals: usize) -> Result<NrmseReport> {
    let stds = signal_stds(predictions, n_signals);
    nrmse_with_stds(predictions, &stds)
}

fn spread(d: usize, obs: &[f64]) -> Option<f64> {
    if obs.is_empty() {
        return None;
    }
    let s = population_std(obs);
    if s > 0.0 {
        Some(s)
    } else {
        log::warn!("signal {} has zero spread in the test set; excluded from NRMSE", d + 1);
        None
    }
}

/// Pooled population standard deviation of the observed values of each signal.
pub fn signal_stds(predictions: &[Prediction], n_signals: usize) -> Vec<Option<f64>> {
    (0..n_signals)
        .map(|d| {
            let obs: Vec<f64> = predictions.iter().filter(|p| p.signal == d).map(|p| p.observed).collect();
            spread(d, &obs)
        })
        .collect()
}

/// Per-signal standard deviation over every held-out observation in the
/// cohort, so the normaliser does not depend on the horizon.
pub fn test_set_stds<T: Scalar>(test: &Cohort<T>) -> Vec<Option<f64>> {
    (0..test.n_signals())
        .map(|d| {
            let obs: Vec<f64> = test
                .patients
                .iter()
                .flat_map(|p| p.series[d].values().iter().map(|v| v.to_f64_lossy()))
                .collect();
            spread(d, &obs)
        })
        .collect()
}

/// NRMSE with externally supplied normalising deviations.
pub fn nrmse_with_stds(predictions: &[Prediction], stds: &[Option<f64>]) -> Result<NrmseReport> {
    if predictions.is_empty() {
        return Err(Error::arg("no predictions to score"));
    }
    let per_signal: Vec<Option<f64>> = stds
        .iter()
        .enumerate()
        .map(|(d, std)| {
            let std = (*std)?;
            let sq: Vec<f64> = predictions
                .iter()
                .filter(|p| p.signal == d)
                .map(|p| (p.predicted - p.observed).powi(2))
                .collect();
            if sq.is_empty() {
                return None;
            }
            Some((sq.iter().sum::<f64>() / sq.len() as f64).sqrt() / std)
        })
        .collect();
    let used: Vec<f64> = per_signal.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::arg("no signal could be scored"));
    }
    Ok(NrmseReport {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        per_signal,
    })
}

/// Pearson correlation of the sorted samples.
pub fn qq_correlation(estimates: &[f64], truths: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::arg("Q-Q inputs differ in length"));
    }
    if estimates.len() < 3 {
        return Err(Error::arg("Q-Q correlation needs at least three values"));
    }
    if estimates.iter().chain(truths).any(|v| !v.is_finite()) {
        return Err(Error::arg("non-finite value in Q-Q input"));
    }
    let mut a = estimates.to_vec();
    let mut b = truths.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    pearson(&a, &b)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::arg("correlation undefined for a constant sample"));
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Mean and standard deviation of `resamples` bootstrap means, each over
/// `sample_size` draws with replacement.
pub fn bootstrap_ci<R: Rng + ?Sized>(
    values: &[f64],
    resamples: usize,
    sample_size: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 || sample_size == 0 {
        return Err(Error::arg("bootstrap needs values, resamples and a sample size"));
    }
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..sample_size).map(|_| values[rng.random_range(0..values.len())]).sum::<f64>() / sample_size as f64)
        .collect();
    let b = resamples as f64;
    let mean = means.iter().sum::<f64>() / b;
    let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / b;
    Ok((mean, var.sqrt()))
}

/// Unit of the input level behind a max-effect value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectUnit {
    /// Impulse dose mass.
    Mass,
    /// Interval dose rate.
    Rate,
    /// Both kinds present; the larger magnitude is used.
    Mixed,
    None,
}

impl EffectUnit {
    pub fn name(self) -> &'static str {
        match self {
            EffectUnit::Mass => "mass",
            EffectUnit::Rate => "rate",
            EffectUnit::Mixed => "mixed",
            EffectUnit::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxEffect<T> {
    pub value: T,
    pub unit: EffectUnit,
}

/// `χ_jd` times the largest event magnitude of the schedule.
pub fn max_effect<T: Scalar>(local: &LocalParams<T>, schedule: &TreatmentSchedule<T>, j: usize, d: usize) -> MaxEffect<T> {
    let events = schedule.events();
    if events.is_empty() {
        return MaxEffect {
            value: T::zero(),
            unit: EffectUnit::None,
        };
    }
    let peak = events.iter().map(|e| e.magnitude()).fold(T::zero(), |a, b| a.max(b));
    let has = |k: DoseKind| events.iter().any(|e| e.kind() == k);
    let unit = match (has(DoseKind::Impulse), has(DoseKind::Interval)) {
        (true, true) => EffectUnit::Mixed,
        (true, false) => EffectUnit::Mass,
        _ => EffectUnit::Rate,
    };
    MaxEffect {
        value: local.treatments[j].chi[d] * peak,
        unit,
    }
}

/// One dense-grid sample of a fitted signal split into its parts.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionRow {
    pub patient_id: String,
    pub signal: usize,
    pub time: f64,
    pub total: f64,
    pub mixed_effects: f64,
    pub treatment_response: f64,
}

/// Fitted total, mixed-effects (fixed + random) and treatment-response curves.
pub fn decompose<T: Scalar>(
    local: &LocalParams<T>,
    record: &PatientRecord<T>,
    model: &ModelConfig,
    grid: &[T],
) -> Result<Vec<DecompositionRow>> {
    let mut rows = Vec::with_capacity(grid.len() * record.n_signals());
    for d in 0..record.n_signals() {
        let (g, v) = random_effect_mean(local, model, d, grid)?;
        for (k, &t) in grid.iter().enumerate() {
            let tr = treatment_component(local, record, d, t);
            let mixed = fixed_component(local, record, model.basis, d, t) + g[k] + v[k];
            rows.push(DecompositionRow {
                patient_id: record.id.clone(),
                signal: d,
                time: t.to_f64_lossy(),
                total: (mixed + tr).to_f64_lossy(),
                mixed_effects: mixed.to_f64_lossy(),
                treatment_response: tr.to_f64_lossy(),
            });
        }
    }
    Ok(rows)
}

/// Equally spaced grid from 0 to the last observation or dose of a record.
pub fn record_grid<T: Scalar>(record: &PatientRecord<T>, step: f64) -> Vec<T> {
    let mut end = record.time_span().1;
    for s in &record.schedules {
        for e in s.events() {
            end = end.max(e.start());
        }
    }
    let n = (end.to_f64_lossy() / step).ceil().max(0.0) as usize;
    (0..=n).map(|k| T::lit(k as f64 * step)).collect()
}

/// Paired estimated and true values of one recovered quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct RecoverySeries {
    pub name: String,
    pub truth: Vec<f64>,
    pub estimated: Vec<f64>,
}

impl RecoverySeries {
    pub fn qq(&self) -> Result<f64> {
        qq_correlation(&self.estimated, &self.truth)
    }
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Which fitted system a recovery comparison reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemChoice {
    /// The system in the role the simulation used (shared or specific).
    Role,
    /// The system carrying most of the response on the affected signal:
    /// shared when `ψ ≥ ½`, else that signal's specific system.
    Effective,
}

/// Rates of each simulated treatment's generating system against a fitted
/// system, on the first signal the treatment affects. Rates are ordered so
/// `alpha ≤ beta` on both sides, since the response is symmetric in the pair.
pub fn rate_recovery<T: Scalar>(
    locals: &[LocalParams<T>],
    ids: &[String],
    truth: &GroundTruth,
    choice: SystemChoice,
) -> Result<Vec<RecoverySeries>> {
    let mut out = Vec::new();
    for (j, tc) in truth.config.treatments.iter().enumerate() {
        let target = tc.chi.iter().position(|c| c.mean != 0.0 || c.var != 0.0).unwrap_or(0);
        let sim_shared = tc.psi[target] >= 0.5;
        let role = match (choice, sim_shared) {
            (SystemChoice::Effective, _) => "effective",
            (SystemChoice::Role, true) => "shared",
            (SystemChoice::Role, false) => "specific",
        };
        let mut series = [(Vec::new(), Vec::new()), (Vec::new(), Vec::new())];
        for (local, id) in locals.iter().zip(ids) {
            let pt = truth
                .patient(id)
                .ok_or_else(|| Error::arg(format!("no ground truth for patient {id}")))?;
            let tr = &local.treatments[j];
            let use_shared = match choice {
                SystemChoice::Role => sim_shared,
                SystemChoice::Effective => tr.psi[target] >= T::lit(0.5),
            };
            let sys = if use_shared { tr.shared } else { tr.specific[target] };
            let est = ordered(sys.alpha.to_f64_lossy(), sys.beta.to_f64_lossy());
            let tru = ordered(pt.treatments[j].alpha, pt.treatments[j].beta);
            series[0].0.push(tru.0);
            series[0].1.push(est.0);
            series[1].0.push(tru.1);
            series[1].1.push(est.1);
        }
        for (name, (t, e)) in ["alpha", "beta"].iter().zip(series) {
            out.push(RecoverySeries {
                name: format!("treatment{}_{role}_{name}", j + 1),
                truth: t,
                estimated: e,
            });
        }
    }
    Ok(out)
}

/// `max_t |χ_jd ψ_jd ρ⁽⁰⁾_j(t)|` over `grid`.
pub fn shared_amplitude<T: Scalar>(
    local: &LocalParams<T>,
    schedule: &TreatmentSchedule<T>,
    j: usize,
    d: usize,
    grid: &[T],
) -> T {
    let tr = &local.treatments[j];
    let w = tr.chi[d] * tr.psi[d];
    grid.iter()
        .map(|&t| (w * tr.shared.convolve_schedule(schedule, t)).abs())
        .fold(T::zero(), |a, b| a.max(b))
}

/// Time and value of the largest-magnitude sample of a curve.
pub fn peak(grid: &[f64], curve: &[f64]) -> Option<(f64, f64)> {
    grid.iter()
        .zip(curve)
        .fold(None, |best: Option<(f64, f64)>, (&t, &v)| match best {
            Some((_, b)) if b.abs() >= v.abs() => best,
            _ => Some((t, v)),
        })
}

/// Same-signed peaks whose latencies after `onset` differ by at most
/// `rel_tol` of the true latency.
pub fn peak_agrees(grid: &[f64], estimated: &[f64], truth: &[f64], onset: f64, rel_tol: f64) -> bool {
    match (peak(grid, estimated), peak(grid, truth)) {
        (Some((te, ve)), Some((tt, vt))) => {
            ve.signum() == vt.signum() && (te - tt).abs() <= rel_tol * (tt - onset).abs()
        }
        _ => false,
    }
}
