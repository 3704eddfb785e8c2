//! Deterministic part of each signal: mixed shared/signal-specific treatment
//! responses plus a linear fixed-effects regression on time-augmented covariates.

use serde::{Deserialize, Serialize};

use crate::data::{PatientRecord, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::lti::{ResponseGrad, SecondOrderLti};
use crate::params::LocalParams;
use crate::scalar::Scalar;

/// Time basis appended to the static covariates: `c_t = (c, basis(t))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum CovariateBasis {
    /// `(t)`
    #[default]
    Linear,
    /// `(ln(t + 10), 1)`
    LogShift,
}

impl CovariateBasis {
    pub fn dim(&self) -> usize {
        match self {
            CovariateBasis::Linear => 1,
            CovariateBasis::LogShift => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CovariateBasis::Linear => "linear",
            CovariateBasis::LogShift => "log_shift",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "linear" | "t" => Some(CovariateBasis::Linear),
            "log_shift" | "log" => Some(CovariateBasis::LogShift),
            _ => None,
        }
    }

    fn push<T: Scalar>(&self, t: T, out: &mut Vec<T>) {
        match self {
            CovariateBasis::Linear => out.push(t),
            CovariateBasis::LogShift => {
                out.push((t + T::lit(10.0)).ln());
                out.push(T::one());
            }
        }
    }
}

/// `c_it`: static covariates followed by the time basis.
pub fn covariate_vector<T: Scalar>(covariates: &[T], basis: CovariateBasis, t: T) -> Vec<T> {
    let mut c = Vec::with_capacity(covariates.len() + basis.dim());
    c.extend_from_slice(covariates);
    basis.push(t, &mut c);
    c
}

/// Parameters of one treatment type: the shared system and, per signal, the
/// weight `χ`, mixing `ψ` and signal-specific system.
#[derive(Clone, Debug, PartialEq)]
pub struct TreatmentResponseParams<T> {
    pub shared: SecondOrderLti<T>,
    pub chi: Vec<T>,
    pub psi: Vec<T>,
    pub specific: Vec<SecondOrderLti<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FixedEffectParams<T> {
    /// One coefficient vector per signal.
    pub gamma: Vec<Vec<T>>,
}

/// Partial derivatives of `a_jd(t)`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TreatmentResponseGrad<T> {
    pub value: T,
    pub d_chi: T,
    pub d_psi: T,
    pub d_shared: (T, T),
    pub d_specific: (T, T),
}

impl<T: Scalar> TreatmentResponseParams<T> {
    /// `a_jd(t) = χ_d (ψ_d ρ⁽⁰⁾(t) + (1 − ψ_d) ρ⁽ᵈ⁾(t))`.
    pub fn response(&self, schedule: &TreatmentSchedule<T>, d: usize, t: T) -> T {
        let chi = self.chi[d];
        if chi == T::zero() || schedule.is_empty() {
            return T::zero();
        }
        let psi = self.psi[d];
        let shared = self.shared.convolve_schedule(schedule, t);
        let specific = self.specific[d].convolve_schedule(schedule, t);
        chi * (psi * shared + (T::one() - psi) * specific)
    }

    pub fn response_grad(&self, schedule: &TreatmentSchedule<T>, d: usize, t: T) -> TreatmentResponseGrad<T> {
        if schedule.is_empty() {
            return TreatmentResponseGrad::default_zero();
        }
        let chi = self.chi[d];
        let psi = self.psi[d];
        let s: ResponseGrad<T> = self.shared.convolve_schedule_grad(schedule, t);
        let v: ResponseGrad<T> = self.specific[d].convolve_schedule_grad(schedule, t);
        let mixed = psi * s.value + (T::one() - psi) * v.value;
        let ws = chi * psi;
        let wv = chi * (T::one() - psi);
        TreatmentResponseGrad {
            value: chi * mixed,
            d_chi: mixed,
            d_psi: chi * (s.value - v.value),
            d_shared: (ws * s.d_alpha, ws * s.d_beta),
            d_specific: (wv * v.d_alpha, wv * v.d_beta),
        }
    }
}

impl<T: Scalar> TreatmentResponseGrad<T> {
    fn default_zero() -> Self {
        Self {
            value: T::zero(),
            d_chi: T::zero(),
            d_psi: T::zero(),
            d_shared: (T::zero(), T::zero()),
            d_specific: (T::zero(), T::zero()),
        }
    }
}

pub fn treatment_response<T: Scalar>(
    params: &TreatmentResponseParams<T>,
    schedule: &TreatmentSchedule<T>,
    d: usize,
    t: T,
) -> T {
    params.response(schedule, d, t)
}

/// `γᵀ c_t`.
pub fn fixed_effect<T: Scalar>(gamma: &[T], covariates: &[T], basis: CovariateBasis, t: T) -> Result<T> {
    let dim = covariates.len() + basis.dim();
    if gamma.len() != dim {
        return Err(Error::arg(format!(
            "fixed-effect dimension mismatch: {} coefficients for {} covariates",
            gamma.len(),
            dim
        )));
    }
    let c = covariate_vector(covariates, basis, t);
    Ok(gamma.iter().zip(&c).map(|(&g, &x)| g * x).sum())
}

/// `m_d(t)`: summed treatment responses plus the fixed effect.
pub fn mean_function<T: Scalar>(
    local: &LocalParams<T>,
    record: &PatientRecord<T>,
    basis: CovariateBasis,
    d: usize,
    t: T,
) -> T {
    treatment_component(local, record, d, t) + fixed_component(local, record, basis, d, t)
}

/// `Σ_j a_jd(t)`.
pub fn treatment_component<T: Scalar>(local: &LocalParams<T>, record: &PatientRecord<T>, d: usize, t: T) -> T {
    local
        .treatments
        .iter()
        .zip(&record.schedules)
        .map(|(p, s)| p.response(s, d, t))
        .fold(T::zero(), |a, b| a + b)
}

pub fn fixed_component<T: Scalar>(
    local: &LocalParams<T>,
    record: &PatientRecord<T>,
    basis: CovariateBasis,
    d: usize,
    t: T,
) -> T {
    let c = covariate_vector(&record.covariates, basis, t);
    local.fixed.gamma[d].iter().zip(&c).map(|(&g, &x)| g * x).sum()
}
