//! Second-order linear time-invariant response to dose schedules.
//!
//! The impulse response is the normalised double exponential
//! `h(t) = αβ/(β−α)·(e^{−αt} − e^{−βt})` for `t ≥ 0`, which has unit area.
//! It is symmetric in `(α, β)`, so every evaluation works with
//! `a = min(α, β)`, `b = max(α, β)` and factors out the slower exponential:
//!
//! ```text
//! h(x) = a·b·e^{−a x}·φ(b − a, x)        φ(δ, x) = (1 − e^{−δx}) / δ
//! 1 − H(x) = e^{−a x}·(1 + a·φ(b − a, x))
//! ```
//!
//! `φ` is evaluated with `expm1`, and by its Taylor series when `δx` is small, so
//! the confluent case `α = β` (where the textbook form is `0/0`) is exact and
//! nothing overflows when `|α − β|·x` is large.

use crate::data::{DoseEvent, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Below this value of `δ·x` the series for `φ` is used.
const SERIES_SWITCH: f64 = 1e-2;
/// Below this value of `b·x` the cumulative response uses its power series.
const SMALL_LAG: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SecondOrderLti<T> {
    pub alpha: T,
    pub beta: T,
}

/// Value of a response together with its partial derivatives in `α` and `β`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct ResponseGrad<T> {
    pub value: T,
    pub d_alpha: T,
    pub d_beta: T,
}

impl<T: Scalar> ResponseGrad<T> {
    fn zero() -> Self {
        Self {
            value: T::zero(),
            d_alpha: T::zero(),
            d_beta: T::zero(),
        }
    }

    fn scaled(self, s: T) -> Self {
        Self {
            value: self.value * s,
            d_alpha: self.d_alpha * s,
            d_beta: self.d_beta * s,
        }
    }

    fn add(self, o: Self) -> Self {
        Self {
            value: self.value + o.value,
            d_alpha: self.d_alpha + o.d_alpha,
            d_beta: self.d_beta + o.d_beta,
        }
    }

    fn sub(self, o: Self) -> Self {
        self.add(o.scaled(-T::one()))
    }
}

/// `φ(δ, x)` and `∂φ/∂δ` for `δ ≥ 0`, `x ≥ 0`.
fn phi<T: Scalar>(delta: T, x: T) -> (T, T) {
    let u = delta * x;
    if u < T::lit(SERIES_SWITCH) {
        // φ  = Σ_{k≥0} (−δ)^k x^{k+1} / (k+1)!
        // φ' = Σ_{k≥1} −k (−δ)^{k−1} x^{k+1} / (k+1)!
        let mut phi = T::zero();
        let mut dphi = T::zero();
        let mut xpow = x; // x^{k+1} / (k+1)!
        let mut dpow_prev = T::zero(); // (−δ)^{k−1}
        let mut dpow = T::one(); // (−δ)^k
        for k in 0..8 {
            phi += dpow * xpow;
            if k > 0 {
                dphi -= T::lit(k as f64) * dpow_prev * xpow;
            }
            dpow_prev = dpow;
            dpow *= -delta;
            xpow = xpow * x / T::lit((k + 2) as f64);
        }
        (phi, dphi)
    } else {
        let p = -(-u).exp_m1() / delta;
        let dp = (x * (-u).exp() - p) / delta;
        (p, dp)
    }
}

impl<T: Scalar> SecondOrderLti<T> {
    pub fn new(alpha: T, beta: T) -> Result<Self> {
        if !(alpha > T::zero() && beta > T::zero()) || !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::arg(format!(
                "LTI rates must be positive and finite (alpha {alpha}, beta {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }

    #[inline]
    fn ordered(&self) -> (T, T, bool) {
        if self.alpha <= self.beta {
            (self.alpha, self.beta, false)
        } else {
            (self.beta, self.alpha, true)
        }
    }

    #[inline]
    fn unorder(&self, swapped: bool, value: T, da: T, db: T) -> ResponseGrad<T> {
        if swapped {
            ResponseGrad {
                value,
                d_alpha: db,
                d_beta: da,
            }
        } else {
            ResponseGrad {
                value,
                d_alpha: da,
                d_beta: db,
            }
        }
    }

    /// `h(t)`; zero for `t < 0`.
    pub fn impulse_response(&self, t: T) -> Result<T> {
        if !t.is_finite() {
            return Err(Error::arg(format!("non-finite time {t}")));
        }
        Ok(self.h(t))
    }

    /// `H(t) = ∫₀ᵗ h`; zero for `t < 0`, tends to one.
    pub fn cumulative_response(&self, t: T) -> Result<T> {
        if t.is_nan() {
            return Err(Error::arg("NaN time"));
        }
        Ok(self.cumulative(t))
    }

    pub(crate) fn h(&self, t: T) -> T {
        if t <= T::zero() {
            return T::zero();
        }
        let (a, b, _) = self.ordered();
        let (p, _) = phi(b - a, t);
        a * b * (-a * t).exp() * p
    }

    fn h_grad(&self, t: T) -> ResponseGrad<T> {
        if t <= T::zero() {
            return ResponseGrad::zero();
        }
        let (a, b, swapped) = self.ordered();
        let (p, dp) = phi(b - a, t);
        let e = (-a * t).exp();
        let value = a * b * e * p;
        let da = b * e * (p - a * t * p - a * dp);
        let db = a * e * (p + b * dp);
        self.unorder(swapped, value, da, db)
    }

    /// `1 − H(x)`.
    fn survival(&self, x: T) -> T {
        if x <= T::zero() {
            return T::one();
        }
        let (a, b, _) = self.ordered();
        let (p, _) = phi(b - a, x);
        (-a * x).exp() * (T::one() + a * p)
    }

    fn survival_grad(&self, x: T) -> ResponseGrad<T> {
        if x <= T::zero() {
            return ResponseGrad {
                value: T::one(),
                d_alpha: T::zero(),
                d_beta: T::zero(),
            };
        }
        let (a, b, swapped) = self.ordered();
        let (p, dp) = phi(b - a, x);
        let e = (-a * x).exp();
        let value = e * (T::one() + a * p);
        let da = -x * e * (T::one() + a * p) + e * (p - a * dp);
        let db = e * a * dp;
        self.unorder(swapped, value, da, db)
    }

    pub(crate) fn cumulative(&self, x: T) -> T {
        if x <= T::zero() {
            return T::zero();
        }
        let (a, b, _) = self.ordered();
        if b * x < T::lit(SMALL_LAG) {
            // H(x) = ab Σ_{n≥2} (−1)^n x^n h_{n−2}(a, b) / n!,
            // h_k the complete homogeneous symmetric polynomial.
            let mut hk = T::one();
            let mut apow = T::one();
            let mut xn_fact = x * x / T::lit(2.0);
            let mut sum = T::zero();
            for n in 2..24 {
                let sign = if n % 2 == 0 { T::one() } else { -T::one() };
                let term = sign * xn_fact * hk;
                sum += term;
                if term.abs() <= T::epsilon() * sum.abs() {
                    break;
                }
                apow *= a;
                hk = b * hk + apow;
                xn_fact = xn_fact * x / T::lit((n + 1) as f64);
            }
            a * b * sum
        } else {
            T::one() - self.survival(x)
        }
    }

    fn cumulative_grad(&self, x: T) -> ResponseGrad<T> {
        let s = self.survival_grad(x);
        ResponseGrad {
            value: self.cumulative(x),
            d_alpha: -s.d_alpha,
            d_beta: -s.d_beta,
        }
    }

    /// Response to one dose event at time `t`.
    fn event_response(&self, ev: &DoseEvent<T>, t: T) -> T {
        match *ev {
            DoseEvent::Impulse { time, mass } => mass * self.h(t - time),
            DoseEvent::Interval { start, end, rate } => {
                if t <= start {
                    T::zero()
                } else if t <= end {
                    rate * self.cumulative(t - start)
                } else {
                    let head = self.survival(t - start);
                    if head > T::lit(0.5) {
                        rate * (self.cumulative(t - start) - self.cumulative(t - end))
                    } else {
                        rate * (self.survival(t - end) - head)
                    }
                }
            }
        }
    }

    fn event_response_grad(&self, ev: &DoseEvent<T>, t: T) -> ResponseGrad<T> {
        match *ev {
            DoseEvent::Impulse { time, mass } => self.h_grad(t - time).scaled(mass),
            DoseEvent::Interval { start, end, rate } => {
                if t <= start {
                    ResponseGrad::zero()
                } else if t <= end {
                    self.cumulative_grad(t - start).scaled(rate)
                } else {
                    let g = self.survival_grad(t - end).sub(self.survival_grad(t - start));
                    ResponseGrad {
                        value: self.event_response(ev, t),
                        d_alpha: rate * g.d_alpha,
                        d_beta: rate * g.d_beta,
                    }
                }
            }
        }
    }

    /// `ρ(t) = (x ∗ h)(t)` in closed form, superposing every event of the schedule.
    pub fn convolve_schedule(&self, schedule: &TreatmentSchedule<T>, t: T) -> T {
        schedule
            .events()
            .iter()
            .take_while(|ev| ev.start() < t)
            .map(|ev| self.event_response(ev, t))
            .fold(T::zero(), |acc, r| acc + r)
    }

    /// [`Self::convolve_schedule`] with its partial derivatives in `α`, `β`.
    pub fn convolve_schedule_grad(&self, schedule: &TreatmentSchedule<T>, t: T) -> ResponseGrad<T> {
        schedule
            .events()
            .iter()
            .take_while(|ev| ev.start() < t)
            .map(|ev| self.event_response_grad(ev, t))
            .fold(ResponseGrad::zero(), ResponseGrad::add)
    }
}

pub fn impulse_response<T: Scalar>(sys: &SecondOrderLti<T>, t: T) -> Result<T> {
    sys.impulse_response(t)
}

pub fn cumulative_response<T: Scalar>(sys: &SecondOrderLti<T>, t: T) -> Result<T> {
    sys.cumulative_response(t)
}

pub fn convolve_schedule<T: Scalar>(sys: &SecondOrderLti<T>, schedule: &TreatmentSchedule<T>, t: T) -> T {
    sys.convolve_schedule(schedule, t)
}
