//! Local (per-patient) and global (prior-mean) parameter sets, and the
//! unconstrained coordinates the optimiser works in.
//!
//! Local layout, in order: per treatment `(ln α₀, ln β₀)` then per signal
//! `(χ, ψ_raw, ln α_d, ln β_d)`; per-signal `γ`; per-signal `(ω, κ)`;
//! `ln l_g`, per-signal `ln l_v`; per-signal `σ²_raw`; per latent function
//! the whitened mean followed by the row-major lower triangle of its
//! factor with softplus-transformed diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lti::SecondOrderLti;
use crate::linalg::Matrix;
use crate::mean_model::{CovariateBasis, FixedEffectParams, TreatmentResponseParams};
use crate::mogp::{MixingCoefficients, WhitenedState};
use crate::scalar::{logit, sigmoid, softplus, softplus_inv, Scalar};

/// Lower bound of `ψ`; the mixing weight lives in `(ε, 1 − ε)`.
pub const PSI_EPS: f64 = 1e-4;
/// Noise variance floor: `σ² = NOISE_FLOOR + exp(raw)`.
pub const NOISE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda_psi: f64,
    pub lambda_mix: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda_psi: 100.0,
            lambda_mix: 0.1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_psi > 0.0 && self.lambda_psi.is_finite()) {
            return Err(Error::arg("lambda_psi must be positive"));
        }
        if !(self.lambda_mix > 0.0 && self.lambda_mix.is_finite()) {
            return Err(Error::arg("lambda_mix must be positive"));
        }
        Ok(())
    }
}

/// Structural settings shared by every patient.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub basis: CovariateBasis,
    pub jitter: f64,
    pub n_inducing: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            basis: CovariateBasis::Linear,
            jitter: 1e-6,
            n_inducing: 15,
        }
    }
}

/// All per-patient parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalParams<T> {
    pub treatments: Vec<TreatmentResponseParams<T>>,
    pub fixed: FixedEffectParams<T>,
    pub mix: MixingCoefficients<T>,
    pub lengthscale_g: T,
    pub lengthscale_v: Vec<T>,
    pub noise_var: Vec<T>,
    /// Index 0 is the shared latent `g`, index `d + 1` is `v_d`.
    pub latents: Vec<WhitenedState<T>>,
}

/// Parameter groups used for step control and gradient reporting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Block {
    Treatment,
    Fixed,
    Mixing,
    Lengthscale,
    Noise,
    VariationalMean,
    VariationalChol,
}

impl Block {
    pub const ALL: [Block; 7] = [
        Block::Treatment,
        Block::Fixed,
        Block::Mixing,
        Block::Lengthscale,
        Block::Noise,
        Block::VariationalMean,
        Block::VariationalChol,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Block::Treatment => "treatment",
            Block::Fixed => "fixed",
            Block::Mixing => "mixing",
            Block::Lengthscale => "lengthscale",
            Block::Noise => "noise",
            Block::VariationalMean => "variational_mean",
            Block::VariationalChol => "variational_chol",
        }
    }
}

/// Gradient of an objective with respect to the constrained parameters,
/// shaped like [`LocalParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct LocalGrad<T> {
    pub shared: Vec<(T, T)>,
    pub chi: Vec<Vec<T>>,
    pub psi: Vec<Vec<T>>,
    pub specific: Vec<Vec<(T, T)>>,
    pub gamma: Vec<Vec<T>>,
    pub omega: Vec<T>,
    pub kappa: Vec<T>,
    pub lengthscale_g: T,
    pub lengthscale_v: Vec<T>,
    pub noise_var: Vec<T>,
    pub latent_mean: Vec<Vec<T>>,
    pub latent_chol: Vec<Matrix<T>>,
}

impl<T: Scalar> LocalGrad<T> {
    pub fn zeros_like(local: &LocalParams<T>) -> Self {
        let n_sig = local.n_signals();
        let z = T::zero();
        Self {
            shared: vec![(z, z); local.treatments.len()],
            chi: vec![vec![z; n_sig]; local.treatments.len()],
            psi: vec![vec![z; n_sig]; local.treatments.len()],
            specific: vec![vec![(z, z); n_sig]; local.treatments.len()],
            gamma: local.fixed.gamma.iter().map(|g| vec![z; g.len()]).collect(),
            omega: vec![z; n_sig],
            kappa: vec![z; n_sig],
            lengthscale_g: z,
            lengthscale_v: vec![z; n_sig],
            noise_var: vec![z; n_sig],
            latent_mean: local.latents.iter().map(|s| vec![z; s.len()]).collect(),
            latent_chol: local.latents.iter().map(|s| Matrix::zeros(s.len(), s.len())).collect(),
        }
    }
}

fn psi_to_raw<T: Scalar>(psi: T) -> T {
    let eps = T::lit(PSI_EPS);
    let span = T::one() - eps - eps;
    let u = ((psi - eps) / span).max(T::lit(1e-15)).min(T::one() - T::lit(1e-15));
    logit(u)
}

fn psi_from_raw<T: Scalar>(raw: T) -> (T, T) {
    let eps = T::lit(PSI_EPS);
    let span = T::one() - eps - eps;
    let s = sigmoid(raw);
    (eps + span * s, span * s * (T::one() - s))
}

fn noise_to_raw<T: Scalar>(var: T) -> T {
    (var - T::lit(NOISE_FLOOR)).max(T::lit(1e-300)).ln()
}

impl<T: Scalar> LocalParams<T> {
    pub fn n_signals(&self) -> usize {
        self.noise_var.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.treatments.len()
    }

    /// Checks shapes against `(D, J, len γ_d)` and all domain constraints.
    pub fn validate(&self, n_signals: usize, n_treatments: usize, gamma_dim: usize) -> Result<()> {
        let d = n_signals;
        if self.noise_var.len() != d
            || self.lengthscale_v.len() != d
            || self.mix.omega.len() != d
            || self.mix.kappa.len() != d
            || self.fixed.gamma.len() != d
            || self.latents.len() != d + 1
        {
            return Err(Error::arg(format!("local parameters do not match {d} signals")));
        }
        if self.treatments.len() != n_treatments {
            return Err(Error::arg(format!(
                "local parameters have {} treatments, expected {n_treatments}",
                self.treatments.len()
            )));
        }
        for t in &self.treatments {
            if t.chi.len() != d || t.psi.len() != d || t.specific.len() != d {
                return Err(Error::arg("treatment parameters do not match signal count"));
            }
            if t.psi.iter().any(|&p| !(p >= T::zero() && p <= T::one())) {
                return Err(Error::arg("mixing weight psi outside [0, 1]"));
            }
            if t.chi.iter().any(|c| !c.is_finite()) {
                return Err(Error::arg("non-finite treatment weight"));
            }
        }
        if self.fixed.gamma.iter().any(|g| g.len() != gamma_dim || g.iter().any(|v| !v.is_finite())) {
            return Err(Error::arg(format!("fixed effects must have {gamma_dim} finite coefficients")));
        }
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.lengthscale_g)
            || !self.lengthscale_v.iter().all(|&v| positive(v))
            || !self.noise_var.iter().all(|&v| positive(v))
        {
            return Err(Error::arg("lengthscales and noise variances must be positive"));
        }
        Ok(())
    }

    /// Unconstrained coordinates together with the block each belongs to.
    pub fn pack_with_blocks(&self) -> (Vec<T>, Vec<Block>) {
        let mut x = Vec::new();
        let mut blocks = Vec::new();
        let mut push = |v: T, b: Block| {
            x.push(v);
            blocks.push(b);
        };
        for t in &self.treatments {
            push(t.shared.alpha.ln(), Block::Treatment);
            push(t.shared.beta.ln(), Block::Treatment);
            for d in 0..t.chi.len() {
                push(t.chi[d], Block::Treatment);
                push(psi_to_raw(t.psi[d]), Block::Treatment);
                push(t.specific[d].alpha.ln(), Block::Treatment);
                push(t.specific[d].beta.ln(), Block::Treatment);
            }
        }
        for g in &self.fixed.gamma {
            for &v in g {
                push(v, Block::Fixed);
            }
        }
        for d in 0..self.n_signals() {
            push(self.mix.omega[d], Block::Mixing);
            push(self.mix.kappa[d], Block::Mixing);
        }
        push(self.lengthscale_g.ln(), Block::Lengthscale);
        for &l in &self.lengthscale_v {
            push(l.ln(), Block::Lengthscale);
        }
        for &s in &self.noise_var {
            push(noise_to_raw(s), Block::Noise);
        }
        for s in &self.latents {
            for &m in &s.mean {
                push(m, Block::VariationalMean);
            }
            for i in 0..s.len() {
                for j in 0..i {
                    push(s.chol[(i, j)], Block::VariationalChol);
                }
                push(softplus_inv(s.chol[(i, i)]), Block::VariationalChol);
            }
        }
        (x, blocks)
    }

    pub fn pack(&self) -> Vec<T> {
        self.pack_with_blocks().0
    }

    /// Inverse of [`pack`](Self::pack); `self` supplies shapes and inducing inputs.
    pub fn unpack(&self, x: &[T]) -> Result<Self> {
        let mut it = x.iter().copied();
        let mut next = || it.next().ok_or_else(|| Error::arg("parameter vector too short"));
        let rates = |a: T, b: T| SecondOrderLti::new(a.exp(), b.exp());
        let mut out = self.clone();
        for t in out.treatments.iter_mut() {
            let (a, b) = (next()?, next()?);
            t.shared = rates(a, b)?;
            for d in 0..t.chi.len() {
                t.chi[d] = next()?;
                t.psi[d] = psi_from_raw(next()?).0;
                let (a, b) = (next()?, next()?);
                t.specific[d] = rates(a, b)?;
            }
        }
        for g in out.fixed.gamma.iter_mut() {
            for v in g.iter_mut() {
                *v = next()?;
            }
        }
        for d in 0..out.noise_var.len() {
            out.mix.omega[d] = next()?;
            out.mix.kappa[d] = next()?;
        }
        out.lengthscale_g = next()?.exp();
        for l in out.lengthscale_v.iter_mut() {
            *l = next()?.exp();
        }
        for s in out.noise_var.iter_mut() {
            *s = T::lit(NOISE_FLOOR) + next()?.exp();
        }
        for s in out.latents.iter_mut() {
            for m in s.mean.iter_mut() {
                *m = next()?;
            }
            for i in 0..s.len() {
                for j in 0..i {
                    s.chol.row_mut(i)[j] = next()?;
                }
                s.chol.row_mut(i)[i] = softplus(next()?).max(T::lit(1e-300));
            }
        }
        if next().is_ok() {
            return Err(Error::arg("parameter vector too long"));
        }
        let bad = |v: T| !v.is_finite();
        if bad(out.lengthscale_g)
            || out.lengthscale_v.iter().any(|&v| bad(v) || v <= T::zero())
            || out.noise_var.iter().any(|&v| bad(v))
            || out.lengthscale_g <= T::zero()
        {
            return Err(Error::arg("parameter vector maps outside the valid domain"));
        }
        Ok(out)
    }

    /// Chain rule from constrained gradient to the packed coordinates.
    pub fn pack_grad(&self, grad: &LocalGrad<T>) -> Vec<T> {
        let mut x = Vec::new();
        for (j, t) in self.treatments.iter().enumerate() {
            x.push(grad.shared[j].0 * t.shared.alpha);
            x.push(grad.shared[j].1 * t.shared.beta);
            for d in 0..t.chi.len() {
                x.push(grad.chi[j][d]);
                let (_, dpsi) = psi_from_raw(psi_to_raw(t.psi[d]));
                x.push(grad.psi[j][d] * dpsi);
                x.push(grad.specific[j][d].0 * t.specific[d].alpha);
                x.push(grad.specific[j][d].1 * t.specific[d].beta);
            }
        }
        for g in &grad.gamma {
            x.extend_from_slice(g);
        }
        for d in 0..self.n_signals() {
            x.push(grad.omega[d]);
            x.push(grad.kappa[d]);
        }
        x.push(grad.lengthscale_g * self.lengthscale_g);
        for (g, &l) in grad.lengthscale_v.iter().zip(&self.lengthscale_v) {
            x.push(*g * l);
        }
        for (g, &s) in grad.noise_var.iter().zip(&self.noise_var) {
            x.push(*g * (s - T::lit(NOISE_FLOOR)));
        }
        for (k, s) in self.latents.iter().enumerate() {
            x.extend_from_slice(&grad.latent_mean[k]);
            let gc = &grad.latent_chol[k];
            for i in 0..s.len() {
                for j in 0..i {
                    x.push(gc[(i, j)]);
                }
                x.push(gc[(i, i)] * sigmoid(softplus_inv(s.chol[(i, i)])));
            }
        }
        x
    }
}

/// Prior-mean parameters shared across patients. Rate and lengthscale
/// entries are locations of log-normal priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams<T> {
    /// `[j][d]`.
    pub chi_mean: Vec<Vec<T>>,
    /// `[j][0]` for the shared system, `[j][d + 1]` for signal `d`.
    pub log_alpha_mean: Vec<Vec<T>>,
    pub log_beta_mean: Vec<Vec<T>>,
    /// `[d]`.
    pub gamma_mean: Vec<Vec<T>>,
    pub omega_mean: Vec<T>,
    pub kappa_mean: Vec<T>,
    pub log_lengthscale_g_mean: T,
    pub log_lengthscale_v_mean: Vec<T>,
}

impl<T: Scalar> GlobalParams<T> {
    pub fn pack(&self) -> Vec<T> {
        let mut x = Vec::new();
        for j in 0..self.chi_mean.len() {
            x.extend_from_slice(&self.chi_mean[j]);
            x.extend_from_slice(&self.log_alpha_mean[j]);
            x.extend_from_slice(&self.log_beta_mean[j]);
        }
        for g in &self.gamma_mean {
            x.extend_from_slice(g);
        }
        x.extend_from_slice(&self.omega_mean);
        x.extend_from_slice(&self.kappa_mean);
        x.push(self.log_lengthscale_g_mean);
        x.extend_from_slice(&self.log_lengthscale_v_mean);
        x
    }

    pub fn unpack(&self, x: &[T]) -> Result<Self> {
        let mut out = self.clone();
        let mut it = x.iter().copied();
        let mut fill = |dst: &mut [T]| -> Result<()> {
            for v in dst.iter_mut() {
                *v = it.next().ok_or_else(|| Error::arg("global vector too short"))?;
            }
            Ok(())
        };
        for j in 0..out.chi_mean.len() {
            fill(&mut out.chi_mean[j])?;
            fill(&mut out.log_alpha_mean[j])?;
            fill(&mut out.log_beta_mean[j])?;
        }
        for g in out.gamma_mean.iter_mut() {
            fill(g)?;
        }
        fill(&mut out.omega_mean)?;
        fill(&mut out.kappa_mean)?;
        fill(std::slice::from_mut(&mut out.log_lengthscale_g_mean))?;
        fill(&mut out.log_lengthscale_v_mean)?;
        if x.len() != out.pack().len() {
            return Err(Error::arg("global vector length mismatch"));
        }
        Ok(out)
    }

    pub fn n_signals(&self) -> usize {
        self.omega_mean.len()
    }

    pub fn validate(&self, n_signals: usize, n_treatments: usize, gamma_dim: usize) -> Result<()> {
        let d = n_signals;
        let ok = self.chi_mean.len() == n_treatments
            && self.log_alpha_mean.len() == n_treatments
            && self.log_beta_mean.len() == n_treatments
            && self.chi_mean.iter().all(|v| v.len() == d)
            && self.log_alpha_mean.iter().all(|v| v.len() == d + 1)
            && self.log_beta_mean.iter().all(|v| v.len() == d + 1)
            && self.gamma_mean.len() == d
            && self.gamma_mean.iter().all(|g| g.len() == gamma_dim)
            && self.omega_mean.len() == d
            && self.kappa_mean.len() == d
            && self.log_lengthscale_v_mean.len() == d;
        if !ok {
            return Err(Error::arg(format!(
                "global parameters do not match {d} signals, {n_treatments} treatments, {gamma_dim} coefficients"
            )));
        }
        if self.pack().iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("non-finite global parameter"));
        }
        Ok(())
    }

    /// Locals placed at the prior locations with `ψ = ½`, whitened states at
    /// the prior, and the given noise variances and inducing grids.
    pub fn initial_local(&self, noise_var: Vec<T>, inducing: Vec<Vec<T>>) -> Result<LocalParams<T>> {
        let d = self.n_signals();
        if noise_var.len() != d || inducing.len() != d + 1 {
            return Err(Error::arg("initial local shapes do not match signal count"));
        }
        let half = T::lit(0.5);
        let treatments = (0..self.chi_mean.len())
            .map(|j| {
                let sys = |k: usize| {
                    SecondOrderLti::new(self.log_alpha_mean[j][k].exp(), self.log_beta_mean[j][k].exp())
                };
                Ok(TreatmentResponseParams {
                    shared: sys(0)?,
                    chi: self.chi_mean[j].clone(),
                    psi: vec![half; d],
                    specific: (1..=d).map(sys).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LocalParams {
            treatments,
            fixed: FixedEffectParams {
                gamma: self.gamma_mean.clone(),
            },
            mix: MixingCoefficients {
                omega: self.omega_mean.clone(),
                kappa: self.kappa_mean.clone(),
            },
            lengthscale_g: self.log_lengthscale_g_mean.exp(),
            lengthscale_v: self.log_lengthscale_v_mean.iter().map(|l| l.exp()).collect(),
            noise_var,
            latents: inducing.into_iter().map(WhitenedState::prior).collect(),
        })
    }
}
