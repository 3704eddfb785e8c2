//! Simulated cohort with known treatment responses, fixed effects and a
//! shared smooth random effect, for parameter-recovery experiments.
//!
//! Each signal is `γ₁ ln(t + 10) + γ₂ + f(t) + Σ_j a_jd(t) + ε` where `f` is
//! a squared-exponential GP draw shared by all signals of a patient.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cohort, DoseEvent, ObservationSeries, PatientRecord, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lti::SecondOrderLti;

/// `N(mean, var)`; for log-normal draws, the underlying normal.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParam {
    pub mean: f64,
    pub var: f64,
}

impl GaussianParam {
    pub const fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    fn normal(&self) -> Result<Normal<f64>> {
        Normal::new(self.mean, self.var.sqrt()).map_err(|e| Error::arg(format!("bad normal {self:?}: {e}")))
    }

    fn log_normal(&self) -> Result<LogNormal<f64>> {
        LogNormal::new(self.mean, self.var.sqrt()).map_err(|e| Error::arg(format!("bad log-normal {self:?}: {e}")))
    }
}

/// One simulated treatment type: a single `(α, β)` pair per patient used by
/// every signal, weights `χ_d`, and the true mixing weights `ψ_d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTreatment {
    pub log_alpha: GaussianParam,
    pub log_beta: GaussianParam,
    pub chi: Vec<GaussianParam>,
    pub psi: Vec<f64>,
    pub events: Vec<DoseEvent<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_patients: usize,
    pub obs_count_mean: f64,
    /// Events per hour.
    pub obs_process_rate: f64,
    pub rbf_lengthscale: f64,
    pub rbf_variance: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Spacing of the dense grid stored in the ground truth.
    pub grid_step: f64,
    /// Per signal: `(log coefficient, intercept)`.
    pub gamma: Vec<[GaussianParam; 2]>,
    pub treatments: Vec<SimTreatment>,
}

impl Default for SimConfig {
    fn default() -> Self {
        let g = GaussianParam::new;
        Self {
            n_patients: 50,
            obs_count_mean: 50.0,
            obs_process_rate: 0.2,
            rbf_lengthscale: 20.0,
            rbf_variance: 0.05,
            noise_std: 0.1,
            seed: 0,
            grid_step: 1.0,
            gamma: vec![[g(1.0, 0.1), g(-4.0, 0.1)], [g(-1.0, 0.1), g(4.0, 0.1)]],
            treatments: vec![
                SimTreatment {
                    log_alpha: g(0.2, 0.1),
                    log_beta: g(0.6, 0.1),
                    chi: vec![g(-1.0, 0.1), g(1.0, 0.1)],
                    psi: vec![1.0, 1.0],
                    events: vec![DoseEvent::Interval {
                        start: 40.0,
                        end: 60.0,
                        rate: 1.0,
                    }],
                },
                SimTreatment {
                    log_alpha: g(0.1, 0.1),
                    log_beta: g(0.2, 0.1),
                    chi: vec![g(1.0, 0.05), g(0.0, 0.0)],
                    psi: vec![0.0, 0.0],
                    events: [100.0, 120.0, 140.0, 160.0, 180.0]
                        .iter()
                        .map(|&time| DoseEvent::Impulse { time, mass: 20.0 })
                        .collect(),
                },
            ],
        }
    }
}

impl SimConfig {
    pub fn n_signals(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.n_patients == 0 || self.gamma.is_empty() {
            return Err(Error::arg("simulation needs at least one patient and one signal"));
        }
        if !pos(self.obs_count_mean) || !pos(self.obs_process_rate) || !pos(self.rbf_lengthscale) || !pos(self.grid_step) {
            return Err(Error::arg("simulation rates and scales must be positive"));
        }
        if !(self.rbf_variance >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::arg("simulation variances must be nonnegative"));
        }
        let d = self.n_signals();
        for (j, t) in self.treatments.iter().enumerate() {
            if t.chi.len() != d || t.psi.len() != d {
                return Err(Error::arg(format!("treatment {} does not cover {d} signals", j + 1)));
            }
            if t.psi.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::arg("psi outside [0, 1]"));
            }
            TreatmentSchedule::new(t.events.clone())?;
        }
        Ok(())
    }
}

/// `N ~ Poisson(count_mean)` (redrawn while zero) arrival times of a
/// rate-`rate` Poisson process started at 0.
pub fn sample_observation_times<R: Rng + ?Sized>(rng: &mut R, count_mean: f64, rate: f64) -> Result<Vec<f64>> {
    let count = Poisson::new(count_mean).map_err(|e| Error::arg(format!("observation count mean: {e}")))?;
    let gap = Exp::new(rate).map_err(|e| Error::arg(format!("observation rate: {e}")))?;
    let n = loop {
        let n = count.sample(rng) as usize;
        if n > 0 {
            break n;
        }
    };
    let mut t = 0.0;
    let mut times = Vec::with_capacity(n);
    while times.len() < n {
        let dt: f64 = gap.sample(rng);
        t += dt;
        // zero-length gaps would break strict ordering
        if times.last().is_none_or(|&last| t > last) {
            times.push(t);
        }
    }
    Ok(times)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreatmentTruth {
    pub alpha: f64,
    pub beta: f64,
    pub chi: Vec<f64>,
    pub psi: Vec<f64>,
}

impl TreatmentTruth {
    pub fn system(&self) -> SecondOrderLti<f64> {
        SecondOrderLti {
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub id: String,
    /// `[d] = (log coefficient, intercept)`.
    pub gamma: Vec<[f64; 2]>,
    pub treatments: Vec<TreatmentTruth>,
    /// Shared GP draw at each observation, `[d][n]`.
    pub observation_gp: Vec<Vec<f64>>,
    pub observation_noise: Vec<Vec<f64>>,
    pub grid: Vec<f64>,
    pub grid_gp: Vec<f64>,
    /// `[d][k]`.
    pub grid_fixed: Vec<Vec<f64>>,
    /// `[j][d][k]`.
    pub grid_response: Vec<Vec<Vec<f64>>>,
}

impl PatientTruth {
    /// Noiseless treatment-free part at `t` for signal `d`, excluding the GP.
    pub fn fixed_effect(&self, d: usize, t: f64) -> f64 {
        self.gamma[d][0] * (t + 10.0).ln() + self.gamma[d][1]
    }

    pub fn response(&self, schedules: &[TreatmentSchedule<f64>], j: usize, d: usize, t: f64) -> f64 {
        let tr = &self.treatments[j];
        tr.chi[d] * tr.system().convolve_schedule(&schedules[j], t)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SimConfig,
    pub patients: Vec<PatientTruth>,
}

impl GroundTruth {
    pub fn patient(&self, id: &str) -> Option<&PatientTruth> {
        self.patients.iter().find(|p| p.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

fn rbf_draw<R: Rng + ?Sized>(rng: &mut R, times: &[f64], lengthscale: f64, variance: f64) -> Result<Vec<f64>> {
    let n = times.len();
    if variance == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let k = Matrix::from_fn(n, n, |a, b| {
        let r = (times[a] - times[b]) / lengthscale;
        variance * (-0.5 * r * r).exp()
    });
    let mut jitter = 1e-8 * variance;
    let l = loop {
        let mut kj = k.clone();
        kj.add_diagonal(jitter);
        match kj.cholesky() {
            Ok(l) => break l,
            Err(_) if jitter < 1e-2 * variance => jitter *= 10.0,
            Err(e) => return Err(e),
        }
    };
    let z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(l.matvec(&z))
}

fn patient_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_patient(config: &SimConfig, index: usize) -> Result<(PatientRecord<f64>, PatientTruth)> {
    let mut rng = patient_rng(config.seed, index);
    let id = format!("p{:03}", index + 1);
    let n_sig = config.n_signals();
    let gamma = config
        .gamma
        .iter()
        .map(|[a, b]| Ok([a.normal()?.sample(&mut rng), b.normal()?.sample(&mut rng)]))
        .collect::<Result<Vec<_>>>()?;
    let mut treatments = Vec::with_capacity(config.treatments.len());
    let mut schedules = Vec::with_capacity(config.treatments.len());
    for t in &config.treatments {
        let alpha = t.log_alpha.log_normal()?.sample(&mut rng);
        let beta = t.log_beta.log_normal()?.sample(&mut rng);
        let chi = t.chi.iter().map(|c| Ok(c.normal()?.sample(&mut rng))).collect::<Result<Vec<_>>>()?;
        SecondOrderLti::new(alpha, beta)?;
        treatments.push(TreatmentTruth {
            alpha,
            beta,
            chi,
            psi: t.psi.clone(),
        });
        schedules.push(TreatmentSchedule::new(t.events.clone())?);
    }
    let times = (0..n_sig)
        .map(|_| sample_observation_times(&mut rng, config.obs_count_mean, config.obs_process_rate))
        .collect::<Result<Vec<_>>>()?;
    let horizon = times
        .iter()
        .filter_map(|t| t.last().copied())
        .fold(0.0f64, f64::max)
        .ceil();
    let grid: Vec<f64> = (0..)
        .map(|k| k as f64 * config.grid_step)
        .take_while(|&t| t <= horizon + 1e-9)
        .collect();
    let mut all: Vec<f64> = times.iter().flatten().copied().chain(grid.iter().copied()).collect();
    let draw = rbf_draw(&mut rng, &all, config.rbf_lengthscale, config.rbf_variance)?;
    let mut observation_gp = Vec::with_capacity(n_sig);
    let mut offset = 0;
    for t in &times {
        observation_gp.push(draw[offset..offset + t.len()].to_vec());
        offset += t.len();
    }
    let grid_gp = draw[offset..].to_vec();
    all.clear();
    let noise = Normal::new(0.0, config.noise_std).map_err(|e| Error::arg(format!("noise std: {e}")))?;
    let mut truth = PatientTruth {
        id: id.clone(),
        gamma,
        treatments,
        observation_gp,
        observation_noise: Vec::with_capacity(n_sig),
        grid_fixed: Vec::new(),
        grid_response: Vec::new(),
        grid_gp,
        grid,
    };
    let mut series = Vec::with_capacity(n_sig);
    for (d, t) in times.iter().enumerate() {
        let eps: Vec<f64> = (0..t.len()).map(|_| noise.sample(&mut rng)).collect();
        let values = t
            .iter()
            .enumerate()
            .map(|(n, &tn)| {
                let tr: f64 = (0..schedules.len()).map(|j| truth.response(&schedules, j, d, tn)).sum();
                truth.fixed_effect(d, tn) + truth.observation_gp[d][n] + tr + eps[n]
            })
            .collect();
        truth.observation_noise.push(eps);
        series.push(ObservationSeries::new(d, t.clone(), values)?);
    }
    truth.grid_fixed = (0..n_sig)
        .map(|d| truth.grid.iter().map(|&t| truth.fixed_effect(d, t)).collect())
        .collect();
    truth.grid_response = (0..schedules.len())
        .map(|j| {
            (0..n_sig)
                .map(|d| truth.grid.iter().map(|&t| truth.response(&schedules, j, d, t)).collect())
                .collect()
        })
        .collect();
    let record = PatientRecord::new(id, series, schedules, Vec::new())?;
    Ok((record, truth))
}

/// Simulated cohort and its ground truth. Patient `i` draws from its own
/// random stream, so the output does not depend on thread count.
pub fn generate_cohort(config: &SimConfig) -> Result<(Cohort<f64>, GroundTruth)> {
    config.validate()?;
    let pairs = (0..config.n_patients)
        .into_par_iter()
        .map(|i| generate_patient(config, i))
        .collect::<Result<Vec<_>>>()?;
    let (records, patients): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let cohort = Cohort::new(records, config.n_signals(), config.treatments.len())?;
    Ok((
        cohort,
        GroundTruth {
            config: config.clone(),
            patients,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mean_model::{mean_function, CovariateBasis, FixedEffectParams, TreatmentResponseParams};
    use crate::mogp::{MixingCoefficients, WhitenedState};
    use crate::params::LocalParams;

    fn small() -> SimConfig {
        SimConfig {
            n_patients: 4,
            ..SimConfig::default()
        }
    }

    #[test]
    fn observation_process_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut count, mut gap_sum, mut gaps) = (0usize, 0.0, 0usize);
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_observation_times(&mut rng, 50.0, 0.2).unwrap();
            count += t.len();
            gap_sum += t[0] + t.windows(2).map(|w| w[1] - w[0]).sum::<f64>();
            gaps += t.len();
            assert!(t.windows(2).all(|w| w[1] > w[0]));
        }
        let mean_count = count as f64 / draws as f64;
        let mean_gap = gap_sum / gaps as f64;
        assert!((mean_count / 50.0 - 1.0).abs() < 0.02, "{mean_count}");
        assert!((mean_gap / 5.0 - 1.0).abs() < 0.02, "{mean_gap}");
    }

    #[test]
    fn seeded_times_repeat() {
        let a = sample_observation_times(&mut ChaCha8Rng::seed_from_u64(1), 10.0, 1.0).unwrap();
        let b = sample_observation_times(&mut ChaCha8Rng::seed_from_u64(1), 10.0, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn default_cohort_shape() {
        let (cohort, truth) = generate_cohort(&SimConfig::default()).unwrap();
        assert_eq!(cohort.len(), 50);
        assert_eq!(cohort.n_signals(), 2);
        assert_eq!(cohort.n_treatments(), 2);
        for p in &truth.patients {
            assert!(p.grid_response[1][1].iter().all(|&v| v == 0.0));
            assert!(p.treatments.iter().all(|t| t.alpha > 0.0 && t.beta > 0.0));
        }
    }

    #[test]
    fn truth_reproduces_observations_through_the_mean_model() {
        let (cohort, truth) = generate_cohort(&small()).unwrap();
        for (rec, pt) in cohort.patients.iter().zip(&truth.patients) {
            let treatments = pt
                .treatments
                .iter()
                .map(|t| TreatmentResponseParams {
                    shared: t.system(),
                    chi: t.chi.clone(),
                    psi: t.psi.clone(),
                    specific: vec![t.system(); 2],
                })
                .collect();
            let local = LocalParams {
                treatments,
                fixed: FixedEffectParams {
                    gamma: pt.gamma.iter().map(|g| g.to_vec()).collect(),
                },
                mix: MixingCoefficients {
                    omega: vec![1.0; 2],
                    kappa: vec![0.0; 2],
                },
                lengthscale_g: 1.0,
                lengthscale_v: vec![1.0; 2],
                noise_var: vec![1.0; 2],
                latents: vec![WhitenedState::prior(vec![0.0]); 3],
            };
            for d in 0..2 {
                let s = &rec.series[d];
                for (n, (&t, &y)) in s.times().iter().zip(s.values()).enumerate() {
                    let m = mean_function(&local, rec, CovariateBasis::LogShift, d, t);
                    let want = y - pt.observation_noise[d][n] - pt.observation_gp[d][n];
                    assert!((m - want).abs() < 1e-10, "{m} vs {want}");
                }
            }
        }
    }

    #[test]
    fn shared_treatment_has_common_shape() {
        let (_, truth) = generate_cohort(&small()).unwrap();
        for p in &truth.patients {
            let (c1, c2) = (p.treatments[0].chi[0], p.treatments[0].chi[1]);
            let r = &p.grid_response[0];
            for (x, y) in r[0].iter().zip(&r[1]) {
                assert!((x / c1 - y / c2).abs() < 1e-10);
            }
            assert!(*p.grid.last().unwrap() >= p.grid.len() as f64 - 1.0);
        }
    }

    #[test]
    fn zero_treatment_effect_leaves_mixed_effects() {
        let mut cfg = small();
        for t in cfg.treatments.iter_mut() {
            t.chi = vec![GaussianParam::new(0.0, 0.0); 2];
        }
        let (cohort, truth) = generate_cohort(&cfg).unwrap();
        for (rec, pt) in cohort.patients.iter().zip(&truth.patients) {
            for d in 0..2 {
                let s = &rec.series[d];
                for (n, (&t, &y)) in s.times().iter().zip(s.values()).enumerate() {
                    let mixed = pt.fixed_effect(d, t) + pt.observation_gp[d][n] + pt.observation_noise[d][n];
                    assert!((y - mixed).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_json_round_trips() {
        let (a, ta) = generate_cohort(&small()).unwrap();
        let (b, tb) = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let back = GroundTruth::from_json(&ta.to_json().unwrap()).unwrap();
        assert_eq!(back, ta);
    }
}
