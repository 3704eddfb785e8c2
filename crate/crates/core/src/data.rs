//! Cohorts of irregularly sampled multivariate trajectories with dose schedules.
//!
//! Signal and treatment indices are zero-based in memory; the CSV formats in
//! [`crate::io`] use one-based ids.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Observations of one signal of one patient. Times are in hours.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSeries<T> {
    signal: usize,
    times: Vec<T>,
    values: Vec<T>,
}

impl<T: Scalar> ObservationSeries<T> {
    pub fn new(signal: usize, times: Vec<T>, values: Vec<T>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::invalid(format!(
                "signal {}: {} times but {} values",
                signal + 1,
                times.len(),
                values.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::invalid(format!("signal {}: no observations", signal + 1)));
        }
        if let Some(bad) = times.iter().chain(&values).find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("signal {}: non-finite entry {bad}", signal + 1)));
        }
        if let Some(w) = times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!(
                "signal {}: timestamps not strictly ascending ({} then {})",
                signal + 1,
                w[0],
                w[1]
            )));
        }
        Ok(Self { signal, times, values })
    }

    pub fn signal(&self) -> usize {
        self.signal
    }

    pub fn times(&self) -> &[T] {
        &self.times
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseKind {
    Impulse,
    Interval,
}

/// A single administration. Impulses carry a dose mass, intervals a constant rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoseEvent<T> {
    Impulse { time: T, mass: T },
    Interval { start: T, end: T, rate: T },
}

impl<T: Scalar> DoseEvent<T> {
    pub fn impulse(time: T, mass: T) -> Result<Self> {
        let ev = DoseEvent::Impulse { time, mass };
        ev.validate()?;
        Ok(ev)
    }

    pub fn interval(start: T, end: T, rate: T) -> Result<Self> {
        let ev = DoseEvent::Interval { start, end, rate };
        ev.validate()?;
        Ok(ev)
    }

    fn validate(&self) -> Result<()> {
        match *self {
            DoseEvent::Impulse { time, mass } => {
                if !time.is_finite() || !mass.is_finite() || mass < T::zero() {
                    return Err(Error::invalid(format!("bad impulse (time {time}, dose {mass})")));
                }
            }
            DoseEvent::Interval { start, end, rate } => {
                if !start.is_finite() || end.is_nan() || !rate.is_finite() || rate < T::zero() {
                    return Err(Error::invalid(format!(
                        "bad interval ({start}..{end}, rate {rate})"
                    )));
                }
                if end <= start {
                    return Err(Error::invalid(format!("interval end {end} not after start {start}")));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> DoseKind {
        match self {
            DoseEvent::Impulse { .. } => DoseKind::Impulse,
            DoseEvent::Interval { .. } => DoseKind::Interval,
        }
    }

    pub fn start(&self) -> T {
        match *self {
            DoseEvent::Impulse { time, .. } => time,
            DoseEvent::Interval { start, .. } => start,
        }
    }

    /// Dose mass for impulses, dose rate for intervals.
    pub fn magnitude(&self) -> T {
        match *self {
            DoseEvent::Impulse { mass, .. } => mass,
            DoseEvent::Interval { rate, .. } => rate,
        }
    }

    pub fn shifted(&self, dt: T) -> Self {
        match *self {
            DoseEvent::Impulse { time, mass } => DoseEvent::Impulse { time: time + dt, mass },
            DoseEvent::Interval { start, end, rate } => DoseEvent::Interval {
                start: start + dt,
                end: end + dt,
                rate,
            },
        }
    }
}

/// Dose input of one treatment type. Events are kept sorted by start time and may overlap.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TreatmentSchedule<T> {
    events: Vec<DoseEvent<T>>,
}

impl<T: Scalar> TreatmentSchedule<T> {
    pub fn new(mut events: Vec<DoseEvent<T>>) -> Result<Self> {
        for ev in &events {
            ev.validate()?;
        }
        events.sort_by(|a, b| a.start().partial_cmp(&b.start()).expect("finite starts"));
        Ok(Self { events })
    }

    pub fn empty() -> Self {
        Self { events: Vec::new() }
    }

    pub fn events(&self) -> &[DoseEvent<T>] {
        &self.events
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn earliest_start(&self) -> Option<T> {
        self.events.first().map(|e| e.start())
    }

    /// Union of two schedules (responses superpose).
    pub fn merged(&self, other: &Self) -> Self {
        let mut events = self.events.clone();
        events.extend_from_slice(&other.events);
        events.sort_by(|a, b| a.start().partial_cmp(&b.start()).expect("finite starts"));
        Self { events }
    }

    pub fn shifted(&self, dt: T) -> Self {
        Self {
            events: self.events.iter().map(|e| e.shifted(dt)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord<T> {
    pub id: String,
    pub series: Vec<ObservationSeries<T>>,
    pub schedules: Vec<TreatmentSchedule<T>>,
    /// Static covariates; the time basis is appended at evaluation.
    pub covariates: Vec<T>,
}

impl<T: Scalar> PatientRecord<T> {
    pub fn new(
        id: impl Into<String>,
        series: Vec<ObservationSeries<T>>,
        schedules: Vec<TreatmentSchedule<T>>,
        covariates: Vec<T>,
    ) -> Result<Self> {
        let id = id.into();
        if series.is_empty() {
            return Err(Error::invalid(format!("patient {id}: no signals")));
        }
        for (d, s) in series.iter().enumerate() {
            if s.signal() != d {
                return Err(Error::invalid(format!(
                    "patient {id}: series {} stored at position {}",
                    s.signal() + 1,
                    d + 1
                )));
            }
        }
        if covariates.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid(format!("patient {id}: non-finite covariate")));
        }
        Ok(Self {
            id,
            series,
            schedules,
            covariates,
        })
    }

    pub fn n_signals(&self) -> usize {
        self.series.len()
    }

    pub fn n_treatments(&self) -> usize {
        self.schedules.len()
    }

    pub fn n_observations(&self) -> usize {
        self.series.iter().map(|s| s.len()).sum()
    }

    /// Earliest and latest observation time over all signals.
    pub fn time_span(&self) -> (T, T) {
        let lo = self.series.iter().map(|s| s.times()[0]).fold(T::infinity(), T::min);
        let hi = self
            .series
            .iter()
            .map(|s| *s.times().last().expect("nonempty"))
            .fold(T::neg_infinity(), T::max);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cohort<T> {
    pub patients: Vec<PatientRecord<T>>,
    n_signals: usize,
    n_treatments: usize,
}

impl<T: Scalar> Cohort<T> {
    pub fn new(patients: Vec<PatientRecord<T>>, n_signals: usize, n_treatments: usize) -> Result<Self> {
        if n_signals == 0 {
            return Err(Error::invalid("cohort needs at least one signal"));
        }
        let mut seen = HashSet::new();
        let n_cov = patients.first().map(|p| p.covariates.len());
        for p in &patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::invalid(format!("duplicate patient id {}", p.id)));
            }
            if p.n_signals() != n_signals || p.n_treatments() != n_treatments {
                return Err(Error::invalid(format!(
                    "patient {} has {} signals / {} treatments, cohort expects {} / {}",
                    p.id,
                    p.n_signals(),
                    p.n_treatments(),
                    n_signals,
                    n_treatments
                )));
            }
            if Some(p.covariates.len()) != n_cov {
                return Err(Error::invalid(format!("patient {}: covariate count differs", p.id)));
            }
        }
        Ok(Self {
            patients,
            n_signals,
            n_treatments,
        })
    }

    pub fn n_signals(&self) -> usize {
        self.n_signals
    }

    pub fn n_treatments(&self) -> usize {
        self.n_treatments
    }

    pub fn n_covariates(&self) -> usize {
        self.patients.first().map_or(0, |p| p.covariates.len())
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn patient(&self, id: &str) -> Option<&PatientRecord<T>> {
        self.patients.iter().find(|p| p.id == id)
    }
}

/// Number of leading observations assigned to the training split.
fn train_count(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    // 0.7 * 10 must count as exactly 7
    let k = if (raw - raw.round()).abs() < 1e-9 {
        raw.round()
    } else {
        raw.ceil()
    };
    (k as usize).clamp(1, n - 1)
}

/// Chronological per-signal split: the first `ceil(fraction·N)` observations of
/// each signal train, the rest test. Dose schedules are copied whole into both.
pub fn split_train_test<T: Scalar>(
    record: &PatientRecord<T>,
    fraction: f64,
) -> Result<(PatientRecord<T>, PatientRecord<T>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::arg(format!("train fraction {fraction} outside (0, 1)")));
    }
    let mut train = Vec::with_capacity(record.series.len());
    let mut test = Vec::with_capacity(record.series.len());
    for s in &record.series {
        let n = s.len();
        if n < 2 {
            return Err(Error::arg(format!(
                "patient {} signal {} has {} observation(s); cannot split",
                record.id,
                s.signal() + 1,
                n
            )));
        }
        let k = train_count(n, fraction);
        train.push(ObservationSeries::new(
            s.signal(),
            s.times()[..k].to_vec(),
            s.values()[..k].to_vec(),
        )?);
        test.push(ObservationSeries::new(
            s.signal(),
            s.times()[k..].to_vec(),
            s.values()[k..].to_vec(),
        )?);
    }
    let make = |series| PatientRecord {
        id: record.id.clone(),
        series,
        schedules: record.schedules.clone(),
        covariates: record.covariates.clone(),
    };
    Ok((make(train), make(test)))
}

/// Split every patient of a cohort.
pub fn split_cohort<T: Scalar>(cohort: &Cohort<T>, fraction: f64) -> Result<(Cohort<T>, Cohort<T>)> {
    let mut train = Vec::with_capacity(cohort.len());
    let mut test = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let (a, b) = split_train_test(p, fraction)?;
        train.push(a);
        test.push(b);
    }
    Ok((
        Cohort::new(train, cohort.n_signals(), cohort.n_treatments())?,
        Cohort::new(test, cohort.n_signals(), cohort.n_treatments())?,
    ))
}
