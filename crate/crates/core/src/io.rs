//! CSV ingestion and output.
//!
//! Observations: `patient_id,signal_id,time,value`. Treatments:
//! `patient_id,treatment_id,kind,start,end,dose` with `kind` one of
//! `impulse`/`interval` and `end` empty for impulses. Covariates:
//! `patient_id,c1,...,cK`. Signal and treatment ids are one-based.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::data::{Cohort, DoseEvent, ObservationSeries, PatientRecord, TreatmentSchedule};
use crate::error::{Error, Result};
use crate::eval::{DecompositionRow, Prediction, RecoverySeries};
use crate::scalar::Scalar;

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(file))
}

fn check_header(path: &Path, rdr: &mut csv::Reader<File>, want: &[&str]) -> Result<bool> {
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Ok(false);
    }
    let got: Vec<&str> = header.iter().collect();
    if got.len() < want.len() || got[..want.len()] != *want {
        return Err(parse_err(path, 1, format!("expected header `{}`", want.join(","))));
    }
    Ok(true)
}

struct Row {
    line: u64,
    record: csv::StringRecord,
}

fn rows(path: &Path, rdr: &mut csv::Reader<File>) -> Result<Vec<Row>> {
    let mut out = Vec::new();
    for rec in rdr.records() {
        let record = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        out.push(Row { line, record });
    }
    Ok(out)
}

fn field<'a>(path: &Path, row: &'a Row, i: usize, name: &str) -> Result<&'a str> {
    row.record
        .get(i)
        .ok_or_else(|| parse_err(path, row.line, format!("missing field `{name}`")))
}

fn number<T: Scalar>(path: &Path, row: &Row, i: usize, name: &str) -> Result<T> {
    let s = field(path, row, i, name)?;
    let v: T = s
        .parse()
        .map_err(|_| parse_err(path, row.line, format!("`{name}`: cannot parse `{s}` as a number")))?;
    if !v.is_finite() {
        return Err(parse_err(path, row.line, format!("`{name}`: non-finite value `{s}`")));
    }
    Ok(v)
}

fn index(path: &Path, row: &Row, i: usize, name: &str) -> Result<usize> {
    let s = field(path, row, i, name)?;
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v - 1),
        _ => Err(parse_err(path, row.line, format!("`{name}` must be a positive integer, got `{s}`"))),
    }
}

/// Reads and validates a cohort. Patients keep their order of first
/// appearance in the observations file.
pub fn load_cohort<T: Scalar>(
    observations: &Path,
    treatments: &Path,
    covariates: Option<&Path>,
) -> Result<Cohort<T>> {
    let mut order: Vec<String> = Vec::new();
    let mut obs: HashMap<String, Vec<Vec<(T, T)>>> = HashMap::new();
    let mut n_signals = 0;
    let mut rdr = reader(observations)?;
    if !check_header(observations, &mut rdr, &["patient_id", "signal_id", "time", "value"])? {
        return Err(parse_err(observations, 1, "empty observations file"));
    }
    for row in rows(observations, &mut rdr)? {
        let id = field(observations, &row, 0, "patient_id")?.to_string();
        if id.is_empty() {
            return Err(parse_err(observations, row.line, "empty patient_id"));
        }
        let d = index(observations, &row, 1, "signal_id")?;
        let t: T = number(observations, &row, 2, "time")?;
        let y: T = number(observations, &row, 3, "value")?;
        n_signals = n_signals.max(d + 1);
        let entry = obs.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            Vec::new()
        });
        if entry.len() <= d {
            entry.resize_with(d + 1, Vec::new);
        }
        entry[d].push((t, y));
    }
    if order.is_empty() {
        return Err(Error::invalid("observations file has no rows"));
    }

    let mut events: HashMap<String, Vec<Vec<DoseEvent<T>>>> = HashMap::new();
    let mut n_treatments = 0;
    let mut rdr = reader(treatments)?;
    let cols = ["patient_id", "treatment_id", "kind", "start", "end", "dose"];
    if check_header(treatments, &mut rdr, &cols)? {
        for row in rows(treatments, &mut rdr)? {
            let id = field(treatments, &row, 0, "patient_id")?;
            if !obs.contains_key(id) {
                return Err(Error::invalid(format!(
                    "{}:{}: unknown patient `{id}`",
                    treatments.display(),
                    row.line
                )));
            }
            let j = index(treatments, &row, 1, "treatment_id")?;
            let start: T = number(treatments, &row, 3, "start")?;
            let dose: T = number(treatments, &row, 5, "dose")?;
            let ev = match field(treatments, &row, 2, "kind")? {
                "impulse" => DoseEvent::impulse(start, dose),
                "interval" => {
                    let end: T = number(treatments, &row, 4, "end")?;
                    DoseEvent::interval(start, end, dose)
                }
                other => return Err(parse_err(treatments, row.line, format!("unknown kind `{other}`"))),
            }
            .map_err(|e| parse_err(treatments, row.line, e.to_string()))?;
            n_treatments = n_treatments.max(j + 1);
            let entry = events.entry(id.to_string()).or_default();
            if entry.len() <= j {
                entry.resize_with(j + 1, Vec::new);
            }
            entry[j].push(ev);
        }
    }

    let mut covs: HashMap<String, Vec<T>> = HashMap::new();
    if let Some(path) = covariates {
        let mut rdr = reader(path)?;
        if check_header(path, &mut rdr, &["patient_id"])? {
            let k = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.len() - 1;
            for row in rows(path, &mut rdr)? {
                let id = field(path, &row, 0, "patient_id")?.to_string();
                if !obs.contains_key(&id) {
                    return Err(Error::invalid(format!("{}:{}: unknown patient `{id}`", path.display(), row.line)));
                }
                if row.record.len() != k + 1 {
                    return Err(parse_err(path, row.line, format!("expected {} covariates", k)));
                }
                let values = (1..=k)
                    .map(|i| number(path, &row, i, &format!("c{i}")))
                    .collect::<Result<Vec<T>>>()?;
                if covs.insert(id.clone(), values).is_some() {
                    return Err(parse_err(path, row.line, format!("duplicate covariates for `{id}`")));
                }
            }
            if let Some(missing) = order.iter().find(|id| !covs.contains_key(*id)) {
                return Err(Error::invalid(format!("patient `{missing}` has no covariates row")));
            }
        }
    }

    let mut patients = Vec::with_capacity(order.len());
    for id in order {
        let mut per_signal = obs.remove(&id).unwrap_or_default();
        per_signal.resize_with(n_signals, Vec::new);
        let series = per_signal
            .into_iter()
            .enumerate()
            .map(|(d, mut pts)| {
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
                if pts.windows(2).any(|w| w[0].0 == w[1].0) {
                    return Err(Error::invalid(format!("patient {id} signal {}: duplicate timestamp", d + 1)));
                }
                let (t, y) = pts.into_iter().unzip();
                ObservationSeries::new(d, t, y)
                    .map_err(|e| Error::invalid(format!("patient {id} signal {}: {e}", d + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut evs = events.remove(&id).unwrap_or_default();
        evs.resize_with(n_treatments, Vec::new);
        let schedules = evs.into_iter().map(TreatmentSchedule::new).collect::<Result<Vec<_>>>()?;
        let cov = covs.remove(&id).unwrap_or_default();
        patients.push(PatientRecord::new(id, series, schedules, cov)?);
    }
    Cohort::new(patients, n_signals, n_treatments)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Writes the three cohort files; `covariates` is skipped when `None`.
pub fn write_cohort<T: Scalar>(
    cohort: &Cohort<T>,
    observations: &Path,
    treatments: &Path,
    covariates: Option<&Path>,
) -> Result<()> {
    let mut w = create(observations)?;
    writeln!(w, "patient_id,signal_id,time,value")?;
    for p in &cohort.patients {
        for s in &p.series {
            for (t, y) in s.times().iter().zip(s.values()) {
                writeln!(w, "{},{},{},{}", p.id, s.signal() + 1, t, y)?;
            }
        }
    }
    w.flush()?;
    let mut w = create(treatments)?;
    writeln!(w, "patient_id,treatment_id,kind,start,end,dose")?;
    for p in &cohort.patients {
        for (j, s) in p.schedules.iter().enumerate() {
            for e in s.events() {
                match *e {
                    DoseEvent::Impulse { time, mass } => writeln!(w, "{},{},impulse,{},,{}", p.id, j + 1, time, mass)?,
                    DoseEvent::Interval { start, end, rate } => {
                        writeln!(w, "{},{},interval,{},{},{}", p.id, j + 1, start, end, rate)?
                    }
                }
            }
        }
    }
    w.flush()?;
    if let Some(path) = covariates {
        let mut w = create(path)?;
        let k = cohort.n_covariates();
        let head: Vec<String> = std::iter::once("patient_id".to_string())
            .chain((1..=k).map(|i| format!("c{i}")))
            .collect();
        writeln!(w, "{}", head.join(","))?;
        for p in &cohort.patients {
            let vals: Vec<String> = p.covariates.iter().map(|c| c.to_string()).collect();
            if vals.is_empty() {
                writeln!(w, "{}", p.id)?;
            } else {
                writeln!(w, "{},{}", p.id, vals.join(","))?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

/// One row of the metrics table; absent fields are written empty.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub signal_id: Option<usize>,
    pub horizon_days: Option<f64>,
    pub value: f64,
    pub stderr: Option<f64>,
}

fn opt<V: std::fmt::Display>(v: Option<V>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "metric,signal_id,horizon_days,value,stderr")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.metric,
            opt(r.signal_id),
            opt(r.horizon_days),
            r.value,
            opt(r.stderr)
        )?;
    }
    w.flush()?;
    Ok(())
}

/// `true,estimated` pairs after sorting each side.
pub fn write_qq(path: &Path, series: &RecoverySeries) -> Result<()> {
    let mut t = series.truth.clone();
    let mut e = series.estimated.clone();
    t.sort_by(f64::total_cmp);
    e.sort_by(f64::total_cmp);
    let mut w = create(path)?;
    writeln!(w, "true,estimated")?;
    for (a, b) in t.iter().zip(&e) {
        writeln!(w, "{a},{b}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "patient_id,signal_id,horizon_days,time,observed,predicted")?;
    for p in predictions {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.patient_id,
            p.signal + 1,
            p.horizon_days,
            p.time,
            p.observed,
            p.predicted
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut rdr = reader(path)?;
    let cols = ["patient_id", "signal_id", "horizon_days", "time", "observed", "predicted"];
    if !check_header(path, &mut rdr, &cols)? {
        return Ok(Vec::new());
    }
    rows(path, &mut rdr)?
        .iter()
        .map(|row| {
            Ok(Prediction {
                patient_id: field(path, row, 0, "patient_id")?.to_string(),
                signal: index(path, row, 1, "signal_id")?,
                horizon_days: number(path, row, 2, "horizon_days")?,
                time: number(path, row, 3, "time")?,
                observed: number(path, row, 4, "observed")?,
                predicted: number(path, row, 5, "predicted")?,
            })
        })
        .collect()
}

pub fn write_decomposition(path: &Path, rows: &[DecompositionRow]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "patient_id,signal_id,time,total,mixed_effects,treatment_response")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.patient_id,
            r.signal + 1,
            r.time,
            r.total,
            r.mixed_effects,
            r.treatment_response
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace<T: Scalar>(path: &Path, trace: &[T]) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "iteration,elbo")?;
    for (i, v) in trace.iter().enumerate() {
        writeln!(w, "{},{}", i + 1, v)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    const OBS: &str = "patient_id,signal_id,time,value\n\
        a,1,0.5,1.0\na,2,0.7,2.0\na,1,0.1,3.0\nb,1,1.0,0.0\nb,2,2.0,-1.5\n";

    #[test]
    fn loads_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", OBS);
        let tr = write(
            dir.path(),
            "tr.csv",
            "patient_id,treatment_id,kind,start,end,dose\na,1,impulse,1.0,,2.0\nb,2,interval,0.0,3.0,0.5\n",
        );
        let c: Cohort<f64> = load_cohort(&obs, &tr, None).unwrap();
        assert_eq!((c.len(), c.n_signals(), c.n_treatments()), (2, 2, 2));
        let a = c.patient("a").unwrap();
        assert_eq!(a.series[0].times(), &[0.1, 0.5]);
        assert_eq!(a.series[0].values(), &[3.0, 1.0]);
        assert!(a.schedules[1].is_empty());
        assert_eq!(c.patient("b").unwrap().schedules[1].events().len(), 1);
    }

    #[test]
    fn empty_treatments_means_no_treatment_types() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", OBS);
        let tr = write(dir.path(), "tr.csv", "patient_id,treatment_id,kind,start,end,dose\n");
        let c: Cohort<f64> = load_cohort(&obs, &tr, None).unwrap();
        assert_eq!(c.n_treatments(), 0);
        let blank = write(dir.path(), "blank.csv", "");
        let c: Cohort<f64> = load_cohort(&obs, &blank, None).unwrap();
        assert_eq!(c.n_treatments(), 0);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let tr = write(dir.path(), "tr.csv", "patient_id,treatment_id,kind,start,end,dose\n");
        let obs = write(dir.path(), "nan.csv", "patient_id,signal_id,time,value\na,1,0.0,1.0\na,1,1.0,NaN\n");
        match load_cohort::<f64>(&obs, &tr, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = write(dir.path(), "dup.csv", "patient_id,signal_id,time,value\na,1,1.0,1.0\na,1,1.0,2.0\n");
        assert!(matches!(load_cohort::<f64>(&dup, &tr, None), Err(Error::Validation(_))));
        let obs = write(dir.path(), "obs.csv", OBS);
        let ghost = write(
            dir.path(),
            "ghost.csv",
            "patient_id,treatment_id,kind,start,end,dose\nz,1,impulse,1.0,,1.0\n",
        );
        assert!(matches!(load_cohort::<f64>(&obs, &ghost, None), Err(Error::Validation(_))));
    }

    #[test]
    fn round_trip_is_exact() {
        let (cohort, _) = crate::synthetic::generate_cohort(&crate::synthetic::SimConfig {
            n_patients: 3,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (o, t) = (dir.path().join("o.csv"), dir.path().join("t.csv"));
        write_cohort(&cohort, &o, &t, None).unwrap();
        let back: Cohort<f64> = load_cohort(&o, &t, None).unwrap();
        assert_eq!(back, cohort);
    }

    #[test]
    fn covariates_are_attached() {
        let dir = tempfile::tempdir().unwrap();
        let obs = write(dir.path(), "obs.csv", OBS);
        let tr = write(dir.path(), "tr.csv", "patient_id,treatment_id,kind,start,end,dose\n");
        let cov = write(dir.path(), "cov.csv", "patient_id,c1,c2\nb,1.5,2\na,0,-1\n");
        let c: Cohort<f64> = load_cohort(&obs, &tr, Some(&cov)).unwrap();
        assert_eq!(c.patient("b").unwrap().covariates, vec![1.5, 2.0]);
        assert_eq!(c.n_covariates(), 2);
    }
}
