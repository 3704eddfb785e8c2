use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use lti_mogp::data::{split_cohort, Cohort, PatientRecord};
use lti_mogp::elbo::{elbo_cohort, elbo_packed_grad};
use lti_mogp::eval::{self, Prediction, SystemChoice};
use lti_mogp::io::{self, MetricRow};
use lti_mogp::optimizer::{self, finite_diff_errors};
use lti_mogp::params::{Block, LocalParams};
use lti_mogp::FittedModel;
use lti_mogp::synthetic::{generate_cohort, GroundTruth, SimConfig};
use lti_mogp::{Error, ModelConfig};

use crate::config::RunConfig;
use crate::error::CliError;

const GRADCHECK_TOL: f64 = 1e-4;

fn load_cohort(cfg: &RunConfig) -> Result<Cohort<f64>, CliError> {
    let obs = cfg.require_path("observations")?;
    let tr = cfg.require_path("treatments")?;
    Ok(io::load_cohort(&obs, &tr, cfg.path("covariates").as_deref())?)
}

fn load_truth(cfg: &RunConfig) -> Result<Option<GroundTruth>, CliError> {
    cfg.path("ground_truth")
        .map(|p| {
            let text = std::fs::read_to_string(&p).map_err(|e| CliError::Model(e.into()))?;
            Ok(GroundTruth::from_json(&text)?)
        })
        .transpose()
}

fn train_fraction(cfg: &RunConfig) -> Result<f64, CliError> {
    let f: f64 = cfg.get_or("train_fraction", 0.7)?;
    if !(f > 0.0 && f <= 1.0) {
        return Err(CliError::Config(format!("train_fraction {f} outside (0, 1]")));
    }
    Ok(f)
}

/// `(train, test)`; `test` is `None` when the whole cohort is used for fitting.
fn split(cfg: &RunConfig, cohort: Cohort<f64>) -> Result<(Cohort<f64>, Option<Cohort<f64>>), CliError> {
    let f = train_fraction(cfg)?;
    if f >= 1.0 {
        return Ok((cohort, None));
    }
    let (train, test) = split_cohort(&cohort, f)?;
    Ok((train, Some(test)))
}

fn with_patient<V>(id: &str, r: lti_mogp::Result<V>) -> Result<V, CliError> {
    r.map_err(|e| match e {
        Error::NotPositiveDefinite { .. } | Error::Optimization { .. } => CliError::Numerical {
            patient: id.to_string(),
            reason: e.to_string(),
        },
        other => other.into(),
    })
}

fn locals_for<'a>(fitted: &'a FittedModel, cohort: &Cohort<f64>) -> Result<Vec<&'a LocalParams<f64>>, CliError> {
    cohort
        .patients
        .iter()
        .map(|p| {
            fitted
                .local(&p.id)
                .ok_or_else(|| CliError::Config(format!("params file has no patient `{}`", p.id)))
        })
        .collect()
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sim = cfg.sim()?;
    let (cohort, truth) = generate_cohort(&sim)?;
    io::write_cohort(&cohort, &out.join("observations.csv"), &out.join("treatments.csv"), None)?;
    std::fs::write(out.join("ground_truth.json"), truth.to_json()?).map_err(|e| CliError::Model(e.into()))?;
    println!("simulated {} patients into {}", cohort.len(), out.display());
    Ok(())
}

pub fn fit(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let (train, _) = split(cfg, load_cohort(cfg)?)?;
    let (model, hyper, opt) = (cfg.model()?, cfg.hyper()?, cfg.optimizer()?);
    let result = match cfg.path("init_params") {
        Some(p) => {
            let init = FittedModel::load(&p)?;
            let locals = locals_for(&init, &train)?.into_iter().cloned().collect();
            optimizer::fit_from(&train, &hyper, &model, &opt, init.global, locals)?
        }
        None => optimizer::fit(&train, &hyper, &model, &opt)?,
    };
    let elbo = elbo_cohort(&result.locals, &result.global, &hyper, &train, &model)?;
    let fitted = FittedModel {
        model,
        hyper,
        global: result.global,
        patients: train.patients.iter().map(|p| p.id.clone()).zip(result.locals).collect(),
    };
    fitted.save(&out.join("params.txt"))?;
    io::write_trace(&out.join("elbo_trace.csv"), &result.trace)?;
    println!(
        "fit {} patients: {} global iterations, converged {}, ELBO {elbo}",
        train.len(),
        result.global_iterations,
        result.converged
    );
    Ok(())
}

fn predictions(
    fitted: &FittedModel,
    train: &Cohort<f64>,
    test: &Cohort<f64>,
    horizons: &[f64],
) -> Result<Vec<Prediction>, CliError> {
    let locals = locals_for(fitted, train)?;
    let per_patient: Vec<Result<Vec<Prediction>, CliError>> = train
        .patients
        .par_iter()
        .zip(&test.patients)
        .zip(locals)
        .map(|((tr, te), local)| {
            let mut out = Vec::new();
            for &h in horizons {
                out.extend(with_patient(&tr.id, eval::horizon_predict(local, tr, te, &fitted.model, h))?);
            }
            Ok(out)
        })
        .collect();
    Ok(per_patient.into_iter().collect::<Result<Vec<_>, _>>()?.concat())
}

fn require_test(test: Option<Cohort<f64>>) -> Result<Cohort<f64>, CliError> {
    test.ok_or_else(|| CliError::Config("prediction needs train_fraction < 1".into()))
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let fitted = FittedModel::load(&cfg.require_path("params")?)?;
    let (train, test) = split(cfg, load_cohort(cfg)?)?;
    let test = require_test(test)?;
    let preds = predictions(&fitted, &train, &test, &cfg.horizons()?)?;
    io::write_predictions(&out.join("predictions.csv"), &preds)?;
    println!("{} predictions", preds.len());
    Ok(())
}

fn bootstrap(values: &[f64], cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Option<(f64, f64)>, CliError> {
    if values.is_empty() {
        return Ok(None);
    }
    let b = cfg.get_or("bootstrap_resamples", 1000)?;
    let n = cfg.get_or("bootstrap_size", 50)?;
    Ok(Some(eval::bootstrap_ci(values, b, n, rng)?))
}

fn nrmse_rows(
    cfg: &RunConfig,
    preds: &[Prediction],
    horizons: &[f64],
    test: &Cohort<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MetricRow>, CliError> {
    let n_signals = test.n_signals();
    let stds = eval::test_set_stds(test);
    let mut rows = Vec::new();
    for &h in horizons {
        let at: Vec<Prediction> = preds.iter().filter(|p| p.horizon_days == h).cloned().collect();
        if at.is_empty() {
            continue;
        }
        let report = eval::nrmse_with_stds(&at, &stds)?;
        let mut ids: Vec<&str> = at.iter().map(|p| p.patient_id.as_str()).collect();
        ids.dedup();
        let mut mean_vals = Vec::new();
        let mut signal_vals = vec![Vec::new(); n_signals];
        for id in ids {
            let mine: Vec<Prediction> = at.iter().filter(|p| p.patient_id == id).cloned().collect();
            if let Ok(r) = eval::nrmse_with_stds(&mine, &stds) {
                if r.mean.is_finite() {
                    mean_vals.push(r.mean);
                }
                for (d, v) in r.per_signal.iter().enumerate() {
                    if let Some(v) = v {
                        signal_vals[d].push(*v);
                    }
                }
            }
        }
        rows.push(MetricRow {
            metric: "nrmse".into(),
            signal_id: None,
            horizon_days: Some(h),
            value: report.mean,
            stderr: bootstrap(&mean_vals, cfg, rng)?.map(|b| b.1),
        });
        for d in 0..n_signals {
            if let Some(v) = report.per_signal[d] {
                rows.push(MetricRow {
                    metric: "nrmse".into(),
                    signal_id: Some(d + 1),
                    horizon_days: Some(h),
                    value: v,
                    stderr: bootstrap(&signal_vals[d], cfg, rng)?.map(|b| b.1),
                });
            }
        }
    }
    Ok(rows)
}

fn row(metric: String, signal: Option<usize>, value: f64, stderr: Option<f64>) -> MetricRow {
    MetricRow {
        metric,
        signal_id: signal,
        horizon_days: None,
        value,
        stderr,
    }
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let fitted = FittedModel::load(&cfg.require_path("params")?)?;
    let (train, test) = split(cfg, load_cohort(cfg)?)?;
    let truth = load_truth(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let d_count = train.n_signals();
    let mut rows = Vec::new();
    if let Some(test) = &test {
        let horizons = cfg.horizons()?;
        let preds = predictions(&fitted, &train, test, &horizons)?;
        rows.extend(nrmse_rows(cfg, &preds, &horizons, test, &mut rng)?);
    }
    let locals: Vec<LocalParams<f64>> = locals_for(&fitted, &train)?.into_iter().cloned().collect();
    for j in 0..train.n_treatments() {
        for d in 0..d_count {
            let vals: Vec<f64> = train
                .patients
                .iter()
                .zip(&locals)
                .filter(|(p, _)| !p.schedules[j].is_empty())
                .map(|(p, l)| eval::max_effect(l, &p.schedules[j], j, d).value)
                .collect();
            if let Some((_, se)) = bootstrap(&vals, cfg, &mut rng)? {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                rows.push(row(format!("max_effect_treatment{}", j + 1), Some(d + 1), mean, Some(se)));
            }
        }
    }
    if let Some(truth) = &truth {
        rows.extend(recovery_rows(cfg, &train, &locals, truth, out)?);
    }
    io::write_metrics(&out.join("metrics.csv"), &rows)?;
    for r in &rows {
        println!(
            "{} signal={} horizon={} value={}",
            r.metric,
            r.signal_id.map_or("-".into(), |s| s.to_string()),
            r.horizon_days.map_or("-".into(), |h| h.to_string()),
            r.value
        );
    }
    Ok(())
}

fn recovery_rows(
    cfg: &RunConfig,
    cohort: &Cohort<f64>,
    locals: &[LocalParams<f64>],
    truth: &GroundTruth,
    out: &Path,
) -> Result<Vec<MetricRow>, CliError> {
    let ids: Vec<String> = cohort.patients.iter().map(|p| p.id.clone()).collect();
    let mut rows = Vec::new();
    for choice in [SystemChoice::Role, SystemChoice::Effective] {
        for series in eval::rate_recovery(locals, &ids, truth, choice)? {
            io::write_qq(&out.join(format!("qq_{}.csv", series.name)), &series)?;
            match series.qq() {
                Ok(r) => rows.push(row(format!("qq_{}", series.name), None, r, None)),
                Err(Error::Argument(msg)) => log::warn!("skipping qq_{}: {msg}", series.name),
                Err(e) => return Err(e.into()),
            }
        }
    }
    let step: f64 = cfg.get_or("decompose_step", 1.0)?;
    for (j, tc) in truth.config.treatments.iter().enumerate() {
        for d in 0..cohort.n_signals() {
            let amps: Vec<f64> = cohort
                .patients
                .iter()
                .zip(locals)
                .map(|(p, l)| eval::shared_amplitude(l, &p.schedules[j], j, d, &eval::record_grid(p, step)))
                .collect();
            rows.push(row(
                format!("shared_amplitude_treatment{}", j + 1),
                Some(d + 1),
                amps.iter().sum::<f64>() / amps.len() as f64,
                None,
            ));
            if tc.chi[d].mean == 0.0 && tc.chi[d].var == 0.0 {
                continue;
            }
            let mut agree = 0usize;
            for ((p, l), id) in cohort.patients.iter().zip(locals).zip(&ids) {
                let pt = truth
                    .patient(id)
                    .ok_or_else(|| CliError::Config(format!("no ground truth for patient {id}")))?;
                let est: Vec<f64> = pt.grid.iter().map(|&t| l.treatments[j].response(&p.schedules[j], d, t)).collect();
                let onset = p.schedules[j].events().iter().map(|e| e.start()).fold(f64::INFINITY, f64::min);
                if eval::peak_agrees(&pt.grid, &est, &pt.grid_response[j][d], onset, 0.2) {
                    agree += 1;
                }
            }
            rows.push(row(
                format!("peak_agreement_treatment{}", j + 1),
                Some(d + 1),
                agree as f64 / cohort.len() as f64,
                None,
            ));
        }
    }
    Ok(rows)
}

pub fn decompose(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let fitted = FittedModel::load(&cfg.require_path("params")?)?;
    let (train, _) = split(cfg, load_cohort(cfg)?)?;
    let truth = load_truth(cfg)?;
    let step: f64 = cfg.get_or("decompose_step", 1.0)?;
    let locals = locals_for(&fitted, &train)?;
    let per_patient: Vec<Result<Vec<eval::DecompositionRow>, CliError>> = train
        .patients
        .par_iter()
        .zip(locals)
        .map(|(p, l)| with_patient(&p.id, eval::decompose(l, p, &fitted.model, &eval::record_grid(p, step))))
        .collect();
    let rows = per_patient.into_iter().collect::<Result<Vec<_>, _>>()?.concat();
    io::write_decomposition(&out.join("decomposition.csv"), &rows)?;
    println!("{} decomposition rows", rows.len());
    if let Some(truth) = truth {
        let err = response_error(&train, &rows, &truth)?;
        println!("max abs treatment-response error vs truth: {err}");
    }
    Ok(())
}

fn response_error(cohort: &Cohort<f64>, rows: &[eval::DecompositionRow], truth: &GroundTruth) -> Result<f64, CliError> {
    let mut worst: f64 = 0.0;
    for r in rows {
        let p: &PatientRecord<f64> = cohort.patient(&r.patient_id).expect("row from cohort");
        let pt = truth
            .patient(&r.patient_id)
            .ok_or_else(|| CliError::Config(format!("no ground truth for patient {}", r.patient_id)))?;
        let tru: f64 = (0..p.n_treatments())
            .map(|j| pt.response(&p.schedules, j, r.signal, r.time))
            .sum();
        worst = worst.max((tru - r.treatment_response).abs());
    }
    Ok(worst)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let instances: usize = cfg.get_or("gradcheck_instances", 5)?;
    let h: f64 = cfg.get_or("gradcheck_step", 1e-5)?;
    let seed = cfg.seed()?;
    let (model, hyper) = (cfg.model()?, cfg.hyper()?);
    let model = ModelConfig {
        n_inducing: model.n_inducing.min(6),
        ..model
    };
    let mut worst = vec![0.0f64; Block::ALL.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.2).expect("valid normal");
    for i in 0..instances {
        let sim = SimConfig {
            n_patients: 1,
            obs_count_mean: 8.0,
            seed: seed.wrapping_add(i as u64),
            ..SimConfig::default()
        };
        let (cohort, _) = generate_cohort(&sim)?;
        let (global, locals) = optimizer::initialize(&cohort, &model, &cfg.optimizer()?)?;
        let record = &cohort.patients[0];
        let template = &locals[0];
        let (mut x, blocks) = template.pack_with_blocks();
        for v in &mut x {
            *v += jitter.sample(&mut rng);
        }
        let errors = with_patient(
            &record.id,
            finite_diff_errors(|p: &[f64]| elbo_packed_grad(template, p, &global, &hyper, record, &model), &x, h),
        )?;
        for (e, b) in errors.iter().zip(&blocks) {
            worst[b.index()] = worst[b.index()].max(*e);
        }
    }
    for b in Block::ALL {
        println!("{:<16} {:.3e}", b.name(), worst[b.index()]);
    }
    let max = worst.iter().cloned().fold(0.0, f64::max);
    println!("max relative gradient error: {max:.3e}");
    if max >= GRADCHECK_TOL {
        return Err(CliError::GradientCheck(max));
    }
    Ok(())
}
