//! Versioned plain-text parameter files.
//!
//! One record per line, `tag` followed by whitespace-separated fields.
//! Reals are written as `{:.16e}` so `f64` values survive a round trip
//! bit for bit. The file closes with an `end` line; a missing trailer
//! means truncation.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::lti::SecondOrderLti;
use crate::mean_model::{CovariateBasis, FixedEffectParams, TreatmentResponseParams};
use crate::mogp::{MixingCoefficients, WhitenedState};
use crate::params::{GlobalParams, Hyperparams, LocalParams, ModelConfig};
use crate::scalar::Scalar;

pub const FORMAT_MAGIC: &str = "lti-mogp-params";
pub const FORMAT_VERSION: &str = "1";

/// Everything needed to predict from a fitted cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct FittedModel<T> {
    pub model: ModelConfig,
    pub hyper: Hyperparams,
    pub global: GlobalParams<T>,
    pub patients: Vec<(String, LocalParams<T>)>,
}

impl<T: Scalar> FittedModel<T> {
    pub fn local(&self, id: &str) -> Option<&LocalParams<T>> {
        self.patients.iter().find(|(p, _)| p == id).map(|(_, l)| l)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir)?;
            }
        }
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = String::new();
        let g = &self.global;
        let d_count = g.n_signals();
        let j_count = g.chi_mean.len();
        let gamma_dim = g.gamma_mean.first().map_or(0, Vec::len);
        let w = &mut out;
        line(w, &format!("{FORMAT_MAGIC} {FORMAT_VERSION}"));
        line(
            w,
            &format!(
                "model {} {} {}",
                self.model.basis.name(),
                real(self.model.jitter),
                self.model.n_inducing
            ),
        );
        line(w, &format!("hyper {} {}", real(self.hyper.lambda_psi), real(self.hyper.lambda_mix)));
        line(
            w,
            &format!("dims {d_count} {j_count} {gamma_dim} {}", self.patients.len()),
        );
        for j in 0..j_count {
            line(w, &reals(&format!("chi_mean {}", j + 1), &g.chi_mean[j]));
            line(w, &reals(&format!("log_alpha_mean {}", j + 1), &g.log_alpha_mean[j]));
            line(w, &reals(&format!("log_beta_mean {}", j + 1), &g.log_beta_mean[j]));
        }
        for d in 0..d_count {
            line(w, &reals(&format!("gamma_mean {}", d + 1), &g.gamma_mean[d]));
        }
        line(w, &reals("omega_mean", &g.omega_mean));
        line(w, &reals("kappa_mean", &g.kappa_mean));
        line(w, &reals("log_lengthscale_g_mean", &[g.log_lengthscale_g_mean]));
        line(w, &reals("log_lengthscale_v_mean", &g.log_lengthscale_v_mean));
        for (id, local) in &self.patients {
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(Error::arg(format!("patient id `{id}` cannot be stored (empty or contains whitespace)")));
            }
            local.validate(d_count, j_count, gamma_dim)?;
            line(w, &format!("patient {id}"));
            for (j, tr) in local.treatments.iter().enumerate() {
                line(w, &reals(&format!("shared {}", j + 1), &[tr.shared.alpha, tr.shared.beta]));
                for d in 0..d_count {
                    let s = tr.specific[d];
                    line(
                        w,
                        &reals(&format!("signal {} {}", j + 1, d + 1), &[tr.chi[d], tr.psi[d], s.alpha, s.beta]),
                    );
                }
            }
            for d in 0..d_count {
                line(w, &reals(&format!("gamma {}", d + 1), &local.fixed.gamma[d]));
            }
            line(w, &reals("omega", &local.mix.omega));
            line(w, &reals("kappa", &local.mix.kappa));
            line(w, &reals("lengthscale_g", &[local.lengthscale_g]));
            line(w, &reals("lengthscale_v", &local.lengthscale_v));
            line(w, &reals("noise_var", &local.noise_var));
            for (k, lat) in local.latents.iter().enumerate() {
                line(w, &reals(&format!("latent_z {k}"), &lat.z));
                line(w, &reals(&format!("latent_mean {k}"), &lat.mean));
                let m = lat.z.len();
                let tri: Vec<T> = (0..m).flat_map(|i| lat.chol.row(i)[..=i].to_vec()).collect();
                line(w, &reals(&format!("latent_chol {k}"), &tri));
            }
        }
        line(w, "end");
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut r = Reader::new(text);
        let head = r.next()?;
        if head.tokens.first() != Some(&FORMAT_MAGIC) || head.tokens.len() != 2 {
            return Err(r.corrupt(&head, "missing format header"));
        }
        if head.tokens[1] != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: head.tokens[1].to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        let m = r.expect("model", 3)?;
        let basis = CovariateBasis::parse(m.tokens[1]).ok_or_else(|| r.corrupt(&m, "unknown basis"))?;
        let model = ModelConfig {
            basis,
            jitter: r.real::<f64>(&m, 2)?,
            n_inducing: r.int(&m, 3)?,
        };
        let h = r.expect("hyper", 2)?;
        let hyper = Hyperparams {
            lambda_psi: r.real(&h, 1)?,
            lambda_mix: r.real(&h, 2)?,
        };
        let dims = r.expect("dims", 4)?;
        let (d_count, j_count, gamma_dim, n_patients) =
            (r.int(&dims, 1)?, r.int(&dims, 2)?, r.int(&dims, 3)?, r.int(&dims, 4)?);
        let mut global = GlobalParams {
            chi_mean: Vec::with_capacity(j_count),
            log_alpha_mean: Vec::with_capacity(j_count),
            log_beta_mean: Vec::with_capacity(j_count),
            gamma_mean: Vec::with_capacity(d_count),
            omega_mean: Vec::new(),
            kappa_mean: Vec::new(),
            log_lengthscale_g_mean: T::zero(),
            log_lengthscale_v_mean: Vec::new(),
        };
        for j in 1..=j_count {
            global.chi_mean.push(r.indexed("chi_mean", &[j], d_count)?);
            global.log_alpha_mean.push(r.indexed("log_alpha_mean", &[j], d_count + 1)?);
            global.log_beta_mean.push(r.indexed("log_beta_mean", &[j], d_count + 1)?);
        }
        for d in 1..=d_count {
            global.gamma_mean.push(r.indexed("gamma_mean", &[d], gamma_dim)?);
        }
        global.omega_mean = r.indexed("omega_mean", &[], d_count)?;
        global.kappa_mean = r.indexed("kappa_mean", &[], d_count)?;
        global.log_lengthscale_g_mean = r.indexed("log_lengthscale_g_mean", &[], 1)?[0];
        global.log_lengthscale_v_mean = r.indexed("log_lengthscale_v_mean", &[], d_count)?;
        global.validate(d_count, j_count, gamma_dim)?;

        let mut patients = Vec::with_capacity(n_patients);
        for _ in 0..n_patients {
            let p = r.expect("patient", 1)?;
            let id = p.tokens[1].to_string();
            let mut treatments = Vec::with_capacity(j_count);
            for j in 1..=j_count {
                let sh = r.indexed::<T>("shared", &[j], 2)?;
                let mut chi = Vec::with_capacity(d_count);
                let mut psi = Vec::with_capacity(d_count);
                let mut specific = Vec::with_capacity(d_count);
                for d in 1..=d_count {
                    let v = r.indexed::<T>("signal", &[j, d], 4)?;
                    chi.push(v[0]);
                    psi.push(v[1]);
                    specific.push(SecondOrderLti::new(v[2], v[3]).map_err(|e| Error::Corrupt(e.to_string()))?);
                }
                treatments.push(TreatmentResponseParams {
                    shared: SecondOrderLti::new(sh[0], sh[1]).map_err(|e| Error::Corrupt(e.to_string()))?,
                    chi,
                    psi,
                    specific,
                });
            }
            let gamma = (1..=d_count)
                .map(|d| r.indexed("gamma", &[d], gamma_dim))
                .collect::<Result<Vec<_>>>()?;
            let omega = r.indexed("omega", &[], d_count)?;
            let kappa = r.indexed("kappa", &[], d_count)?;
            let lengthscale_g = r.indexed("lengthscale_g", &[], 1)?[0];
            let lengthscale_v = r.indexed("lengthscale_v", &[], d_count)?;
            let noise_var = r.indexed("noise_var", &[], d_count)?;
            let mut latents = Vec::with_capacity(d_count + 1);
            for k in 0..=d_count {
                let z = r.indexed_any::<T>("latent_z", k)?;
                let m = z.len();
                let mean = r.indexed_zero_based::<T>("latent_mean", k, m)?;
                let tri = r.indexed_zero_based::<T>("latent_chol", k, m * (m + 1) / 2)?;
                let mut chol = Matrix::zeros(m, m);
                let mut it = tri.into_iter();
                for i in 0..m {
                    for c in 0..=i {
                        chol.row_mut(i)[c] = it.next().unwrap_or_default();
                    }
                }
                latents.push(WhitenedState::new(z, mean, chol).map_err(|e| Error::Corrupt(e.to_string()))?);
            }
            let local = LocalParams {
                treatments,
                fixed: FixedEffectParams { gamma },
                mix: MixingCoefficients { omega, kappa },
                lengthscale_g,
                lengthscale_v,
                noise_var,
                latents,
            };
            local
                .validate(d_count, j_count, gamma_dim)
                .map_err(|e| Error::Corrupt(format!("patient {id}: {e}")))?;
            patients.push((id, local));
        }
        let end = r.next()?;
        if end.tokens != ["end"] {
            return Err(r.corrupt(&end, "expected `end`"));
        }
        Ok(Self {
            model,
            hyper,
            global,
            patients,
        })
    }
}

fn line(out: &mut String, s: &str) {
    out.push_str(s);
    out.push('\n');
}

fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn reals<T: Scalar>(tag: &str, values: &[T]) -> String {
    let mut s = tag.to_string();
    for v in values {
        let _ = write!(s, " {:.16e}", v.to_f64_lossy());
    }
    s
}

struct Line<'a> {
    number: usize,
    tokens: Vec<&'a str>,
}

struct Reader<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Reader<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
        }
    }

    fn next(&mut self) -> Result<Line<'a>> {
        for (i, l) in self.lines.by_ref() {
            let tokens: Vec<&str> = l.split_whitespace().collect();
            if !tokens.is_empty() {
                return Ok(Line { number: i + 1, tokens });
            }
        }
        Err(Error::Corrupt("unexpected end of file (missing `end` trailer)".into()))
    }

    fn corrupt(&self, l: &Line, msg: &str) -> Error {
        Error::Corrupt(format!("line {}: {msg}", l.number))
    }

    fn expect(&mut self, tag: &str, n_fields: usize) -> Result<Line<'a>> {
        let l = self.next()?;
        if l.tokens[0] != tag {
            return Err(self.corrupt(&l, &format!("expected `{tag}`, found `{}`", l.tokens[0])));
        }
        if l.tokens.len() != n_fields + 1 {
            return Err(self.corrupt(&l, &format!("`{tag}` expects {n_fields} fields")));
        }
        Ok(l)
    }

    fn int(&self, l: &Line, i: usize) -> Result<usize> {
        l.tokens[i]
            .parse()
            .map_err(|_| self.corrupt(l, &format!("bad integer `{}`", l.tokens[i])))
    }

    fn real<T: Scalar>(&self, l: &Line, i: usize) -> Result<T> {
        let v: f64 = l.tokens[i]
            .parse()
            .map_err(|_| self.corrupt(l, &format!("bad number `{}`", l.tokens[i])))?;
        if !v.is_finite() {
            return Err(self.corrupt(l, "non-finite value"));
        }
        T::from_f64(v).ok_or_else(|| self.corrupt(l, "value out of range"))
    }

    /// `tag i1 .. ik v1 .. vn` with one-based indices checked against `idx`.
    fn indexed<T: Scalar>(&mut self, tag: &str, idx: &[usize], n: usize) -> Result<Vec<T>> {
        let l = self.expect(tag, idx.len() + n)?;
        self.check_indices(&l, idx)?;
        (0..n).map(|i| self.real(&l, 1 + idx.len() + i)).collect()
    }

    fn indexed_zero_based<T: Scalar>(&mut self, tag: &str, k: usize, n: usize) -> Result<Vec<T>> {
        let l = self.expect(tag, 1 + n)?;
        if self.int(&l, 1)? != k {
            return Err(self.corrupt(&l, "index out of sequence"));
        }
        (0..n).map(|i| self.real(&l, 2 + i)).collect()
    }

    fn indexed_any<T: Scalar>(&mut self, tag: &str, k: usize) -> Result<Vec<T>> {
        let l = self.next()?;
        if l.tokens[0] != tag || l.tokens.len() < 3 {
            return Err(self.corrupt(&l, &format!("expected `{tag}`")));
        }
        if self.int(&l, 1)? != k {
            return Err(self.corrupt(&l, "index out of sequence"));
        }
        (2..l.tokens.len()).map(|i| self.real(&l, i)).collect()
    }

    fn check_indices(&self, l: &Line, idx: &[usize]) -> Result<()> {
        for (i, &want) in idx.iter().enumerate() {
            if self.int(l, 1 + i)? != want {
                return Err(self.corrupt(l, "index out of sequence"));
            }
        }
        Ok(())
    }
}
