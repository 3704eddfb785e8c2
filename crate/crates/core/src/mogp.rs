//! Matérn-3/2 latent functions, their sparse variational marginals, and the
//! shared/signal-specific coregionalised mixing `f_d = ω_d g + κ_d v_d`.
//!
//! Two parameterisations of `q(u)` exist. [`VariationalState`] is the direct
//! one, `q(u) = N(m, S)`. [`WhitenedState`] stores `q(v) = N(m̃, L̃L̃ᵀ)` with
//! `u = L v`, `L = chol(K_ZZ + jitter·I)`; this is what the fitting code
//! optimises because its KL term does not involve `K_ZZ⁻¹`.

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Unit-variance Matérn-3/2 kernel `k(r) = (1 + √3 r/l) e^{−√3 r/l}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matern32Kernel<T> {
    pub lengthscale: T,
}

impl<T: Scalar> Matern32Kernel<T> {
    pub fn new(lengthscale: T) -> Result<Self> {
        if !(lengthscale > T::zero()) || !lengthscale.is_finite() {
            return Err(Error::arg(format!("lengthscale must be positive, got {lengthscale}")));
        }
        Ok(Self { lengthscale })
    }

    #[inline]
    pub fn eval(&self, a: T, b: T) -> T {
        let s = T::lit(3.0).sqrt() * (a - b).abs() / self.lengthscale;
        (T::one() + s) * (-s).exp()
    }

    /// `(k, ∂k/∂l)`.
    #[inline]
    pub fn eval_with_grad(&self, a: T, b: T) -> (T, T) {
        let s = T::lit(3.0).sqrt() * (a - b).abs() / self.lengthscale;
        let e = (-s).exp();
        ((T::one() + s) * e, s * s * e / self.lengthscale)
    }

    pub fn matrix(&self, a: &[T], b: &[T]) -> Matrix<T> {
        Matrix::from_fn(a.len(), b.len(), |i, j| self.eval(a[i], b[j]))
    }

    /// Kernel matrix and its elementwise derivative in the lengthscale.
    pub fn matrix_with_grad(&self, a: &[T], b: &[T]) -> (Matrix<T>, Matrix<T>) {
        let mut k = Matrix::zeros(a.len(), b.len());
        let mut dk = Matrix::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                let (v, g) = self.eval_with_grad(ai, bj);
                k[(i, j)] = v;
                dk[(i, j)] = g;
            }
        }
        (k, dk)
    }

    /// `K_ZZ + jitter·I`.
    pub fn inducing_covariance(&self, z: &[T], jitter: T) -> Matrix<T> {
        let mut k = self.matrix(z, z);
        k.add_diagonal(jitter);
        k
    }
}

pub fn kernel_matrix<T: Scalar>(kernel: &Matern32Kernel<T>, times_a: &[T], times_b: &[T]) -> Matrix<T> {
    kernel.matrix(times_a, times_b)
}

/// `M` equally spaced inducing inputs over `[lo, hi]`.
pub fn inducing_grid<T: Scalar>(lo: T, hi: T, m: usize) -> Vec<T> {
    match m {
        0 => Vec::new(),
        1 => vec![(lo + hi) / T::lit(2.0)],
        _ => {
            let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - T::one(), lo + T::one()) };
            let step = (hi - lo) / T::lit((m - 1) as f64);
            (0..m).map(|i| lo + step * T::lit(i as f64)).collect()
        }
    }
}

fn check_inducing<T: Scalar>(z: &[T]) -> Result<()> {
    if z.is_empty() {
        return Err(Error::arg("no inducing inputs"));
    }
    if z.windows(2).any(|w| w[1] <= w[0]) || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("inducing inputs must be finite and strictly ascending"));
    }
    Ok(())
}

fn check_factor<T: Scalar>(chol: &Matrix<T>, m: usize) -> Result<()> {
    if chol.rows() != m || chol.cols() != m {
        return Err(Error::arg(format!(
            "covariance factor is {}x{}, expected {m}x{m}",
            chol.rows(),
            chol.cols()
        )));
    }
    for i in 0..m {
        if !(chol[(i, i)] > T::zero()) {
            return Err(Error::arg(format!("covariance factor diagonal {i} not positive")));
        }
        for j in (i + 1)..m {
            if chol[(i, j)] != T::zero() {
                return Err(Error::arg("covariance factor not lower triangular"));
            }
        }
    }
    Ok(())
}

/// `q(u) = N(mean, chol·cholᵀ)` at inducing inputs `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalState<T> {
    pub z: Vec<T>,
    pub mean: Vec<T>,
    pub chol: Matrix<T>,
}

impl<T: Scalar> VariationalState<T> {
    pub fn new(z: Vec<T>, mean: Vec<T>, chol: Matrix<T>) -> Result<Self> {
        check_inducing(&z)?;
        if mean.len() != z.len() {
            return Err(Error::arg("variational mean length differs from inducing count"));
        }
        check_factor(&chol, z.len())?;
        Ok(Self { z, mean, chol })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn covariance(&self) -> Matrix<T> {
        self.chol.matmul(&self.chol.transpose())
    }

    /// Whitened coordinates relative to `chol(K_ZZ + jitter·I)`.
    pub fn whiten(&self, kernel: &Matern32Kernel<T>, jitter: T) -> Result<WhitenedState<T>> {
        let l = kernel.inducing_covariance(&self.z, jitter).cholesky()?;
        let mean = linalg::solve_lower_vec(&l, &self.mean);
        let mut chol = self.chol.clone();
        linalg::solve_lower_in_place(&l, &mut chol);
        Ok(WhitenedState {
            z: self.z.clone(),
            mean,
            chol: chol.lower_triangle(),
        })
    }
}

/// `q(v) = N(mean, chol·cholᵀ)` with `u = chol(K_ZZ + jitter·I)·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenedState<T> {
    pub z: Vec<T>,
    pub mean: Vec<T>,
    pub chol: Matrix<T>,
}

impl<T: Scalar> WhitenedState<T> {
    pub fn new(z: Vec<T>, mean: Vec<T>, chol: Matrix<T>) -> Result<Self> {
        check_inducing(&z)?;
        if mean.len() != z.len() {
            return Err(Error::arg("variational mean length differs from inducing count"));
        }
        check_factor(&chol, z.len())?;
        Ok(Self { z, mean, chol })
    }

    /// `m̃ = 0`, `L̃ = I`: `q(u)` equals the prior.
    pub fn prior(z: Vec<T>) -> Self {
        let m = z.len();
        Self {
            z,
            mean: vec![T::zero(); m],
            chol: Matrix::identity(m),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn unwhiten(&self, kernel: &Matern32Kernel<T>, jitter: T) -> Result<VariationalState<T>> {
        let l = kernel.inducing_covariance(&self.z, jitter).cholesky()?;
        Ok(VariationalState {
            z: self.z.clone(),
            mean: l.matvec(&self.mean),
            chol: l.matmul(&self.chol).lower_triangle(),
        })
    }

    /// `KL(N(m̃, L̃L̃ᵀ) ‖ N(0, I))`.
    pub fn kl_to_standard(&self) -> T {
        let m = T::lit(self.len() as f64);
        let half = T::lit(0.5);
        let tr = self.chol.lower_triangle().frobenius_sq();
        let quad = linalg::dot(&self.mean, &self.mean);
        let logdet = linalg::cholesky_log_det(&self.chol);
        half * (tr + quad - m - logdet)
    }
}

/// Mean and full covariance of `q(f(times))` for a direct-form state:
/// `μ = K_NZ K_ZZ⁻¹ m`, `Σ = K_NN − K_NZ K_ZZ⁻¹ (I − S K_ZZ⁻¹) K_ZN`,
/// where `K_ZZ` carries `jitter` on its diagonal.
pub fn variational_marginal<T: Scalar>(
    kernel: &Matern32Kernel<T>,
    state: &VariationalState<T>,
    times: &[T],
    jitter: T,
) -> Result<(Vec<T>, Matrix<T>)> {
    if jitter < T::zero() {
        return Err(Error::arg("jitter must be nonnegative"));
    }
    let kzz = kernel.inducing_covariance(&state.z, jitter);
    let l = kzz.cholesky()?;
    let kzn = kernel.matrix(&state.z, times);
    // B = K_ZZ⁻¹ K_ZN
    let b = linalg::cholesky_solve(&l, &kzn);
    let mean = b.tr_matvec(&state.mean);
    // C = Lₛᵀ B, so B ᵀ S B = Cᵀ C
    let c = state.chol.transpose().matmul(&b);
    let knn = kernel.matrix(times, times);
    let cov = knn.sub(&kzn.tr_matmul(&b)).add(&c.tr_matmul(&c));
    Ok((mean, symmetrize(cov)))
}

fn symmetrize<T: Scalar>(m: Matrix<T>) -> Matrix<T> {
    let half = T::lit(0.5);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| half * (m[(i, j)] + m[(j, i)]))
}

/// Marginal mean and variance of `q(f(times))` for a whitened state.
pub fn whitened_marginal_diag<T: Scalar>(
    kernel: &Matern32Kernel<T>,
    state: &WhitenedState<T>,
    times: &[T],
    jitter: T,
) -> Result<(Vec<T>, Vec<T>)> {
    let l = kernel.inducing_covariance(&state.z, jitter).cholesky()?;
    let mut a = kernel.matrix(&state.z, times);
    linalg::solve_lower_in_place(&l, &mut a);
    let mean = a.tr_matvec(&state.mean);
    let c = state.chol.transpose().matmul(&a);
    let var = (0..times.len())
        .map(|n| {
            let mut v = T::one();
            for k in 0..a.rows() {
                v += c[(k, n)] * c[(k, n)] - a[(k, n)] * a[(k, n)];
            }
            v
        })
        .collect();
    Ok((mean, var))
}

/// Coregionalisation weights of one patient: `f_d = ω_d g + κ_d v_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingCoefficients<T> {
    pub omega: Vec<T>,
    pub kappa: Vec<T>,
}

/// `q(f_d)` from the shared and signal-specific marginals.
pub fn mixed_marginal<T: Scalar>(
    shared: (&[T], &Matrix<T>),
    specific: (&[T], &Matrix<T>),
    mix: &MixingCoefficients<T>,
    d: usize,
) -> (Vec<T>, Matrix<T>) {
    let (w, k) = (mix.omega[d], mix.kappa[d]);
    let mean = shared
        .0
        .iter()
        .zip(specific.0)
        .map(|(&g, &v)| w * g + k * v)
        .collect();
    let cov = shared.1.scale(w * w).add(&specific.1.scale(k * k));
    (mean, cov)
}
