//! Dense real linear-algebra kernels: discrete Riccati and Lyapunov solvers,
//! Kronecker/vec utilities, spectral radius and a fixed-point solver for the
//! lifted second-moment equation.
//!
//! All solvers declare convergence on the residual of their defining
//! equation, measured in the induced ∞-norm (maximum absolute row sum).

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Largest matrix side for which the Lyapunov equation is solved through
/// the dense Kronecker system (its size is the square of this).
const DENSE_LYAPUNOV_MAX_DIM: usize = 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NotConverged {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },
    #[error("fixed-point iteration diverged after {iterations} iterations (residual {residual:.3e}); the operator spectral radius is at least one")]
    Diverged { iterations: usize, residual: f64 },
    #[error("spectral radius {spectral_radius:.6} >= 1: no unique positive definite Lyapunov solution")]
    Unstable { spectral_radius: f64 },
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("non-finite entries in {0}")]
    NonFinite(&'static str),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Bound on the ∞-norm of the equation residual.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            max_iterations: 100_000,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(NumericsError::InvalidOptions(format!(
                "tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(NumericsError::InvalidOptions(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Induced ∞-norm (maximum absolute row sum).
pub fn inf_norm(m: &Matrix) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

pub fn vec_inf_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn ensure_square(m: &Matrix) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(NumericsError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok(m.nrows())
}

fn ensure_shape(op: &'static str, name: &str, m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(NumericsError::DimensionMismatch {
            op,
            detail: format!(
                "{name} is {}x{}, expected {rows}x{cols}",
                m.nrows(),
                m.ncols()
            ),
        });
    }
    Ok(())
}

/// Solves `S X = rhs` for symmetric positive definite `S`, falling back to LU
/// when the Cholesky factorization fails.
pub fn spd_solve(s: &Matrix, rhs: &Matrix, context: &'static str) -> Result<Matrix> {
    if let Some(chol) = s.clone().cholesky() {
        return Ok(chol.solve(rhs));
    }
    s.clone()
        .lu()
        .solve(rhs)
        .ok_or(NumericsError::Singular(context))
}

pub fn spd_inverse(s: &Matrix, context: &'static str) -> Result<Matrix> {
    spd_solve(s, &Matrix::identity(s.nrows(), s.ncols()), context)
}

/// Symmetric square root factor `F` with `F Fᵀ = S` for a symmetric PSD `S`.
/// Negative eigenvalues from round-off are clamped to zero.
pub fn psd_factor(s: &Matrix) -> Result<Matrix> {
    ensure_square(s)?;
    if s.iter().all(|v| *v == 0.0) {
        return Ok(s.clone());
    }
    let eig = symmetrize(s).symmetric_eigen();
    let sqrt_vals = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * Matrix::from_diagonal(&sqrt_vals) * eig.eigenvectors.transpose())
}

pub fn symmetric_eigenvalue_range(s: &Matrix) -> (f64, f64) {
    let eig = symmetrize(s).symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// One step of the filter Riccati map
/// `P ↦ A[P − PCᵀ(CPCᵀ+Σ_V)⁻¹CP]Aᵀ + Σ_W`.
fn filter_riccati_map(a: &Matrix, c: &Matrix, sigma_w: &Matrix, sigma_v: &Matrix, p: &Matrix) -> Result<Matrix> {
    let s = c * p * c.transpose() + sigma_v;
    let cp = c * p;
    let correction = cp.transpose() * spd_solve(&s, &cp, "filter Riccati innovation covariance")?;
    Ok(symmetrize(&(a * (p - correction) * a.transpose() + sigma_w)))
}

/// Kalman prediction covariance from the filter DARE, by value iteration
/// started at `P₀ = Σ_W_eff`.
pub fn solve_filter_dare(
    a: &Matrix,
    c: &Matrix,
    sigma_w_eff: &Matrix,
    sigma_v: &Matrix,
    opts: &SolverOptions,
) -> Result<Matrix> {
    opts.validate()?;
    let n = ensure_square(a)?;
    let ny = c.nrows();
    ensure_shape("solve_filter_dare", "C", c, ny, n)?;
    ensure_shape("solve_filter_dare", "Σ_W", sigma_w_eff, n, n)?;
    ensure_shape("solve_filter_dare", "Σ_V", sigma_v, ny, ny)?;

    let mut p = symmetrize(sigma_w_eff);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let next = filter_riccati_map(a, c, sigma_w_eff, sigma_v, &p)?;
        if !is_finite(&next) {
            return Err(NumericsError::NonFinite("filter DARE iterate"));
        }
        residual = inf_norm(&(&p - &next));
        if residual < opts.tolerance {
            return Ok(p);
        }
        p = next;
    }
    Err(NumericsError::NotConverged {
        solver: "filter DARE",
        iterations: opts.max_iterations,
        residual,
    })
}

pub fn filter_dare_residual(a: &Matrix, c: &Matrix, sigma_w_eff: &Matrix, sigma_v: &Matrix, p: &Matrix) -> Result<f64> {
    Ok(inf_norm(&(p - filter_riccati_map(a, c, sigma_w_eff, sigma_v, p)?)))
}

fn control_riccati_map(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, delta: &Matrix) -> Result<Matrix> {
    let btd = b.transpose() * delta;
    let s = r + &btd * b;
    let btda = &btd * a;
    let correction = btda.transpose() * spd_solve(&s, &btda, "control Riccati input weight")?;
    Ok(symmetrize(&(q + a.transpose() * delta * a - correction)))
}

/// LQ value matrix from the control DARE, by value iteration started at
/// `Δ₀ = Q`.
pub fn solve_control_dare(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, opts: &SolverOptions) -> Result<Matrix> {
    opts.validate()?;
    let n = ensure_square(a)?;
    let nu = b.ncols();
    ensure_shape("solve_control_dare", "B", b, n, nu)?;
    ensure_shape("solve_control_dare", "Q", q, n, n)?;
    ensure_shape("solve_control_dare", "R", r, nu, nu)?;

    let mut delta = symmetrize(q);
    let mut residual = f64::INFINITY;
    for _ in 0..opts.max_iterations {
        let next = control_riccati_map(a, b, q, r, &delta)?;
        if !is_finite(&next) {
            return Err(NumericsError::NonFinite("control DARE iterate"));
        }
        residual = inf_norm(&(&delta - &next));
        if residual < opts.tolerance {
            return Ok(delta);
        }
        delta = next;
    }
    Err(NumericsError::NotConverged {
        solver: "control DARE",
        iterations: opts.max_iterations,
        residual,
    })
}

pub fn control_dare_residual(a: &Matrix, b: &Matrix, q: &Matrix, r: &Matrix, delta: &Matrix) -> Result<f64> {
    Ok(inf_norm(&(delta - control_riccati_map(a, b, q, r, delta)?)))
}

/// Residual `‖AᵀHA − H + C‖_∞` of the discrete Lyapunov equation.
pub fn lyapunov_residual(a: &Matrix, c_rhs: &Matrix, h: &Matrix) -> f64 {
    inf_norm(&(a.transpose() * h * a - h + c_rhs))
}

/// Solves `AᵀHA − H = −C` for Schur-stable `A`.
///
/// Small systems go through the dense Kronecker form
/// `(I − Aᵀ⊗Aᵀ) vec(H) = vec(C)`; larger ones accumulate the series
/// `Σₖ (Aᵀ)ᵏ C Aᵏ` by squaring (each pass doubles the number of terms).
pub fn solve_discrete_lyapunov(a: &Matrix, c_rhs: &Matrix, opts: &SolverOptions) -> Result<Matrix> {
    opts.validate()?;
    let n = ensure_square(a)?;
    ensure_shape("solve_discrete_lyapunov", "C", c_rhs, n, n)?;
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(NumericsError::Unstable { spectral_radius: rho });
    }

    let h = if n <= DENSE_LYAPUNOV_MAX_DIM {
        let at = a.transpose();
        let system = Matrix::identity(n * n, n * n) - kron(&at, &at);
        let sol = system
            .lu()
            .solve(&vec(c_rhs))
            .ok_or(NumericsError::Singular("Lyapunov Kronecker system"))?;
        symmetrize(&unvec(&sol, n, n)?)
    } else {
        let mut h = c_rhs.clone();
        let mut power = a.clone();
        let mut converged = false;
        for _ in 0..opts.max_iterations.min(64) {
            let increment = power.transpose() * &h * &power;
            h += &increment;
            if max_abs(&increment) < opts.tolerance * 1e-3 {
                converged = true;
                break;
            }
            power = &power * &power;
        }
        if !converged {
            return Err(NumericsError::NotConverged {
                solver: "Lyapunov series",
                iterations: 64,
                residual: lyapunov_residual(a, c_rhs, &h),
            });
        }
        symmetrize(&h)
    };

    let residual = lyapunov_residual(a, c_rhs, &h);
    if residual >= opts.tolerance.max(1e3 * f64::EPSILON * (1.0 + inf_norm(&h))) {
        return Err(NumericsError::NotConverged {
            solver: "discrete Lyapunov",
            iterations: 1,
            residual,
        });
    }
    Ok(h)
}

/// All eigenvalues of a square real matrix.
pub fn eigenvalues(m: &Matrix) -> Result<Vec<Complex<f64>>> {
    ensure_square(m)?;
    if !is_finite(m) {
        return Err(NumericsError::NonFinite("eigenvalue input"));
    }
    match m.clone().try_schur(f64::EPSILON, 10_000) {
        Some(schur) => Ok(schur.complex_eigenvalues().iter().cloned().collect()),
        None => Err(NumericsError::NotConverged {
            solver: "Schur decomposition",
            iterations: 10_000,
            residual: f64::NAN,
        }),
    }
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    let n = ensure_square(m)?;
    if n == 0 {
        return Ok(0.0);
    }
    Ok(eigenvalues(m)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &Matrix, b: &Matrix) -> Matrix {
    a.kronecker(b)
}

/// Column-stacking vectorization.
pub fn vec(m: &Matrix) -> Vector {
    // nalgebra storage is column-major, so the raw slice is already vec(M).
    Vector::from_column_slice(m.as_slice())
}

pub fn unvec(v: &Vector, rows: usize, cols: usize) -> Result<Matrix> {
    if v.len() != rows * cols {
        return Err(NumericsError::DimensionMismatch {
            op: "unvec",
            detail: format!("vector of length {} cannot fill {rows}x{cols}", v.len()),
        });
    }
    Ok(Matrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Result of [`solve_lifted_fixed_point`].
#[derive(Debug, Clone)]
pub struct FixedPoint {
    pub value: Vector,
    pub iterations: usize,
    pub residual: f64,
}

/// Solves `v = 𝔸v + ω` by the iteration `v ← 𝔸v + ω` from `v₀ = ω`, given only
/// the action of `𝔸` on vectors.
///
/// The returned residual is `‖v − 𝔸v − ω‖_∞` of the returned `v`. Geometric
/// residual growth beyond `1e8` times its initial value is reported as
/// divergence.
pub fn solve_lifted_fixed_point<F>(apply: F, omega: &Vector, opts: &SolverOptions) -> Result<FixedPoint>
where
    F: Fn(&Vector) -> Vector,
{
    opts.validate()?;
    let mut v = omega.clone();
    let mut first_residual: Option<f64> = None;
    let mut residual = f64::INFINITY;
    for iteration in 0..opts.max_iterations {
        let image = apply(&v);
        if image.len() != v.len() {
            return Err(NumericsError::DimensionMismatch {
                op: "solve_lifted_fixed_point",
                detail: format!("operator maps length {} to {}", v.len(), image.len()),
            });
        }
        let next = image + omega;
        residual = vec_inf_norm(&(&v - &next));
        if !residual.is_finite() {
            return Err(NumericsError::Diverged {
                iterations: iteration,
                residual,
            });
        }
        if residual < opts.tolerance {
            return Ok(FixedPoint {
                value: v,
                iterations: iteration,
                residual,
            });
        }
        let reference = *first_residual.get_or_insert(residual.max(f64::MIN_POSITIVE));
        if residual > 1e8 * reference.max(1e-300) && residual > 1e8 * opts.tolerance {
            return Err(NumericsError::Diverged {
                iterations: iteration,
                residual,
            });
        }
        v = next;
    }
    Err(NumericsError::NotConverged {
        solver: "lifted fixed point",
        iterations: opts.max_iterations,
        residual,
    })
}

/// Dominant eigenvalue magnitude of a linear operator, by normalized power
/// iteration from `start`. Returns the limit of successive norm ratios.
pub fn power_iteration_radius<F>(apply: F, start: &Vector, max_iterations: usize, tolerance: f64) -> f64
where
    F: Fn(&Vector) -> Vector,
{
    let mut v = start.normalize();
    let mut estimate = 0.0;
    for _ in 0..max_iterations {
        let w = apply(&v);
        let norm = w.norm();
        if norm == 0.0 || !norm.is_finite() {
            return if norm == 0.0 { 0.0 } else { f64::INFINITY };
        }
        let converged = (norm - estimate).abs() <= tolerance * norm;
        estimate = norm;
        v = w / norm;
        if converged {
            break;
        }
    }
    estimate
}
