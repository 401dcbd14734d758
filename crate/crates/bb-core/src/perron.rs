//! Perron–Frobenius analysis of primitive nonnegative matrices.
//!
//! For a primitive matrix `A` the spectral radius `ρ(A)` is a simple
//! eigenvalue with strictly positive right/left eigenvectors `u`, `v`
//! (normalized so that the coordinates of `u` sum to 1 and `u·v = 1`), and
//! `ρ(A)⁻ⁿ Aⁿ → Π = u vᵀ` geometrically: `‖ρ⁻ⁿAⁿ − Π‖ ≤ c rⁿ` with
//! `0 < r < 1`. This module computes all of these objects numerically.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Dense square matrix with row-major construction semantics.
pub type SquareMatrix = DMatrix<f64>;

/// Successive-iterate tolerance for power iterations.
const POWER_ITER_TOL: f64 = 1e-12;
/// Iteration cap for power iterations.
const POWER_ITER_CAP: usize = 1_000_000;
/// Number of power-iteration steps on `BᵀB` used by [`spectral_norm`].
const SPECTRAL_NORM_STEPS: usize = 50;
/// Default horizon for the rate-constant maximization.
pub const DEFAULT_RATE_HORIZON: usize = 200;

#[derive(Debug, Error)]
pub enum PerronError {
    #[error("matrix entry ({row},{col}) = {value} is negative or non-finite")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("matrix is not primitive: A^{exponent} still has zero entries")]
    NotPrimitive { exponent: usize },
    #[error("power iteration did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error(
        "second eigenvalue modulus {second} is indistinguishable from the spectral radius {rho}"
    )]
    DegenerateSpectrum { second: f64, rho: f64 },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
}

/// Spectral data of a primitive matrix.
#[derive(Debug, Clone)]
pub struct PerronData {
    /// Spectral radius `ρ(A) > 0`.
    pub rho: f64,
    /// Right Perron vector, strictly positive, coordinates summing to 1.
    pub u: DVector<f64>,
    /// Left Perron vector, strictly positive, normalized so that `u·v = 1`.
    pub v: DVector<f64>,
    /// Limit projector `Π = u vᵀ`.
    pub pi: DMatrix<f64>,
    /// Prefactor of the geometric rate bound.
    pub c_rate: f64,
    /// Geometric rate, strictly inside (0, 1).
    pub r_rate: f64,
}

impl PerronData {
    /// Applies `Π` to a vector as `u (v·x)` without forming the product with
    /// the dense projector.
    pub fn project(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.u * self.v.dot(x)
    }
}

fn check_square_nonnegative(a: &SquareMatrix) -> Result<usize, PerronError> {
    if a.nrows() != a.ncols() {
        return Err(PerronError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    for row in 0..a.nrows() {
        for col in 0..a.ncols() {
            let value = a[(row, col)];
            if !value.is_finite() || value < 0.0 {
                return Err(PerronError::InvalidEntry { row, col, value });
            }
        }
    }
    Ok(a.nrows())
}

/// Tests primitivity via the Wielandt bound: `A` (square, nonnegative) is
/// primitive iff `A^((p-1)²+1)` is entrywise positive. Powers are taken in
/// the boolean semiring, so no overflow is possible.
pub fn is_primitive(a: &SquareMatrix) -> Result<bool, PerronError> {
    let p = check_square_nonnegative(a)?;
    let exponent = (p - 1) * (p - 1) + 1;
    let base: Vec<bool> = (0..p * p)
        .map(|idx| a[(idx / p, idx % p)] > 0.0)
        .collect();

    // Binary powering over the boolean semiring.
    let mut result: Option<Vec<bool>> = None;
    let mut square = base;
    let mut remaining = exponent;
    while remaining > 0 {
        if remaining & 1 == 1 {
            result = Some(match result {
                None => square.clone(),
                Some(acc) => bool_mat_mul(&acc, &square, p),
            });
        }
        remaining >>= 1;
        if remaining > 0 {
            square = bool_mat_mul(&square, &square, p);
        }
    }
    Ok(result.expect("exponent >= 1").iter().all(|&entry| entry))
}

fn bool_mat_mul(lhs: &[bool], rhs: &[bool], p: usize) -> Vec<bool> {
    let mut out = vec![false; p * p];
    for i in 0..p {
        for k in 0..p {
            if lhs[i * p + k] {
                for j in 0..p {
                    if rhs[k * p + j] {
                        out[i * p + j] = true;
                    }
                }
            }
        }
    }
    out
}

/// Computes the full Perron data of a primitive matrix: `ρ`, `u`, `v`,
/// `Π = u vᵀ` and the rate constants over the default horizon.
pub fn perron_data(a: &SquareMatrix) -> Result<PerronData, PerronError> {
    let p = check_square_nonnegative(a)?;
    if !is_primitive(a)? {
        return Err(PerronError::NotPrimitive {
            exponent: (p - 1) * (p - 1) + 1,
        });
    }

    let (rho, u) = dominant_pair(a)?;
    let (_, v_raw) = dominant_pair(&a.transpose())?;
    let v = &v_raw / u.dot(&v_raw);
    let pi = &u * v.transpose();

    let (c_rate, r_rate) = rate_constants_impl(a, rho, &pi, DEFAULT_RATE_HORIZON)?;
    Ok(PerronData {
        rho,
        u,
        v,
        pi,
        c_rate,
        r_rate,
    })
}

/// Power iteration for the dominant eigenpair of a nonnegative matrix,
/// normalized so the iterate's coordinates sum to 1.
fn dominant_pair(a: &SquareMatrix) -> Result<(f64, DVector<f64>), PerronError> {
    let p = a.nrows();
    let mut x = DVector::from_element(p, 1.0 / p as f64);
    for _ in 0..POWER_ITER_CAP {
        let y = a * &x;
        let total: f64 = y.iter().sum();
        if total <= 0.0 {
            // A primitive matrix has no zero rows, so the iterate of a
            // positive vector cannot vanish.
            return Err(PerronError::NoConvergence {
                iterations: POWER_ITER_CAP,
            });
        }
        let next = y / total;
        let diff = (&next - &x).amax();
        x = next;
        if diff <= POWER_ITER_TOL {
            let rho = (a * &x).iter().sum::<f64>();
            return Ok((rho, x));
        }
    }
    Err(PerronError::NoConvergence {
        iterations: POWER_ITER_CAP,
    })
}

/// Deterministic rate constants `(c, r)` with
/// `‖ρ⁻ⁿAⁿ − Π‖ ≤ c rⁿ` for all `1 ≤ n ≤ n_max`:
/// `r = (|λ₂|/ρ + 1)/2` from the deflated second eigenvalue modulus, and
/// `c` the maximum of `‖ρ⁻ⁿAⁿ − Π‖ / rⁿ` over the horizon.
pub fn rate_constants(
    a: &SquareMatrix,
    pd: &PerronData,
    n_max: usize,
) -> Result<(f64, f64), PerronError> {
    rate_constants_impl(a, pd.rho, &pd.pi, n_max)
}

fn rate_constants_impl(
    a: &SquareMatrix,
    rho: f64,
    pi: &DMatrix<f64>,
    n_max: usize,
) -> Result<(f64, f64), PerronError> {
    let second = second_modulus(&(a - rho * pi));
    if second >= rho * (1.0 - 1e-9) {
        return Err(PerronError::DegenerateSpectrum { second, rho });
    }
    let r_rate = (second / rho + 1.0) / 2.0;

    // The computed norm of ρ⁻ⁿAⁿ − Π bottoms out at the accuracy of Π
    // itself (the power-iteration tolerance) instead of decaying like
    // |λ₂/ρ|ⁿ; ratios taken past that floor are pure noise. Since r exceeds
    // |λ₂|/ρ strictly, the true ratio decays geometrically once its maximum
    // is passed, so maximizing over the reliable region bounds the rest.
    let noise_floor = 10.0 * POWER_ITER_TOL * spectral_norm(pi).max(1.0);
    let scaled = a / rho;
    let mut power = DMatrix::identity(a.nrows(), a.ncols());
    let mut c_rate: f64 = 0.0;
    let mut r_pow = 1.0;
    for _ in 1..=n_max {
        power = &power * &scaled;
        r_pow *= r_rate;
        let norm = spectral_norm(&(&power - pi));
        if norm < noise_floor {
            break;
        }
        c_rate = c_rate.max(norm / r_pow);
    }
    if c_rate == 0.0 {
        // A equals its projector; any positive prefactor is valid.
        c_rate = 1.0;
    }
    Ok((c_rate, r_rate))
}

/// Spectral radius of the deflated matrix, i.e. the second-largest
/// eigenvalue modulus of the original one. Uses power iteration with a
/// stability check on the growth ratio; oscillating spectra (complex pairs)
/// fall back to the geometric mean of the trailing ratios.
fn second_modulus(b: &DMatrix<f64>) -> f64 {
    let p = b.nrows();
    let mut x = DVector::from_fn(p, |i, _| 1.0 + (i as f64 + 1.0) / (p as f64 + 1.0));
    x /= x.norm();

    const CAP: usize = 100_000;
    let mut log_ratios = Vec::with_capacity(CAP);
    let mut prev = f64::NAN;
    let mut stable = 0usize;
    for _ in 0..CAP {
        let y = b * &x;
        let ratio = y.norm();
        if ratio < 1e-300 {
            return 0.0;
        }
        x = y / ratio;
        log_ratios.push(ratio.ln());
        if (ratio - prev).abs() <= 1e-13 * ratio.max(1e-30) {
            stable += 1;
            if stable >= 8 {
                return ratio;
            }
        } else {
            stable = 0;
        }
        prev = ratio;
    }
    let tail = &log_ratios[log_ratios.len() / 2..];
    (tail.iter().sum::<f64>() / tail.len() as f64).exp()
}

/// Operator (spectral) norm `‖B‖ = sup_{‖x‖=1} ‖Bx‖`, estimated by a fixed
/// number of power-iteration steps on `BᵀB`.
pub fn spectral_norm(b: &DMatrix<f64>) -> f64 {
    let p = b.ncols();
    let gram = b.transpose() * b;
    let mut x = DVector::from_fn(p, |i, _| 1.0 + 0.01 * i as f64);
    x /= x.norm();
    for _ in 0..SPECTRAL_NORM_STEPS {
        let y = &gram * &x;
        let norm = y.norm();
        if norm < 1e-300 {
            return 0.0;
        }
        x = y / norm;
    }
    let rayleigh = x.dot(&(&gram * &x));
    rayleigh.max(0.0).sqrt()
}
