//! Euler full-truncation integration of the limit diffusions.
//!
//! The scalar limit is the CIR-type equation `dX = b dt + √(c X⁺) dW` with
//! `b = vᵀ m_ε` and `c = vᵀ (u ⊙ V_ξ) v`; `4X/c` is then a squared Bessel
//! process of dimension `4b/c`. The p-dimensional martingale limit is
//! integrated through its (P, Q) system
//!
//! ```text
//! dP = b dt + √(P⁺) vᵀ √(u ⊙ V_ξ) dW
//! dQ = −Π m_ε dt + √(P⁺) (I − Π) √(u ⊙ V_ξ) dW
//! ```
//!
//! driven by one shared p-dimensional Wiener increment per step, and
//! reconstructed as `M_t = P_t u + Q_t`. The discretization clamps the
//! nonnegative coordinate at zero after every step, so simulated CIR paths
//! stay nonnegative at every grid point.

use crate::model::{BranchingModel, Criticality, LimitCoefficients, ModelError};
use crate::perron::PerronData;
use crate::rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("parameter {name} = {value} must be nonnegative and finite")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("step size dt = {dt} must be positive and no larger than t_max = {t_max}")]
    InvalidGrid { dt: f64, t_max: f64 },
    #[error("matrix is not symmetric: ‖A − Aᵀ‖ = {asymmetry:e}")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semi-definite: eigenvalue {eigenvalue}")]
    NotPsd { eigenvalue: f64 },
    #[error("square-root residual ‖S² − A‖ = {residual:e} exceeds tolerance")]
    SqrtResidual { residual: f64 },
    #[error("model is not critical: spectral radius {rho}")]
    NotCritical { rho: f64 },
    #[error("ray identity violated: ‖X_t − Y_t u‖ = {diff:e} at step {step}")]
    RayIdentity { step: usize, diff: f64 },
    #[error("Bessel dimension undefined: diffusion coefficient is zero")]
    UndefinedDimension,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Discretization scheme; the positive part under the square root with a
/// clamp at zero after each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    EulerFullTruncation,
}

/// Integration grid and seed.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SdeConfig {
    pub dt: f64,
    pub t_max: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

impl SdeConfig {
    pub fn new(dt: f64, t_max: f64, seed: u64) -> Result<Self, SdeError> {
        if !(dt > 0.0) || !dt.is_finite() || !t_max.is_finite() || dt > t_max {
            return Err(SdeError::InvalidGrid { dt, t_max });
        }
        Ok(SdeConfig {
            dt,
            t_max,
            scheme: Scheme::EulerFullTruncation,
            seed,
        })
    }

    pub fn steps(&self) -> usize {
        (self.t_max / self.dt).floor() as usize
    }
}

/// Scalar path on the uniform grid `t_i = i·dt`.
#[derive(Debug, Clone)]
pub struct ScalarSdePath {
    pub dt: f64,
    pub values: Vec<f64>,
}

impl ScalarSdePath {
    pub fn time(&self, index: usize) -> f64 {
        index as f64 * self.dt
    }

    /// Value at the grid point nearest to `t`.
    pub fn value_at(&self, t: f64) -> f64 {
        let index = ((t / self.dt).round() as usize).min(self.values.len() - 1);
        self.values[index]
    }

    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// Vector path on the uniform grid `t_i = i·dt`.
#[derive(Debug, Clone)]
pub struct SdePath {
    pub dt: f64,
    pub values: Vec<DVector<f64>>,
}

impl SdePath {
    pub fn time(&self, index: usize) -> f64 {
        index as f64 * self.dt
    }
}

/// Unique symmetric PSD square root, by symmetric eigendecomposition with
/// eigenvalues below `-1e-10` rejected and small negative ones clamped to 0.
pub fn psd_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>, SdeError> {
    let asymmetry = (a - a.transpose()).amax();
    if asymmetry > 1e-10 {
        return Err(SdeError::NotSymmetric { asymmetry });
    }
    let symmetrized = (a + a.transpose()) * 0.5;
    let eigen = symmetrized.clone().symmetric_eigen();
    let mut roots = DVector::zeros(eigen.eigenvalues.len());
    for (i, &lambda) in eigen.eigenvalues.iter().enumerate() {
        if lambda < -1e-10 {
            return Err(SdeError::NotPsd { eigenvalue: lambda });
        }
        roots[i] = lambda.max(0.0).sqrt();
    }
    let sqrt = &eigen.eigenvectors * DMatrix::from_diagonal(&roots) * eigen.eigenvectors.transpose();
    let residual = (&sqrt * &sqrt - &symmetrized).amax();
    if residual > 1e-8 {
        return Err(SdeError::SqrtResidual { residual });
    }
    Ok(sqrt)
}

fn check_nonnegative(name: &'static str, value: f64) -> Result<(), SdeError> {
    if !value.is_finite() || value < 0.0 {
        return Err(SdeError::InvalidParameter { name, value });
    }
    Ok(())
}

/// Full-truncation CIR step: `x ← max(x + b·dt + √(max(x,0))·dw, 0)`, where
/// `dw` already carries the diffusion scale (variance `c·dt` for the scalar
/// equation written as `dX = b dt + √(X⁺) dW̃`).
#[inline]
fn cir_step(x: f64, b: f64, dt: f64, dw: f64) -> f64 {
    (x + b * dt + x.max(0.0).sqrt() * dw).max(0.0)
}

/// Integrates the scalar equation with externally supplied increments;
/// used to drive the scalar and vector discretizations with the same noise.
pub fn cir_path_with_increments(b: f64, x0: f64, dt: f64, increments: &[f64]) -> ScalarSdePath {
    let mut values = Vec::with_capacity(increments.len() + 1);
    values.push(x0);
    let mut x = x0;
    for &dw in increments {
        x = cir_step(x, b, dt, dw);
        values.push(x);
    }
    ScalarSdePath { dt, values }
}

/// Simulates `dX = b dt + √(c X⁺) dW` by Euler full truncation:
/// `X_{t+dt} = max(X_t + b·dt + √(c·max(X_t,0))·√dt·Z, 0)`.
pub fn simulate_cir(b: f64, c: f64, x0: f64, cfg: &SdeConfig) -> Result<ScalarSdePath, SdeError> {
    check_nonnegative("b", b)?;
    check_nonnegative("c", c)?;
    check_nonnegative("x0", x0)?;
    let mut rng = rng::rng_from_seed(cfg.seed);
    let scale = (c * cfg.dt).sqrt();
    let increments: Vec<f64> = (0..cfg.steps())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(cir_path_with_increments(b, x0, cfg.dt, &increments))
}

/// Output of the (P, Q) integration: the reconstructed martingale path
/// `M = P u + Q` plus its components and the effective scalar increments
/// `vᵀ √(u ⊙ V_ξ) ΔW` (one per step).
#[derive(Debug, Clone)]
pub struct MSystemOutput {
    pub path: SdePath,
    pub perron: Vec<f64>,
    pub orthogonal: Vec<DVector<f64>>,
    pub scalar_increments: Vec<f64>,
}

/// Jointly integrates the (P, Q) system from `P₀ = v·y0`,
/// `Q₀ = (I − Π) y0` with one shared Wiener increment per step, and
/// reconstructs `M_t = P_t u + Q_t`.
pub fn simulate_m_system(
    model: &BranchingModel,
    pd: &PerronData,
    y0: &DVector<f64>,
    cfg: &SdeConfig,
) -> Result<MSystemOutput, SdeError> {
    if Criticality::from_rho(pd.rho) != Criticality::Critical {
        return Err(SdeError::NotCritical { rho: pd.rho });
    }
    let p = model.num_types();
    let mixture = model.mixed_variance(&pd.u)?;
    let noise_sqrt = psd_sqrt(&mixture)?;
    // Row vᵀ√(u ⊙ V_ξ) acting on the Wiener increment, as a vector.
    let sigma_p = &noise_sqrt * &pd.v;
    let q_noise = (DMatrix::identity(p, p) - &pd.pi) * &noise_sqrt;
    let q_drift = -(&pd.pi * model.immigration_mean()) * cfg.dt;
    let b = pd.v.dot(model.immigration_mean());

    let mut rng = rng::rng_from_seed(cfg.seed);
    let sqrt_dt = cfg.dt.sqrt();
    let steps = cfg.steps();

    let mut perron = Vec::with_capacity(steps + 1);
    let mut orthogonal = Vec::with_capacity(steps + 1);
    let mut m_values = Vec::with_capacity(steps + 1);
    let mut scalar_increments = Vec::with_capacity(steps);

    let mut p_value = pd.v.dot(y0);
    let mut q_value = y0 - &pd.u * p_value;
    perron.push(p_value);
    orthogonal.push(q_value.clone());
    m_values.push(y0.clone());

    for _ in 0..steps {
        let dw = DVector::from_fn(p, |_, _| sqrt_dt * rng.sample::<f64, _>(StandardNormal));
        let dw_scalar = sigma_p.dot(&dw);
        let spread = p_value.max(0.0).sqrt();
        p_value = cir_step(p_value, b, cfg.dt, dw_scalar);
        q_value = &q_value + &q_drift + spread * (&q_noise * &dw);
        perron.push(p_value);
        orthogonal.push(q_value.clone());
        m_values.push(&pd.u * p_value + &q_value);
        scalar_increments.push(dw_scalar);
    }

    Ok(MSystemOutput {
        path: SdePath {
            dt: cfg.dt,
            values: m_values,
        },
        perron,
        orthogonal,
        scalar_increments,
    })
}

/// The projected limit process `X_t = Π(M_t + t m_ε)` and its Perron
/// coordinate `Y_t = v·(M_t + t m_ε)`, with the per-step ray identity
/// `X_t = Y_t u` asserted.
#[derive(Debug, Clone)]
pub struct ProjectedLimit {
    pub dt: f64,
    pub values: Vec<DVector<f64>>,
    pub perron_coordinate: Vec<f64>,
}

pub fn project_limit(
    m_path: &SdePath,
    model: &BranchingModel,
    pd: &PerronData,
) -> Result<ProjectedLimit, SdeError> {
    let mut values = Vec::with_capacity(m_path.values.len());
    let mut perron_coordinate = Vec::with_capacity(m_path.values.len());
    for (step, m) in m_path.values.iter().enumerate() {
        let shifted = m + m_path.time(step) * model.immigration_mean();
        let x = &pd.pi * &shifted;
        let y = pd.v.dot(&shifted);
        let diff = (&x - &pd.u * y).amax();
        if diff > 1e-10 {
            return Err(SdeError::RayIdentity { step, diff });
        }
        values.push(x);
        perron_coordinate.push(y);
    }
    Ok(ProjectedLimit {
        dt: m_path.dt,
        values,
        perron_coordinate,
    })
}

/// Squared-Bessel dimension `4b/c` of the scalar limit.
pub fn besq_dimension(lc: &LimitCoefficients) -> Result<f64, SdeError> {
    if lc.c <= 0.0 {
        return Err(SdeError::UndefinedDimension);
    }
    Ok(4.0 * lc.b / lc.c)
}

/// Writes a vector path as CSV `(t, value components)`.
pub fn write_path_csv<W: std::io::Write>(writer: &mut W, path: &SdePath) -> std::io::Result<()> {
    let p = path.values.first().map(|v| v.len()).unwrap_or(0);
    let mut header = vec!["t".to_string()];
    for i in 1..=p {
        header.push(format!("value_{i}"));
    }
    writeln!(writer, "{}", header.join(","))?;
    for (index, value) in path.values.iter().enumerate() {
        let mut row = vec![format!("{}", path.time(index))];
        row.extend(value.iter().map(|x| format!("{x}")));
        writeln!(writer, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes a scalar path as CSV `(t, value)`.
pub fn write_scalar_path_csv<W: std::io::Write>(
    writer: &mut W,
    path: &ScalarSdePath,
) -> std::io::Result<()> {
    writeln!(writer, "t,value")?;
    for (index, value) in path.values.iter().enumerate() {
        writeln!(writer, "{},{}", path.time(index), value)?;
    }
    Ok(())
}
