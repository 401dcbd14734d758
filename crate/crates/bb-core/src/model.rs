//! Branching-model definition: offspring and immigration laws, their exact
//! moments, criticality classification and the limit-SDE coefficients.
//!
//! Conventions follow the process recursion
//! `X_k = Σ_i Σ_{j ≤ X_{k-1,i}} ξ_{k,j,i} + ε_k`: column `i` of the mean
//! matrix `m_ξ` is the mean offspring vector of one type-`i` parent (note
//! that some texts use the transpose), `V_{ξᵢ}` is the covariance of the
//! type-`i` offspring law and `(m_ε, V_ε)` are the immigration moments.

use crate::config::{LawSpec, ModelConfig};
use crate::perron::{self, PerronData, PerronError};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("finite-support probabilities sum to {sum}, expected 1")]
    ProbabilityMass { sum: f64 },
    #[error("negative or non-finite probability {prob}")]
    InvalidProbability { prob: f64 },
    #[error("negative or non-finite Poisson rate {rate}")]
    InvalidRate { rate: f64 },
    #[error("law dimension {got} does not match model dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("expected {expected} offspring laws, got {got}")]
    OffspringCount { expected: usize, got: usize },
    #[error("finite-support law needs at least one atom")]
    EmptySupport,
    #[error("weight vector has length {got}, expected {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("negative mixture weight {weight} at index {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("offspring mean matrix is not primitive")]
    NotPrimitive(#[source] PerronError),
    #[error("model is not critical: spectral radius {rho}")]
    NotCritical { rho: f64 },
}

/// Offspring or immigration distribution on `ℤ₊^p`.
///
/// Both kinds have closed-form moments of every order, which keeps the
/// analytic mean/variance machinery exact.
#[derive(Debug, Clone, PartialEq)]
pub enum DiscreteLaw {
    /// Finitely many atoms with their probabilities.
    FiniteSupport { atoms: Vec<(Vec<u64>, f64)> },
    /// Independent Poisson coordinates with the given rates.
    IndependentPoisson { rates: Vec<f64> },
}

/// Tolerance on the total probability mass of a finite-support law.
const MASS_TOL: f64 = 1e-12;
/// Mass retained when truncating a Poisson law to finite support.
pub const POISSON_TRUNCATION_MASS: f64 = 1.0 - 1e-12;

impl DiscreteLaw {
    pub fn point_mass(vector: Vec<u64>) -> Self {
        DiscreteLaw::FiniteSupport {
            atoms: vec![(vector, 1.0)],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            DiscreteLaw::FiniteSupport { atoms } => {
                atoms.first().map(|(v, _)| v.len()).unwrap_or(0)
            }
            DiscreteLaw::IndependentPoisson { rates } => rates.len(),
        }
    }

    pub fn validate(&self, expected_dim: usize) -> Result<(), ModelError> {
        match self {
            DiscreteLaw::FiniteSupport { atoms } => {
                if atoms.is_empty() {
                    return Err(ModelError::EmptySupport);
                }
                for (vector, prob) in atoms {
                    if vector.len() != expected_dim {
                        return Err(ModelError::DimensionMismatch {
                            expected: expected_dim,
                            got: vector.len(),
                        });
                    }
                    if !prob.is_finite() || *prob < 0.0 {
                        return Err(ModelError::InvalidProbability { prob: *prob });
                    }
                }
                let sum: f64 = atoms.iter().map(|(_, p)| *p).sum();
                if (sum - 1.0).abs() > MASS_TOL {
                    return Err(ModelError::ProbabilityMass { sum });
                }
            }
            DiscreteLaw::IndependentPoisson { rates } => {
                if rates.len() != expected_dim {
                    return Err(ModelError::DimensionMismatch {
                        expected: expected_dim,
                        got: rates.len(),
                    });
                }
                for rate in rates {
                    if !rate.is_finite() || *rate < 0.0 {
                        return Err(ModelError::InvalidRate { rate: *rate });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> DVector<f64> {
        match self {
            DiscreteLaw::FiniteSupport { atoms } => {
                let dim = self.dim();
                let mut mean = DVector::zeros(dim);
                for (vector, prob) in atoms {
                    for (i, &count) in vector.iter().enumerate() {
                        mean[i] += prob * count as f64;
                    }
                }
                mean
            }
            DiscreteLaw::IndependentPoisson { rates } => {
                DVector::from_iterator(rates.len(), rates.iter().copied())
            }
        }
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        match self {
            DiscreteLaw::FiniteSupport { atoms } => {
                let dim = self.dim();
                let mean = self.mean();
                let mut cov = DMatrix::zeros(dim, dim);
                for (vector, prob) in atoms {
                    let centered =
                        DVector::from_iterator(dim, vector.iter().map(|&c| c as f64)) - &mean;
                    cov += *prob * &centered * centered.transpose();
                }
                cov
            }
            DiscreteLaw::IndependentPoisson { rates } => {
                DMatrix::from_diagonal(&DVector::from_iterator(rates.len(), rates.iter().copied()))
            }
        }
    }

    /// Truncates a Poisson law to a finite-support one retaining at least
    /// [`POISSON_TRUNCATION_MASS`] of the joint mass (then renormalized).
    /// Returns the finite law and whether any mass was actually dropped.
    /// Finite-support laws pass through untouched.
    pub fn truncated(&self) -> (DiscreteLaw, bool) {
        match self {
            DiscreteLaw::FiniteSupport { .. } => (self.clone(), false),
            DiscreteLaw::IndependentPoisson { rates } => {
                let active = rates.iter().filter(|&&r| r > 0.0).count().max(1);
                let per_coord_mass = POISSON_TRUNCATION_MASS.powf(1.0 / active as f64);
                let mut truncated_any = false;
                let mut coord_pmfs: Vec<Vec<f64>> = Vec::with_capacity(rates.len());
                for &rate in rates {
                    if rate == 0.0 {
                        coord_pmfs.push(vec![1.0]);
                        continue;
                    }
                    truncated_any = true;
                    let mut pmf = Vec::new();
                    let mut term = (-rate).exp();
                    let mut cumulative = 0.0;
                    let mut k = 0u64;
                    while cumulative < per_coord_mass {
                        pmf.push(term);
                        cumulative += term;
                        k += 1;
                        term *= rate / k as f64;
                    }
                    pmf.push(term);
                    coord_pmfs.push(pmf);
                }
                // Cartesian product of the per-coordinate supports.
                let mut atoms: Vec<(Vec<u64>, f64)> = vec![(vec![], 1.0)];
                for pmf in &coord_pmfs {
                    let mut next = Vec::with_capacity(atoms.len() * pmf.len());
                    for (prefix, prob) in &atoms {
                        for (count, &mass) in pmf.iter().enumerate() {
                            let mut vector = prefix.clone();
                            vector.push(count as u64);
                            next.push((vector, prob * mass));
                        }
                    }
                    atoms = next;
                }
                let total: f64 = atoms.iter().map(|(_, p)| *p).sum();
                for (_, prob) in &mut atoms {
                    *prob /= total;
                }
                (DiscreteLaw::FiniteSupport { atoms }, truncated_any)
            }
        }
    }
}

impl From<&LawSpec> for DiscreteLaw {
    fn from(spec: &LawSpec) -> Self {
        match spec {
            LawSpec::FiniteSupport { atoms } => DiscreteLaw::FiniteSupport {
                atoms: atoms
                    .iter()
                    .map(|atom| (atom.vector.clone(), atom.prob))
                    .collect(),
            },
            LawSpec::IndependentPoisson { rates } => DiscreteLaw::IndependentPoisson {
                rates: rates.clone(),
            },
        }
    }
}

/// A p-type branching model with immigration and all derived moment objects.
#[derive(Debug, Clone)]
pub struct BranchingModel {
    p: usize,
    offspring: Vec<DiscreteLaw>,
    immigration: DiscreteLaw,
    m_xi: DMatrix<f64>,
    v_xi: Vec<DMatrix<f64>>,
    m_eps: DVector<f64>,
    v_eps: DMatrix<f64>,
}

impl BranchingModel {
    pub fn new(offspring: Vec<DiscreteLaw>, immigration: DiscreteLaw) -> Result<Self, ModelError> {
        let p = offspring.len();
        if p == 0 {
            return Err(ModelError::OffspringCount {
                expected: 1,
                got: 0,
            });
        }
        for law in &offspring {
            law.validate(p)?;
        }
        immigration.validate(p)?;

        let mut m_xi = DMatrix::zeros(p, p);
        let mut v_xi = Vec::with_capacity(p);
        for (i, law) in offspring.iter().enumerate() {
            m_xi.set_column(i, &law.mean());
            v_xi.push(law.covariance());
        }
        Ok(BranchingModel {
            p,
            m_eps: immigration.mean(),
            v_eps: immigration.covariance(),
            offspring,
            immigration,
            m_xi,
            v_xi,
        })
    }

    pub fn num_types(&self) -> usize {
        self.p
    }

    pub fn offspring_laws(&self) -> &[DiscreteLaw] {
        &self.offspring
    }

    pub fn immigration_law(&self) -> &DiscreteLaw {
        &self.immigration
    }

    /// Offspring mean matrix; column `i` is the mean of offspring law `i`.
    pub fn mean_matrix(&self) -> &DMatrix<f64> {
        &self.m_xi
    }

    pub fn offspring_covariances(&self) -> &[DMatrix<f64>] {
        &self.v_xi
    }

    pub fn offspring_covariance(&self, parent_type: usize) -> &DMatrix<f64> {
        &self.v_xi[parent_type]
    }

    pub fn immigration_mean(&self) -> &DVector<f64> {
        &self.m_eps
    }

    pub fn immigration_covariance(&self) -> &DMatrix<f64> {
        &self.v_eps
    }

    /// Mixture `α ⊙ V_ξ = Σᵢ αᵢ V_{ξᵢ}` of the offspring covariance
    /// matrices; symmetric PSD whenever `α ≥ 0`.
    pub fn mixed_variance(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        for (index, &weight) in alpha.iter().enumerate() {
            if weight < 0.0 {
                return Err(ModelError::NegativeWeight { index, weight });
            }
        }
        self.mixed_variance_signed(alpha)
    }

    /// Like [`Self::mixed_variance`] but admits negative weights; intended
    /// for signed diagnostics only, where PSD-ness is not guaranteed.
    pub fn mixed_variance_signed(&self, alpha: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
        if alpha.len() != self.p {
            return Err(ModelError::LengthMismatch {
                expected: self.p,
                got: alpha.len(),
            });
        }
        let mut out = DMatrix::zeros(self.p, self.p);
        for (weight, v) in alpha.iter().zip(&self.v_xi) {
            if *weight != 0.0 {
                out += *weight * v;
            }
        }
        Ok(out)
    }

    /// Replaces any Poisson law by its finite truncation; used by the exact
    /// enumeration oracle. The flag reports whether truncation occurred.
    pub fn truncated(&self) -> (BranchingModel, bool) {
        let mut flagged = false;
        let offspring = self
            .offspring
            .iter()
            .map(|law| {
                let (finite, t) = law.truncated();
                flagged |= t;
                finite
            })
            .collect();
        let (immigration, t) = self.immigration.truncated();
        flagged |= t;
        let model = BranchingModel::new(offspring, immigration)
            .expect("truncation preserves validity");
        (model, flagged)
    }

    /// Cheap content fingerprint used to tag trajectories with the model
    /// that generated them.
    pub fn fingerprint(&self) -> u64 {
        use crate::rng::splitmix64;
        let mut acc = splitmix64(self.p as u64);
        let mix_f64 = |state: &mut u64, value: f64| {
            *state = splitmix64(*state ^ value.to_bits());
        };
        for law in self.offspring.iter().chain(std::iter::once(&self.immigration)) {
            match law {
                DiscreteLaw::FiniteSupport { atoms } => {
                    for (vector, prob) in atoms {
                        for &count in vector {
                            acc = splitmix64(acc ^ count);
                        }
                        mix_f64(&mut acc, *prob);
                    }
                }
                DiscreteLaw::IndependentPoisson { rates } => {
                    for &rate in rates {
                        mix_f64(&mut acc, rate);
                    }
                }
            }
        }
        acc
    }
}

/// Builds a model from a parsed config, deriving all moment objects
/// analytically.
pub fn build_model(config: &ModelConfig) -> Result<BranchingModel, ModelError> {
    if config.offspring.len() != config.p {
        return Err(ModelError::OffspringCount {
            expected: config.p,
            got: config.offspring.len(),
        });
    }
    let offspring: Vec<DiscreteLaw> = config.offspring.iter().map(DiscreteLaw::from).collect();
    let immigration = DiscreteLaw::from(&config.immigration);
    let model = BranchingModel::new(offspring, immigration)?;
    if model.num_types() != config.p {
        return Err(ModelError::DimensionMismatch {
            expected: config.p,
            got: model.num_types(),
        });
    }
    Ok(model)
}

/// Criticality classes by the spectral radius of the offspring mean matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Criticality {
    Subcritical,
    Critical,
    Supercritical,
}

/// Band half-width around `ρ = 1` classified as critical; the radius is a
/// numerical quantity even when it equals 1 analytically.
pub const CRITICALITY_TOL: f64 = 1e-9;

impl Criticality {
    pub fn from_rho(rho: f64) -> Self {
        if (rho - 1.0).abs() <= CRITICALITY_TOL {
            Criticality::Critical
        } else if rho < 1.0 {
            Criticality::Subcritical
        } else {
            Criticality::Supercritical
        }
    }
}

/// Classifies the model by the spectral radius of its mean matrix.
pub fn classify_criticality(model: &BranchingModel) -> Result<(Criticality, f64), ModelError> {
    let pd = perron::perron_data(model.mean_matrix()).map_err(ModelError::NotPrimitive)?;
    Ok((Criticality::from_rho(pd.rho), pd.rho))
}

/// Drift and diffusion coefficients of the scalar limit equation
/// `dX = b dt + √(c X⁺) dW`, together with the squared-Bessel dimension
/// `4b/c` (undefined when `c = 0`).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LimitCoefficients {
    pub b: f64,
    pub c: f64,
    pub delta: Option<f64>,
}

/// Computes `b = vᵀ m_ε` and `c = vᵀ (u ⊙ V_ξ) v` for a critical primitive
/// model. `c = 0` with `b > 0` is legal (deterministic drift limit) and
/// reported with `delta = None`.
pub fn limit_coefficients(
    model: &BranchingModel,
    pd: &PerronData,
) -> Result<LimitCoefficients, ModelError> {
    if Criticality::from_rho(pd.rho) != Criticality::Critical {
        return Err(ModelError::NotCritical { rho: pd.rho });
    }
    let b = pd.v.dot(model.immigration_mean());
    let mixture = model.mixed_variance(&pd.u)?;
    let c = (pd.v.transpose() * &mixture * &pd.v)[(0, 0)];
    let delta = (c > 0.0).then(|| 4.0 * b / c);
    Ok(LimitCoefficients { b, c, delta })
}
