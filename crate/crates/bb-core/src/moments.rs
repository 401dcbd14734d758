//! Exact first and second moments of the branching recursion, an
//! independent enumeration oracle for tiny models, and growth diagnostics.
//!
//! The mean solves `E X_k = m_ξ E X_{k-1} + m_ε`. The variance admits the
//! closed form
//!
//! ```text
//! Var X_k = Σ_{j=0}^{k-1} m^j [V_ε + (m^{k-j-1} μ₀) ⊙ V_ξ] (mᵀ)^j
//!         + m^k Var X₀ (mᵀ)^k
//!         + Σ_{j=0}^{k-2} m^j [(Σ_{ℓ=0}^{k-j-2} m^ℓ m_ε) ⊙ V_ξ] (mᵀ)^j
//! ```
//!
//! (empty sums are zero) and equivalently the one-step recursion
//! `Var X_k = m Var X_{k-1} mᵀ + V_ε + (E X_{k-1}) ⊙ V_ξ`. Both routes are
//! always evaluated and compared; disagreement indicates a transcription
//! bug, not a data problem, and is escalated as an internal error.

use crate::model::{BranchingModel, DiscreteLaw, ModelError};
use crate::stats::compensated_sum;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use thiserror::Error;

/// Agreement tolerance between the closed-form variance and its recursion.
pub const ROUTE_TOL: f64 = 1e-8;
/// Default atom cap for the enumeration oracle.
pub const DEFAULT_ENUMERATION_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum MomentsError {
    #[error("vector has length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error(
        "variance closed form and recursion disagree at k={k} by {diff:e}; \
         this is an internal formula error"
    )]
    RouteDisagreement { k: usize, diff: f64 },
    #[error("enumeration state space exceeded cap of {cap} atoms")]
    StateSpaceBlowup { cap: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Simulation(#[from] crate::simulator::SimulatorError),
}

/// `E X_k` from `E X_0 = mean0`, evaluated by the one-step recursion.
pub fn exact_mean(
    model: &BranchingModel,
    mean0: &DVector<f64>,
    k: usize,
) -> Result<DVector<f64>, MomentsError> {
    check_len(model, mean0.len())?;
    let mut mean = mean0.clone();
    for _ in 0..k {
        mean = model.mean_matrix() * mean + model.immigration_mean();
    }
    Ok(mean)
}

/// All means `E X_0 .. E X_k` along the recursion.
pub fn exact_mean_path(
    model: &BranchingModel,
    mean0: &DVector<f64>,
    k: usize,
) -> Result<Vec<DVector<f64>>, MomentsError> {
    check_len(model, mean0.len())?;
    let mut path = Vec::with_capacity(k + 1);
    path.push(mean0.clone());
    for _ in 0..k {
        let next = model.mean_matrix() * path.last().unwrap() + model.immigration_mean();
        path.push(next);
    }
    Ok(path)
}

/// `Var X_k`, checked against the one-step recursion.
pub fn exact_variance(
    model: &BranchingModel,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    k: usize,
) -> Result<DMatrix<f64>, MomentsError> {
    let (closed, recursion) = exact_variance_routes(model, mean0, cov0, k)?;
    let diff = (&closed - &recursion).amax();
    if diff > ROUTE_TOL {
        return Err(MomentsError::RouteDisagreement { k, diff });
    }
    Ok(closed)
}

/// Both evaluation routes for `Var X_k`: the three-term closed form and the
/// one-step recursion. Exposed so tests can compare them directly.
pub fn exact_variance_routes(
    model: &BranchingModel,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    k: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>), MomentsError> {
    check_len(model, mean0.len())?;
    check_len(model, cov0.nrows())?;
    check_len(model, cov0.ncols())?;
    let p = model.num_types();
    let m = model.mean_matrix();

    // Powers m^0 .. m^k and prefix sums Σ_{ℓ≤t} m^ℓ m_ε.
    let mut powers = Vec::with_capacity(k + 1);
    powers.push(DMatrix::<f64>::identity(p, p));
    for j in 1..=k {
        powers.push(&powers[j - 1] * m);
    }
    let mut drift_prefix = Vec::with_capacity(k + 1);
    drift_prefix.push(model.immigration_mean().clone());
    for t in 1..=k {
        drift_prefix.push(&drift_prefix[t - 1] + &powers[t] * model.immigration_mean());
    }

    let mut closed = DMatrix::zeros(p, p);
    for j in 0..k {
        let weighted_mean = &powers[k - j - 1] * mean0;
        let inner = model.immigration_covariance()
            + model.mixed_variance_signed(&weighted_mean)?;
        closed += &powers[j] * inner * powers[j].transpose();
    }
    closed += &powers[k] * cov0 * powers[k].transpose();
    for j in 0..k.saturating_sub(1) {
        let inner = model.mixed_variance_signed(&drift_prefix[k - j - 2])?;
        closed += &powers[j] * inner * powers[j].transpose();
    }

    let means = exact_mean_path(model, mean0, k)?;
    let mut recursion = cov0.clone();
    for km1 in 0..k {
        recursion = m * recursion * m.transpose()
            + model.immigration_covariance()
            + model.mixed_variance_signed(&means[km1])?;
    }
    Ok((closed, recursion))
}

/// Conditional second moment of one martingale increment:
/// `E[M_k M_kᵀ | X_{k-1} = x] = V_ε + x ⊙ V_ξ` for `x = mean_prev`.
pub fn martingale_second_moment(
    model: &BranchingModel,
    mean_prev: &DVector<f64>,
) -> Result<DMatrix<f64>, MomentsError> {
    check_len(model, mean_prev.len())?;
    Ok(model.immigration_covariance() + model.mixed_variance(mean_prev)?)
}

/// Exact distribution of `X_k`, as a map from states to probabilities.
#[derive(Debug, Clone)]
pub struct Enumeration {
    pub pmf: BTreeMap<Vec<u64>, f64>,
    /// Whether a Poisson law was truncated (and renormalized) to make the
    /// enumeration finite.
    pub truncated: bool,
}

impl Enumeration {
    pub fn mean(&self) -> DVector<f64> {
        let p = self.dim();
        DVector::from_fn(p, |i, _| {
            compensated_sum(
                self.pmf
                    .iter()
                    .map(|(state, prob)| prob * state[i] as f64),
            )
        })
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let p = self.dim();
        let mean = self.mean();
        DMatrix::from_fn(p, p, |i, j| {
            compensated_sum(self.pmf.iter().map(|(state, prob)| {
                prob * (state[i] as f64 - mean[i]) * (state[j] as f64 - mean[j])
            }))
        })
    }

    pub fn total_mass(&self) -> f64 {
        compensated_sum(self.pmf.values().copied())
    }

    fn dim(&self) -> usize {
        self.pmf.keys().next().map(|s| s.len()).unwrap_or(0)
    }
}

type Pmf = BTreeMap<Vec<u64>, f64>;

fn convolve(a: &Pmf, b: &Pmf, cap: usize) -> Result<Pmf, MomentsError> {
    let mut out = Pmf::new();
    for (x, px) in a {
        for (y, py) in b {
            let sum: Vec<u64> = x.iter().zip(y).map(|(u, v)| u + v).collect();
            *out.entry(sum).or_insert(0.0) += px * py;
            if out.len() > cap {
                return Err(MomentsError::StateSpaceBlowup { cap });
            }
        }
    }
    Ok(out)
}

fn law_pmf(law: &DiscreteLaw) -> Pmf {
    match law {
        DiscreteLaw::FiniteSupport { atoms } => {
            let mut pmf = Pmf::new();
            for (vector, prob) in atoms {
                *pmf.entry(vector.clone()).or_insert(0.0) += prob;
            }
            pmf
        }
        DiscreteLaw::IndependentPoisson { .. } => unreachable!("model is truncated first"),
    }
}

/// Exact law of `X_k` started from `x0`, by k-fold convolution over the
/// branching recursion. Poisson laws are truncated to finite support first
/// (flagged in the result). Errors out if the state space exceeds `cap`.
pub fn enumerate_distribution(
    model: &BranchingModel,
    x0: &[u64],
    k: usize,
    cap: usize,
) -> Result<Enumeration, MomentsError> {
    check_len(model, x0.len())?;
    let (finite, truncated) = model.truncated();
    let offspring_pmfs: Vec<Pmf> = finite.offspring_laws().iter().map(law_pmf).collect();
    let immigration_pmf = law_pmf(finite.immigration_law());
    let p = finite.num_types();
    let zero_state: Vec<u64> = vec![0; p];

    // Cache of i.i.d. convolution powers per (type, parent count).
    let mut power_cache: HashMap<(usize, u64), Pmf> = HashMap::new();
    fn law_power(
        cache: &mut HashMap<(usize, u64), Pmf>,
        base: &[Pmf],
        zero: &[u64],
        type_index: usize,
        count: u64,
        cap: usize,
    ) -> Result<Pmf, MomentsError> {
        if count == 0 {
            let mut pmf = Pmf::new();
            pmf.insert(zero.to_vec(), 1.0);
            return Ok(pmf);
        }
        if count == 1 {
            return Ok(base[type_index].clone());
        }
        if let Some(hit) = cache.get(&(type_index, count)) {
            return Ok(hit.clone());
        }
        let half = law_power(cache, base, zero, type_index, count / 2, cap)?;
        let mut result = convolve(&half, &half, cap)?;
        if count % 2 == 1 {
            result = convolve(&result, &base[type_index], cap)?;
        }
        cache.insert((type_index, count), result.clone());
        Ok(result)
    }

    let mut pmf = Pmf::new();
    pmf.insert(x0.to_vec(), 1.0);
    for _ in 0..k {
        let mut next = Pmf::new();
        for (state, prob) in &pmf {
            let mut conditional = Pmf::new();
            conditional.insert(zero_state.clone(), 1.0);
            for (i, &parents) in state.iter().enumerate() {
                let offspring_total = law_power(
                    &mut power_cache,
                    &offspring_pmfs,
                    &zero_state,
                    i,
                    parents,
                    cap,
                )?;
                conditional = convolve(&conditional, &offspring_total, cap)?;
            }
            conditional = convolve(&conditional, &immigration_pmf, cap)?;
            for (y, q) in conditional {
                *next.entry(y).or_insert(0.0) += prob * q;
            }
            if next.len() > cap {
                return Err(MomentsError::StateSpaceBlowup { cap });
            }
        }
        pmf = next;
    }
    Ok(Enumeration { pmf, truncated })
}

/// One row of the growth-order diagnostic table.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthRow {
    pub n: u64,
    pub k: usize,
    /// `‖E X_k‖ / (k + n)`, exact.
    pub mean_ratio: f64,
    /// Sampled `E ‖M_k‖⁴ / (k + n)²`.
    pub fourth_moment_ratio: f64,
    /// Normal-approximation CI half-width of the sampled ratio.
    pub fourth_moment_ci_half: f64,
}

/// Growth-order diagnostics: the lemma-level bounds say
/// `E‖X_k‖ = O(k + n)` and `E‖M_k‖⁴ = O((k + n)²)`; the table reports the
/// corresponding ratios over a `(n, k)` grid so their boundedness can be
/// inspected. Purely diagnostic: nothing is asserted here.
#[derive(Debug, Clone, Serialize)]
pub struct GrowthDiagnostics {
    pub rows: Vec<GrowthRow>,
    pub max_mean_ratio: f64,
    pub max_fourth_moment_ratio: f64,
}

pub fn growth_diagnostics(
    model: &BranchingModel,
    n_list: &[u64],
    horizon: usize,
    replicates: usize,
    master_seed: u64,
) -> Result<GrowthDiagnostics, MomentsError> {
    use crate::rng::StreamDomain;
    use crate::simulator;

    let p = model.num_types();
    let zero = DVector::zeros(p);
    let mut k_grid = Vec::new();
    let mut k = 1usize;
    while k < horizon {
        k_grid.push(k);
        k *= 2;
    }
    k_grid.push(horizon);

    let mut rows = Vec::new();
    let mut max_mean_ratio = 0.0f64;
    let mut max_m4_ratio = 0.0f64;
    for (cell, &n) in n_list.iter().enumerate() {
        let ensemble = simulator::simulate_ensemble(
            model,
            &vec![0; p],
            horizon,
            master_seed,
            StreamDomain::GrowthDiagnostics,
            cell as u32,
            replicates,
        )?;
        let martingales: Vec<_> = ensemble
            .iter()
            .map(|traj| simulator::martingale_path(traj, model).expect("horizon >= 1"))
            .collect();

        let means = exact_mean_path(model, &zero, horizon)?;
        for &k in &k_grid {
            let mean_ratio = means[k].norm() / (k as f64 + n as f64);
            let samples: Vec<f64> = martingales
                .iter()
                .map(|mp| {
                    let norm2 = mp.diffs[k - 1].norm_squared();
                    norm2 * norm2 / ((k as f64 + n as f64) * (k as f64 + n as f64))
                })
                .collect();
            let (ratio, se) = crate::stats::mean_and_se(&samples);
            max_mean_ratio = max_mean_ratio.max(mean_ratio);
            max_m4_ratio = max_m4_ratio.max(ratio);
            rows.push(GrowthRow {
                n,
                k,
                mean_ratio,
                fourth_moment_ratio: ratio,
                fourth_moment_ci_half: 1.96 * se,
            });
        }
    }
    Ok(GrowthDiagnostics {
        rows,
        max_mean_ratio,
        max_fourth_moment_ratio: max_m4_ratio,
    })
}

/// Writes the moment table `(k, mean components, covariance entries)` as
/// RFC-4180 CSV with a header row.
pub fn write_moment_table_csv<W: std::io::Write>(
    writer: &mut W,
    model: &BranchingModel,
    mean0: &DVector<f64>,
    cov0: &DMatrix<f64>,
    k_max: usize,
) -> Result<(), std::io::Error> {
    let p = model.num_types();
    let mut header = vec!["k".to_string()];
    for i in 1..=p {
        header.push(format!("mean_{i}"));
    }
    for i in 1..=p {
        for j in 1..=p {
            header.push(format!("cov_{i}_{j}"));
        }
    }
    writeln!(writer, "{}", header.join(","))?;
    for k in 0..=k_max {
        let mean = exact_mean(model, mean0, k).map_err(io_invalid)?;
        let cov = exact_variance(model, mean0, cov0, k).map_err(io_invalid)?;
        let mut row = vec![k.to_string()];
        row.extend(mean.iter().map(|x| format!("{x}")));
        for i in 0..p {
            for j in 0..p {
                row.push(format!("{}", cov[(i, j)]));
            }
        }
        writeln!(writer, "{}", row.join(","))?;
    }
    Ok(())
}

fn io_invalid(err: MomentsError) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, err.to_string())
}

fn check_len(model: &BranchingModel, got: usize) -> Result<(), MomentsError> {
    if got != model.num_types() {
        return Err(MomentsError::ShapeMismatch {
            expected: model.num_types(),
            got,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use approx::assert_abs_diff_eq;

    fn zero1() -> DVector<f64> {
        DVector::zeros(1)
    }

    fn zero2() -> DVector<f64> {
        DVector::zeros(2)
    }

    #[test]
    fn mean_base_case_is_identity() {
        let model = presets::critical_two_type();
        let mean0 = DVector::from_vec(vec![3.0, 5.0]);
        assert_eq!(exact_mean(&model, &mean0, 0).unwrap(), mean0);
    }

    #[test]
    fn single_type_mean_grows_linearly() {
        let model = presets::critical_single_type();
        let mean = exact_mean(&model, &zero1(), 3).unwrap();
        assert_abs_diff_eq!(mean[0], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn two_type_mean_after_two_steps() {
        let model = presets::critical_two_type();
        let mean = exact_mean(&model, &zero2(), 2).unwrap();
        assert_abs_diff_eq!(mean[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn variance_base_case_is_identity() {
        let model = presets::critical_two_type();
        let cov0 = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let var = exact_variance(&model, &zero2(), &cov0, 0).unwrap();
        assert_eq!(var, cov0);
    }

    #[test]
    fn single_type_variance_closed_form() {
        // V_ε = V_ξ = m_ε = 1 gives Var X_k = k + k(k-1)/2.
        let model = presets::critical_single_type();
        let var = exact_variance(&model, &zero1(), &DMatrix::zeros(1, 1), 3).unwrap();
        assert_abs_diff_eq!(var[(0, 0)], 6.0, epsilon = 1e-12);
        let var10 = exact_variance(&model, &zero1(), &DMatrix::zeros(1, 1), 10).unwrap();
        assert_abs_diff_eq!(var10[(0, 0)], 10.0 + 45.0, epsilon = 1e-10);
    }

    #[test]
    fn variance_routes_agree_on_reference_models() {
        for (model, p) in [
            (presets::critical_single_type(), 1),
            (presets::critical_two_type(), 2),
        ] {
            let mean0 = DVector::zeros(p);
            let cov0 = DMatrix::zeros(p, p);
            for k in 0..=100 {
                let (closed, recursion) =
                    exact_variance_routes(&model, &mean0, &cov0, k).unwrap();
                assert!(
                    (&closed - &recursion).amax() <= 1e-8,
                    "routes disagree at k={k}"
                );
            }
        }
    }

    #[test]
    fn variance_is_symmetric_psd() {
        let model = presets::critical_two_type();
        let var = exact_variance(&model, &zero2(), &DMatrix::zeros(2, 2), 20).unwrap();
        assert!((&var - var.transpose()).amax() <= 1e-10);
        let eigen = var.clone().symmetric_eigen();
        assert!(eigen.eigenvalues.iter().all(|&l| l >= -1e-10));
    }

    #[test]
    fn martingale_second_moment_examples() {
        let model1 = presets::critical_single_type();
        let m = martingale_second_moment(&model1, &zero1()).unwrap();
        assert_eq!(m, *model1.immigration_covariance());
        let m =
            martingale_second_moment(&model1, &DVector::from_vec(vec![2.0])).unwrap();
        assert_abs_diff_eq!(m[(0, 0)], 3.0, epsilon = 1e-12);

        let model2 = presets::critical_two_type();
        let u = DVector::from_vec(vec![1.0 / 3.0, 2.0 / 3.0]);
        let m = martingale_second_moment(&model2, &u).unwrap();
        let expected = model2.immigration_covariance()
            + DMatrix::from_row_slice(2, 2, &[1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 2.0]);
        assert!((&m - &expected).amax() <= 1e-12);
    }

    #[test]
    fn enumeration_base_cases() {
        let model = presets::critical_two_type();
        let run = enumerate_distribution(&model, &[4, 7], 0, 1000).unwrap();
        assert_eq!(run.pmf.len(), 1);
        assert_abs_diff_eq!(run.pmf[&vec![4u64, 7]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_reproduces_offspring_law() {
        // Without immigration and one parent, one step is the offspring law.
        let model = crate::model::BranchingModel::new(
            vec![DiscreteLaw::FiniteSupport {
                atoms: vec![(vec![0], 0.5), (vec![2], 0.5)],
            }],
            DiscreteLaw::point_mass(vec![0]),
        )
        .unwrap();
        let run = enumerate_distribution(&model, &[1], 1, 1000).unwrap();
        assert!(!run.truncated);
        assert_abs_diff_eq!(run.pmf[&vec![0u64]], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(run.pmf[&vec![2u64]], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn enumeration_matches_closed_forms_on_two_type_model() {
        let (variant, truncated) = presets::critical_two_type().truncated();
        assert!(truncated);
        for k in 0..=4 {
            let run = enumerate_distribution(&variant, &[1, 0], k, 1_000_000).unwrap();
            assert_abs_diff_eq!(run.total_mass(), 1.0, epsilon = 1e-12);
            let mean0 = DVector::from_vec(vec![1.0, 0.0]);
            let expected_mean = exact_mean(&variant, &mean0, k).unwrap();
            let expected_cov =
                exact_variance(&variant, &mean0, &DMatrix::zeros(2, 2), k).unwrap();
            assert!((run.mean() - expected_mean).amax() <= 1e-12, "mean at k={k}");
            assert!(
                (run.covariance() - expected_cov).amax() <= 1e-12,
                "covariance at k={k}"
            );
        }
    }

    #[test]
    fn enumeration_cap_is_enforced() {
        let model = presets::critical_two_type();
        assert!(matches!(
            enumerate_distribution(&model, &[5, 5], 4, 10),
            Err(MomentsError::StateSpaceBlowup { .. })
        ));
    }

    #[test]
    fn growth_diagnostics_single_type() {
        let model = presets::critical_single_type();
        let table = growth_diagnostics(&model, &[50, 100], 64, 400, 1234).unwrap();
        // E X_k = k exactly, so the mean ratio is k/(k+n) < 1.
        assert!(table.max_mean_ratio <= 1.0 + 1e-12);
        assert!(table.max_fourth_moment_ratio.is_finite());
        assert!(!table.rows.is_empty());
    }
}
