//! Small statistical toolbox: two-sample Kolmogorov–Smirnov test, sample
//! summaries and compensated summation.

/// Result of a two-sample Kolmogorov–Smirnov test.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct KsResult {
    /// Maximum gap between the two empirical CDFs.
    pub statistic: f64,
    /// Asymptotic two-sided p-value.
    pub p_value: f64,
}

/// Two-sample KS test with the asymptotic Kolmogorov p-value
/// (Numerical Recipes small-sample correction on the effective size).
pub fn ks_two_sample(xs: &[f64], ys: &[f64]) -> KsResult {
    assert!(!xs.is_empty() && !ys.is_empty(), "empty KS sample");
    let mut xs = xs.to_vec();
    let mut ys = ys.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ys.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let nx = xs.len() as f64;
    let ny = ys.len() as f64;
    let (mut i, mut j) = (0usize, 0usize);
    let mut statistic: f64 = 0.0;
    // Walk the pooled distinct values, advancing every tie group at once,
    // and evaluate the CDF gap just after each value.
    while i < xs.len() || j < ys.len() {
        let t = match (xs.get(i), ys.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        while i < xs.len() && xs[i] == t {
            i += 1;
        }
        while j < ys.len() && ys[j] == t {
            j += 1;
        }
        let gap = (i as f64 / nx - j as f64 / ny).abs();
        statistic = statistic.max(gap);
    }

    let effective = (nx * ny / (nx + ny)).sqrt();
    let lambda = (effective + 0.12 + 0.11 / effective) * statistic;
    KsResult {
        statistic,
        p_value: kolmogorov_sf(lambda),
    }
}

/// Survival function of the Kolmogorov distribution,
/// `Q(λ) = 2 Σ_{j≥1} (−1)^{j−1} exp(−2 j² λ²)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = (-2.0 * (j as f64).powi(2) * lambda * lambda).exp();
        sum += sign * term;
        sign = -sign;
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Neumaier compensated sum.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut compensation = 0.0f64;
    for value in values {
        let t = sum + value;
        if sum.abs() >= value.abs() {
            compensation += (sum - t) + value;
        } else {
            compensation += (value - t) + sum;
        }
        sum = t;
    }
    sum + compensation
}

pub fn mean(values: &[f64]) -> f64 {
    compensated_sum(values.iter().copied()) / values.len() as f64
}

/// Sample mean together with its standard error.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let ss = compensated_sum(values.iter().map(|v| (v - m) * (v - m)));
    let variance = ss / (n - 1.0);
    (m, (variance / n).sqrt())
}

pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    let n = values.len() as f64;
    compensated_sum(values.iter().map(|v| (v - m) * (v - m))) / (n - 1.0)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile (type 7) of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "empty sample");
    assert!((0.0..=1.0).contains(&q), "quantile out of range");
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let position = q * (sorted.len() - 1) as f64;
    let lo = position.floor() as usize;
    let hi = position.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let w = position - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    }
}
