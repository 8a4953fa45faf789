//! Log-space probability helpers.

/// `log Σ exp(v)`, returning `-inf` when every term is `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Exponentiates and normalizes log weights. `None` if all are `-inf`.
pub fn normalize_log(values: &[f64]) -> Option<Vec<f64>> {
    let lse = log_sum_exp(values);
    if !lse.is_finite() {
        return None;
    }
    let mut p: Vec<f64> = values.iter().map(|v| (v - lse).exp()).collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total);
    Some(p)
}
