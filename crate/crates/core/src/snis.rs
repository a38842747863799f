//! Self-normalized importance sampling primitives, all in log space.

/// `log Σ exp(x_i)`; `-∞` for an empty slice or all-`-∞` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// Importance weights normalized to sum to one, plus the log of the plain
/// importance-sampling partition estimate `Ẑ = (1/n) Σ w_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub weights: Vec<f64>,
    pub log_z: f64,
}

impl NormalizedWeights {
    /// `Σ w̃_i h_i`, where zero-weight terms contribute nothing even if `h_i` is
    /// infinite.
    pub fn mean(&self, values: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(values)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, h)| w * h)
            .sum()
    }

    /// Delta-method standard error of the ratio estimator `Σ w̃_i h_i`.
    pub fn std_error(&self, values: &[f64]) -> f64 {
        let mean = self.mean(values);
        self.weights
            .iter()
            .zip(values)
            .filter(|(w, _)| **w > 0.0)
            .map(|(w, h)| (w * (h - mean)).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Standard error of `Σ w̃_i h_i − log Ẑ` when `h` does not already carry
    /// the batch's `log Ẑ` uncertainty.
    pub fn std_error_less_log_z(&self, values: &[f64]) -> f64 {
        let mean = self.mean(values);
        let uniform = 1.0 / self.weights.len() as f64;
        self.weights
            .iter()
            .zip(values)
            .map(|(w, h)| {
                let centered = if *w > 0.0 { w * (h - mean) } else { 0.0 };
                (centered - (w - uniform)).powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Kish effective sample size `1 / Σ w̃_i²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// Normalizes log importance weights with a single log-sum-exp. Returns `None`
/// when every weight is zero (or the input is empty or contains NaN).
pub fn normalize_log_weights(log_w: &[f64]) -> Option<NormalizedWeights> {
    if log_w.is_empty() || log_w.iter().any(|x| x.is_nan()) {
        return None;
    }
    let lse = log_sum_exp(log_w);
    if !lse.is_finite() {
        return None;
    }
    let weights = log_w.iter().map(|&x| (x - lse).exp()).collect();
    Some(NormalizedWeights {
        weights,
        log_z: lse - (log_w.len() as f64).ln(),
    })
}
