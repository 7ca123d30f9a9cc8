//! Descriptive statistics for benchmark samples.
//!
//! Quartiles use linear interpolation between closest ranks: the `p`
//! quantile of sorted `x[0..n]` is `x[k] + (h - k)(x[k+1] - x[k])` with
//! `h = (n - 1)p`, `k = floor(h)`. Variance is the unbiased sample
//! variance (divisor `n - 1`, zero for a single sample). Whiskers are
//! `min(max, Q3 + 1.5 IQR)` and `max(min, Q1 - 1.5 IQR)`.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
}

/// Quantile `p` in `[0, 1]` of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let k = h.floor() as usize;
    match sorted.get(k + 1) {
        Some(&next) => sorted[k] + (h - k as f64) * (next - sorted[k]),
        None => sorted[k],
    }
}

impl Summary {
    /// `None` for an empty sample. NaNs are not permitted.
    pub fn of(samples: &[f64]) -> Option<Summary> {
        if samples.is_empty() {
            return None;
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("NaN in sample"));
        let n = sorted.len();
        let mean = sorted.iter().sum::<f64>() / n as f64;
        let variance = if n > 1 {
            sorted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let q1 = quantile_sorted(&sorted, 0.25);
        let median = quantile_sorted(&sorted, 0.5);
        let q3 = quantile_sorted(&sorted, 0.75);
        let (min, max) = (sorted[0], sorted[n - 1]);
        let iqr = q3 - q1;
        Some(Summary {
            count: n,
            mean,
            variance,
            min,
            q1,
            median,
            q3,
            max,
            lower_whisker: min.max(q1 - 1.5 * iqr),
            upper_whisker: max.min(q3 + 1.5 * iqr),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Least-squares line `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regression {
    pub intercept: f64,
    pub slope: f64,
    /// Root mean square of the residuals (divisor `n`).
    pub residual_rms: f64,
}

/// `None` if fewer than two points or all `x` are equal.
pub fn linear_regression(xs: &[f64], ys: &[f64]) -> Option<Regression> {
    assert_eq!(xs.len(), ys.len(), "regression inputs differ in length");
    let n = xs.len();
    if n < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| {
            let r = y - (intercept + slope * x);
            r * r
        })
        .sum();
    Some(Regression {
        intercept,
        slope,
        residual_rms: (ss / n as f64).sqrt(),
    })
}

/// Splits samples into those at or below `cutoff` and the excluded count.
pub fn exclude_above(samples: &[f64], cutoff: f64) -> (Vec<f64>, usize) {
    let kept: Vec<f64> = samples.iter().copied().filter(|&x| x <= cutoff).collect();
    let excluded = samples.len() - kept.len();
    (kept, excluded)
}
