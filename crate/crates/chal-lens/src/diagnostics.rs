//! Residual normality diagnostics.
//!
//! The Shapiro-Wilk W statistic and p-value follow Royston's AS R94
//! (Royston 1995), the same algorithm R's `shapiro.test` uses, valid for
//! 3 <= n <= 5000. Larger samples are reduced to a seeded uniform
//! subsample of 5000 before testing. Q-Q points pair Blom-scored normal
//! quantiles with the standardized order statistics and can be exported
//! for plotting.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::CounterRng;
use crate::stats::{normal_cdf, normal_quantile};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("normality check needs at least 3 residuals, got {n}")]
    TooFewSamples { n: usize },
    #[error("residuals have zero variance")]
    DegenerateVariance,
    #[error("residual {index} is not finite")]
    NonFinite { index: usize },
}

/// Options for [`normality_check`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalityOptions {
    /// Verdict threshold: the check passes when p > alpha.
    pub alpha: f64,
    /// Samples larger than this are subsampled before testing.
    pub max_sample: usize,
    /// Seed for the subsampling draw.
    pub seed: u64,
}

impl Default for NormalityOptions {
    fn default() -> Self {
        NormalityOptions {
            alpha: 0.05,
            max_sample: 5000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalityReport {
    /// Shapiro-Wilk W.
    pub statistic: f64,
    pub p_value: f64,
    /// (theoretical quantile, standardized sample quantile), sorted by the
    /// theoretical axis.
    pub qq_points: Vec<(f64, f64)>,
    /// True when p > alpha.
    pub verdict: bool,
    pub n_used: usize,
    pub subsampled: bool,
}

/// Shapiro-Wilk normality check with Q-Q diagnostics.
pub fn normality_check(
    residuals: &[f64],
    options: &NormalityOptions,
) -> Result<NormalityReport, DiagnosticsError> {
    let n = residuals.len();
    if n < 3 {
        return Err(DiagnosticsError::TooFewSamples { n });
    }
    if let Some(index) = residuals.iter().position(|v| !v.is_finite()) {
        return Err(DiagnosticsError::NonFinite { index });
    }

    let max_n = options.max_sample.max(3);
    let (sample, subsampled) = if n > max_n {
        (subsample(residuals, max_n, options.seed), true)
    } else {
        (residuals.to_vec(), false)
    };

    let mut sorted = sample;
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite checked"));
    let m = sorted.len();

    let mean = sorted.iter().sum::<f64>() / m as f64;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    if var <= 0.0 || sorted[m - 1] - sorted[0] < 1e-300 {
        return Err(DiagnosticsError::DegenerateVariance);
    }
    let sd = var.sqrt();

    // Blom plotting positions against standardized order statistics
    let qq_points: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let p = (i as f64 + 1.0 - 0.375) / (m as f64 + 0.25);
            (normal_quantile(p), (v - mean) / sd)
        })
        .collect();

    let (statistic, p_value) = royston_w(&sorted);
    Ok(NormalityReport {
        statistic,
        p_value,
        qq_points,
        verdict: p_value > options.alpha,
        n_used: m,
        subsampled,
    })
}

// Uniform subsample without replacement via partial Fisher-Yates.
fn subsample(values: &[f64], k: usize, seed: u64) -> Vec<f64> {
    let mut rng = CounterRng::from_stream(seed, &[0x5357_494c, values.len() as u64]);
    let mut indices: Vec<usize> = (0..values.len()).collect();
    for i in 0..k {
        let j = i + rng.uniform_int(0, (values.len() - 1 - i) as u64) as usize;
        indices.swap(i, j);
    }
    indices[..k].iter().map(|&i| values[i]).collect()
}

/// W statistic and p-value on a sorted sample (Royston 1995, AS R94).
fn royston_w(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len();
    debug_assert!(n >= 3);
    let nn2 = n / 2;
    let mut a = vec![0.0f64; nn2 + 1]; // 1-based, a[0] unused

    if n == 3 {
        a[1] = std::f64::consts::FRAC_1_SQRT_2;
    } else {
        let an = n as f64;
        let an25 = an + 0.25;
        let mut sum_sq = 0.0;
        for (i, slot) in a.iter_mut().enumerate().skip(1) {
            *slot = normal_quantile((i as f64 - 0.375) / an25);
            sum_sq += *slot * *slot;
        }
        sum_sq *= 2.0;
        let rsn = 1.0 / an.sqrt();

        const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
        const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
        let a1 = poly(&C1, rsn) - a[1] / sum_sq.sqrt();
        let (i1, fac) = if n > 5 {
            let a2 = -a[2] / sum_sq.sqrt() + poly(&C2, rsn);
            let fac = ((sum_sq - 2.0 * a[1] * a[1] - 2.0 * a[2] * a[2])
                / (1.0 - 2.0 * a1 * a1 - 2.0 * a2 * a2))
                .sqrt();
            a[2] = a2;
            (3, fac)
        } else {
            let fac = ((sum_sq - 2.0 * a[1] * a[1]) / (1.0 - 2.0 * a1 * a1)).sqrt();
            (2, fac)
        };
        a[1] = a1;
        for slot in a.iter_mut().skip(i1) {
            *slot /= -fac;
        }
    }

    // W as the squared correlation between data and coefficients
    let range = sorted[n - 1] - sorted[0];
    let mut sx = 0.0;
    let mut sa = 0.0;
    for i in 0..n {
        sx += sorted[i] / range;
        let j = n - 1 - i;
        if i != j {
            let sign = if i > j { 1.0 } else { -1.0 };
            sa += sign * a[i.min(j) + 1];
        }
    }
    sx /= n as f64;
    sa /= n as f64;

    let mut ssa = 0.0;
    let mut ssx = 0.0;
    let mut sax = 0.0;
    for i in 0..n {
        let j = n - 1 - i;
        let asa = if i != j {
            let sign = if i > j { 1.0 } else { -1.0 };
            sign * a[i.min(j) + 1] - sa
        } else {
            -sa
        };
        let xsx = sorted[i] / range - sx;
        ssa += asa * asa;
        ssx += xsx * xsx;
        sax += asa * xsx;
    }
    let ssassx = (ssa * ssx).sqrt();
    let w1 = (ssassx - sax) * (ssassx + sax) / (ssa * ssx);
    let w = (1.0 - w1).clamp(0.0, 1.0);

    (w, royston_p(w, n))
}

fn royston_p(w: f64, n: usize) -> f64 {
    if w >= 1.0 {
        return 1.0;
    }
    if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let stqr = std::f64::consts::FRAC_PI_3;
        return (pi6 * (w.sqrt().asin() - stqr)).clamp(0.0, 1.0);
    }
    let an = n as f64;
    let y = (1.0 - w).ln();
    const G: [f64; 2] = [-2.273, 0.459];
    const C3: [f64; 4] = [0.544, -0.39978, 0.025054, -0.0006714];
    const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
    const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
    const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];

    let (z, m, s) = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return 1e-99;
        }
        (-(gamma - y).ln(), poly(&C3, an), poly(&C4, an).exp())
    } else {
        let xx = an.ln();
        (y, poly(&C5, xx), poly(&C6, xx).exp())
    };
    // upper tail of N(m, s)
    1.0 - normal_cdf((z - m) / s)
}

fn poly(c: &[f64], x: f64) -> f64 {
    let mut acc = c[c.len() - 1];
    for &ci in c.iter().rev().skip(1) {
        acc = acc * x + ci;
    }
    acc
}
