//! Error metrics between discrete measures, metrizing narrow convergence at
//! desk scale.

use nlie_core::energetics::wasserstein_t_small;
use nlie_core::geometry::TensorField;
use nlie_core::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum ErrorMetric {
    /// Exact 1D 2-Wasserstein distance via sorted cumulative masses.
    QuantileW2,
    /// L1 distance of Gaussian-smoothed densities on a common grid.
    SmoothedL1 { bandwidth: f64 },
    /// Max over a dictionary of 1-Lipschitz, bounded-by-1 ramp test
    /// functions of `|int f d(a - b)|`.
    BoundedLipschitz { resolution: usize },
}

pub fn error_metric(
    kind: ErrorMetric,
    a: (&[Vec<f64>], &[f64]),
    b: (&[Vec<f64>], &[f64]),
) -> Result<f64> {
    let d = a.0.first().map_or(0, |x| x.len());
    if b.0.first().map_or(0, |x| x.len()) != d || d == 0 {
        return Err(Error::invalid("error_metric: dimension mismatch"));
    }
    match kind {
        ErrorMetric::QuantileW2 => {
            if d != 1 {
                return Err(Error::invalid("error_metric: quantile_w2 requires d = 1"));
            }
            wasserstein_t_small(a, b, &TensorField::identity(1))
        }
        ErrorMetric::SmoothedL1 { bandwidth } => {
            if !(bandwidth > 0.0) {
                return Err(Error::invalid("error_metric: bandwidth must be positive"));
            }
            Ok(smoothed_l1(a, b, bandwidth, d))
        }
        ErrorMetric::BoundedLipschitz { resolution } => {
            Ok(bounded_lipschitz(a, b, resolution.max(3), d))
        }
    }
}

fn joint_bounds(a: &[Vec<f64>], b: &[Vec<f64>], d: usize, pad: f64) -> (Vec<f64>, Vec<f64>) {
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for x in a.iter().chain(b) {
        for k in 0..d {
            lo[k] = lo[k].min(x[k]);
            hi[k] = hi[k].max(x[k]);
        }
    }
    for k in 0..d {
        lo[k] -= pad;
        hi[k] += pad;
    }
    (lo, hi)
}

fn smoothed_l1(a: (&[Vec<f64>], &[f64]), b: (&[Vec<f64>], &[f64]), bw: f64, d: usize) -> f64 {
    let (lo, hi) = joint_bounds(a.0, b.0, d, 4.0 * bw);
    let h = bw / 2.0;
    let counts: Vec<usize> = (0..d).map(|k| ((hi[k] - lo[k]) / h).ceil() as usize + 1).collect();
    let total: usize = counts.iter().product();
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bw).powi(d as i32);
    let density = |x: &[f64], pts: &[Vec<f64>], ms: &[f64]| -> f64 {
        pts.iter()
            .zip(ms)
            .map(|(p, m)| {
                let r2: f64 = x.iter().zip(p).map(|(u, v)| (u - v) * (u - v)).sum();
                m * (-r2 / (2.0 * bw * bw)).exp()
            })
            .sum::<f64>()
            * norm
    };
    let mut acc = 0.0;
    let cell = h.powi(d as i32);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0f64; d];
        for k in (0..d).rev() {
            x[k] = lo[k] + (rem % counts[k]) as f64 * h;
            rem /= counts[k];
        }
        acc += (density(&x, a.0, a.1) - density(&x, b.0, b.1)).abs() * cell;
    }
    acc
}

fn bounded_lipschitz(
    a: (&[Vec<f64>], &[f64]),
    b: (&[Vec<f64>], &[f64]),
    res: usize,
    d: usize,
) -> f64 {
    let (lo, hi) = joint_bounds(a.0, b.0, d, 1.0);
    let mut worst = 0.0f64;
    // ramps f(x) = clamp(x_k - c, -1, 1) over a dictionary of centers
    for k in 0..d {
        for i in 0..res {
            let c = lo[k] + (hi[k] - lo[k]) * i as f64 / (res as f64 - 1.0);
            let f = |x: &[f64]| (x[k] - c).clamp(-1.0, 1.0);
            let ia: f64 = a.0.iter().zip(a.1).map(|(x, m)| m * f(x)).sum();
            let ib: f64 = b.0.iter().zip(b.1).map(|(x, m)| m * f(x)).sum();
            worst = worst.max((ia - ib).abs());
        }
    }
    worst
}
