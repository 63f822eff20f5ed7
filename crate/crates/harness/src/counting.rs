//! Midpoint Riemann-sum counting measures approximating a base measure.

use nlie_core::calculus::NodeMeasure;
use nlie_core::geometry::BaseMeasureSpec;
use nlie_core::{Error, Result};

/// Dyadic counting-measure approximation of level `n`: nodes at
/// `(Z^d / 2^n)` inside the half-open box `[lo, hi)` with weights
/// `mu_tilde(x) * 2^{-dn}`.
pub fn riemann_counting_measure(
    base: &BaseMeasureSpec,
    level: u32,
    lo: &[f64],
    hi: &[f64],
) -> Result<(Vec<Vec<f64>>, NodeMeasure)> {
    let d = lo.len();
    if hi.len() != d || d == 0 {
        return Err(Error::invalid("riemann_counting_measure: bad box"));
    }
    let scale = 2f64.powi(level as i32);
    let ranges: Vec<(i64, i64)> = (0..d)
        .map(|a| {
            let k0 = (lo[a] * scale).ceil() as i64;
            let k1 = (hi[a] * scale).ceil() as i64; // exclusive
            (k0, k1)
        })
        .collect();
    if ranges.iter().any(|(k0, k1)| k1 <= k0) {
        return Err(Error::invalid(
            "riemann_counting_measure: box contains no dyadic lattice points",
        ));
    }
    let counts: Vec<i64> = ranges.iter().map(|(k0, k1)| k1 - k0).collect();
    let total: i64 = counts.iter().product();
    let weight = scale.powi(-(d as i32));
    let mut nodes = Vec::with_capacity(total as usize);
    let mut masses = Vec::with_capacity(total as usize);
    for flat in 0..total {
        let mut rem = flat;
        let mut x = vec![0.0f64; d];
        for a in (0..d).rev() {
            let k = ranges[a].0 + rem % counts[a];
            rem /= counts[a];
            x[a] = k as f64 / scale;
        }
        masses.push(base.eval(&x) * weight);
        nodes.push(x);
    }
    Ok((nodes, NodeMeasure::new(masses)?))
}
