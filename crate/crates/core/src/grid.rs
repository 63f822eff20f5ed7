//! Uniform cell grids shared by the local solver and the flux reconstruction.

use crate::error::{Error, Result};

/// Uniform axis-aligned grid of cells covering `[origin, origin + shape*h)`.
///
/// Cells are indexed in row-major order (last axis fastest). Cell `k` along
/// axis `a` covers `[origin[a] + k*h, origin[a] + (k+1)*h)` and has its
/// center at `origin[a] + (k + 1/2)*h`.
#[derive(Debug, Clone, PartialEq)]
pub struct UniformGrid {
    pub dim: usize,
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

impl UniformGrid {
    pub fn new(origin: Vec<f64>, spacing: f64, shape: Vec<usize>) -> Result<Self> {
        if origin.len() != shape.len() {
            return Err(Error::invalid("grid origin/shape dimension mismatch"));
        }
        if !(spacing > 0.0) {
            return Err(Error::invalid("grid spacing must be positive"));
        }
        if shape.iter().any(|&n| n == 0) {
            return Err(Error::invalid("grid shape must be nonzero along every axis"));
        }
        Ok(UniformGrid { dim: origin.len(), origin, spacing, shape })
    }

    /// Grid covering `[lo, hi]` with cells of size `spacing` (hi is stretched
    /// up to a whole number of cells).
    pub fn covering(lo: &[f64], hi: &[f64], spacing: f64) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::invalid("box dimension mismatch"));
        }
        let shape: Vec<usize> = lo
            .iter()
            .zip(hi)
            .map(|(&a, &b)| ((b - a) / spacing - 1e-9).ceil().max(1.0) as usize)
            .collect();
        UniformGrid::new(lo.to_vec(), spacing, shape)
    }

    pub fn cell_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }

    pub fn center(&self, index: usize) -> Vec<f64> {
        let multi = self.unravel(index);
        multi
            .iter()
            .enumerate()
            .map(|(a, &k)| self.origin[a] + (k as f64 + 0.5) * self.spacing)
            .collect()
    }

    pub fn unravel(&self, mut index: usize) -> Vec<usize> {
        let mut multi = vec![0usize; self.dim];
        for a in (0..self.dim).rev() {
            multi[a] = index % self.shape[a];
            index /= self.shape[a];
        }
        multi
    }

    pub fn ravel(&self, multi: &[usize]) -> usize {
        let mut idx = 0usize;
        for a in 0..self.dim {
            idx = idx * self.shape[a] + multi[a];
        }
        idx
    }

    /// Cell containing `x`, or None if outside.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        let mut multi = vec![0usize; self.dim];
        for a in 0..self.dim {
            let t = (x[a] - self.origin[a]) / self.spacing;
            if t < 0.0 || t >= self.shape[a] as f64 {
                return None;
            }
            multi[a] = t as usize;
        }
        Some(self.ravel(&multi))
    }

    pub fn upper(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|a| self.origin[a] + self.shape[a] as f64 * self.spacing)
            .collect()
    }
}

/// Nodes of the lattice `{lo + k*h : k in Z^d}` intersected with the closed
/// box `[lo, hi]`, in row-major order. Used for building graphs on grids.
pub fn lattice_nodes(lo: &[f64], hi: &[f64], h: f64) -> Vec<Vec<f64>> {
    let d = lo.len();
    let counts: Vec<usize> = (0..d)
        .map(|a| ((hi[a] - lo[a]) / h + 1e-9).floor() as usize + 1)
        .collect();
    let total: usize = counts.iter().product();
    let mut nodes = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut x = vec![0.0; d];
        for a in (0..d).rev() {
            x[a] = lo[a] + (rem % counts[a]) as f64 * h;
            rem /= counts[a];
        }
        nodes.push(x);
    }
    nodes
}
