//! Nonlocal differential calculus on a localized graph: gradients,
//! divergences, convolutions, velocity fields and the upwind flux.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::EpsGraph;

// ---------------------------------------------------------------------------
// Node measures
// ---------------------------------------------------------------------------

/// Nonnegative masses on graph nodes with a cached total.
#[derive(Debug, Clone)]
pub struct NodeMeasure {
    masses: Vec<f64>,
    total: f64,
}

impl NodeMeasure {
    pub fn new(masses: Vec<f64>) -> Result<Self> {
        if masses.iter().any(|&m| m < 0.0 || !m.is_finite()) {
            return Err(Error::invalid("node masses must be finite and nonnegative"));
        }
        let total = masses.iter().sum();
        Ok(NodeMeasure { masses, total })
    }

    /// Unit mass at node `i`.
    pub fn dirac(n: usize, i: usize) -> Self {
        let mut masses = vec![0.0; n];
        masses[i] = 1.0;
        NodeMeasure { masses, total: 1.0 }
    }

    /// Discretization of a Lebesgue density: masses proportional to
    /// `profile(x_i)`, normalized to a probability measure (the cell volume
    /// cancels under normalization). The same profile sampled on a cell grid
    /// then discretizes the same measure, which keeps graph and local runs
    /// comparable.
    pub fn from_profile(graph: &EpsGraph, profile: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut masses: Vec<f64> = (0..graph.node_count())
            .map(|i| profile(graph.node(i)).max(0.0))
            .collect();
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("profile integrates to zero on the node set"));
        }
        for m in &mut masses {
            *m /= total;
        }
        NodeMeasure::new(masses)
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn min_mass(&self) -> f64 {
        self.masses.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Verifies the cached total against a fresh sum (1e-12 relative).
    pub fn check_total(&self) -> bool {
        let fresh: f64 = self.masses.iter().sum();
        (fresh - self.total).abs() <= 1e-12 * fresh.abs().max(1.0)
    }
}

// ---------------------------------------------------------------------------
// Edge fields
// ---------------------------------------------------------------------------

/// Values on directed edges, stored once per undirected edge.
///
/// Antisymmetric fields (fluxes, velocities, nonlocal gradients) keep a
/// single value for the canonical `i < j` orientation; general fields keep
/// both orientations.
#[derive(Debug, Clone)]
pub enum EdgeField {
    Antisymmetric(Vec<f64>),
    General { forward: Vec<f64>, backward: Vec<f64> },
}

impl EdgeField {
    pub fn zeros_antisymmetric(edge_count: usize) -> Self {
        EdgeField::Antisymmetric(vec![0.0; edge_count])
    }

    pub fn len(&self) -> usize {
        match self {
            EdgeField::Antisymmetric(v) => v.len(),
            EdgeField::General { forward, .. } => forward.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_antisymmetric(&self) -> bool {
        matches!(self, EdgeField::Antisymmetric(_))
    }

    /// Value on the canonical `i -> j` orientation of edge `e`.
    pub fn forward(&self, e: usize) -> f64 {
        match self {
            EdgeField::Antisymmetric(v) => v[e],
            EdgeField::General { forward, .. } => forward[e],
        }
    }

    /// Value on the ordered pair: `forward = true` for `i -> j`.
    pub fn value(&self, e: usize, forward: bool) -> f64 {
        match self {
            EdgeField::Antisymmetric(v) => {
                if forward {
                    v[e]
                } else {
                    -v[e]
                }
            }
            EdgeField::General { forward: f, backward: b } => {
                if forward {
                    f[e]
                } else {
                    b[e]
                }
            }
        }
    }

    /// Largest violation of `f(y,x) = -f(x,y)`; zero for the compact
    /// antisymmetric representation.
    pub fn antisymmetry_defect(&self) -> f64 {
        match self {
            EdgeField::Antisymmetric(_) => 0.0,
            EdgeField::General { forward, backward } => forward
                .iter()
                .zip(backward)
                .map(|(f, b)| (f + b).abs())
                .fold(0.0, f64::max),
        }
    }
}

// ---------------------------------------------------------------------------
// Interaction kernels
// ---------------------------------------------------------------------------

type PairFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type PairGradFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type PointGradFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub enum PairKernel {
    /// `K(x, y) = |x - y|^2 / 2`
    QuadraticAttractive,
    /// `K(x, y) = -exp(-|x - y|^2 / (2 width^2))`
    Gaussian { width: f64 },
    Custom { value: PairFn, gradient_x: PairGradFn },
}

#[derive(Clone, Default)]
pub enum ExternalPotential {
    #[default]
    None,
    Custom { value: PointFn, gradient: PointGradFn },
}

/// Interaction kernel `K` with an optional additive external potential `P`.
#[derive(Clone)]
pub struct InteractionKernel {
    pub pair: PairKernel,
    pub potential: ExternalPotential,
    /// `(L_K, C_K)` when known.
    pub lipschitz_data: Option<(f64, f64)>,
}

impl InteractionKernel {
    pub fn quadratic() -> Self {
        InteractionKernel {
            pair: PairKernel::QuadraticAttractive,
            potential: ExternalPotential::None,
            lipschitz_data: None,
        }
    }

    pub fn gaussian(width: f64) -> Self {
        InteractionKernel {
            pair: PairKernel::Gaussian { width },
            potential: ExternalPotential::None,
            lipschitz_data: None,
        }
    }

    pub fn custom(
        value: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        gradient_x: impl Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        InteractionKernel {
            pair: PairKernel::Custom { value: Arc::new(value), gradient_x: Arc::new(gradient_x) },
            potential: ExternalPotential::None,
            lipschitz_data: None,
        }
    }

    pub fn with_potential(
        mut self,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        self.potential =
            ExternalPotential::Custom { value: Arc::new(value), gradient: Arc::new(gradient) };
        self
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match &self.pair {
            PairKernel::QuadraticAttractive => {
                0.5 * x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            }
            PairKernel::Gaussian { width } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                -(-r2 / (2.0 * width * width)).exp()
            }
            PairKernel::Custom { value, .. } => value(x, y),
        }
    }

    /// `grad_x K(x, y)`.
    pub fn grad_x(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        match &self.pair {
            PairKernel::QuadraticAttractive => x.iter().zip(y).map(|(a, b)| a - b).collect(),
            PairKernel::Gaussian { width } => {
                let r2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let s = (-r2 / (2.0 * width * width)).exp() / (width * width);
                x.iter().zip(y).map(|(a, b)| s * (a - b)).collect()
            }
            PairKernel::Custom { gradient_x, .. } => gradient_x(x, y),
        }
    }

    pub fn potential_value(&self, x: &[f64]) -> f64 {
        match &self.potential {
            ExternalPotential::None => 0.0,
            ExternalPotential::Custom { value, .. } => value(x),
        }
    }

    pub fn potential_gradient(&self, x: &[f64]) -> Vec<f64> {
        match &self.potential {
            ExternalPotential::None => vec![0.0; x.len()],
            ExternalPotential::Custom { gradient, .. } => gradient(x),
        }
    }

    /// Max symmetry defect `|K(x,y) - K(y,x)|` over sample pairs.
    pub fn symmetry_defect(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        samples
            .iter()
            .map(|(x, y)| (self.eval(x, y) - self.eval(y, x)).abs())
            .fold(0.0, f64::max)
    }

    /// Max relative mismatch between `grad_x K` and central finite
    /// differences of the value over sample pairs.
    pub fn gradient_defect(&self, samples: &[(Vec<f64>, Vec<f64>)]) -> f64 {
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (x, y) in samples {
            let g = self.grad_x(x, y);
            for a in 0..x.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[a] += h;
                xm[a] -= h;
                let fd = (self.eval(&xp, y) - self.eval(&xm, y)) / (2.0 * h);
                let scale = g[a].abs().max(1.0);
                worst = worst.max((g[a] - fd).abs() / scale);
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

/// Nonlocal gradient: antisymmetric field with `phi_j - phi_i` on edge
/// `(i, j)`.
pub fn nonlocal_gradient(phi: &[f64], graph: &EpsGraph) -> EdgeField {
    let vals = graph
        .edges()
        .iter()
        .map(|e| phi[e.j as usize] - phi[e.i as usize])
        .collect();
    EdgeField::Antisymmetric(vals)
}

/// Nonlocal divergence, the negative eta-weighted adjoint of the nonlocal
/// gradient: `(div j)_i = (1/2) sum_j eta_ij (j_ij - j_ji)`.
pub fn nonlocal_divergence(j: &EdgeField, graph: &EpsGraph) -> Vec<f64> {
    let mut div = vec![0.0f64; graph.node_count()];
    for (i, slot) in div.iter_mut().enumerate() {
        let mut acc = 0.0;
        for nb in graph.neighbors(i) {
            let e = graph.edges()[nb.edge as usize];
            let out = j.value(nb.edge as usize, nb.forward);
            let back = j.value(nb.edge as usize, !nb.forward);
            acc += 0.5 * e.eta * (out - back);
        }
        *slot = acc;
    }
    div
}

/// `(K * rho)(x_i) = sum_k K(x_i, x_k) m_k` by direct summation.
pub fn convolve(kernel: &InteractionKernel, rho: &NodeMeasure, graph: &EpsGraph) -> Vec<f64> {
    let n = graph.node_count();
    let mut out = vec![0.0f64; n];
    for (i, slot) in out.iter_mut().enumerate() {
        let xi = graph.node(i);
        let mut acc = 0.0;
        for k in 0..n {
            let m = rho.masses()[k];
            if m != 0.0 {
                acc += kernel.eval(xi, graph.node(k)) * m;
            }
        }
        *slot = acc;
    }
    out
}

/// The variational derivative `K * rho + P` on nodes.
pub fn energy_variation(
    kernel: &InteractionKernel,
    rho: &NodeMeasure,
    graph: &EpsGraph,
) -> Vec<f64> {
    let mut phi = convolve(kernel, rho, graph);
    for (i, v) in phi.iter_mut().enumerate() {
        *v += kernel.potential_value(graph.node(i));
    }
    phi
}

/// Velocity field `v = -grad_bar(K * rho + P)`.
pub fn velocity_field(
    kernel: &InteractionKernel,
    rho: &NodeMeasure,
    graph: &EpsGraph,
) -> EdgeField {
    let phi = energy_variation(kernel, rho, graph);
    let vals = graph
        .edges()
        .iter()
        .map(|e| -(phi[e.j as usize] - phi[e.i as usize]))
        .collect();
    EdgeField::Antisymmetric(vals)
}

/// Upwind flux interpolation
/// `j_ij = (v_ij)_+ m_i mu_j - (v_ij)_- mu_i m_j`.
///
/// At `v_ij = 0` both parts vanish, so no tie-breaking is needed. The result
/// is antisymmetric because `v` is.
pub fn upwind_flux(rho: &NodeMeasure, graph: &EpsGraph, v: &EdgeField) -> Result<EdgeField> {
    if !v.is_antisymmetric() && v.antisymmetry_defect() > 1e-12 {
        return Err(Error::precondition("upwind_flux: velocity must be antisymmetric"));
    }
    let m = rho.masses();
    let mu = graph.mu();
    let vals = graph
        .edges()
        .iter()
        .enumerate()
        .map(|(k, e)| {
            let vij = v.forward(k);
            let (i, j) = (e.i as usize, e.j as usize);
            vij.max(0.0) * m[i] * mu[j] - (-vij).max(0.0) * mu[i] * m[j]
        })
        .collect();
    Ok(EdgeField::Antisymmetric(vals))
}
