//! Graph geometry: reference connectivities, base measures, the localized
//! edge weights `eta_eps`, sparse graph construction, the per-scale tensor
//! and its local limit, and the Riemannian distance induced by the limit
//! tensor.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Guard band for indicator-valued connectivities. Pairs within this
/// relative distance of the support boundary are treated as outside, so
/// grid-aligned node distances that hit the boundary up to rounding are
/// classified deterministically.
pub const SUPPORT_GUARD: f64 = 1e-12;

/// `Gamma(k/2)` for positive half-integer arguments.
fn gamma_half(two_x: u32) -> f64 {
    assert!(two_x >= 1);
    // Gamma(1/2) = sqrt(pi), Gamma(1) = 1, Gamma(x+1) = x Gamma(x)
    let mut val = if two_x % 2 == 1 { std::f64::consts::PI.sqrt() } else { 1.0 };
    let mut k = if two_x % 2 == 1 { 1 } else { 2 };
    while k < two_x {
        val *= k as f64 / 2.0;
        k += 2;
    }
    val
}

/// Volume of the unit ball in `R^d`.
pub fn unit_ball_volume(d: usize) -> f64 {
    // pi^{d/2} / Gamma(d/2 + 1)
    std::f64::consts::PI.powf(d as f64 / 2.0) / gamma_half(d as u32 + 2)
}

/// The second-moment constant `C_d = int_{B_1} y_1^2 dy`, in closed form
/// `pi^{d/2} / (2 Gamma(d/2 + 2))`.
pub fn ball_second_moment(d: usize) -> f64 {
    std::f64::consts::PI.powf(d as f64 / 2.0) / (2.0 * gamma_half(d as u32 + 4))
}

/// Independent quadrature route to `C_d` for `d <= 2`: a plain midpoint sum
/// in one dimension and the polar-coordinate integral
/// `int_0^{2pi} cos^2 dt * int_0^1 r^3 dr` in two, both with smooth
/// integrands.
pub fn ball_second_moment_quadrature_oracle(d: usize, resolution: usize) -> f64 {
    let h = 1.0 / resolution as f64;
    match d {
        1 => {
            let h2 = 2.0 * h;
            (0..resolution)
                .map(|k| {
                    let y = -1.0 + (k as f64 + 0.5) * h2;
                    y * y * h2
                })
                .sum()
        }
        2 => {
            let radial: f64 = (0..resolution)
                .map(|k| {
                    let r = (k as f64 + 0.5) * h;
                    r * r * r * h
                })
                .sum();
            std::f64::consts::PI * radial
        }
        _ => panic!("quadrature oracle implemented for d <= 2"),
    }
}

/// Second moment of the normalized smooth bump profile,
/// `int_{B_1} y_1^2 (1 - |y|^2)^2 dy`.
pub fn bump_second_moment(d: usize) -> f64 {
    // (1/d) S_{d-1} int_0^1 r^{d+1} (1 - r^2)^2 dr with S_{d-1} = 2 pi^{d/2} / Gamma(d/2)
    let df = d as f64;
    let surface = 2.0 * std::f64::consts::PI.powf(df / 2.0) / gamma_half(d as u32);
    let radial = 1.0 / (df + 2.0) - 2.0 / (df + 4.0) + 1.0 / (df + 6.0);
    surface / df * radial
}

fn sub(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a - b).collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Connectivity
// ---------------------------------------------------------------------------

/// Reference connectivity kinds.
#[derive(Clone)]
pub enum Connectivity {
    /// Indicator of the open ball of the given radius (value 1 inside).
    Ball { radius: f64 },
    /// `amplitude * (1 - (|w|/radius)^2)_+^2`, a C^1 compactly supported
    /// profile whose quadrature on lattice graphs is free of the indicator
    /// boundary staircase.
    SmoothBump { radius: f64, amplitude: f64 },
    /// `d_norm` on the ellipsoid `<w, D^{-1} w> <= radius^2`, zero outside.
    Anisotropic { d_tensor: DMatrix<f64>, radius: f64, d_norm: f64 },
    /// Arbitrary callback `(z, w) -> value`.
    Tabulated {
        eval: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
        support_radius: f64,
        mom_bound: f64,
    },
}

/// A reference connectivity together with its assumption constants.
#[derive(Clone)]
pub struct ConnectivitySpec {
    pub kind: Connectivity,
    /// `C_supp`: support radius of `theta(z, .)`.
    pub support_radius: f64,
    /// `C_mom`: bound on `|w|^2 theta(z, w)`.
    pub mom_bound: f64,
}

impl ConnectivitySpec {
    pub fn ball(radius: f64) -> Self {
        ConnectivitySpec {
            kind: Connectivity::Ball { radius },
            support_radius: radius,
            mom_bound: radius * radius,
        }
    }

    pub fn smooth_bump(radius: f64, amplitude: f64) -> Self {
        // sup of u (1-u)^2 over u in [0,1] is 4/27 at u = 1/3
        ConnectivitySpec {
            kind: Connectivity::SmoothBump { radius, amplitude },
            support_radius: radius,
            mom_bound: amplitude * radius * radius * 4.0 / 27.0,
        }
    }

    /// Smooth bump with unit radius, normalized so that the limit tensor is
    /// `mu_tilde(x) * Id`.
    pub fn smooth_bump_unit(d: usize) -> Self {
        Self::smooth_bump(1.0, 2.0 / bump_second_moment(d))
    }

    /// Ball connectivity normalized so that the limit tensor is
    /// `mu_tilde(x) * Id`: `theta = (2/C_d) 1_{B_1}`.
    pub fn ball_normalized(d: usize) -> Self {
        let c = 2.0 / ball_second_moment(d);
        Self::tabulated(
            move |_z: &[f64], w: &[f64]| {
                if norm2(w) < (1.0 - SUPPORT_GUARD) * (1.0 - SUPPORT_GUARD) {
                    c
                } else {
                    0.0
                }
            },
            1.0,
            c,
        )
    }

    pub fn anisotropic(d_tensor: DMatrix<f64>, radius: f64, d_norm: f64) -> Result<Self> {
        let eig = d_tensor.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.max();
        let lmin = eig.eigenvalues.min();
        if !(lmin > 0.0) {
            return Err(Error::invalid("anisotropic connectivity requires SPD tensor"));
        }
        if !(radius > 0.0 && d_norm > 0.0) {
            return Err(Error::invalid("anisotropic connectivity requires radius, d_norm > 0"));
        }
        let support = radius * lmax.sqrt();
        Ok(ConnectivitySpec {
            kind: Connectivity::Anisotropic { d_tensor, radius, d_norm },
            support_radius: support,
            mom_bound: d_norm * support * support,
        })
    }

    pub fn tabulated(
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
        support_radius: f64,
        mom_bound: f64,
    ) -> Self {
        ConnectivitySpec {
            kind: Connectivity::Tabulated { eval: Arc::new(eval), support_radius, mom_bound },
            support_radius,
            mom_bound,
        }
    }

    /// Evaluate `theta(z, w)`.
    pub fn theta(&self, z: &[f64], w: &[f64]) -> f64 {
        match &self.kind {
            Connectivity::Ball { radius } => {
                let r = radius * (1.0 - SUPPORT_GUARD);
                if norm2(w) < r * r {
                    1.0
                } else {
                    0.0
                }
            }
            Connectivity::SmoothBump { radius, amplitude } => {
                let u = 1.0 - norm2(w) / (radius * radius);
                if u > 0.0 {
                    amplitude * u * u
                } else {
                    0.0
                }
            }
            Connectivity::Anisotropic { d_tensor, radius, d_norm } => {
                let wv = DVector::from_column_slice(w);
                let q = d_tensor
                    .clone()
                    .cholesky()
                    .map(|ch| {
                        let s = ch.solve(&wv);
                        wv.dot(&s)
                    })
                    .unwrap_or(f64::INFINITY);
                if q <= radius * radius * (1.0 - SUPPORT_GUARD) {
                    *d_norm
                } else {
                    0.0
                }
            }
            Connectivity::Tabulated { eval, .. } => eval(z, w),
        }
    }

    /// Closed-form limit tensor for the built-in kinds with base density
    /// value `mu_val` at the evaluation point, when one is available.
    pub fn closed_form_tensor(&self, d: usize, mu_val: f64) -> Option<DMatrix<f64>> {
        match &self.kind {
            Connectivity::Ball { radius } => {
                let c = 0.5 * mu_val * ball_second_moment(d) * radius.powi(d as i32 + 2);
                Some(DMatrix::identity(d, d) * c)
            }
            Connectivity::SmoothBump { radius, amplitude } => {
                let c =
                    0.5 * mu_val * amplitude * bump_second_moment(d) * radius.powi(d as i32 + 2);
                Some(DMatrix::identity(d, d) * c)
            }
            Connectivity::Anisotropic { d_tensor, radius, d_norm } => {
                tensor_closed_form(d_tensor, *radius, *d_norm).ok().map(|t| t * mu_val)
            }
            Connectivity::Tabulated { .. } => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Base measure
// ---------------------------------------------------------------------------

/// Base measure density `mu_tilde` with its two-sided bounds.
#[derive(Clone)]
pub struct BaseMeasureSpec {
    density: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

impl BaseMeasureSpec {
    pub fn new(
        density: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        lower_bound: f64,
        upper_bound: f64,
    ) -> Self {
        BaseMeasureSpec { density: Arc::new(density), lower_bound, upper_bound }
    }

    pub fn uniform() -> Self {
        BaseMeasureSpec::new(|_| 1.0, 1.0, 1.0)
    }

    /// `mu_tilde(x) = 1 + amp * sin(x_1)`, requires `|amp| < 1`.
    pub fn one_plus_sine(amp: f64) -> Self {
        BaseMeasureSpec::new(move |x: &[f64]| 1.0 + amp * x[0].sin(), 1.0 - amp.abs(), 1.0 + amp.abs())
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.density)(x)
    }
}

// ---------------------------------------------------------------------------
// Edge weight
// ---------------------------------------------------------------------------

/// The localized edge weight
/// `eta_eps(x, y) = eps^{-(d+2)} theta((x+y)/2, (x-y)/eps)`.
///
/// Zero whenever `|x - y| > C_supp * eps`; evaluating on the diagonal is an
/// error since the weight is defined off-diagonal only.
pub fn eval_eta(spec: &ConnectivitySpec, eps: f64, x: &[f64], y: &[f64]) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eval_eta: eps must be positive"));
    }
    if x == y {
        return Err(Error::invalid("eval_eta: x == y (eta is defined off-diagonal)"));
    }
    let d = x.len() as i32;
    let mid: Vec<f64> = x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect();
    let w: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - b) / eps).collect();
    if norm2(&w) > spec.support_radius * spec.support_radius {
        return Ok(0.0);
    }
    Ok(spec.theta(&mid, &w) / eps.powi(d + 2))
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

/// One undirected edge stored once with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub i: u32,
    pub j: u32,
    pub eta: f64,
}

/// Adjacency entry: neighbor node, owning edge index, and whether node sits
/// at the `i` (forward) end of the canonical edge.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor {
    pub node: u32,
    pub edge: u32,
    pub forward: bool,
}

/// Finite localized graph: nodes with base-measure weights and the sparse
/// symmetric edge set `{(i, j) : eta_eps(x_i, x_j) > 0}`.
#[derive(Clone)]
pub struct EpsGraph {
    pub dim: usize,
    pub eps: f64,
    pub cell_volume: f64,
    coords: Vec<f64>,
    mu: Vec<f64>,
    edges: Vec<Edge>,
    adj_offsets: Vec<usize>,
    adj: Vec<Neighbor>,
}

impl EpsGraph {
    pub fn node_count(&self) -> usize {
        self.mu.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[Neighbor] {
        &self.adj[self.adj_offsets[i]..self.adj_offsets[i + 1]]
    }

    fn from_parts(
        dim: usize,
        eps: f64,
        cell_volume: f64,
        coords: Vec<f64>,
        mu: Vec<f64>,
        mut edges: Vec<Edge>,
    ) -> Self {
        edges.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)));
        let n = mu.len();
        let mut degree = vec![0usize; n];
        for e in &edges {
            degree[e.i as usize] += 1;
            degree[e.j as usize] += 1;
        }
        let mut offsets = vec![0usize; n + 1];
        for i in 0..n {
            offsets[i + 1] = offsets[i] + degree[i];
        }
        let mut adj = vec![Neighbor { node: 0, edge: 0, forward: true }; offsets[n]];
        let mut cursor = offsets.clone();
        for (k, e) in edges.iter().enumerate() {
            adj[cursor[e.i as usize]] = Neighbor { node: e.j, edge: k as u32, forward: true };
            cursor[e.i as usize] += 1;
            adj[cursor[e.j as usize]] = Neighbor { node: e.i, edge: k as u32, forward: false };
            cursor[e.j as usize] += 1;
        }
        EpsGraph { dim, eps, cell_volume, coords, mu, edges, adj_offsets: offsets, adj }
    }
}

/// Build the localized graph on the given nodes.
///
/// Node weights are the midpoint-rule masses `mu_i = mu_tilde(x_i) *
/// cell_volume`, and the edge set contains exactly the pairs with positive
/// `eta_eps`. Candidate pairs are enumerated through a uniform spatial hash
/// with bucket size `C_supp * eps`, so construction is O(N) for bounded
/// neighborhood counts.
pub fn build_graph(
    nodes: &[Vec<f64>],
    base: &BaseMeasureSpec,
    spec: &ConnectivitySpec,
    eps: f64,
    cell_volume: f64,
) -> Result<EpsGraph> {
    if nodes.is_empty() {
        return Err(Error::invalid("build_graph: empty node set"));
    }
    if !(cell_volume > 0.0) {
        return Err(Error::invalid("build_graph: cell_volume must be positive"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid("build_graph: eps must be positive"));
    }
    let dim = nodes[0].len();
    if nodes.iter().any(|x| x.len() != dim) {
        return Err(Error::invalid("build_graph: inconsistent node dimensions"));
    }

    let reach = spec.support_radius * eps;
    let bucket = |x: &[f64]| -> Vec<i64> { x.iter().map(|&c| (c / reach).floor() as i64).collect() };

    let mut cells: HashMap<Vec<i64>, Vec<u32>> = HashMap::new();
    for (i, x) in nodes.iter().enumerate() {
        cells.entry(bucket(x)).or_default().push(i as u32);
    }

    let mut coords = Vec::with_capacity(nodes.len() * dim);
    let mut mu = Vec::with_capacity(nodes.len());
    for x in nodes {
        coords.extend_from_slice(x);
        mu.push(base.eval(x) * cell_volume);
    }

    let mut edges = Vec::new();
    let offsets = neighbor_offsets(dim);
    for (i, x) in nodes.iter().enumerate() {
        let b = bucket(x);
        for off in &offsets {
            let nb: Vec<i64> = b.iter().zip(off).map(|(a, o)| a + o).collect();
            let Some(members) = cells.get(&nb) else { continue };
            for &jj in members {
                let j = jj as usize;
                if j <= i {
                    continue;
                }
                let y = &nodes[j];
                if x == y {
                    return Err(Error::invalid(format!(
                        "build_graph: duplicate nodes at indices {i} and {j}"
                    )));
                }
                if norm2(&sub(x, y)) > reach * reach {
                    continue;
                }
                let eta = eval_eta(spec, eps, x, y)?;
                if eta > 0.0 {
                    edges.push(Edge { i: i as u32, j: j as u32, eta });
                }
            }
        }
    }

    Ok(EpsGraph::from_parts(dim, eps, cell_volume, coords, mu, edges))
}

fn neighbor_offsets(dim: usize) -> Vec<Vec<i64>> {
    let mut offs = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::new();
        for o in &offs {
            for delta in -1..=1i64 {
                let mut v = o.clone();
                v.push(delta);
                next.push(v);
            }
        }
        offs = next;
    }
    offs
}

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// The per-scale tensor at node `i`:
/// `T_eps(x_i) = (1/2) sum_j (x_i - x_j) (x_i - x_j)^T eta_ij mu_j`.
///
/// An isolated node yields the zero matrix.
pub fn tensor_eps(graph: &EpsGraph, i: usize) -> DMatrix<f64> {
    let d = graph.dim;
    let mut t = DMatrix::zeros(d, d);
    let xi = graph.node(i);
    for nb in graph.neighbors(i) {
        let e = graph.edges()[nb.edge as usize];
        let xj = graph.node(nb.node as usize);
        let w = sub(xi, xj);
        let weight = 0.5 * e.eta * graph.mu()[nb.node as usize];
        for a in 0..d {
            for b in 0..d {
                t[(a, b)] += weight * w[a] * w[b];
            }
        }
    }
    t
}

/// The limit tensor `T(x) = (1/2) mu_tilde(x) int w w^T theta(x, w) dw` by
/// midpoint-rule quadrature over `[-C_supp, C_supp]^d` with `resolution`
/// points per axis.
///
/// Indicator connectivities leave an `O(1/resolution)` boundary error.
pub fn tensor_limit(
    spec: &ConnectivitySpec,
    base: &BaseMeasureSpec,
    x: &[f64],
    resolution: usize,
) -> DMatrix<f64> {
    assert!(resolution >= 2, "tensor_limit: need at least 2 quadrature points per axis");
    let d = x.len();
    let r = spec.support_radius;
    let h = 2.0 * r / resolution as f64;
    let mut t = DMatrix::zeros(d, d);
    let mut w = vec![0.0f64; d];
    let mut idx = vec![0usize; d];
    let total = resolution.pow(d as u32);
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..d).rev() {
            idx[a] = rem % resolution;
            rem /= resolution;
        }
        for a in 0..d {
            w[a] = -r + (idx[a] as f64 + 0.5) * h;
        }
        let th = spec.theta(x, &w);
        if th > 0.0 {
            for a in 0..d {
                for b in 0..d {
                    t[(a, b)] += th * w[a] * w[b];
                }
            }
        }
    }
    t *= 0.5 * base.eval(x) * h.powi(d as i32);
    t
}

/// Closed-form tensor of the anisotropic family:
/// `(1/2) d_norm sqrt(det D) C_d R^{d+2} D`.
pub fn tensor_closed_form(d_tensor: &DMatrix<f64>, radius: f64, d_norm: f64) -> Result<DMatrix<f64>> {
    let d = d_tensor.nrows();
    if d_tensor.ncols() != d {
        return Err(Error::invalid("tensor_closed_form: D must be square"));
    }
    let sym_err = (d_tensor - d_tensor.transpose()).norm();
    if sym_err > 1e-12 * d_tensor.norm().max(1.0) {
        return Err(Error::invalid("tensor_closed_form: D must be symmetric"));
    }
    let eig = d_tensor.clone().symmetric_eigen();
    if !(eig.eigenvalues.min() > 0.0) {
        return Err(Error::invalid("tensor_closed_form: D must be positive-definite"));
    }
    if !(radius > 0.0 && d_norm > 0.0) {
        return Err(Error::invalid("tensor_closed_form: radius and d_norm must be positive"));
    }
    let det = eig.eigenvalues.iter().product::<f64>();
    let c = 0.5 * d_norm * det.sqrt() * ball_second_moment(d) * radius.powi(d as i32 + 2);
    Ok(d_tensor * c)
}

// ---------------------------------------------------------------------------
// Tensor fields
// ---------------------------------------------------------------------------

/// A symmetric positive-definite matrix field `x -> T(x)`.
#[derive(Clone)]
pub enum TensorField {
    Constant(DMatrix<f64>),
    /// Evaluates `tensor_eps` at the nearest graph node.
    EpsilonTensor(Arc<EpsGraph>),
    /// Quadrature of the limit tensor at the evaluation point.
    LimitTensor { spec: Arc<ConnectivitySpec>, base: Arc<BaseMeasureSpec>, resolution: usize },
    /// The closed-form anisotropic tensor (constant in space).
    ClosedForm { d_tensor: DMatrix<f64>, radius: f64, d_norm: f64 },
    Tabulated(Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>),
}

impl TensorField {
    pub fn constant(m: DMatrix<f64>) -> Self {
        TensorField::Constant(m)
    }

    pub fn identity(d: usize) -> Self {
        TensorField::Constant(DMatrix::identity(d, d))
    }

    pub fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        match self {
            TensorField::Constant(m) => m.clone(),
            TensorField::EpsilonTensor(g) => {
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for i in 0..g.node_count() {
                    let d2 = norm2(&sub(g.node(i), x));
                    if d2 < best_d {
                        best_d = d2;
                        best = i;
                    }
                }
                tensor_eps(g, best)
            }
            TensorField::LimitTensor { spec, base, resolution } => {
                tensor_limit(spec, base, x, *resolution)
            }
            TensorField::ClosedForm { d_tensor, radius, d_norm } => {
                tensor_closed_form(d_tensor, *radius, *d_norm).expect("validated at construction")
            }
            TensorField::Tabulated(f) => f(x),
        }
    }

    /// Whether the field is constant in space (enables closed-form paths).
    pub fn is_constant(&self) -> bool {
        matches!(self, TensorField::Constant(_) | TensorField::ClosedForm { .. })
    }

    /// Symmetry and two-sided ellipticity check at a point.
    pub fn validate_at(&self, x: &[f64], c_low: f64, c_high: f64) -> Result<()> {
        let t = self.eval(x);
        let sym = (&t - t.transpose()).norm();
        if sym > 1e-12 * t.norm().max(1.0) {
            return Err(Error::invalid(format!("tensor not symmetric at {x:?}")));
        }
        let eig = t.symmetric_eigen();
        let lmin = eig.eigenvalues.min();
        let lmax = eig.eigenvalues.max();
        if lmin < c_low || lmax > c_high {
            return Err(Error::invalid(format!(
                "tensor eigenvalues [{lmin}, {lmax}] escape [{c_low}, {c_high}] at {x:?}"
            )));
        }
        Ok(())
    }
}

/// Distance induced by `T^{-1}`.
///
/// For constant tensors this is the exact quadratic form
/// `sqrt((y-x)^T T^{-1} (y-x))`. For variable tensors it is a shortest-path
/// approximation on an auxiliary lattice over the padded bounding box of
/// `{x, y}`, with edge cost `sqrt(dx^T T^{-1}((a+b)/2) dx)`; accuracy is set
/// by `lattice_resolution` cells per axis.
pub fn dt_distance(tensor: &TensorField, x: &[f64], y: &[f64], lattice_resolution: usize) -> f64 {
    if tensor.is_constant() {
        let t = tensor.eval(x);
        let delta = DVector::from_vec(sub(y, x));
        let s = t.cholesky().expect("constant tensor must be SPD").solve(&delta);
        return delta.dot(&s).max(0.0).sqrt();
    }
    lattice_distance(tensor, x, y, lattice_resolution)
}

fn lattice_distance(tensor: &TensorField, x: &[f64], y: &[f64], res: usize) -> f64 {
    let d = x.len();
    let res = res.max(2);
    let span_max = (0..d).map(|a| (y[a] - x[a]).abs()).fold(0.0, f64::max);
    if span_max == 0.0 {
        return 0.0;
    }
    // per-axis spacing chosen so both endpoints land on lattice points
    let pad = (res / 4).max(1);
    let mut lo = vec![0.0f64; d];
    let mut h = vec![0.0f64; d];
    let mut counts = vec![0usize; d];
    for a in 0..d {
        let span = (y[a] - x[a]).abs();
        let steps = if span > 0.0 { res } else { 0 };
        h[a] = if span > 0.0 { span / res as f64 } else { span_max / res as f64 };
        lo[a] = x[a].min(y[a]) - pad as f64 * h[a];
        counts[a] = steps + 2 * pad + 1;
    }
    let point = |multi: &[usize]| -> Vec<f64> {
        (0..d).map(|a| lo[a] + multi[a] as f64 * h[a]).collect()
    };
    let snap = |p: &[f64]| -> usize {
        let mut idx = 0usize;
        for a in 0..d {
            let k = (((p[a] - lo[a]) / h[a]).round() as usize).min(counts[a] - 1);
            idx = idx * counts[a] + k;
        }
        idx
    };
    let unravel = |mut idx: usize| -> Vec<usize> {
        let mut m = vec![0usize; d];
        for a in (0..d).rev() {
            m[a] = idx % counts[a];
            idx /= counts[a];
        }
        m
    };
    let total: usize = counts.iter().product();
    let offsets = neighbor_offsets(d);
    let start = snap(x);
    let target = snap(y);

    let mut dist = vec![f64::INFINITY; total];
    dist[start] = 0.0;
    let mut heap = std::collections::BinaryHeap::new();
    heap.push((std::cmp::Reverse(ordered_float(0.0)), start));
    while let Some((std::cmp::Reverse(du), u)) = heap.pop() {
        let du = du.0;
        if du > dist[u] {
            continue;
        }
        if u == target {
            break;
        }
        let mu_ = unravel(u);
        let pu = point(&mu_);
        for off in &offsets {
            if off.iter().all(|&o| o == 0) {
                continue;
            }
            let mut mv = mu_.clone();
            let mut ok = true;
            for a in 0..d {
                let k = mu_[a] as i64 + off[a];
                if k < 0 || k >= counts[a] as i64 {
                    ok = false;
                    break;
                }
                mv[a] = k as usize;
            }
            if !ok {
                continue;
            }
            let v = mv
                .iter()
                .enumerate()
                .fold(0usize, |acc, (a, &k)| acc * counts[a] + k);
            let pv = point(&mv);
            let mid: Vec<f64> = pu.iter().zip(&pv).map(|(a, b)| 0.5 * (a + b)).collect();
            let t = tensor.eval(&mid);
            let delta = DVector::from_vec(sub(&pv, &pu));
            let s = t.cholesky().expect("tensor must be SPD").solve(&delta);
            let cost = delta.dot(&s).max(0.0).sqrt();
            if dist[u] + cost < dist[v] {
                dist[v] = dist[u] + cost;
                heap.push((std::cmp::Reverse(ordered_float(dist[v])), v));
            }
        }
    }
    dist[target]
}

#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
#[allow(clippy::derive_ord_xor_partial_ord)]
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.partial_cmp(other).unwrap_or(std::cmp::Ordering::Equal)
    }
}
fn ordered_float(v: f64) -> OrdF64 {
    OrdF64(v)
}

// ---------------------------------------------------------------------------
// Assumption validation
// ---------------------------------------------------------------------------

/// Sampling plan for the assumption checks: a set of `z` evaluation points
/// and a per-axis quadrature resolution for the `w` variable.
#[derive(Debug, Clone)]
pub struct SamplePlan {
    pub z_points: Vec<Vec<f64>>,
    pub w_resolution: usize,
}

impl SamplePlan {
    pub fn line(d: usize, lo: f64, hi: f64, count: usize, w_resolution: usize) -> Self {
        let mut z_points = Vec::new();
        for k in 0..count {
            let t = if count == 1 { 0.5 } else { k as f64 / (count as f64 - 1.0) };
            let mut z = vec![0.0; d];
            z[0] = lo + t * (hi - lo);
            z_points.push(z);
        }
        SamplePlan { z_points, w_resolution }
    }
}

#[derive(Debug, Clone)]
pub struct AssumptionCheck {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Sampled surrogates of the assumption constants, plus empirical Lipschitz
/// estimates standing in for the moduli of continuity.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub checks: Vec<AssumptionCheck>,
    pub c_supp: f64,
    pub c_mom: f64,
    pub c_nd: f64,
    pub c_mu: f64,
    pub c_mu_upper: f64,
    pub c_meas: f64,
    pub c_int: f64,
    pub mu_lipschitz: f64,
    pub theta_lipschitz: f64,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Ellipticity window `[c, C]` for tensors derived from these constants.
    pub fn ellipticity_window(&self) -> (f64, f64) {
        (0.5 * self.c_mu * self.c_nd, 0.5 * self.c_int)
    }
}

/// Check the graph assumptions on a finite sample plan. Failures are report
/// entries, never errors.
pub fn validate_assumptions(
    spec: &ConnectivitySpec,
    base: &BaseMeasureSpec,
    plan: &SamplePlan,
) -> AssumptionReport {
    let d = plan.z_points.first().map_or(1, |z| z.len());
    let res = plan.w_resolution.max(4);
    let r = spec.support_radius;
    let h = 2.0 * r / res as f64;

    let mut checks = Vec::new();
    let mut c_supp_emp = 0.0f64;
    let mut c_mom_emp = 0.0f64;
    let mut sym_err = 0.0f64;
    let mut outside_support = true;
    let mut c_nd = f64::INFINITY;
    let mut mu_min = f64::INFINITY;
    let mut mu_max = 0.0f64;
    let mut mu_lip = 0.0f64;
    let mut theta_lip = 0.0f64;

    let total = res.pow(d as u32);
    let mut w = vec![0.0f64; d];
    for (zi, z) in plan.z_points.iter().enumerate() {
        let mv = base.eval(z);
        mu_min = mu_min.min(mv);
        mu_max = mu_max.max(mv);
        if zi + 1 < plan.z_points.len() {
            let z2 = &plan.z_points[zi + 1];
            let dz = norm2(&sub(z, z2)).sqrt();
            if dz > 0.0 {
                mu_lip = mu_lip.max((base.eval(z2) - mv).abs() / dz);
            }
        }

        let mut nd = vec![0.0f64; d];
        for flat in 0..total {
            let mut rem = flat;
            for a in (0..d).rev() {
                w[a] = -r + ((rem % res) as f64 + 0.5) * h;
                rem /= res;
            }
            let th = spec.theta(z, &w);
            if th > 0.0 {
                c_supp_emp = c_supp_emp.max(norm2(&w).sqrt());
            }
            c_mom_emp = c_mom_emp.max(norm2(&w) * th);
            let wneg: Vec<f64> = w.iter().map(|v| -v).collect();
            sym_err = sym_err.max((th - spec.theta(z, &wneg)).abs());
            for a in 0..d {
                nd[a] += w[a] * w[a] * th;
            }
            if zi + 1 < plan.z_points.len() {
                let z2 = &plan.z_points[zi + 1];
                let dz = norm2(&sub(z, z2)).sqrt();
                if dz > 0.0 {
                    theta_lip = theta_lip.max((spec.theta(z2, &w) - th).abs() / dz);
                }
            }
        }
        let cell = h.powi(d as i32);
        for a in 0..d {
            c_nd = c_nd.min(nd[a] * cell);
        }
        // probe beyond the declared support
        let mut wout = vec![0.0; d];
        wout[0] = 1.5 * r;
        if spec.theta(z, &wout) != 0.0 {
            outside_support = false;
        }
    }

    checks.push(AssumptionCheck {
        name: "theta1_symmetry".into(),
        pass: sym_err <= 1e-12,
        detail: format!("max |theta(z,w) - theta(z,-w)| = {sym_err:.3e}"),
    });
    checks.push(AssumptionCheck {
        name: "theta3_support".into(),
        pass: outside_support && c_supp_emp <= r * (1.0 + 1e-12),
        detail: format!("empirical support radius {c_supp_emp:.6} <= C_supp = {r}"),
    });
    checks.push(AssumptionCheck {
        name: "theta4_moment".into(),
        pass: c_mom_emp <= spec.mom_bound * (1.0 + 1e-9),
        detail: format!("max |w|^2 theta = {c_mom_emp:.6} <= C_mom = {}", spec.mom_bound),
    });
    checks.push(AssumptionCheck {
        name: "theta5_nondegeneracy".into(),
        pass: c_nd > 0.0,
        detail: format!("min_xi quadrature of |w.xi|^2 theta = {c_nd:.6}"),
    });
    checks.push(AssumptionCheck {
        name: "mu2_bounds".into(),
        pass: mu_min >= base.lower_bound - 1e-12
            && mu_max <= base.upper_bound + 1e-12
            && mu_min > 0.0,
        detail: format!("sampled mu_tilde in [{mu_min:.6}, {mu_max:.6}], declared [{}, {}]",
            base.lower_bound, base.upper_bound),
    });

    let c_meas = unit_ball_volume(d) * r.powi(d as i32);
    let c_int = mu_max * c_mom_emp.max(spec.mom_bound) * c_meas;

    AssumptionReport {
        checks,
        c_supp: c_supp_emp.max(0.0),
        c_mom: c_mom_emp,
        c_nd,
        c_mu: mu_min,
        c_mu_upper: mu_max,
        c_meas,
        c_int,
        mu_lipschitz: mu_lip,
        theta_lipschitz: theta_lip,
    }
}

// ---------------------------------------------------------------------------
// Graph file format
// ---------------------------------------------------------------------------

/// Write the graph in the columnar text format:
/// header `# epsgraph d=<d> eps=<eps> n=<N>`, node lines
/// `v <id> <x1..xd> <mu_i>`, edge lines `e <i> <j> <eta>` (each undirected
/// edge once, `i < j`).
pub fn write_graph<W: Write>(graph: &EpsGraph, out: &mut W) -> Result<()> {
    writeln!(out, "# epsgraph d={} eps={} n={}", graph.dim, graph.eps, graph.node_count())?;
    for i in 0..graph.node_count() {
        write!(out, "v {i}")?;
        for c in graph.node(i) {
            write!(out, " {c}")?;
        }
        writeln!(out, " {}", graph.mu()[i])?;
    }
    for e in graph.edges() {
        writeln!(out, "e {} {} {}", e.i, e.j, e.eta)?;
    }
    Ok(())
}

/// Read a graph written by [`write_graph`]. The cell volume is not part of
/// the format and is restored as 0 (it is only used during construction).
pub fn read_graph<R: BufRead>(input: R) -> Result<EpsGraph> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty graph file".into()))??;
    let mut dim = 0usize;
    let mut eps = 0.0f64;
    let mut n = 0usize;
    for tok in header.trim_start_matches('#').split_whitespace() {
        if let Some(v) = tok.strip_prefix("d=") {
            dim = v.parse().map_err(|_| Error::Parse(format!("bad d in header: {tok}")))?;
        } else if let Some(v) = tok.strip_prefix("eps=") {
            eps = v.parse().map_err(|_| Error::Parse(format!("bad eps in header: {tok}")))?;
        } else if let Some(v) = tok.strip_prefix("n=") {
            n = v.parse().map_err(|_| Error::Parse(format!("bad n in header: {tok}")))?;
        }
    }
    if dim == 0 || n == 0 {
        return Err(Error::Parse("graph header missing d= or n=".into()));
    }
    let mut coords = vec![0.0f64; n * dim];
    let mut mu = vec![0.0f64; n];
    let mut seen = vec![false; n];
    let mut edges = Vec::new();
    for line in lines {
        let line = line?;
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let id: usize = parse_tok(toks.next(), "node id")?;
                if id >= n {
                    return Err(Error::Parse(format!("node id {id} out of range")));
                }
                for a in 0..dim {
                    coords[id * dim + a] = parse_tok(toks.next(), "node coordinate")?;
                }
                mu[id] = parse_tok(toks.next(), "node weight")?;
                seen[id] = true;
            }
            Some("e") => {
                let i: u32 = parse_tok(toks.next(), "edge i")?;
                let j: u32 = parse_tok(toks.next(), "edge j")?;
                let eta: f64 = parse_tok(toks.next(), "edge weight")?;
                if i >= j {
                    return Err(Error::Parse(format!("edge must have i < j, got {i} {j}")));
                }
                edges.push(Edge { i, j, eta });
            }
            Some(t) if t.starts_with('#') => {}
            None => {}
            Some(t) => return Err(Error::Parse(format!("unknown record kind: {t}"))),
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::Parse("graph file missing node records".into()));
    }
    Ok(EpsGraph::from_parts(dim, eps, 0.0, coords, mu, edges))
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("bad {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::lattice_nodes;
    use approx::assert_relative_eq;

    #[test]
    fn gamma_half_values() {
        assert_relative_eq!(gamma_half(1), std::f64::consts::PI.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(gamma_half(2), 1.0, epsilon = 1e-14);
        assert_relative_eq!(gamma_half(5), 0.75 * std::f64::consts::PI.sqrt(), epsilon = 1e-14);
        assert_relative_eq!(gamma_half(6), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn ball_moment_constants() {
        assert_relative_eq!(ball_second_moment(1), 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(ball_second_moment(2), std::f64::consts::PI / 4.0, epsilon = 1e-14);
        assert_relative_eq!(unit_ball_volume(1), 2.0, epsilon = 1e-14);
        assert_relative_eq!(unit_ball_volume(2), std::f64::consts::PI, epsilon = 1e-14);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * std::f64::consts::PI / 3.0, epsilon = 1e-14);
        assert_relative_eq!(bump_second_moment(1), 16.0 / 105.0, epsilon = 1e-14);
        assert_relative_eq!(bump_second_moment(2), std::f64::consts::PI / 24.0, epsilon = 1e-14);
    }

    #[test]
    fn moment_constants_match_quadrature_oracle() {
        assert_relative_eq!(
            ball_second_moment_quadrature_oracle(1, 4000),
            ball_second_moment(1),
            max_relative = 1e-6
        );
        assert_relative_eq!(
            ball_second_moment_quadrature_oracle(2, 4000),
            ball_second_moment(2),
            max_relative = 1e-6
        );
    }

    #[test]
    fn eval_eta_examples() {
        let ball = ConnectivitySpec::ball(1.0);
        // d=1, eps=1: prefactor 1, |w| = 0.5 inside
        let v = eval_eta(&ball, 1.0, &[0.0], &[0.5]).unwrap();
        assert_relative_eq!(v, 1.0, epsilon = 1e-14);
        // outside support
        let v = eval_eta(&ball, 0.5, &[0.0], &[0.6]).unwrap();
        assert_eq!(v, 0.0);
        // d=2, eps=0.5 -> eps^{-4} = 16
        let v = eval_eta(&ball, 0.5, &[0.0, 0.0], &[0.2, 0.0]).unwrap();
        assert_relative_eq!(v, 16.0, epsilon = 1e-12);
        // diagonal is an error
        assert!(eval_eta(&ball, 1.0, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn build_graph_support_cutoff() {
        let ball = ConnectivitySpec::ball(1.0);
        let base = BaseMeasureSpec::uniform();
        let nodes = vec![vec![0.0], vec![0.5], vec![1.0]];
        let g = build_graph(&nodes, &base, &ball, 0.6, 0.5).unwrap();
        let pairs: Vec<(u32, u32)> = g.edges().iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, vec![(0, 1), (1, 2)]);
        assert_relative_eq!(g.mu()[0], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn build_graph_single_node() {
        let g = build_graph(
            &[vec![0.0]],
            &BaseMeasureSpec::uniform(),
            &ConnectivitySpec::ball(1.0),
            0.5,
            1.0,
        )
        .unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn build_graph_duplicate_nodes() {
        let err = build_graph(
            &[vec![0.0], vec![0.0]],
            &BaseMeasureSpec::uniform(),
            &ConnectivitySpec::ball(1.0),
            0.5,
            1.0,
        );
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn build_graph_neighbor_count_41() {
        // 41 nodes on [0,2], eps=0.3, h=0.05: the |w| = eps boundary pair is
        // excluded, interior nodes see 5 neighbors per side.
        let nodes = lattice_nodes(&[0.0], &[2.0], 0.05);
        assert_eq!(nodes.len(), 41);
        let g = build_graph(
            &nodes,
            &BaseMeasureSpec::uniform(),
            &ConnectivitySpec::ball(1.0),
            0.3,
            0.05,
        )
        .unwrap();
        // brute-force oracle
        for i in 0..nodes.len() {
            let expected = (0..nodes.len())
                .filter(|&j| j != i)
                .filter(|&j| {
                    let w = (nodes[i][0] - nodes[j][0]).abs() / 0.3;
                    w < 1.0 - 1e-9
                })
                .count();
            assert_eq!(g.neighbors(i).len(), expected, "node {i}");
        }
        let interior = 10;
        assert_eq!(g.neighbors(20).len(), interior);
    }

    #[test]
    fn graph_edges_satisfy_locality_and_moment_bound() {
        let nodes = lattice_nodes(&[0.0, 0.0], &[1.0, 1.0], 0.1);
        let spec = ConnectivitySpec::smooth_bump_unit(2);
        let g = build_graph(&nodes, &BaseMeasureSpec::uniform(), &spec, 0.35, 0.01).unwrap();
        assert!(g.edge_count() > 0);
        let eps = 0.35f64;
        for e in g.edges() {
            let d2 = norm2(&sub(g.node(e.i as usize), g.node(e.j as usize)));
            assert!(d2.sqrt() <= spec.support_radius * eps * (1.0 + 1e-12));
            assert!(d2 * e.eta <= spec.mom_bound / eps.powi(2) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn tensor_eps_isolated_node_is_zero() {
        let g = build_graph(
            &[vec![0.0], vec![10.0]],
            &BaseMeasureSpec::uniform(),
            &ConnectivitySpec::ball(1.0),
            0.5,
            1.0,
        )
        .unwrap();
        assert_eq!(tensor_eps(&g, 0), DMatrix::zeros(1, 1));
    }

    #[test]
    fn tensor_eps_1d_approaches_one_third() {
        // ball theta, uniform base: T = 1/2 int_{-1}^{1} w^2 dw = 1/3,
        // with errors decreasing along eps at fixed fine h.
        let base = BaseMeasureSpec::uniform();
        let ball = ConnectivitySpec::ball(1.0);
        let mut errs = Vec::new();
        for eps in [0.4, 0.2, 0.1] {
            let h = eps / 64.0;
            let nodes = lattice_nodes(&[-1.0], &[1.0], h);
            let g = build_graph(&nodes, &base, &ball, eps, h).unwrap();
            let mid = nodes.len() / 2;
            let t = tensor_eps(&g, mid);
            errs.push((t[(0, 0)] - 1.0 / 3.0).abs());
        }
        assert!(errs[2] < 0.02, "final error {}", errs[2]);
    }

    #[test]
    fn tensor_eps_2d_approaches_pi_over_8() {
        // for constant mu and z-independent theta the semi-discrete tensor is
        // (pi/8) Id for every eps, so refining h at fixed eps converges to it
        let base = BaseMeasureSpec::uniform();
        let ball = ConnectivitySpec::ball(1.0);
        let eps = 0.3;
        let mut errs = Vec::new();
        for div in [8.0, 16.0, 32.0] {
            let h = eps / div;
            let nodes = lattice_nodes(&[-0.45, -0.45], &[0.45, 0.45], h);
            let g = build_graph(&nodes, &base, &ball, eps, h * h).unwrap();
            let mut center = 0;
            let mut best = f64::INFINITY;
            for i in 0..g.node_count() {
                let d2 = norm2(g.node(i));
                if d2 < best {
                    best = d2;
                    center = i;
                }
            }
            let t = tensor_eps(&g, center);
            let target = DMatrix::identity(2, 2) * (std::f64::consts::PI / 8.0);
            errs.push((t - &target).norm() / target.norm());
        }
        assert!(errs[2] < errs[0], "errors {errs:?}");
        assert!(errs[2] < 0.03, "relative error {}", errs[2]);
    }

    #[test]
    fn tensor_eps_is_symmetric_and_psd() {
        let nodes = lattice_nodes(&[-0.6, -0.6], &[0.6, 0.6], 0.06);
        let g = build_graph(
            &nodes,
            &BaseMeasureSpec::one_plus_sine(0.4),
            &ConnectivitySpec::smooth_bump_unit(2),
            0.3,
            0.0036,
        )
        .unwrap();
        for i in (0..g.node_count()).step_by(17) {
            let t = tensor_eps(&g, i);
            let sym = (&t - t.transpose()).norm();
            assert!(sym <= 1e-12 * t.norm().max(1.0));
            let min_eig = t.symmetric_eigen().eigenvalues.min();
            assert!(min_eig >= -1e-12, "min eigenvalue {min_eig} at node {i}");
        }
    }

    #[test]
    fn tensor_limit_normalized_ball_is_identity() {
        let spec = ConnectivitySpec::ball_normalized(2);
        let base = BaseMeasureSpec::uniform();
        let t = tensor_limit(&spec, &base, &[0.3, -0.1], 400);
        let err = (&t - DMatrix::identity(2, 2)).norm() / 2.0f64.sqrt();
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn tensor_limit_zero_theta_is_zero() {
        let spec = ConnectivitySpec::tabulated(|_, _| 0.0, 1.0, 0.0);
        let base = BaseMeasureSpec::uniform();
        let t = tensor_limit(&spec, &base, &[0.0], 50);
        assert_eq!(t[(0, 0)], 0.0);
        let field = TensorField::LimitTensor {
            spec: Arc::new(spec),
            base: Arc::new(base),
            resolution: 50,
        };
        assert!(field.validate_at(&[0.0], 1e-6, 10.0).is_err());
    }

    #[test]
    fn tensor_closed_form_identity_normalization() {
        let d = 2;
        let cd = ball_second_moment(d);
        let t = tensor_closed_form(&DMatrix::identity(d, d), 1.0, 2.0 / cd).unwrap();
        assert_relative_eq!((t - DMatrix::identity(d, d)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn tensor_closed_form_rejects_non_spd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]); // eigenvalues 3, -1
        assert!(tensor_closed_form(&m, 1.0, 1.0).is_err());
    }

    #[test]
    fn dt_distance_examples() {
        let id = TensorField::identity(2);
        let d = dt_distance(&id, &[0.0, 0.0], &[3.0, 4.0], 16);
        assert_relative_eq!(d, 5.0, epsilon = 1e-12);

        let t = TensorField::constant(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]));
        let d = dt_distance(&t, &[0.0, 0.0], &[1.0, 0.0], 16);
        assert_relative_eq!(d, 0.5, epsilon = 1e-12);

        let c = 2.5f64;
        let t = TensorField::constant(DMatrix::identity(2, 2) * c);
        let d = dt_distance(&t, &[0.0, 1.0], &[2.0, -1.0], 16);
        assert_relative_eq!(d, (8.0f64).sqrt() / c.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn dt_distance_triangle_inequality_constant() {
        let t = TensorField::constant(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]));
        let pts = [
            [0.0, 0.0],
            [1.0, 0.3],
            [-0.4, 0.9],
            [0.7, -0.2],
            [0.1, 0.6],
        ];
        for a in &pts {
            for b in &pts {
                for c in &pts {
                    let dab = dt_distance(&t, a, b, 8);
                    let dbc = dt_distance(&t, b, c, 8);
                    let dac = dt_distance(&t, a, c, 8);
                    assert!(dac <= dab + dbc + 1e-12);
                }
            }
        }
    }

    #[test]
    fn dt_distance_variable_tensor_lattice() {
        // Tabulated constant-identity tensor goes through the lattice path;
        // the 1D lattice distance is exact for straight segments.
        let t = TensorField::Tabulated(Arc::new(|_x: &[f64]| DMatrix::identity(1, 1)));
        assert!(!t.is_constant());
        let d = dt_distance(&t, &[0.0], &[1.0], 64);
        assert_relative_eq!(d, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn validate_assumptions_ball_passes() {
        let spec = ConnectivitySpec::ball(1.0);
        let base = BaseMeasureSpec::uniform();
        let plan = SamplePlan::line(1, -1.0, 1.0, 5, 128);
        let rep = validate_assumptions(&spec, &base, &plan);
        assert!(rep.all_pass(), "{:#?}", rep.checks);
        assert!((rep.c_supp - 1.0).abs() < 0.02);
    }

    #[test]
    fn validate_assumptions_annulus_nondegenerate() {
        // theta supported on 0.5 <= |w| <= 1 with constant value
        let spec = ConnectivitySpec::tabulated(
            |_z, w| {
                let r2 = norm2(w);
                if (0.25..=1.0).contains(&r2) {
                    2.0
                } else {
                    0.0
                }
            },
            1.0,
            2.0,
        );
        let base = BaseMeasureSpec::uniform();
        let plan = SamplePlan::line(2, 0.0, 1.0, 3, 64);
        let rep = validate_assumptions(&spec, &base, &plan);
        assert!(rep.all_pass());
        assert!(rep.c_nd > 0.1);
    }

    #[test]
    fn validate_assumptions_degenerate_density_fails() {
        let base = BaseMeasureSpec::new(|x: &[f64]| x[0].max(0.0), 0.0, 2.0);
        let spec = ConnectivitySpec::ball(1.0);
        let plan = SamplePlan::line(1, -1.0, 1.0, 5, 32);
        let rep = validate_assumptions(&spec, &base, &plan);
        assert!(!rep.all_pass());
        assert!(rep.checks.iter().any(|c| c.name == "mu2_bounds" && !c.pass));
    }

    #[test]
    fn graph_roundtrip_through_text_format() {
        let nodes = lattice_nodes(&[0.0], &[1.0], 0.25);
        let g = build_graph(
            &nodes,
            &BaseMeasureSpec::one_plus_sine(0.3),
            &ConnectivitySpec::ball(1.0),
            0.6,
            0.25,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_graph(&g, &mut buf).unwrap();
        let g2 = read_graph(std::io::BufReader::new(buf.as_slice())).unwrap();
        assert_eq!(g2.node_count(), g.node_count());
        assert_eq!(g2.edge_count(), g.edge_count());
        assert_eq!(g2.eps, g.eps);
        for i in 0..g.node_count() {
            assert_eq!(g2.node(i), g.node(i));
            assert_eq!(g2.mu()[i], g.mu()[i]);
        }
        for (a, b) in g.edges().iter().zip(g2.edges()) {
            assert_eq!((a.i, a.j), (b.i, b.j));
            assert_eq!(a.eta, b.eta);
        }
    }
}
