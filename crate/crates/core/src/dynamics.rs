//! Time integration: explicit upwind Euler for the graph equation and a
//! donor-cell finite-volume scheme for the limiting tensor-mobility
//! equation.

use std::io::Write;

use crate::calculus::{
    upwind_flux, velocity_field, EdgeField, InteractionKernel, NodeMeasure,
};
use crate::error::{Error, Result};
use crate::geometry::{EpsGraph, TensorField};
use crate::grid::UniformGrid;

/// Time step selection for the explicit solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtPolicy {
    Fixed(f64),
    Adaptive { safety: f64 },
}

/// Solver options shared by the graph and local solvers.
#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub t_end: f64,
    pub dt_policy: DtPolicy,
    /// Record every `snapshot_stride`-th step (the initial and final states
    /// are always recorded). Ignored when `store_fluxes` is set, which
    /// records every step.
    pub snapshot_stride: usize,
    /// Store the flux used by each recorded step; required by the
    /// energetics evaluators. Forces per-step recording.
    pub store_fluxes: bool,
    /// Replaces the infinite CFL bound when the velocity vanishes.
    pub dt_max: f64,
    /// Step boundaries are forced onto these times and the states there are
    /// recorded, so comparisons across runs land on identical times.
    pub record_times: Vec<f64>,
}

impl SolveOptions {
    pub fn new(t_end: f64) -> Self {
        SolveOptions {
            t_end,
            dt_policy: DtPolicy::Adaptive { safety: 0.5 },
            snapshot_stride: 1,
            store_fluxes: false,
            dt_max: t_end,
            record_times: Vec::new(),
        }
    }

    pub fn with_policy(mut self, policy: DtPolicy) -> Self {
        self.dt_policy = policy;
        self
    }

    pub fn storing_fluxes(mut self) -> Self {
        self.store_fluxes = true;
        self
    }

    pub fn with_record_times(mut self, times: &[f64]) -> Self {
        self.record_times = times.to_vec();
        self
    }
}

/// Run metadata carried by trajectories into exports.
#[derive(Debug, Clone, Default)]
pub struct TrajectoryMeta {
    /// `eps=<value>` for graph runs, `local` for grid runs.
    pub scale: String,
    pub dt_description: String,
    pub kernel_id: String,
    pub grid_id: String,
}

/// Discrete-time curve of node measures with the per-step fluxes that
/// produced it.
#[derive(Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<NodeMeasure>,
    /// `fluxes[k]` moved `states[k]` to `states[k+1]`; present only for
    /// per-step recordings.
    pub fluxes: Option<Vec<EdgeField>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    /// State at the latest recorded time `<= t + tol`.
    pub fn state_at(&self, t: f64) -> &NodeMeasure {
        let mut best = 0usize;
        for (k, &tk) in self.times.iter().enumerate() {
            if tk <= t + 1e-9 {
                best = k;
            }
        }
        &self.states[best]
    }

    pub fn final_state(&self) -> &NodeMeasure {
        self.states.last().expect("trajectory has at least the initial state")
    }
}

// ---------------------------------------------------------------------------
// Graph solver
// ---------------------------------------------------------------------------

/// Largest stable step for the explicit upwind update:
/// `dt = safety / max_i sum_j eta_ij (v_ij)_+ mu_j`.
///
/// Returns `+inf` when the velocity vanishes; callers replace it by their
/// `dt_max`.
pub fn cfl_dt(rho: &NodeMeasure, graph: &EpsGraph, v: &EdgeField, safety: f64) -> f64 {
    let _ = rho;
    let rate = max_outflow_rate(graph, v);
    if rate == 0.0 {
        f64::INFINITY
    } else {
        safety / rate
    }
}

fn outflow_rates(graph: &EpsGraph, v: &EdgeField) -> Vec<f64> {
    let mu = graph.mu();
    let mut rates = vec![0.0f64; graph.node_count()];
    for (i, slot) in rates.iter_mut().enumerate() {
        let mut acc = 0.0;
        for nb in graph.neighbors(i) {
            let e = graph.edges()[nb.edge as usize];
            let vij = v.value(nb.edge as usize, nb.forward);
            acc += e.eta * vij.max(0.0) * mu[nb.node as usize];
        }
        *slot = acc;
    }
    rates
}

fn max_outflow_rate(graph: &EpsGraph, v: &EdgeField) -> f64 {
    outflow_rates(graph, v).into_iter().fold(0.0, f64::max)
}

/// One explicit upwind Euler step of the graph interaction equation.
///
/// Returns the new measure and the flux used. Mass is conserved up to
/// rounding and all masses stay nonnegative under the CFL precondition
/// `dt <= cfl_dt(.., safety = 1)`.
pub fn step_nl2ie(
    rho: &NodeMeasure,
    graph: &EpsGraph,
    kernel: &InteractionKernel,
    dt: f64,
) -> Result<(NodeMeasure, EdgeField)> {
    let v = velocity_field(kernel, rho, graph);
    step_with_velocity(rho, graph, &v, dt)
}

fn step_with_velocity(
    rho: &NodeMeasure,
    graph: &EpsGraph,
    v: &EdgeField,
    dt: f64,
) -> Result<(NodeMeasure, EdgeField)> {
    let rates = outflow_rates(graph, v);
    let (worst, &worst_rate) = rates
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("nonempty graph");
    if dt * worst_rate > 1.0 + 1e-9 {
        return Err(Error::precondition(format!(
            "CFL violated: dt = {dt} exceeds {} allowed by node {worst} (outflow rate {worst_rate})",
            1.0 / worst_rate
        )));
    }
    let j = upwind_flux(rho, graph, v)?;
    let mut masses = rho.masses().to_vec();
    for (i, m) in masses.iter_mut().enumerate() {
        let mut net = 0.0;
        for nb in graph.neighbors(i) {
            let e = graph.edges()[nb.edge as usize];
            net += e.eta * j.value(nb.edge as usize, nb.forward);
        }
        *m -= dt * net;
        // rounding guard: the update is nonnegative in exact arithmetic
        if *m < 0.0 {
            debug_assert!(*m > -1e-12, "mass undershoot {m} at node {i}");
            *m = 0.0;
        }
    }
    Ok((NodeMeasure::new(masses)?, j))
}

/// Integrate the graph equation on `[0, t_end]`.
pub fn solve_nl2ie(
    rho0: &NodeMeasure,
    graph: &EpsGraph,
    kernel: &InteractionKernel,
    opts: &SolveOptions,
) -> Result<Trajectory> {
    if (rho0.total() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "solve_nl2ie: initial measure has total {} (must be a probability measure)",
            rho0.total()
        )));
    }
    for (i, &m) in rho0.masses().iter().enumerate() {
        if m > 0.0 && graph.mu()[i] == 0.0 {
            return Err(Error::invalid(format!(
                "solve_nl2ie: initial mass at node {i} outside supp(mu)"
            )));
        }
    }

    let per_step = opts.store_fluxes || opts.snapshot_stride <= 1;
    let mut times = vec![0.0];
    let mut states = vec![rho0.clone()];
    let mut fluxes: Option<Vec<EdgeField>> = if opts.store_fluxes { Some(Vec::new()) } else { None };

    let mut boundaries = opts.record_times.clone();
    boundaries.retain(|&t| t > 0.0 && t < opts.t_end - 1e-12);
    boundaries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    boundaries.push(opts.t_end);

    let mut rho = rho0.clone();
    let mut t = 0.0;
    let mut step_index = 0usize;
    let mut boundary_idx = 0usize;

    while t < opts.t_end - 1e-12 {
        let v = velocity_field(kernel, &rho, graph);
        let mut dt = match opts.dt_policy {
            DtPolicy::Fixed(dt) => dt,
            DtPolicy::Adaptive { safety } => cfl_dt(&rho, graph, &v, safety).min(opts.dt_max),
        };
        if !(dt > 0.0) {
            return Err(Error::precondition("solve_nl2ie: nonpositive time step"));
        }
        while boundaries[boundary_idx] <= t + 1e-12 {
            boundary_idx += 1;
        }
        let next_boundary = boundaries[boundary_idx];
        let mut hit_boundary = false;
        if t + dt >= next_boundary - 1e-12 {
            dt = next_boundary - t;
            hit_boundary = true;
        }
        let (next, j) = step_with_velocity(&rho, graph, &v, dt)?;
        t = if hit_boundary { next_boundary } else { t + dt };
        step_index += 1;
        rho = next;
        let record = per_step
            || step_index % opts.snapshot_stride == 0
            || hit_boundary
            || t >= opts.t_end - 1e-12;
        if record {
            if let Some(fl) = fluxes.as_mut() {
                fl.push(j);
            }
            times.push(t);
            states.push(rho.clone());
        } else if opts.store_fluxes {
            unreachable!("store_fluxes records every step");
        }
    }

    Ok(Trajectory {
        times,
        states,
        fluxes,
        meta: TrajectoryMeta {
            scale: format!("eps={}", graph.eps),
            dt_description: format!("{:?}", opts.dt_policy),
            kernel_id: String::new(),
            grid_id: format!("graph_n={}", graph.node_count()),
        },
    })
}

/// Fixed step `t_end / n` with `n` chosen so the initial CFL bound times
/// `safety` is respected; convenient for Richardson comparisons.
pub fn fixed_dt_from_initial_cfl(
    rho0: &NodeMeasure,
    graph: &EpsGraph,
    kernel: &InteractionKernel,
    safety: f64,
    t_end: f64,
) -> f64 {
    let v = velocity_field(kernel, rho0, graph);
    let bound = cfl_dt(rho0, graph, &v, safety);
    if !bound.is_finite() {
        return t_end;
    }
    let n = (t_end / bound).ceil().max(1.0);
    t_end / n
}

// ---------------------------------------------------------------------------
// Local solver
// ---------------------------------------------------------------------------

/// Cell masses on a uniform grid.
#[derive(Debug, Clone)]
pub struct LocalState {
    pub grid: UniformGrid,
    pub masses: Vec<f64>,
}

impl LocalState {
    pub fn from_profile(grid: UniformGrid, profile: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut masses: Vec<f64> = (0..grid.cell_count())
            .map(|c| profile(&grid.center(c)).max(0.0) * grid.cell_volume())
            .collect();
        let total: f64 = masses.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("profile integrates to zero on the grid"));
        }
        for m in &mut masses {
            *m /= total;
        }
        Ok(LocalState { grid, masses })
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }
}

/// Tensor rows presampled at interior face centers, one set per axis.
///
/// For axis `a`, entry `f` stores row `a` of `T(x_f)` at the face between
/// cells `c` and `c + e_a`.
pub struct FaceTensors {
    pub rows: Vec<Vec<f64>>, // per axis: face_count * dim values
    pub face_shapes: Vec<Vec<usize>>,
}

impl FaceTensors {
    pub fn sample(grid: &UniformGrid, tensor: &TensorField) -> Self {
        let d = grid.dim;
        let mut rows = Vec::with_capacity(d);
        let mut face_shapes = Vec::with_capacity(d);
        for a in 0..d {
            let mut shape = grid.shape.clone();
            shape[a] -= 1; // interior faces
            let count: usize = shape.iter().product();
            let mut vals = vec![0.0f64; count * d];
            for f in 0..count {
                let multi = unravel(f, &shape);
                let x = face_center(grid, a, &multi);
                let t = tensor.eval(&x);
                for b in 0..d {
                    vals[f * d + b] = t[(a, b)];
                }
            }
            rows.push(vals);
            face_shapes.push(shape);
        }
        FaceTensors { rows, face_shapes }
    }
}

fn unravel(mut idx: usize, shape: &[usize]) -> Vec<usize> {
    let mut multi = vec![0usize; shape.len()];
    for a in (0..shape.len()).rev() {
        multi[a] = idx % shape[a];
        idx /= shape[a];
    }
    multi
}

fn face_center(grid: &UniformGrid, axis: usize, multi: &[usize]) -> Vec<f64> {
    (0..grid.dim)
        .map(|b| {
            if b == axis {
                grid.origin[b] + (multi[b] as f64 + 1.0) * grid.spacing
            } else {
                grid.origin[b] + (multi[b] as f64 + 0.5) * grid.spacing
            }
        })
        .collect()
}

/// `(grad K * rho + grad P)(x)` by exact summation over cell masses.
pub fn local_energy_gradient(
    kernel: &InteractionKernel,
    state: &LocalState,
    x: &[f64],
) -> Vec<f64> {
    let d = state.grid.dim;
    let mut g = kernel.potential_gradient(x);
    for c in 0..state.grid.cell_count() {
        let m = state.masses[c];
        if m != 0.0 {
            let gc = kernel.grad_x(x, &state.grid.center(c));
            for b in 0..d {
                g[b] += gc[b] * m;
            }
        }
    }
    g
}

struct FaceFluxes {
    /// Per axis: donor-cell mass rate through each interior face.
    mass_rates: Vec<Vec<f64>>,
    /// Per cell: total outgoing rate divided by cell mass (CFL rate).
    cfl_rates: Vec<f64>,
}

fn compute_face_fluxes(
    state: &LocalState,
    kernel: &InteractionKernel,
    tensors: &FaceTensors,
) -> FaceFluxes {
    let grid = &state.grid;
    let d = grid.dim;
    let h = grid.spacing;
    let mut mass_rates = Vec::with_capacity(d);
    let mut cfl = vec![0.0f64; grid.cell_count()];
    for a in 0..d {
        let shape = &tensors.face_shapes[a];
        let count: usize = shape.iter().product();
        let mut rates = vec![0.0f64; count];
        for f in 0..count {
            let multi = unravel(f, shape);
            let x = face_center(grid, a, &multi);
            let g = local_energy_gradient(kernel, state, &x);
            let row = &tensors.rows[a][f * d..(f + 1) * d];
            // u = -(T g) . e_a
            let u: f64 = -row.iter().zip(&g).map(|(r, gg)| r * gg).sum::<f64>();
            let left_idx = grid.ravel(&multi);
            let right_idx = {
                let mut r = multi.clone();
                r[a] += 1;
                grid.ravel(&r)
            };
            let donor = if u >= 0.0 { left_idx } else { right_idx };
            rates[f] = u * state.masses[donor] / h;
            if u > 0.0 {
                cfl[left_idx] += u / h;
            } else {
                cfl[right_idx] += -u / h;
            }
        }
        mass_rates.push(rates);
    }
    FaceFluxes { mass_rates, cfl_rates: cfl }
}

/// One donor-cell finite-volume step of the tensor-mobility equation.
///
/// Returns the new state and the per-cell flux density vectors (average of
/// the adjacent face flux densities along each axis), used by the local
/// energetics evaluators.
pub fn step_local(
    state: &LocalState,
    kernel: &InteractionKernel,
    tensors: &FaceTensors,
    dt: f64,
) -> Result<(LocalState, Vec<f64>)> {
    let fluxes = compute_face_fluxes(state, kernel, tensors);
    step_local_precomputed(state, &fluxes, dt)
}

fn step_local_precomputed(
    state: &LocalState,
    fluxes: &FaceFluxes,
    dt: f64,
) -> Result<(LocalState, Vec<f64>)> {
    let grid = &state.grid;
    let d = grid.dim;
    let max_rate = fluxes.cfl_rates.iter().cloned().fold(0.0, f64::max);
    if dt * max_rate > 1.0 + 1e-9 {
        let worst = fluxes
            .cfl_rates
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(c, _)| c)
            .unwrap_or(0);
        return Err(Error::precondition(format!(
            "local CFL violated: dt = {dt} exceeds {} allowed by cell {worst}",
            1.0 / max_rate
        )));
    }
    let mut masses = state.masses.clone();
    let vol = grid.cell_volume();
    let mut cell_flux = vec![0.0f64; grid.cell_count() * d];
    for a in 0..d {
        let shape = unravel_shape(grid, a);
        let count: usize = shape.iter().product();
        for f in 0..count {
            let multi = unravel(f, &shape);
            let mut right = multi.clone();
            right[a] += 1;
            let li = grid.ravel(&multi);
            let ri = grid.ravel(&right);
            let rate = fluxes.mass_rates[a][f];
            masses[li] -= dt * rate;
            masses[ri] += dt * rate;
            // flux density at the face: rate * h / vol
            let density = rate * grid.spacing / vol;
            cell_flux[li * d + a] += 0.5 * density;
            cell_flux[ri * d + a] += 0.5 * density;
        }
    }
    for m in &mut masses {
        if *m < 0.0 {
            debug_assert!(*m > -1e-12, "cell mass undershoot {m}");
            *m = 0.0;
        }
    }
    Ok((LocalState { grid: grid.clone(), masses }, cell_flux))
}

fn unravel_shape(grid: &UniformGrid, axis: usize) -> Vec<usize> {
    let mut shape = grid.shape.clone();
    shape[axis] -= 1;
    shape
}

/// Trajectory of the local solver.
#[derive(Clone)]
pub struct LocalTrajectory {
    pub grid: UniformGrid,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Per recorded step: cell flux densities (cells x dim), when stored.
    pub fluxes: Option<Vec<Vec<f64>>>,
    pub meta: TrajectoryMeta,
}

impl LocalTrajectory {
    pub fn state_at(&self, t: f64) -> &[f64] {
        let mut best = 0usize;
        for (k, &tk) in self.times.iter().enumerate() {
            if tk <= t + 1e-9 {
                best = k;
            }
        }
        &self.states[best]
    }
}

/// Integrate the tensor-mobility equation on `[0, t_end]`.
pub fn solve_nlie_local(
    state0: &LocalState,
    kernel: &InteractionKernel,
    tensor: &TensorField,
    opts: &SolveOptions,
) -> Result<LocalTrajectory> {
    if (state0.total() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "solve_nlie_local: initial total {} (must be a probability measure)",
            state0.total()
        )));
    }
    let tensors = FaceTensors::sample(&state0.grid, tensor);

    let per_step = opts.store_fluxes || opts.snapshot_stride <= 1;
    let mut times = vec![0.0];
    let mut states = vec![state0.masses.clone()];
    let mut fluxes: Option<Vec<Vec<f64>>> = if opts.store_fluxes { Some(Vec::new()) } else { None };

    let mut boundaries = opts.record_times.clone();
    boundaries.retain(|&t| t > 0.0 && t < opts.t_end - 1e-12);
    boundaries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    boundaries.push(opts.t_end);

    let mut state = state0.clone();
    let mut t = 0.0;
    let mut step_index = 0usize;
    let mut boundary_idx = 0usize;
    while t < opts.t_end - 1e-12 {
        let face = compute_face_fluxes(&state, kernel, &tensors);
        let max_rate = face.cfl_rates.iter().cloned().fold(0.0, f64::max);
        let mut dt = match opts.dt_policy {
            DtPolicy::Fixed(dt) => dt,
            DtPolicy::Adaptive { safety } => {
                if max_rate == 0.0 {
                    opts.dt_max
                } else {
                    (safety / max_rate).min(opts.dt_max)
                }
            }
        };
        while boundaries[boundary_idx] <= t + 1e-12 {
            boundary_idx += 1;
        }
        let next_boundary = boundaries[boundary_idx];
        let mut hit_boundary = false;
        if t + dt >= next_boundary - 1e-12 {
            dt = next_boundary - t;
            hit_boundary = true;
        }
        let (next, cell_flux) = step_local_precomputed(&state, &face, dt)?;
        t = if hit_boundary { next_boundary } else { t + dt };
        step_index += 1;
        state = next;
        let record = per_step
            || step_index % opts.snapshot_stride == 0
            || hit_boundary
            || t >= opts.t_end - 1e-12;
        if record {
            if let Some(fl) = fluxes.as_mut() {
                fl.push(cell_flux);
            }
            times.push(t);
            states.push(state.masses.clone());
        }
    }

    Ok(LocalTrajectory {
        grid: state0.grid.clone(),
        times,
        states,
        fluxes,
        meta: TrajectoryMeta {
            scale: "local".into(),
            dt_description: format!("{:?}", opts.dt_policy),
            kernel_id: String::new(),
            grid_id: format!("grid_{:?}", state0.grid.shape),
        },
    })
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

/// Trajectory CSV with columns `t, node_or_cell_id, x1..xd, mass`.
pub fn write_graph_trajectory_csv<W: Write>(
    traj: &Trajectory,
    graph: &EpsGraph,
    out: &mut W,
) -> Result<()> {
    write_csv_header(graph.dim, out)?;
    for (k, state) in traj.states.iter().enumerate() {
        let t = traj.times[k];
        for i in 0..graph.node_count() {
            write!(out, "{t},{i}")?;
            for c in graph.node(i) {
                write!(out, ",{c}")?;
            }
            writeln!(out, ",{}", state.masses()[i])?;
        }
    }
    Ok(())
}

/// Local trajectory CSV in the same format (cells as ids).
pub fn write_local_trajectory_csv<W: Write>(traj: &LocalTrajectory, out: &mut W) -> Result<()> {
    write_csv_header(traj.grid.dim, out)?;
    for (k, state) in traj.states.iter().enumerate() {
        let t = traj.times[k];
        for c in 0..traj.grid.cell_count() {
            write!(out, "{t},{c}")?;
            for x in traj.grid.center(c) {
                write!(out, ",{x}")?;
            }
            writeln!(out, ",{}", state[c])?;
        }
    }
    Ok(())
}

fn write_csv_header<W: Write>(dim: usize, out: &mut W) -> Result<()> {
    write!(out, "t,node_or_cell_id")?;
    for a in 1..=dim {
        write!(out, ",x{a}")?;
    }
    writeln!(out, ",mass")?;
    Ok(())
}

/// Sidecar metadata for a trajectory CSV, JSON syntax.
pub fn write_trajectory_meta_json<W: Write>(
    meta: &TrajectoryMeta,
    config_hash: &str,
    out: &mut W,
) -> Result<()> {
    writeln!(out, "{{")?;
    writeln!(out, "  \"scale\": \"{}\",", escape(&meta.scale))?;
    writeln!(out, "  \"dt\": \"{}\",", escape(&meta.dt_description))?;
    writeln!(out, "  \"kernel\": \"{}\",", escape(&meta.kernel_id))?;
    writeln!(out, "  \"grid\": \"{}\",", escape(&meta.grid_id))?;
    writeln!(out, "  \"config_hash\": \"{}\"", escape(config_hash))?;
    writeln!(out, "}}")?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
