//! The convergence sweep: one graph run per scale against a single local
//! reference run, with error metrics, dissipation ledgers and report
//! emission.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use nlie_core::calculus::NodeMeasure;
use nlie_core::dynamics::{
    solve_nl2ie, solve_nlie_local, write_graph_trajectory_csv, write_local_trajectory_csv,
    write_trajectory_meta_json, LocalState, LocalTrajectory, SolveOptions, Trajectory,
};
use nlie_core::energetics::{dissipation_ledger, write_ledger_csv};
use nlie_core::geometry::{build_graph, EpsGraph, TensorField};
use nlie_core::grid::{lattice_nodes, UniformGrid};
use nlie_core::{Error, Result};

use crate::config::ExperimentConfig;
use crate::metrics::{error_metric, ErrorMetric};

/// Per-scale summary row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub eps: f64,
    pub spacing: f64,
    pub nodes: usize,
    pub steps: usize,
    /// `(t, error-to-local)` at each snapshot time.
    pub errors: Vec<(f64, f64)>,
    pub energy_initial: f64,
    pub energy_final: f64,
    pub de_giorgi: f64,
    pub slope_integral: f64,
    pub max_legendre_gap: f64,
}

/// Sweep outcome: rows sorted by eps descending plus observed orders and
/// soft monotonicity flags (hard assertions live in the test suite).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub config_hash: String,
    pub snapshot_times: Vec<f64>,
    pub rows: Vec<SweepRow>,
    /// Observed order between consecutive eps at the final snapshot time
    /// (descriptive only; no rate is asserted).
    pub observed_orders: Vec<f64>,
    pub errors_strictly_decreasing: Vec<bool>,
    pub metric: String,
}

/// A single graph run at one scale, including everything the energetics
/// evaluators need.
pub struct MemberRun {
    pub eps: f64,
    pub graph: EpsGraph,
    pub trajectory: Trajectory,
}

/// Build the member graph for a scale.
pub fn member_graph(config: &ExperimentConfig, eps: f64) -> Result<EpsGraph> {
    let spacing = config.member_spacing(eps);
    let nodes = lattice_nodes(&config.domain.lo, &config.domain.hi, spacing);
    let cell_volume = spacing.powi(config.dimension as i32);
    build_graph(
        &nodes,
        &config.base_measure(),
        &config.connectivity_spec()?,
        eps,
        cell_volume,
    )
}

/// Solve one sweep member, storing fluxes for the ledger.
pub fn run_member(config: &ExperimentConfig, eps: f64, record_times: &[f64]) -> Result<MemberRun> {
    let graph = member_graph(config, eps)?;
    let profile = config.rho0_profile();
    let rho0 = NodeMeasure::from_profile(&graph, |x| profile(x))?;
    let mut opts = SolveOptions::new(config.t_end)
        .with_policy(config.dt_policy())
        .with_record_times(record_times)
        .storing_fluxes();
    opts.snapshot_stride = config.snapshots;
    let kernel = config.interaction_kernel();
    let mut trajectory = solve_nl2ie(&rho0, &graph, &kernel, &opts)?;
    trajectory.meta.kernel_id = config.kernel_id();
    Ok(MemberRun { eps, graph, trajectory })
}

/// Solve the local reference problem with the limit tensor.
pub fn run_local_reference(
    config: &ExperimentConfig,
    record_times: &[f64],
) -> Result<(LocalTrajectory, TensorField)> {
    let refine = config.local_refine.unwrap_or(2).max(1);
    let h_min = config.member_spacing(*config.eps_list.last().unwrap());
    let h_loc = h_min / refine as f64;
    let grid = UniformGrid::covering(&config.domain.lo, &config.domain.hi, h_loc)?;
    let profile = config.rho0_profile();
    let state0 = LocalState::from_profile(grid, |x| profile(x))?;
    let tensor = TensorField::LimitTensor {
        spec: std::sync::Arc::new(config.connectivity_spec()?),
        base: std::sync::Arc::new(config.base_measure()),
        resolution: config.quadrature_resolution(),
    };
    let mut opts = SolveOptions::new(config.t_end)
        .with_policy(config.dt_policy())
        .with_record_times(record_times);
    opts.snapshot_stride = config.snapshots;
    let kernel = config.interaction_kernel();
    let mut traj = solve_nlie_local(&state0, &kernel, &tensor, &opts)?;
    traj.meta.kernel_id = config.kernel_id();
    Ok((traj, tensor))
}

/// Geometric comparison times `{t/4, t/2, t}`.
pub fn snapshot_times(t_end: f64) -> Vec<f64> {
    vec![t_end / 4.0, t_end / 2.0, t_end]
}

fn default_metric(config: &ExperimentConfig) -> ErrorMetric {
    if config.dimension == 1 {
        ErrorMetric::QuantileW2
    } else {
        let h_min = config.member_spacing(*config.eps_list.last().unwrap());
        ErrorMetric::SmoothedL1 { bandwidth: 2.0 * h_min }
    }
}

fn metric_name(metric: &ErrorMetric) -> String {
    match metric {
        ErrorMetric::QuantileW2 => "quantile_w2".into(),
        ErrorMetric::SmoothedL1 { bandwidth } => format!("smoothed_l1(bw={bandwidth})"),
        ErrorMetric::BoundedLipschitz { resolution } => {
            format!("bounded_lipschitz(res={resolution})")
        }
    }
}

/// Run the full sweep: one graph run per eps, one local reference, error
/// metrics at the snapshot times, per-run CSV exports and `report.json`.
pub fn run_convergence_sweep(config: &ExperimentConfig) -> Result<ConvergenceReport> {
    config.validate()?;
    let times = snapshot_times(config.t_end);
    let out_dir = PathBuf::from(&config.out_dir);
    fs::create_dir_all(&out_dir)?;
    let hash = crate::config_hash(config);

    let (local_traj, _tensor) = run_local_reference(config, &times)?;
    let mut local_csv = Vec::new();
    write_local_trajectory_csv(&local_traj, &mut local_csv)?;
    fs::write(out_dir.join("trajectory_local.csv"), &local_csv)?;
    let mut meta = Vec::new();
    write_trajectory_meta_json(&local_traj.meta, &hash, &mut meta)?;
    fs::write(out_dir.join("trajectory_local.meta.json"), &meta)?;

    let members: Vec<Result<MemberRun>> = config
        .eps_list
        .par_iter()
        .map(|&eps| {
            run_member(config, eps, &times).map_err(|e| {
                Error::Precondition(format!("sweep member eps = {eps} failed: {e}"))
            })
        })
        .collect();

    let metric = default_metric(config);
    let kernel = config.interaction_kernel();
    let mut rows = Vec::new();
    for member in members {
        let member = member?;
        let graph = &member.graph;
        let traj = &member.trajectory;
        let positions: Vec<Vec<f64>> =
            (0..graph.node_count()).map(|i| graph.node(i).to_vec()).collect();
        let cells: Vec<Vec<f64>> = (0..local_traj.grid.cell_count())
            .map(|c| local_traj.grid.center(c))
            .collect();
        let mut errors = Vec::new();
        for &tq in &times {
            let mg = traj.state_at(tq);
            let ml = local_traj.state_at(tq);
            let err = error_metric(metric, (&positions, mg.masses()), (&cells, ml))?;
            errors.push((tq, err));
        }
        let ledger = dissipation_ledger(traj, &kernel, graph)?;
        let max_gap = ledger
            .rows
            .iter()
            .map(|r| r.legendre_gap)
            .fold(0.0f64, f64::max);

        let label = format!("{}", member.eps).replace('.', "p");
        let mut csv = Vec::new();
        write_graph_trajectory_csv(traj, graph, &mut csv)?;
        fs::write(out_dir.join(format!("trajectory_eps_{label}.csv")), &csv)?;
        let mut meta = Vec::new();
        write_trajectory_meta_json(&traj.meta, &hash, &mut meta)?;
        fs::write(out_dir.join(format!("trajectory_eps_{label}.meta.json")), &meta)?;
        let mut lcsv = Vec::new();
        write_ledger_csv(&ledger, &mut lcsv)?;
        fs::write(out_dir.join(format!("ledger_eps_{label}.csv")), &lcsv)?;

        rows.push(SweepRow {
            eps: member.eps,
            spacing: config.member_spacing(member.eps),
            nodes: graph.node_count(),
            steps: traj.times.len() - 1,
            errors,
            energy_initial: ledger.rows.first().map_or(0.0, |r| r.energy),
            energy_final: ledger.rows.last().map_or(0.0, |r| r.energy),
            de_giorgi: ledger.de_giorgi,
            slope_integral: ledger.slope_integral,
            max_legendre_gap: max_gap,
        });
    }

    let final_errors: Vec<f64> = rows.iter().map(|r| r.errors.last().unwrap().1).collect();
    let mut observed_orders = Vec::new();
    for w in 0..rows.len().saturating_sub(1) {
        let (e0, e1) = (final_errors[w], final_errors[w + 1]);
        let (s0, s1) = (rows[w].eps, rows[w + 1].eps);
        observed_orders.push((e0 / e1).ln() / (s0 / s1).ln());
    }
    let errors_strictly_decreasing: Vec<bool> = (0..times.len())
        .map(|k| rows.windows(2).all(|w| w[1].errors[k].1 < w[0].errors[k].1))
        .collect();

    let report = ConvergenceReport {
        config_hash: hash,
        snapshot_times: times,
        rows,
        observed_orders,
        errors_strictly_decreasing,
        metric: metric_name(&metric),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Parse(format!("report serialization: {e}")))?;
    fs::write(out_dir.join("report.json"), json)?;
    Ok(report)
}

/// Load a graph trajectory back from its CSV (used by the `dissipation`
/// subcommand). Returns snapshot times and per-snapshot masses, relying on
/// rows being grouped by time in file order.
pub fn read_trajectory_csv(path: &Path, node_count: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut times = Vec::new();
    let mut states: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if !line.starts_with("t,node_or_cell_id") {
                return Err(Error::Parse(format!(
                    "{}: unexpected trajectory header",
                    path.display()
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Parse(format!("{}:{}: short row", path.display(), lineno + 1)));
        }
        let t: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Parse(format!("{}:{}: bad time", path.display(), lineno + 1)))?;
        let id: usize = fields[1]
            .parse()
            .map_err(|_| Error::Parse(format!("{}:{}: bad id", path.display(), lineno + 1)))?;
        let mass: f64 = fields[fields.len() - 1].parse().map_err(|_| {
            Error::Parse(format!("{}:{}: bad mass", path.display(), lineno + 1))
        })?;
        if times.last().map_or(true, |&last: &f64| (t - last).abs() > 1e-15) {
            times.push(t);
            states.push(vec![0.0; node_count]);
        }
        if id >= node_count {
            return Err(Error::Parse(format!(
                "{}:{}: node id {id} exceeds the configured graph ({node_count} nodes)",
                path.display(),
                lineno + 1
            )));
        }
        states.last_mut().unwrap()[id] = mass;
    }
    if times.is_empty() {
        return Err(Error::Parse(format!("{}: empty trajectory", path.display())));
    }
    Ok((times, states))
}
