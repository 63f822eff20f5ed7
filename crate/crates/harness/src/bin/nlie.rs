//! Command-line front end: tensor diagnostics, single runs, convergence
//! sweeps, dissipation ledgers and assumption validation.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nlie_core::calculus::NodeMeasure;
use nlie_core::dynamics::{
    solve_nlie_local, write_graph_trajectory_csv, write_local_trajectory_csv,
    write_trajectory_meta_json, LocalState, SolveOptions,
};
use nlie_core::energetics::{
    dual_dissipation, eta_pairing, interaction_energy, legendre_gap, metric_slope_graph,
    primal_dissipation, write_ledger_csv, DissipationLedger, LedgerRow,
};
use nlie_core::calculus::{upwind_flux, velocity_field};
use nlie_core::geometry::{
    tensor_eps, tensor_limit, validate_assumptions, SamplePlan, TensorField,
};
use nlie_core::grid::UniformGrid;
use nlie_core::Error;

use nlie_harness::config::ExperimentConfig;
use nlie_harness::sweep::{
    member_graph, read_trajectory_csv, run_convergence_sweep, run_member, snapshot_times,
};
use nlie_harness::config_hash;

#[derive(Parser)]
#[command(name = "nlie", about = "Nonlocal interaction dynamics on localizing graphs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the per-scale tensor, the limit tensor, and the closed form
    /// where available, at sample points along the domain.
    Tensor {
        #[arg(long)]
        config: PathBuf,
    },
    /// One run (graph by default, `"solver": "local"` for the grid solver);
    /// writes the trajectory CSV and metadata.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Full eps sweep against the local reference; writes trajectories,
    /// ledgers and report.json.
    Converge {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dissipation ledger for an existing trajectory CSV (snapshots are
    /// treated as steps).
    Dissipation {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Assumption report for the configured connectivity and base measure.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Precondition(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig, Error> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidArgument(format!("config file {}: {e}", path.display())))?;
    ExperimentConfig::from_json(&text)
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Tensor { config } => tensor_cmd(&load_config(&config)?),
        Command::Simulate { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            simulate_cmd(&cfg)
        }
        Command::Converge { config, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            let report = run_convergence_sweep(&cfg)?;
            println!("convergence sweep: {} scales, metric {}", report.rows.len(), report.metric);
            for row in &report.rows {
                let errs: Vec<String> =
                    row.errors.iter().map(|(t, e)| format!("t={t}: {e:.6}")).collect();
                println!(
                    "  eps={} nodes={} steps={} de_giorgi={:.3e} max_gap={:.3e} [{}]",
                    row.eps,
                    row.nodes,
                    row.steps,
                    row.de_giorgi,
                    row.max_legendre_gap,
                    errs.join(", ")
                );
            }
            println!("  observed orders: {:?}", report.observed_orders);
            println!("  outputs in {}", cfg.out_dir);
            Ok(())
        }
        Command::Dissipation { config, trajectory, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            dissipation_cmd(&cfg, &trajectory)
        }
        Command::Validate { config } => validate_cmd(&load_config(&config)?),
    }
}

fn tensor_cmd(cfg: &ExperimentConfig) -> Result<(), Error> {
    let eps = cfg.eps_list[0];
    let graph = member_graph(cfg, eps)?;
    let spec = cfg.connectivity_spec()?;
    let base = cfg.base_measure();
    let res = cfg.quadrature_resolution();
    println!(
        "tensor comparison at eps = {eps} (quadrature {res} pts/axis), d = {}",
        cfg.dimension
    );
    println!("{:<24} {:<26} {:<26} {:<26}", "point", "T_eps", "T_limit", "closed_form");
    for k in 0..5 {
        // interior samples along the domain diagonal
        let t = (k as f64 + 1.0) / 6.0;
        let x: Vec<f64> = cfg
            .domain
            .lo
            .iter()
            .zip(&cfg.domain.hi)
            .map(|(a, b)| a + t * (b - a))
            .collect();
        let mut nearest = 0usize;
        let mut best = f64::INFINITY;
        for i in 0..graph.node_count() {
            let d2: f64 =
                graph.node(i).iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best {
                best = d2;
                nearest = i;
            }
        }
        let te = tensor_eps(&graph, nearest);
        let tl = tensor_limit(&spec, &base, graph.node(nearest), res);
        let cf = spec.closed_form_tensor(cfg.dimension, base.eval(graph.node(nearest)));
        let fmt = |m: &nalgebra::DMatrix<f64>| -> String {
            let vals: Vec<String> = m.iter().map(|v| format!("{v:.6}")).collect();
            vals.join(" ")
        };
        println!(
            "{:<24} {:<26} {:<26} {:<26}",
            format!("{:?}", graph.node(nearest)),
            fmt(&te),
            fmt(&tl),
            cf.map_or("-".to_string(), |m| fmt(&m)),
        );
    }
    Ok(())
}

fn simulate_cmd(cfg: &ExperimentConfig) -> Result<(), Error> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let hash = config_hash(cfg);
    let times = snapshot_times(cfg.t_end);
    let solver = cfg.solver.as_deref().unwrap_or("graph");
    match solver {
        "graph" => {
            let member = run_member(cfg, cfg.eps_list[0], &times)?;
            let mut csv = Vec::new();
            write_graph_trajectory_csv(&member.trajectory, &member.graph, &mut csv)?;
            fs::write(out_dir.join("trajectory.csv"), &csv)?;
            let mut meta = Vec::new();
            write_trajectory_meta_json(&member.trajectory.meta, &hash, &mut meta)?;
            fs::write(out_dir.join("trajectory.meta.json"), &meta)?;
            let kernel = cfg.interaction_kernel();
            let e0 = interaction_energy(&kernel, &member.trajectory.states[0], &member.graph);
            let e1 = interaction_energy(&kernel, member.trajectory.final_state(), &member.graph);
            println!(
                "graph run: eps={} nodes={} steps={} energy {e0:.6} -> {e1:.6}",
                member.eps,
                member.graph.node_count(),
                member.trajectory.times.len() - 1
            );
        }
        "local" => {
            let refine = cfg.local_refine.unwrap_or(2).max(1);
            let h_loc = cfg.member_spacing(*cfg.eps_list.last().unwrap()) / refine as f64;
            let grid = UniformGrid::covering(&cfg.domain.lo, &cfg.domain.hi, h_loc)?;
            let profile = cfg.rho0_profile();
            let state0 = LocalState::from_profile(grid, |x| profile(x))?;
            let tensor = TensorField::LimitTensor {
                spec: std::sync::Arc::new(cfg.connectivity_spec()?),
                base: std::sync::Arc::new(cfg.base_measure()),
                resolution: cfg.quadrature_resolution(),
            };
            let mut opts = SolveOptions::new(cfg.t_end)
                .with_policy(cfg.dt_policy())
                .with_record_times(&times);
            opts.snapshot_stride = cfg.snapshots;
            let kernel = cfg.interaction_kernel();
            let traj = solve_nlie_local(&state0, &kernel, &tensor, &opts)?;
            let mut csv = Vec::new();
            write_local_trajectory_csv(&traj, &mut csv)?;
            fs::write(out_dir.join("trajectory.csv"), &csv)?;
            let mut meta = Vec::new();
            write_trajectory_meta_json(&traj.meta, &hash, &mut meta)?;
            fs::write(out_dir.join("trajectory.meta.json"), &meta)?;
            println!(
                "local run: cells={} steps={}",
                traj.grid.cell_count(),
                traj.times.len() - 1
            );
        }
        other => {
            return Err(Error::InvalidArgument(format!(
                "config: unknown solver {other:?} (expected \"graph\" or \"local\")"
            )));
        }
    }
    println!("outputs in {}", cfg.out_dir);
    Ok(())
}

fn dissipation_cmd(cfg: &ExperimentConfig, trajectory: &PathBuf) -> Result<(), Error> {
    let eps = cfg.eps_list[0];
    let graph = member_graph(cfg, eps)?;
    let (times, states) = read_trajectory_csv(trajectory, graph.node_count())?;
    let kernel = cfg.interaction_kernel();
    // snapshots are treated as steps: each row evaluates the upwind flux of
    // the stored state
    let mut rows = Vec::new();
    let mut slope_integral = 0.0;
    for k in 0..times.len().saturating_sub(1) {
        let rho = NodeMeasure::new(states[k].clone())?;
        let v = velocity_field(&kernel, &rho, &graph);
        let j = upwind_flux(&rho, &graph, &v)?;
        let r = primal_dissipation(&rho, &graph, &j);
        let r_star = dual_dissipation(&rho, &graph, &v);
        let pairing = eta_pairing(&v, &j, &graph);
        let slope = metric_slope_graph(&kernel, &rho, &graph);
        rows.push(LedgerRow {
            step: k,
            t: times[k],
            energy: interaction_energy(&kernel, &rho, &graph),
            r,
            r_star,
            pairing,
            legendre_gap: legendre_gap(&rho, &graph, &v, &j),
            slope,
        });
        slope_integral += (times[k + 1] - times[k]) * slope;
    }
    let ledger = DissipationLedger {
        rows,
        de_giorgi: f64::NAN, // requires per-step fluxes; not available from snapshots alone
        slope_integral,
        notes: "rebuilt from trajectory snapshots; snapshot spacing treated as steps".into(),
    };
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let mut csv = Vec::new();
    write_ledger_csv(&ledger, &mut csv)?;
    let out = out_dir.join("ledger.csv");
    fs::write(&out, &csv)?;
    println!(
        "ledger: {} rows, slope integral {:.6e}, written to {}",
        ledger.rows.len(),
        ledger.slope_integral,
        out.display()
    );
    Ok(())
}

fn validate_cmd(cfg: &ExperimentConfig) -> Result<(), Error> {
    let spec = cfg.connectivity_spec()?;
    let base = cfg.base_measure();
    let plan = SamplePlan::line(
        cfg.dimension,
        cfg.domain.lo[0],
        cfg.domain.hi[0],
        9,
        if cfg.dimension == 1 { 512 } else { 96 },
    );
    let report = validate_assumptions(&spec, &base, &plan);
    println!("assumption report ({} checks):", report.checks.len());
    for c in &report.checks {
        println!("  [{}] {}: {}", if c.pass { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "  constants: C_supp={:.6} C_mom={:.6} c_nd={:.6} c_mu={:.6} C_mu={:.6} C_meas={:.6} C_int={:.6}",
        report.c_supp, report.c_mom, report.c_nd, report.c_mu, report.c_mu_upper, report.c_meas,
        report.c_int
    );
    println!(
        "  empirical moduli: mu Lipschitz ~ {:.4}, theta Lipschitz ~ {:.4}",
        report.mu_lipschitz, report.theta_lipschitz
    );
    let (c, cc) = report.ellipticity_window();
    println!("  ellipticity window for tensors: [{c:.6}, {cc:.6}]");
    Ok(())
}
