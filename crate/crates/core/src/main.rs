use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use qgcyl::config::{Preset, RunConfig};
use qgcyl::elliptic::{check_compatibility, Elliptic};
use qgcyl::field::{CirculationData, ScalarField3};
use qgcyl::flowmap::write_trajectory_csv;
use qgcyl::geometry::{build_domain, discretize, Grid};
use qgcyl::greens::{Greens, Source};
use qgcyl::output::{CheckSummary, GridSummary, RunSummary, SolverSummary};
use qgcyl::solver::{write_diagnostics_csv, Solver};
use qgcyl::transport::InitialPV;
use qgcyl::{presets, verification, QgError, Result};

/// Quasi-geostrophic PV transport on cylinders with holes.
#[derive(Parser)]
#[command(name = "qgcyl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Transport the initial PV up to `time.t_end`.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Override `time.t_end`.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Invert the initial PV once and write ψ and u.
    Invert {
        #[command(flatten)]
        common: Common,
    },
    /// Green's function decay constants and quasi-Lipschitz ratios.
    GreensReport {
        #[command(flatten)]
        common: Common,
    },
    /// Run the twelve acceptance criteria.
    Verify {
        /// Output directory for the summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; every key is optional.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override `output.threads`.
    #[arg(long)]
    threads: Option<usize>,
}

/// Failure with its exit code.
struct Fail(u8, String);

impl From<QgError> for Fail {
    fn from(e: QgError) -> Self {
        Fail(exit_code(&e), e.to_string())
    }
}

fn exit_code(e: &QgError) -> u8 {
    match e {
        QgError::Config(_) => 65,
        QgError::Compatibility { .. }
        | QgError::Domain(_)
        | QgError::Topology(_)
        | QgError::Resolution(_)
        | QgError::InvalidTestFunction(_)
        | QgError::OutOfDomain(..)
        | QgError::Seed(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let help = RunConfig::default()
        .to_toml()
        .map(|t| format!("Default configuration:\n\n{t}"))
        .unwrap_or_default();
    let cli = match Cli::command()
        .after_long_help(help)
        .try_get_matches()
        .and_then(|m| Cli::from_arg_matches(&m))
    {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(64),
            };
        }
    };
    let result = match cli.command {
        Command::Simulate { common, t_end } => simulate(&common, t_end),
        Command::Invert { common } => invert(&common),
        Command::GreensReport { common } => greens_report(&common),
        Command::Verify { out } => verify(out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail(code, msg)) => {
            eprintln!("qgcyl: {msg}");
            ExitCode::from(code)
        }
    }
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Fail> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p).map_err(|e| Fail(65, e.to_string()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    if let Some(t) = common.threads {
        cfg.output.threads = t;
    }
    if cfg.output.threads > 0 {
        // fails only if the pool already exists
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.output.threads)
            .build_global();
    }
    Ok(cfg)
}

/// Output directory with the effective configuration echoed into it.
fn prepare_output(cfg: &RunConfig, summary: &mut RunSummary) -> Result<PathBuf> {
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    summary.files.push("config.toml".into());
    Ok(dir)
}

fn create(dir: &Path, name: &str, summary: &mut RunSummary) -> Result<BufWriter<File>> {
    summary.files.push(name.to_string());
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn build_grid(cfg: &RunConfig) -> Result<Arc<Grid>> {
    let g = &cfg.grid;
    Ok(Arc::new(discretize(
        &build_domain(&cfg.domain)?,
        g.nx,
        g.ny,
        g.nz,
    )?))
}

/// Initial PV and circulation data described by the configuration.
fn initial_data(cfg: &RunConfig, g: &Arc<Grid>) -> Result<(ScalarField3, CirculationData)> {
    let init = &cfg.initial;
    let mut c = None;
    let q = match init.preset {
        Preset::Dipole => presets::dipole(g, init.amplitude),
        Preset::Radial => presets::radial(g, init.amplitude),
        Preset::RandomBounded => presets::random_bounded(g, init.amplitude, init.seed),
        Preset::Manufactured => {
            let (q, mc) = verification::manufactured(g);
            c = Some(mc);
            q
        }
        Preset::File => {
            let path = init
                .path
                .as_ref()
                .ok_or_else(|| QgError::Config("initial.path is missing".into()))?;
            ScalarField3::read_csv(g, BufReader::new(File::open(path)?))?
        }
    };
    let values = &cfg.circulation.values;
    let c = if !values.is_empty() {
        if values.len() != g.num_loops() {
            return Err(QgError::Config(format!(
                "circulation.values has {} entries but the domain has {} loops",
                values.len(),
                g.num_loops()
            )));
        }
        CirculationData::constant(values, g.nz)
    } else {
        c.unwrap_or_else(|| CirculationData::zeros(g.num_loops(), g.nz))
    };
    Ok((q, c))
}

fn finish(summary: &mut RunSummary, dir: &Path, start: Instant) -> Result<()> {
    summary.wall_seconds = start.elapsed().as_secs_f64();
    summary.files.push("summary.json".into());
    summary.write(&dir.join("summary.json"))
}

fn write_snapshot(
    cfg: &RunConfig,
    dir: &Path,
    q: &ScalarField3,
    index: usize,
    summary: &mut RunSummary,
) -> Result<()> {
    q.write_csv(create(dir, &format!("q_{index:04}.csv"), summary)?)?;
    if cfg.output.vtk {
        q.write_vtk(create(dir, &format!("q_{index:04}.vtk"), summary)?, "q")?;
    }
    Ok(())
}

fn simulate(common: &Common, t_end: Option<f64>) -> std::result::Result<(), Fail> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    if let Some(t) = t_end {
        cfg.time.t_end = t;
        cfg.validate().map_err(|e| Fail(65, e.to_string()))?;
    }
    let mut summary = RunSummary::new("simulate");
    let dir = prepare_output(&cfg, &mut summary)?;
    let g = build_grid(&cfg)?;
    summary.grid = Some(GridSummary::from(&*g));
    g.write_mask_csv(create(&dir, "mask.csv", &mut summary)?)?;
    let (q, c) = initial_data(&cfg, &g)?;
    let report = check_compatibility(&q, &c, &cfg.elliptic);
    if !report.compatible {
        return Err(QgError::Compatibility {
            defect: report.defect,
            tolerance: report.tolerance,
        }
        .into());
    }
    let q0 = InitialPV::new(q, cfg.initial.homogeneous)?;
    let ell = Arc::new(Elliptic::new(g.clone(), cfg.elliptic.clone()));
    let solver = Solver::new(ell, c, cfg.solver.clone())?;
    write_snapshot(&cfg, &dir, q0.field(), 0, &mut summary)?;

    let out = solver.run(&q0, cfg.time.t_end)?;
    write_diagnostics_csv(
        create(&dir, "diagnostics.csv", &mut summary)?,
        &out.diagnostics,
    )?;
    let every = cfg.output.every;
    let last = out.snapshots.len();
    for (i, s) in out.snapshots.iter().enumerate() {
        let w = i + 1;
        if every > 0 && (w % every == 0 || w == last) {
            write_snapshot(&cfg, &dir, s.q_end(), w, &mut summary)?;
        }
    }
    if cfg.output.trajectories {
        if let Some(s) = out.snapshots.last() {
            write_trajectory_csv(create(&dir, "trajectories.csv", &mut summary)?, &s.phi)?;
        }
    }
    let conservation = if last > 0 {
        Some(solver.conservation(&out)?)
    } else {
        None
    };
    summary.solver = Some(SolverSummary::new(&out, q0.bound(), conservation));
    if last == 0 {
        println!("t_end = 0: wrote the initial snapshot only");
    } else {
        println!(
            "simulated to t = {:.4} in {} windows (T = {:.4e}, Ĉ = {:.3}); max |q| {:.6}",
            out.t_end(),
            last,
            out.window,
            out.c_hat,
            out.final_q().max_abs()
        );
    }
    finish(&mut summary, &dir, start)?;
    Ok(())
}

fn invert(common: &Common) -> std::result::Result<(), Fail> {
    let start = Instant::now();
    let cfg = load_config(common)?;
    let mut summary = RunSummary::new("invert");
    let dir = prepare_output(&cfg, &mut summary)?;
    let g = build_grid(&cfg)?;
    summary.grid = Some(GridSummary::from(&*g));
    g.write_mask_csv(create(&dir, "mask.csv", &mut summary)?)?;
    let (q, c) = initial_data(&cfg, &g)?;
    let ell = Elliptic::new(g.clone(), cfg.elliptic.clone());
    let inv = ell.invert_pv(&q, &c)?;
    let u = ell.velocity(&inv.psi);
    inv.psi.write_csv(create(&dir, "psi.csv", &mut summary)?)?;
    u.write_csv(create(&dir, "u.csv", &mut summary)?)?;
    if cfg.output.vtk {
        inv.psi
            .write_vtk(create(&dir, "psi.vtk", &mut summary)?, "psi")?;
        u.write_vtk(create(&dir, "u.vtk", &mut summary)?, "u")?;
    }
    summary
        .metrics
        .insert("max_residual".into(), inv.max_residual);
    summary.metrics.insert("psi_max".into(), inv.psi.max_abs());
    summary.metrics.insert("u_max".into(), u.max_abs());
    println!(
        "inverted {} unknowns, max residual {:.3e}",
        g.num_interior() * g.nz,
        inv.max_residual
    );
    if cfg.initial.preset == Preset::Manufactured {
        let mut err = 0.0f64;
        for k in 0..g.nz {
            for &n in g.interior() {
                let [x, y] = g.node_xy(n);
                err = err
                    .max((inv.psi.get(n, k) - verification::manufactured_psi(x, y, g.z(k))).abs());
            }
        }
        summary.metrics.insert("error_linf".into(), err);
        println!("error against the exact stream function: L∞ = {err:.6e}");
    }
    finish(&mut summary, &dir, start)?;
    Ok(())
}

/// `count` interior sources spread evenly through the node list, cycling
/// through the levels.
fn spread_sources(g: &Grid, count: usize) -> Vec<Source> {
    let ni = g.num_interior();
    (0..count)
        .map(|i| Source {
            node: g.interior()[(2 * i + 1) * ni / (2 * count)],
            level: (i * g.nz / count.max(1)).min(g.nz - 1),
        })
        .collect()
}

fn greens_report(common: &Common) -> std::result::Result<(), Fail> {
    let start = Instant::now();
    let cfg = load_config(common)?;
    let mut summary = RunSummary::new("greens-report");
    let dir = prepare_output(&cfg, &mut summary)?;
    let g = build_grid(&cfg)?;
    summary.grid = Some(GridSummary::from(&*g));
    let ell = Arc::new(Elliptic::new(g.clone(), cfg.elliptic.clone()));
    let greens = Greens::new(ell, cfg.greens.cache_mib << 20);

    let est = greens.estimate_report(&spread_sources(&g, cfg.greens.sources))?;
    est.write_csv(create(&dir, "greens_estimates.csv", &mut summary)?)?;
    let [a, b, h] = est.constants();
    let pairs = greens.random_pairs(cfg.greens.pairs, g.h, 1.0, cfg.greens.seed);
    let ql = greens.quasi_lipschitz_report(&pairs)?;
    ql.write_csv(create(&dir, "greens_pairs.csv", &mut summary)?)?;
    for (k, v) in [
        ("sup_g_r", a),
        ("sup_grad_r2", b),
        ("sup_hess_r3", h),
        ("ql_max_ratio", ql.max_ratio()),
        ("ql_slope", ql.slope()),
    ] {
        summary.metrics.insert(k.into(), v);
    }
    println!("sup |G| r = {a:.4}, sup |∇G| r² = {b:.4}, sup |∇²G| r³ = {h:.4}");
    println!(
        "quasi-Lipschitz: {} pairs, max ratio {:.4}, slope vs log(1/d) {:.4}",
        ql.samples.len(),
        ql.max_ratio(),
        ql.slope()
    );
    finish(&mut summary, &dir, start)?;
    Ok(())
}

fn verify(out: Option<PathBuf>) -> std::result::Result<(), Fail> {
    let start = Instant::now();
    let checks = verification::run_all(|c| println!("{c}"));
    let mut summary = RunSummary::new("verify");
    summary.checks = checks.iter().map(CheckSummary::from).collect();
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        summary.status = format!("{failed} criteria failed");
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).map_err(QgError::from)?;
        finish(&mut summary, &dir, start)?;
    }
    println!(
        "{} of {} criteria passed",
        checks.len() - failed,
        checks.len()
    );
    if failed > 0 {
        return Err(Fail(1, format!("{failed} acceptance criteria failed")));
    }
    Ok(())
}
