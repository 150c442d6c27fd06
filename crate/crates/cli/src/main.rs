use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use rhflow_core::bounds::verify;
use rhflow_core::config::RunConfig;
use rhflow_core::geometry::{curvature, Variant};
use rhflow_core::heatkernel::{
    kernel, mass_diagnostics, max_relative_error, oracle_kernel, semigroup_check, Direction,
    KernelSource, Node,
};
use rhflow_core::Error;

const TRAJECTORY_CSV: &str = "trajectory.csv";
const KERNEL_CSV: &str = "kernel.csv";
const SOBOLEV_CSV: &str = "sobolev.csv";
const REPORT_CSV: &str = "bound_report.csv";
const REPORT_JSON: &str = "bound_report.json";
const SUMMARY: &str = "summary.txt";

#[derive(Parser)]
#[command(
    name = "rhflow",
    version,
    about = "Ricci-harmonic flow heat-kernel laboratory"
)]
struct Cli {
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow and write the trajectory.
    RunFlow { config: PathBuf },
    /// Compute one heat kernel field with mass and semigroup diagnostics.
    Kernel {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "auto")]
        source: Source,
        #[arg(long)]
        s: f64,
        #[arg(long)]
        t: f64,
        /// Source node as `i` or `i,j,k`.
        #[arg(long, default_value = "0", value_parser = parse_node)]
        y: Node,
        /// Evaluation node for the conjugate and semigroup diagnostics; defaults to `y`.
        #[arg(long, value_parser = parse_node)]
        x: Option<Node>,
        /// Intermediate time of the semigroup check; defaults to the midpoint.
        #[arg(long)]
        m: Option<f64>,
    },
    /// Estimate the Sobolev constants A(t), B(t).
    EstimateSobolev {
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
    },
    /// Evaluate the heat-kernel bounds at every configured sample.
    Verify { config: PathBuf },
    /// Concatenate the outputs of earlier commands into one summary.
    Report { config: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Auto,
    Forward,
    Oracle,
}

impl From<Source> for KernelSource {
    fn from(s: Source) -> Self {
        match s {
            Source::Auto => KernelSource::Auto,
            Source::Forward => KernelSource::Forward,
            Source::Oracle => KernelSource::Oracle,
        }
    }
}

fn parse_node(text: &str) -> Result<Node, String> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad node `{text}`: {e}"))
        })
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [i] => Ok([*i, 0, 0]),
        [i, j, k] => Ok([*i, *j, *k]),
        _ => Err(format!("node `{text}` needs one or three indices")),
    }
}

enum Failure {
    Core(Error),
    Verification(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Verification(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(3)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 4 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("RHFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("RHFLOW_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        return Err("RHFLOW_THREADS must be a positive integer".into());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: Cli) -> CmdResult {
    let (path, command) = match &cli.command {
        Command::RunFlow { config }
        | Command::Kernel { config, .. }
        | Command::EstimateSobolev { config, .. }
        | Command::Verify { config }
        | Command::Report { config } => (config.clone(), &cli.command),
    };
    let cfg = RunConfig::load(&path)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    match command {
        Command::RunFlow { .. } => run_flow(&cfg, &out),
        Command::Kernel {
            source,
            s,
            t,
            y,
            x,
            m,
            ..
        } => run_kernel(
            &cfg,
            &out,
            (*source).into(),
            *s,
            *t,
            *y,
            x.unwrap_or(*y),
            *m,
        ),
        Command::EstimateSobolev { times, .. } => estimate_sobolev(&cfg, &out, times.as_deref()),
        Command::Verify { .. } => run_verify(&cfg, &out),
        Command::Report { .. } => report(&out),
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, Failure> {
    fs::create_dir_all(out)?;
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn run_flow(cfg: &RunConfig, out: &Path) -> CmdResult {
    let traj = cfg.trajectory()?;
    traj.write_csv(create(out, TRAJECTORY_CSV)?)?;
    println!("{:>24} {:>24} {:>24}", "time", "min_S", "max_S");
    for i in 0..traj.checkpoints().len() {
        let st = traj.checkpoint_state(i);
        let c = curvature(&st)?;
        println!(
            "{:>24.16e} {:>24.16e} {:>24.16e}",
            st.time,
            c.min_s(),
            c.max_s()
        );
    }
    println!("wrote {}", out.join(TRAJECTORY_CSV).display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_kernel(
    cfg: &RunConfig,
    out: &Path,
    source: KernelSource,
    s: f64,
    t: f64,
    y: Node,
    x: Node,
    m: Option<f64>,
) -> CmdResult {
    if t <= s {
        return Err(Error::BadTimeOrder { s, t }.into());
    }
    let traj = cfg.trajectory()?;
    let opts = rhflow_core::heatkernel::KernelOptions {
        source,
        ..cfg.kernel
    };
    let field = kernel(&traj, y, s, t, Direction::Forward, &opts)?;
    let oracle_error = if traj.model().variant() != Variant::CoupledCircle
        && field.solver != rhflow_core::heatkernel::SolverTag::SpectralOracle
    {
        let reference = oracle_kernel(&traj, y, s, t, Direction::Forward, &opts)?;
        Some(max_relative_error(&field, &reference)?)
    } else {
        None
    };
    let mass = mass_diagnostics(&traj, x, t, y, s, &opts)?;
    let m = m.unwrap_or(0.5 * (s + t));
    let semigroup = semigroup_check(&traj, x, t, y, s, m, &opts)?;
    let meta = json!({
        "variant": traj.model().variant(),
        "J_t": mass.j_t,
        "Jtilde_s": mass.jtilde_s,
        "P_t": mass.p_t,
        "Q_s": mass.q_s,
        "semigroup_m": m,
        "semigroup_residual": semigroup.residual,
        "oracle_max_rel_error": oracle_error,
    });
    field.write_csv(create(out, KERNEL_CSV)?, meta)?;
    println!("solver              {:?}", field.solver);
    println!("J(t)                {:.12e}", mass.j_t);
    println!("Jtilde(s)           {:.12e}", mass.jtilde_s);
    println!("P(t)                {:.12e}", mass.p_t);
    println!("Q(s)                {:.12e}", mass.q_s);
    println!("semigroup residual  {:.6e} (m = {m})", semigroup.residual);
    if let Some(e) = oracle_error {
        println!("max relative error vs oracle  {e:.6e}");
    }
    println!("wrote {}", out.join(KERNEL_CSV).display());
    Ok(())
}

fn estimate_sobolev(cfg: &RunConfig, out: &Path, times: Option<&[f64]>) -> CmdResult {
    let traj = cfg.trajectory()?;
    if let Some(ts) = times {
        if ts.is_empty() || ts.iter().any(|&t| !(0.0..=traj.t_end()).contains(&t)) {
            return Err(Error::InvalidConfig(format!(
                "--times must lie inside [0, {}]",
                traj.t_end()
            ))
            .into());
        }
    }
    let c = cfg.sobolev_constants(&traj, times)?;
    let mut w = create(out, SOBOLEV_CSV)?;
    let meta = json!({
        "k": c.k,
        "a_convention": c.a_convention,
        "positive_case": c.positive_case,
        "estimated": c.estimated,
        "note": if c.estimated { "probe-based estimates, not certified constants" } else { "user override" },
    });
    writeln!(w, "# {meta}")?;
    c.write_csv(&mut w)?;
    w.flush()?;
    println!("K(n,2) = {:.15e}, A convention {:?}", c.k, c.a_convention);
    if c.estimated {
        println!("constants are probe-based estimates");
    }
    for i in 0..c.times.len() {
        println!(
            "t = {:<10} A = {:.12e}  B = {:.12e}  lambda0 = {:.12e}",
            c.times[i], c.a[i], c.b[i], c.lambda0[i]
        );
    }
    println!("wrote {}", out.join(SOBOLEV_CSV).display());
    Ok(())
}

fn run_verify(cfg: &RunConfig, out: &Path) -> CmdResult {
    if cfg.samples.is_empty() {
        return Err(Error::InvalidConfig("verify needs a non-empty `samples` list".into()).into());
    }
    let traj = cfg.trajectory()?;
    let inputs = cfg.comparison_inputs(&traj)?;
    let report = verify(&traj, &inputs, &cfg.samples, &cfg.kernel)?;
    report.write_csv(create(out, REPORT_CSV)?)?;
    report.write_json(create(out, REPORT_JSON)?)?;
    println!(
        "variant {:?}, A convention {:?}, constants {}",
        report.variant,
        report.a_convention,
        if report.constants_estimated {
            "estimated"
        } else {
            "user-supplied"
        }
    );
    for r in &report.rows {
        println!(
            "x={:?} t={} y={:?} s={}  G={:.6e}  ratio_theorem={:.6e}  ratio_corollary={}  {}",
            r.sample.x,
            r.sample.t,
            r.sample.y,
            r.sample.s,
            r.g_actual,
            r.ratio_theorem,
            r.ratio_corollary
                .map(|v| format!("{v:.6e}"))
                .unwrap_or_else(|| "-".into()),
            if r.pass { "PASS" } else { "FAIL" }
        );
    }
    println!(
        "wrote {} and {}",
        out.join(REPORT_CSV).display(),
        out.join(REPORT_JSON).display()
    );
    if report.all_pass {
        return Ok(());
    }
    let failing: Vec<String> = report
        .rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| {
            format!(
                "  x={:?} t={} y={:?} s={}",
                r.sample.x, r.sample.t, r.sample.y, r.sample.s
            )
        })
        .collect();
    Err(Failure::Verification(format!(
        "verification failed at {} sample(s):\n{}",
        failing.len(),
        failing.join("\n")
    )))
}

fn report(out: &Path) -> CmdResult {
    let mut summary = String::new();
    for name in [TRAJECTORY_CSV, KERNEL_CSV, SOBOLEV_CSV, REPORT_CSV] {
        let path = out.join(name);
        if let Ok(text) = fs::read_to_string(&path) {
            summary.push_str(&format!("==> {name} <==\n{text}"));
            if !text.ends_with('\n') {
                summary.push('\n');
            }
            summary.push('\n');
        }
    }
    if summary.is_empty() {
        return Err(Error::InvalidConfig(format!("no outputs found in {}", out.display())).into());
    }
    fs::write(out.join(SUMMARY), summary)?;
    println!("wrote {}", out.join(SUMMARY).display());
    Ok(())
}
