use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde_json::json;
use ubot::config::Overrides;
use ubot::error::{Result, UbotError};
use ubot::experiment::{all_orders_pass, regularization_json, tagged_field_json, Experiment};
use ubot::io::{mesh_to_text, write_text};
use ubot_core::analytic::{wfr_dirac_cost, wfr_dirac_geodesic, wfr_static_value, GeodesicSample};
use ubot_core::measure::AtomicMeasure;
use ubot_core::mesh::{generate_box_mesh, Point};
use ubot_core::operators::{assemble_discrete_divergence, ContinuousOperatorSpec};

/// Discrete unbalanced transport experiments.
///
/// Exit status: 0 done, 1 bad configuration or input, 2 solver did not
/// converge (or a rate check failed); artifacts are written either way.
#[derive(Parser)]
#[command(name = "ubot", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent solves.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the solver feasibility tolerance.
    #[arg(long = "tol-feas", global = true)]
    tol_feas: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        action: MeshAction,
    },
    /// Solve the finest ladder level.
    Solve,
    /// Solve every ladder level.
    Sweep,
    /// Consistency rates on the ladder meshes.
    Check,
    /// Closed-form values for two weighted Diracs.
    Oracle(OracleArgs),
    /// Regularize endpoint g0 and optionally measure its distance to the input.
    Regularize(RegularizeArgs),
}

#[derive(Subcommand)]
enum MeshAction {
    /// Box meshes (one per ladder level with --config) plus the discrete D* in MatrixMarket form.
    Gen(MeshGenArgs),
}

#[derive(Args)]
struct MeshGenArgs {
    #[arg(long)]
    dim: Option<usize>,
    /// Cells per axis.
    #[arg(long)]
    cells: Option<usize>,
    /// Comma-separated box lengths (default all 1).
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<f64>,
}

#[derive(Args)]
struct OracleArgs {
    /// Comma-separated coordinates of the first atom.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    m0: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    y: Vec<f64>,
    #[arg(long, allow_hyphen_values = true)]
    m1: f64,
    /// Geodesic times in [0, 1] (default 0, 0.25, 0.5, 0.75, 1).
    #[arg(long, value_delimiter = ',')]
    s: Vec<f64>,
}

#[derive(Args)]
struct RegularizeArgs {
    /// Comma-separated values in (0, 0.25).
    #[arg(long, value_delimiter = ',', required = true)]
    eps: Vec<f64>,
    /// Solve for the distance between the input and each regularization.
    #[arg(long)]
    measure: bool,
}

fn init_logging() -> Result<()> {
    let level = std::env::var("UBOT_LOG").unwrap_or_else(|_| "error".into());
    if !matches!(level.as_str(), "error" | "info" | "debug") {
        return Err(UbotError::config("UBOT_LOG", format!("`{level}` is not one of error, info, debug")));
    }
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
    Ok(())
}

fn load(g: &Global) -> Result<Experiment> {
    let path = g.config.as_deref().ok_or_else(|| UbotError::config("--config", "this command needs a config file"))?;
    let overrides = Overrides { seed: g.seed, tol_feas: g.tol_feas, output: g.out.clone() };
    Experiment::load(path, &overrides)
}

fn point(v: &[f64], field: &str) -> Result<Point> {
    if v.is_empty() || v.len() > 3 {
        return Err(UbotError::config(field, "expected 1 to 3 coordinates"));
    }
    let mut p = [0.0; 3];
    p[..v.len()].copy_from_slice(v);
    Ok(p)
}

fn sample_json(g: &GeodesicSample, d: usize) -> serde_json::Value {
    let atom = |(x, m): &(Point, f64)| json!({"x": &x[..d], "m": m});
    match g {
        GeodesicSample::Transport { s, mass, position } => json!({"s": s, "kind": "transport", "atoms": [atom(&(*position, *mass))]}),
        GeodesicSample::Reaction { s, atoms } => json!({"s": s, "kind": "reaction", "atoms": atoms.iter().map(atom).collect::<Vec<_>>()}),
        GeodesicSample::NonUnique { s, transport, atoms } => json!({
            "s": s,
            "kind": "non-unique",
            "transport": [atom(transport)],
            "reaction": atoms.iter().map(atom).collect::<Vec<_>>(),
        }),
    }
}

fn cmd_oracle(a: &OracleArgs) -> Result<u8> {
    if a.x.len() != a.y.len() {
        return Err(UbotError::config("--y", "must have as many coordinates as --x"));
    }
    let d = a.x.len();
    let (x, y) = (point(&a.x, "--x")?, point(&a.y, "--y")?);
    let bad = |f: &str, e: ubot_core::Error| UbotError::config(f, e.to_string());
    let cost = wfr_dirac_cost(&x, a.m0, &y, a.m1).map_err(|e| bad("--m0/--m1", e))?;
    let r0 = AtomicMeasure::scalar(d, &[(x, a.m0)]).map_err(|e| bad("--m0", e))?;
    let r1 = AtomicMeasure::scalar(d, &[(y, a.m1)]).map_err(|e| bad("--m1", e))?;
    let stat = wfr_static_value(&r0, &r1)?;
    let times = if a.s.is_empty() { vec![0.0, 0.25, 0.5, 0.75, 1.0] } else { a.s.clone() };
    let geo = times
        .iter()
        .map(|&s| wfr_dirac_geodesic(&x, a.m0, &y, a.m1, s).map(|g| sample_json(&g, d)).map_err(|e| bad("--s", e)))
        .collect::<Result<Vec<_>>>()?;
    let out = json!({"cost": cost, "static": stat, "geodesic": geo});
    // a closed pipe is not an error here
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&out)?);
    Ok(0)
}

fn cmd_mesh_gen(g: &Global, a: &MeshGenArgs) -> Result<u8> {
    let exp = g.config.as_ref().map(|_| load(g)).transpose()?;
    let out = match &exp {
        Some(e) => e.config.output.clone(),
        None => g.out.clone().unwrap_or_else(|| PathBuf::from(".")),
    };
    let write = |name: String, text: String| write_text(&out.join(name), &text);
    let export = |mesh: &ubot_core::mesh::Mesh, spec: &ContinuousOperatorSpec, cells: usize, tag: &str| -> Result<()> {
        write(format!("mesh_{cells}.txt"), format!("{tag}{}", mesh_to_text(mesh)))?;
        let mm = assemble_discrete_divergence(mesh, spec)?.dstar().to_matrix_market();
        let (head, rest) = mm.split_once('\n').unwrap_or((&mm, ""));
        write(format!("dstar_{cells}.mtx"), format!("{head}\n{}{rest}", tag.replace('#', "%")))
    };
    if let Some(exp) = exp {
        let tag = format!("# config_hash: {}\n", exp.hash);
        for e in &exp.config.ladder {
            export(&exp.mesh(e.cells)?, exp.spec(), e.cells, &tag)?;
        }
        info!("wrote {} meshes to {}", exp.config.ladder.len(), out.display());
        return Ok(0);
    }
    let dim = a.dim.ok_or_else(|| UbotError::config("--dim", "required without --config"))?;
    let cells = a.cells.ok_or_else(|| UbotError::config("--cells", "required without --config"))?;
    let lengths = if a.lengths.is_empty() { vec![1.0; dim] } else { a.lengths.clone() };
    let mesh = generate_box_mesh(dim, &lengths, &vec![cells; dim]).map_err(|e| UbotError::config("--dim/--cells/--lengths", e.to_string()))?;
    export(&mesh, &ContinuousOperatorSpec::divergence(dim)?, cells, "")?;
    Ok(0)
}

fn out_dir(exp: &Experiment) -> &Path {
    &exp.config.output
}

fn cmd_solve(g: &Global, all: bool) -> Result<u8> {
    let exp = load(g)?;
    let levels: Vec<usize> = if all { (0..exp.config.ladder.len()).collect() } else { vec![exp.config.ladder.len() - 1] };
    let oracle = exp.oracle()?;
    let outcomes = exp.run_levels(&levels, g.jobs)?;
    exp.write_solve_artifacts(out_dir(&exp), if all { "sweep" } else { "solve" }, &outcomes, oracle)?;
    let ok = outcomes.iter().all(|o| o.report.converged);
    if !ok {
        warn!("not every level converged; artifacts written to {}", out_dir(&exp).display());
    }
    Ok(if ok { 0 } else { 2 })
}

fn cmd_check(g: &Global) -> Result<u8> {
    let exp = load(g)?;
    let rows = exp.consistency()?;
    write_text(&out_dir(&exp).join("consistency.csv"), &exp.consistency_csv(&rows)?)?;
    Ok(if all_orders_pass(&rows) { 0 } else { 2 })
}

fn cmd_regularize(g: &Global, a: &RegularizeArgs) -> Result<u8> {
    let exp = load(g)?;
    let runs = exp.regularize(&a.eps, a.measure, g.jobs)?;
    let out = out_dir(&exp);
    write_text(&out.join("regularization.json"), &serde_json::to_string_pretty(&regularization_json(&exp.hash, &runs))?)?;
    for (i, r) in runs.iter().enumerate() {
        write_text(&out.join(format!("regularized_{i}.json")), &tagged_field_json(&exp.hash, &r.field)?)?;
    }
    Ok(if runs.iter().all(|r| r.converged != Some(false)) { 0 } else { 2 })
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Mesh { action: MeshAction::Gen(a) } => cmd_mesh_gen(&cli.global, a),
        Command::Solve => cmd_solve(&cli.global, false),
        Command::Sweep => cmd_solve(&cli.global, true),
        Command::Check => cmd_check(&cli.global),
        Command::Oracle(a) => cmd_oracle(a),
        Command::Regularize(a) => cmd_regularize(&cli.global, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
