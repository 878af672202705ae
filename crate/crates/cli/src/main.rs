use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use membrelax::cell::{
    default_cell_ladder, gamma_surface, qstar, qstar_recession, qstar_rotated, qstar_sweep, qw_zero, read_samples_csv, write_sweep_csv, CellGrid,
    CellSolution, JumpSpec, SolverBudget,
};
use membrelax::energy::default_ladder;
use membrelax::membrane::{load_work, membrane_energy, membrane_energy_no_moment, DensityCache, LoadSet};
use membrelax::planar::{QuadratureConfig, SceneFile};
use membrelax::thin_film::{gamma_study, Builder, StudyConfig, StudyTolerances};
use membrelax::verify::{run_suite, Check, VerifyConfig, VerifyTolerances};
use membrelax::{CosseratVector, EnergyDensity, Error, FullMatrix, PlanarMatrix};
use serde_json::json;

/// Relaxed membrane densities, limit energies and thin-film convergence studies.
///
/// Exit codes: 0 success, 1 failed verdict, 2 usage/model/io error,
/// 3 solver convergence failure, 4 invalid scene, 5 under-resolved slab.
#[derive(Parser, Debug)]
#[command(name = "membrelax", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Density model JSON file.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Seed for multistart solvers.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output file, written atomically; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    /// Cell grid as `N_ALPHAxN_THREE`.
    #[arg(long, global = true, default_value = "16x8")]
    grid: String,
    /// Constant C of the cell tolerance q_tol = C·(1/n_alpha + 1/n_three).
    #[arg(long, global = true, default_value_t = 0.05)]
    tol_q: f64,
    /// Largest accepted final relative energy gap of a study.
    #[arg(long, global = true, default_value_t = 0.05)]
    tol_gap: f64,
    /// Largest accepted growth per refinement step in a study.
    #[arg(long, global = true, default_value_t = 1e-3)]
    tol_trend: f64,
    /// Overrides every relative tolerance of the verify suite.
    #[arg(long, global = true)]
    tol_check: Option<f64>,
    /// Iteration cap per inner cell solve.
    #[arg(long, global = true)]
    max_iters: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Text,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate W, W^∞ or W₀ at a point or over a sample file.
    Density(DensityArgs),
    /// Cell-problem densities.
    #[command(subcommand)]
    Cell(CellCommand),
    /// Limit membrane energy of a scene file.
    Membrane(MembraneArgs),
    /// ε-study of the scaled 3D energies against the limit.
    Gamma(GammaArgs),
    /// Invariant suite on the built-in models.
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct PointArgs {
    /// Planar gradient ξ̄, six row-major entries or `0`.
    #[arg(long, default_value = "0")]
    xi: String,
    /// Cosserat vector b, three entries or `0`.
    #[arg(long, default_value = "0")]
    b: String,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[command(flatten)]
    point: PointArgs,
    /// Use ξ = e₁⊗e₁ (unit norm) instead of --xi/--b.
    #[arg(long)]
    xi_unit: bool,
    /// Evaluate the recession function W^∞.
    #[arg(long, conflicts_with = "w_zero")]
    recession: bool,
    /// Evaluate W₀(ξ̄) = inf_b W(ξ̄|b) and report the minimizer.
    #[arg(long)]
    w_zero: bool,
    /// CSV file of samples with columns xi11..xi32,b1..b3.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum CellCommand {
    /// Q*W(ξ̄|b).
    Qstar(PointArgs),
    /// QW₀(ξ̄).
    QwZero(PointArgs),
    /// (Q*W)^∞(ξ̄|b) by the scaling ladder.
    Recession(PointArgs),
    /// γ(z, ν, b).
    Gamma {
        #[arg(long)]
        z: String,
        #[arg(long)]
        nu: String,
        #[arg(long, default_value = "0")]
        b: String,
    },
    /// Q*W(ξ̄|b) on the cube rotated to normal ν.
    Rotated {
        #[command(flatten)]
        point: PointArgs,
        #[arg(long)]
        nu: String,
    },
    /// Q*W over a CSV of samples.
    Sweep {
        #[arg(long)]
        samples: PathBuf,
    },
}

#[derive(Args, Debug)]
struct MembraneArgs {
    /// Scene JSON file (deformation plus bending measure).
    #[arg(long)]
    scene: PathBuf,
    /// Evaluate the moment-free functional with QW₀.
    #[arg(long)]
    no_moment: bool,
    /// Loads JSON file; adds the work of loads and the net energy.
    #[arg(long)]
    loads: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum BuilderKind {
    Recovery,
    Dirac,
    SlabFiles,
}

#[derive(Args, Debug)]
struct GammaArgs {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long, value_enum, default_value = "recovery")]
    builder: BuilderKind,
    /// Strictly decreasing ε values, comma separated.
    #[arg(long, default_value = "0.25,0.125,0.0625,0.03125")]
    eps: String,
    /// Slab cells as `N1xN2xN3`.
    #[arg(long, default_value = "64x64x16")]
    slab: String,
    /// Slab sidecar files, one per ε (slab-files builder).
    #[arg(long, value_delimiter = ',')]
    slab_files: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Comma-separated subset of checks.
    #[arg(long, value_delimiter = ',')]
    only: Vec<String>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::Convergence { .. } | Error::Quadrature { .. } => 3,
            Error::Scene { .. } | Error::Ambiguity(_) => 4,
            Error::Resolution { .. } => 5,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_numbers(text: &str, len: usize, what: &str) -> CliResult<Vec<f64>> {
    if text.trim() == "0" {
        return Ok(vec![0.0; len]);
    }
    let values = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("{what}: expected {len} comma-separated numbers, got {text:?}")))?;
    if values.len() != len {
        return Err(usage(format!("{what}: expected {len} numbers, got {}", values.len())));
    }
    Ok(values)
}

fn parse_point(p: &PointArgs) -> CliResult<(PlanarMatrix, CosseratVector)> {
    let xi = parse_numbers(&p.xi, 6, "--xi")?;
    let b = parse_numbers(&p.b, 3, "--b")?;
    Ok((PlanarMatrix::from_row_major(xi.try_into().expect("six entries")), CosseratVector([b[0], b[1], b[2]])))
}

fn parse_dims<const N: usize>(text: &str, what: &str) -> CliResult<[usize; N]> {
    let dims = text
        .split('x')
        .map(|s| s.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("{what}: expected sizes like {}, got {text:?}", if N == 2 { "16x8" } else { "64x64x16" })))?;
    dims.try_into().map_err(|_| usage(format!("{what}: expected {N} sizes, got {text:?}")))
}

fn load_model(global: &Global) -> CliResult<EnergyDensity> {
    let path = global.model.as_ref().ok_or_else(|| usage("--model is required for this command"))?;
    if !path.exists() {
        return Err(usage(format!("model file not found: {}", path.display())));
    }
    Ok(EnergyDensity::from_path(path)?)
}

fn cell_setup(global: &Global) -> CliResult<(CellGrid, SolverBudget)> {
    let [n_alpha, n_three] = parse_dims::<2>(&global.grid, "--grid")?;
    let grid = CellGrid::new(n_alpha, n_three)?;
    if !(global.tol_q > 0.0) {
        return Err(usage("--tol-q must be positive"));
    }
    let mut budget = SolverBudget {
        q_tol_constant: global.tol_q,
        ..SolverBudget::default()
    }
    .with_seed(global.seed);
    if let Some(n) = global.max_iters {
        if n == 0 {
            return Err(usage("--max-iters must be positive"));
        }
        budget.max_iters = n;
    }
    Ok((grid, budget))
}

/// Writes `content` to `out` through a temporary file in the same directory,
/// or to stdout.
fn emit(out: Option<&Path>, content: &str) -> CliResult<()> {
    match out {
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(content.as_bytes()).map_err(Error::from)?;
            Ok(())
        }
        Some(path) => {
            let dir = match path.parent() {
                Some(p) if !p.as_os_str().is_empty() => p,
                _ => Path::new("."),
            };
            let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(Error::from)?;
            tmp.write_all(content.as_bytes()).map_err(Error::from)?;
            tmp.persist(path).map_err(|e| Error::from(e.error))?;
            Ok(())
        }
    }
}

fn csv_string(write: impl FnOnce(&mut Vec<u8>) -> membrelax::Result<()>) -> CliResult<String> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

fn pretty(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s
}

fn scalar_output(format: Format, quantity: &str, value: f64, extra: serde_json::Value) -> String {
    match format {
        Format::Json => {
            let mut v = json!({ "quantity": quantity, "value": value });
            if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
                obj.extend(more);
            }
            pretty(&v)
        }
        Format::Csv => format!("quantity,value\n{quantity},{value}\n"),
        Format::Text => format!("{value}\n"),
    }
}

fn solution_output(format: Format, xi: &PlanarMatrix, b: &CosseratVector, solution: CellSolution, q_tol: f64) -> CliResult<String> {
    Ok(match format {
        Format::Json => pretty(&json!({
            "value": solution.value,
            "lambda": solution.lambda,
            "q_tol": q_tol,
            "diagnostics": solution.diagnostics,
        })),
        Format::Text => format!("{}\n", solution.value),
        Format::Csv => csv_string(|buf| write_sweep_csv(buf, &[(*xi, *b)], &[Ok(solution)]))?,
    })
}

fn cmd_density(global: &Global, args: &DensityArgs) -> CliResult<String> {
    let model = load_model(global)?;
    let format = global.format.unwrap_or(Format::Text);
    let ladder = default_ladder();
    let eval = |xi: &PlanarMatrix, b: &CosseratVector| -> membrelax::Result<(f64, Option<CosseratVector>)> {
        if args.w_zero {
            return model.w_zero(xi).map(|(v, arg)| (v, Some(arg)));
        }
        let full = FullMatrix::join(xi, b);
        if args.recession {
            model.recession_density(&full, &ladder).map(|v| (v, None))
        } else {
            model.eval_density(&full).map(|v| (v, None))
        }
    };
    let quantity = if args.w_zero {
        "w_zero"
    } else if args.recession {
        "recession"
    } else {
        "density"
    };
    let samples = match &args.samples {
        Some(path) => read_samples_csv(std::fs::File::open(path).map_err(Error::from)?)?,
        None if args.xi_unit => vec![(PlanarMatrix::from_row_major([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]), CosseratVector::ZERO)],
        None => vec![parse_point(&args.point)?],
    };
    let rows = samples.iter().map(|(xi, b)| eval(xi, b)).collect::<membrelax::Result<Vec<_>>>()?;
    if args.samples.is_none() && format != Format::Csv {
        let (value, arg) = rows[0];
        let extra = arg.map(|a| json!({ "argmin_b": a })).unwrap_or(json!({}));
        return Ok(scalar_output(format, quantity, value, extra));
    }
    match format {
        Format::Json => {
            let table: Vec<_> = samples
                .iter()
                .zip(&rows)
                .map(|((xi, b), (v, arg))| json!({ "xi": xi, "b": b, "value": v, "argmin_b": arg }))
                .collect();
            Ok(pretty(&json!({ "quantity": quantity, "rows": table })))
        }
        _ => csv_string(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            let mut header: Vec<String> = ["xi11", "xi12", "xi21", "xi22", "xi31", "xi32", "b1", "b2", "b3"].map(String::from).to_vec();
            header.push(quantity.into());
            if args.w_zero {
                header.extend(["argmin_b1", "argmin_b2", "argmin_b3"].map(String::from));
            }
            w.write_record(&header)?;
            for ((xi, b), (v, arg)) in samples.iter().zip(&rows) {
                let mut rec: Vec<String> = xi.to_row_major().iter().chain(b.0.iter()).map(|x| x.to_string()).collect();
                rec.push(v.to_string());
                if let Some(a) = arg {
                    rec.extend(a.0.iter().map(|x| x.to_string()));
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        }),
    }
}

fn cmd_cell(global: &Global, command: &CellCommand) -> CliResult<(String, u8)> {
    let model = load_model(global)?;
    let (grid, budget) = cell_setup(global)?;
    let q_tol = budget.q_tol(&grid);
    let format = global.format.unwrap_or(Format::Csv);
    let out = match command {
        CellCommand::Qstar(p) => {
            let (xi, b) = parse_point(p)?;
            solution_output(format, &xi, &b, qstar(&model, &xi, &b, grid, &budget)?, q_tol)?
        }
        CellCommand::Rotated { point, nu } => {
            let (xi, b) = parse_point(point)?;
            let nu = parse_numbers(nu, 2, "--nu")?;
            solution_output(format, &xi, &b, qstar_rotated(&model, &xi, &b, [nu[0], nu[1]], grid, &budget)?, q_tol)?
        }
        CellCommand::QwZero(p) => {
            let (xi, _) = parse_point(p)?;
            scalar_output(format, "qw_zero", qw_zero(&model, &xi, grid, &budget)?, json!({ "q_tol": q_tol }))
        }
        CellCommand::Recession(p) => {
            let (xi, b) = parse_point(p)?;
            let v = qstar_recession(&model, &xi, &b, grid, &budget, &default_cell_ladder())?;
            scalar_output(format, "qstar_recession", v, json!({ "q_tol": q_tol }))
        }
        CellCommand::Gamma { z, nu, b } => {
            let z = parse_numbers(z, 3, "--z")?;
            let nu = parse_numbers(nu, 2, "--nu")?;
            let b = parse_numbers(b, 3, "--b")?;
            let spec = JumpSpec::new(CosseratVector([z[0], z[1], z[2]]), [nu[0], nu[1]], CosseratVector([b[0], b[1], b[2]]))?;
            scalar_output(format, "gamma", gamma_surface(&model, &spec, grid, &budget)?, json!({ "q_tol": q_tol }))
        }
        CellCommand::Sweep { samples } => {
            let samples = read_samples_csv(std::fs::File::open(samples).map_err(Error::from)?)?;
            let rows = qstar_sweep(&model, &samples, grid, &budget)?;
            let failed = rows.iter().any(|r| r.is_err());
            let text = match format {
                Format::Json => {
                    let table: Vec<_> = samples
                        .iter()
                        .zip(&rows)
                        .map(|((xi, b), r)| match r {
                            Ok(s) => json!({ "xi": xi, "b": b, "value": s.value, "lambda": s.lambda, "diagnostics": s.diagnostics }),
                            Err(e) => json!({ "xi": xi, "b": b, "error": e.to_string() }),
                        })
                        .collect();
                    pretty(&json!({ "q_tol": q_tol, "rows": table }))
                }
                _ => csv_string(|buf| write_sweep_csv(buf, &samples, &rows))?,
            };
            return Ok((text, if failed { 3 } else { 0 }));
        }
    };
    Ok((out, 0))
}

fn cmd_membrane(global: &Global, args: &MembraneArgs) -> CliResult<String> {
    let model = load_model(global)?;
    let (grid, budget) = cell_setup(global)?;
    let file = SceneFile::from_path(&args.scene)?;
    file.validate().into_result()?;
    let cache = DensityCache::new();
    let breakdown = if args.no_moment {
        membrane_energy_no_moment(&model, &file.scene, grid, &budget, &cache)?
    } else {
        membrane_energy(&model, &file.scene, &file.measure, grid, &budget, &cache)?
    };
    let work = match &args.loads {
        Some(path) => {
            let loads: LoadSet = serde_json::from_str(&std::fs::read_to_string(path).map_err(Error::from)?).map_err(Error::from)?;
            Some(load_work(&loads, &file.scene, &file.measure, &QuadratureConfig::default())?)
        }
        None => None,
    };
    let format = global.format.unwrap_or(Format::Json);
    Ok(match format {
        Format::Csv | Format::Text => {
            let t = &breakdown.tolerances;
            let mut s = String::from("term,value,tolerance\n");
            for (name, v, tol) in [
                ("bulk", breakdown.bulk, t.bulk),
                ("jump", breakdown.jump, t.jump),
                ("cantor", breakdown.cantor, t.cantor),
                ("singular", breakdown.singular, t.singular),
                ("total", breakdown.total, breakdown.tolerance()),
            ] {
                s.push_str(&format!("{name},{v},{tol}\n"));
            }
            if let Some(w) = work {
                s.push_str(&format!("load_work,{w},\nnet,{},{}\n", breakdown.total - w, breakdown.tolerance()));
            }
            s
        }
        Format::Json => {
            let mut v = serde_json::to_value(&breakdown).map_err(Error::from)?;
            if let (Some(w), Some(obj)) = (work, v.as_object_mut()) {
                obj.insert("load_work".into(), json!(w));
                obj.insert("net".into(), json!(breakdown.total - w));
            }
            pretty(&v)
        }
    })
}

fn cmd_gamma(global: &Global, args: &GammaArgs) -> CliResult<(String, u8)> {
    let model = load_model(global)?;
    let (grid, budget) = cell_setup(global)?;
    let eps: Vec<f64> = args
        .eps
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("--eps: expected comma-separated numbers, got {:?}", args.eps)))?;
    if eps.iter().any(|e| !(*e > 0.0)) || eps.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(usage("--eps must be positive and strictly decreasing"));
    }
    let slab = parse_dims::<3>(&args.slab, "--slab")?;
    let builder = match args.builder {
        BuilderKind::Recovery => Builder::Recovery,
        BuilderKind::Dirac => Builder::Dirac,
        BuilderKind::SlabFiles => Builder::SlabFiles { files: args.slab_files.clone() },
    };
    let file = SceneFile::from_path(&args.scene)?;
    file.validate().into_result()?;
    let config = StudyConfig {
        builder,
        eps_list: eps,
        cell_grid: grid,
        slab,
        budget,
        tolerances: StudyTolerances {
            rel_gap: global.tol_gap,
            trend: global.tol_trend,
        },
    };
    let study = gamma_study(&model, &file.scene, &file.measure, &config, &DensityCache::new())?;
    if let Some((row, grid)) = study.rows.iter().find_map(|r| r.error.as_ref().and_then(|e| e.min_grid.map(|g| (r.eps, g)))) {
        return Err(Failure {
            code: 5,
            message: format!("slab {} under-resolved at eps={row}; minimum grid {}x{}x{}", args.slab, grid[0], grid[1], grid[2]),
        });
    }
    let text = match global.format.unwrap_or(Format::Csv) {
        Format::Json => pretty(&serde_json::to_value(&study).map_err(Error::from)?),
        _ => csv_string(|buf| study.write_csv(buf))?,
    };
    let status = if study.verdict.passed { "PASS" } else { "FAIL" };
    eprintln!("verdict: {status} ({} builder, E = {:.6})", study.builder, study.target.total);
    Ok((text, if study.verdict.passed { 0 } else { 1 }))
}

fn cmd_verify(global: &Global, args: &VerifyArgs) -> CliResult<(String, u8)> {
    let (grid, budget) = cell_setup(global)?;
    let only = args
        .only
        .iter()
        .map(|name| Check::parse(name.trim()).ok_or_else(|| usage(format!("unknown check {name:?}; known: {}", Check::ALL.map(|c| c.name()).join(", ")))))
        .collect::<CliResult<Vec<_>>>()?;
    let mut tolerances = VerifyTolerances::default();
    if let Some(t) = global.tol_check {
        tolerances = VerifyTolerances {
            collapse: t,
            inf_b: t,
            rotated: t,
            surface: t,
            idempotence: t,
        };
    }
    let report = run_suite(&VerifyConfig { grid, budget, only, tolerances })?;
    let text = match global.format.unwrap_or(Format::Text) {
        Format::Json => pretty(&serde_json::to_value(&report).map_err(Error::from)?),
        Format::Csv => csv_string(|buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["status", "check", "model", "case", "measured", "allowed", "slack"])?;
            for l in &report.lines {
                w.write_record([
                    if l.passed { "PASS" } else { "FAIL" }.to_string(),
                    l.check.name().to_string(),
                    l.model.clone(),
                    l.case.clone(),
                    l.measured.to_string(),
                    l.allowed.to_string(),
                    l.slack.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?,
        Format::Text => format!("{report}\n"),
    };
    Ok((text, if report.passed() { 0 } else { 1 }))
}

fn configure_threads() -> CliResult<()> {
    if let Ok(value) = std::env::var("MEMBRELAX_THREADS") {
        let n: usize = value
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| usage(format!("MEMBRELAX_THREADS must be a positive integer, got {value:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> CliResult<u8> {
    configure_threads()?;
    let g = &cli.global;
    let (text, code) = match &cli.command {
        Command::Density(a) => (cmd_density(g, a)?, 0),
        Command::Cell(c) => cmd_cell(g, c)?,
        Command::Membrane(a) => (cmd_membrane(g, a)?, 0),
        Command::Gamma(a) => cmd_gamma(g, a)?,
        Command::Verify(a) => cmd_verify(g, a)?,
    };
    emit(g.out.as_deref(), &text)?;
    Ok(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
