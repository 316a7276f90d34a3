//! Command implementations behind the `tilefuse` binary.
//!
//! Every command is deterministic given its seed. Reports use one versioned
//! JSON schema; traffic tables are CSV.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tilefuse::kernels::{derived_ffn, rope_tables, LayerWeights};
use tilefuse::numerics::{grrg_trial, summarize, NumericsSummary, Trial};
use tilefuse::tensor::codt;
use tilefuse::traffic::FusedParams;
use tilefuse::verify::{self, Check, LayerProblem, SuiteOptions, EXACT_TOL, FD_ABS, GRAD_PARAMS};
use tilefuse::{compare, Matrix, PipelineConfig, Precision, TileShape, Vector};

pub const REPORT_VERSION: u32 = 1;

/// Exit status of a finished command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Pass,
    Fail,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag values or unreadable inputs; exits with 2.
    #[error("usage: {0}")]
    Usage(String),
    /// Failure while running; exits with 1.
    #[error(transparent)]
    Run(#[from] tilefuse::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(tilefuse::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub precision: Precision,
}

/// The report every command can emit as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub environment: Environment,
    /// Command-specific details.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub details: Option<serde_json::Value>,
}

impl Report {
    pub fn new(seed: u64, precision: Precision, mut checks: Vec<Check>) -> Self {
        checks.sort_by(|a, b| a.name.cmp(&b.name));
        Self {
            version: REPORT_VERSION,
            seed,
            checks,
            environment: Environment { precision },
            details: None,
        }
    }

    pub fn outcome(&self) -> Outcome {
        if self.checks.iter().all(|c| c.pass) {
            Outcome::Pass
        } else {
            Outcome::Fail
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F64,
    F32,
    Bf16,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F64 => Precision::Exact64,
            PrecisionArg::F32 => Precision::Sim32,
            PrecisionArg::Bf16 => Precision::SimBF16,
        }
    }
}

fn parse_dims(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    if dims.len() != n || dims.contains(&0) {
        return Err(format!("expected {n} positive sizes joined by `x`, got `{s}`"));
    }
    Ok(dims)
}

/// One `MxN` tile shape.
pub fn parse_tile(s: &str) -> Result<TileShape, String> {
    let d = parse_dims(s, 2)?;
    Ok(TileShape {
        tile_m: d[0],
        tile_n: d[1],
    })
}

/// Comma-separated tile shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct TileList(pub Vec<TileShape>);

pub fn parse_tiles(s: &str) -> Result<TileList, String> {
    s.split(',').map(parse_tile).collect::<Result<_, _>>().map(TileList)
}

/// `toy`, `full`, or an inclusive `MIN..MAX` dimension range.
#[derive(Clone, Debug, PartialEq)]
pub enum Sizes {
    Toy,
    Full,
    Range(usize, usize),
}

pub fn parse_sizes(s: &str) -> Result<Sizes, String> {
    match s {
        "toy" => Ok(Sizes::Toy),
        "full" => Ok(Sizes::Full),
        _ => {
            let (lo, hi) = s
                .split_once("..")
                .ok_or_else(|| format!("expected `toy`, `full` or MIN..MAX, got `{s}`"))?;
            let lo = lo.parse::<usize>().map_err(|e| e.to_string())?;
            let hi = hi.parse::<usize>().map_err(|e| e.to_string())?;
            Ok(Sizes::Range(lo, hi))
        }
    }
}

/// `(tokens, d, vocab)` shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeGrid(pub Vec<(usize, usize, usize)>);

/// Shapes `MxD` or `MxDxV`, comma separated; the empty string is an empty
/// grid.
pub fn parse_grid(s: &str) -> Result<ShapeGrid, String> {
    if s.trim().is_empty() {
        return Ok(ShapeGrid(Vec::new()));
    }
    s.split(',')
        .map(|t| {
            let n = t.split('x').count();
            let d = parse_dims(t, if n == 3 { 3 } else { 2 })?;
            Ok((d[0], d[1], d.get(2).copied().unwrap_or(verify::TRAFFIC_VOCAB)))
        })
        .collect::<Result<_, String>>()
        .map(ShapeGrid)
}

#[derive(Parser, Debug)]
#[command(
    name = "tilefuse",
    version,
    about = "Fused GEMM-epilogue kernels: verification, numerics and traffic reports"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the invariant suites against the oracles.
    Verify(VerifyArgs),
    /// Compare fused and unfused GRRG errors at reduced precision.
    Numerics(NumericsArgs),
    /// Fused vs unfused global-memory traffic over a shape grid.
    Traffic(TrafficArgs),
    /// Run one layer forward and backward and write the tensors.
    Demo(DemoArgs),
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `toy`, `full` or an inclusive MIN..MAX dimension range.
    #[arg(long, default_value = "toy", value_parser = parse_sizes)]
    pub sizes: Sizes,
    /// Tile shapes compared for invariance, e.g. `4x4,16x32`.
    #[arg(long, value_parser = parse_tiles)]
    pub tile: Option<TileList>,
    /// Random instances per suite.
    #[arg(long)]
    pub instances: Option<usize>,
    /// Write the JSON report here (`-` for stdout).
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct NumericsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// `TOKENSxD`.
    #[arg(long, default_value = "64x256")]
    pub shape: String,
    #[arg(long, value_enum, default_value = "bf16")]
    pub precision: PrecisionArg,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrafficArgs {
    /// `TOKENSxD[xVOCAB]` shapes, comma separated.
    #[arg(long, default_value = "16384x2048,16384x4096,16384x8192", value_parser = parse_grid)]
    pub shape_grid: ShapeGrid,
    #[arg(long, value_enum, default_value = "bf16")]
    pub precision: PrecisionArg,
    #[arg(long, default_value = "128x128", value_parser = parse_tile)]
    pub tile: TileShape,
    #[arg(long, default_value_t = 128)]
    pub reduction_tile: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON pipeline configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of CODT inputs (`x`, `z`, `dq`, `dres` and any weight);
    /// missing tensors are drawn from the seed.
    #[arg(long)]
    pub tensor_in: Option<PathBuf>,
    /// Directory to write outputs and gradients to.
    #[arg(long)]
    pub tensor_out: Option<PathBuf>,
    /// Re-verify gradients against the oracles and finite differences.
    #[arg(long)]
    pub check: bool,
    #[arg(long)]
    pub json_out: Option<PathBuf>,
}

fn emit(path: Option<&Path>, text: &str, out: &mut dyn Write) -> CliResult<()> {
    match path {
        Some(p) if p != Path::new("-") => fs::write(p, text)?,
        _ => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn summary_lines(report: &Report, out: &mut dyn Write) -> CliResult<()> {
    for c in &report.checks {
        let verdict = if c.pass { "pass" } else { "FAIL" };
        writeln!(
            out,
            "{verdict:4}  {:<48} {:>11.3e}  tol {:.0e}",
            c.name, c.metric, c.tolerance
        )?;
    }
    Ok(())
}

/// Writes the report as JSON to `--json-out` (or stdout when it is `-`),
/// otherwise a one-line-per-check summary to stdout.
fn finish(report: &Report, json_out: Option<&Path>, out: &mut dyn Write) -> CliResult<Outcome> {
    match json_out {
        Some(p) => emit(Some(p), &report.to_json(), out)?,
        None => summary_lines(report, out)?,
    }
    Ok(report.outcome())
}

pub fn cmd_verify(args: &VerifyArgs, out: &mut dyn Write) -> CliResult<Outcome> {
    let mut opts = match args.sizes {
        Sizes::Toy => SuiteOptions::toy(),
        Sizes::Full => SuiteOptions::default(),
        Sizes::Range(lo, hi) => SuiteOptions {
            min_dim: lo,
            max_dim: hi,
            ..SuiteOptions::toy()
        },
    };
    opts.seed = args.seed;
    if let Some(t) = &args.tile {
        opts.tile_shapes = t.0.clone();
    }
    if let Some(n) = args.instances {
        opts.instances = n;
    }
    opts.validate()?;
    let report = Report::new(args.seed, Precision::Exact64, verify::run_all(&opts)?);
    finish(&report, args.json_out.as_deref(), out)
}

#[derive(Serialize)]
struct NumericsDetails {
    tokens: usize,
    d: usize,
    summary: NumericsSummary,
    trials: Vec<Trial>,
}

pub fn cmd_numerics(args: &NumericsArgs, out: &mut dyn Write) -> CliResult<Outcome> {
    let dims = parse_dims(&args.shape, 2).map_err(CliError::Usage)?;
    if args.trials == 0 {
        return Err(CliError::Usage("need at least one trial".into()));
    }
    let (m, d) = (dims[0], dims[1]);
    let precision = Precision::from(args.precision);
    let trials = (0..args.trials as u64)
        .map(|t| grrg_trial(args.seed.wrapping_add(t), m, d, precision))
        .collect::<tilefuse::Result<Vec<_>>>()?;
    let summary = summarize(&trials);
    let check = if precision.is_exact() {
        // no rounding to compare: both paths must agree with the reference
        Check::at_most(
            "numerics/max_error",
            summary.max_fused_error.max(summary.max_canonical_error),
            EXACT_TOL,
        )
    } else {
        Check::at_most(
            "numerics/median_error_ratio",
            summary.median_ratio.unwrap_or(f64::NAN),
            1.0,
        )
    };
    let mut report = Report::new(args.seed, precision, vec![check]);
    report.details = Some(
        serde_json::to_value(NumericsDetails {
            tokens: m,
            d,
            summary,
            trials,
        })
        .expect("details serialize"),
    );
    finish(&report, args.json_out.as_deref(), out)
}

/// One row of the traffic table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrafficRow {
    pub pipeline: String,
    pub tokens: usize,
    pub d: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub fused_bytes: u64,
    pub canonical_bytes: u64,
    pub byte_delta: i128,
    pub ratio: f64,
    pub fused_launches: usize,
    pub canonical_launches: usize,
}

pub const TRAFFIC_HEADER: [&str; 11] = [
    "pipeline",
    "tokens",
    "d",
    "ffn",
    "vocab",
    "fused_bytes",
    "canonical_bytes",
    "byte_delta",
    "ratio",
    "fused_launches",
    "canonical_launches",
];

pub fn traffic_rows(args: &TrafficArgs) -> CliResult<Vec<TrafficRow>> {
    let tile = args.tile;
    tile.validate()?;
    if args.reduction_tile == 0 {
        return Err(CliError::Usage("reduction tile must be at least 1".into()));
    }
    let fp = FusedParams::new(args.precision.into(), tile, args.reduction_tile);
    let mut rows = Vec::new();
    for &(m, d, vocab) in &args.shape_grid.0 {
        let ffn = derived_ffn(d);
        for (name, f, c) in verify::pipeline_ledgers(&fp, m, d, ffn, vocab)? {
            let r = compare(&f, &c);
            rows.push(TrafficRow {
                pipeline: name.to_string(),
                tokens: m,
                d,
                ffn,
                vocab,
                fused_bytes: r.fused_bytes,
                canonical_bytes: r.canonical_bytes,
                byte_delta: r.byte_delta,
                ratio: r.ratio,
                fused_launches: r.fused_launches,
                canonical_launches: r.canonical_launches,
            });
        }
    }
    Ok(rows)
}

pub fn cmd_traffic(args: &TrafficArgs, out: &mut dyn Write) -> CliResult<Outcome> {
    let rows = traffic_rows(args)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::Io(std::io::Error::other(e));
    w.write_record(TRAFFIC_HEADER).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Io(std::io::Error::other(e.to_string())))?;
    emit(
        args.csv_out.as_deref(),
        &String::from_utf8(bytes).expect("csv is utf-8"),
        out,
    )?;
    Ok(Outcome::Pass)
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let cfg = match path {
        None => PipelineConfig::toy(8, 16, 32),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

fn read_or<T>(
    dir: Option<&Path>,
    name: &str,
    default: T,
    load: impl Fn(codt::Tensor) -> tilefuse::Result<T>,
) -> CliResult<T> {
    let Some(dir) = dir else { return Ok(default) };
    let path = dir.join(format!("{name}.codt"));
    if !path.exists() {
        return Ok(default);
    }
    let t = codt::load(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    load(t).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn demo_problem(cfg: &PipelineConfig, seed: u64, dir: Option<&Path>) -> CliResult<LayerProblem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeded = LayerProblem::random(cfg.clone(), &mut rng);
    let m = |name: &str, d: Matrix| read_or(dir, name, d, |t| t.into_matrix());
    let v = |name: &str, d: Vector| read_or(dir, name, d, |t| t.into_vector());
    let w = LayerWeights {
        w_o: m("w_o", seeded.w.w_o)?,
        gamma1: v("gamma1", seeded.w.gamma1)?,
        w_gu: m("w_gu", seeded.w.w_gu)?,
        w_dn: m("w_dn", seeded.w.w_dn)?,
        gamma2: v("gamma2", seeded.w.gamma2)?,
        w_qkv: m("w_qkv", seeded.w.w_qkv)?,
    };
    let x = m("x", seeded.x)?;
    let p = cfg.precision;
    let (cos, sin) = rope_tables(cfg.tokens, 3 * cfg.d, 10_000.0, p);
    Ok(LayerProblem {
        cfg: cfg.clone(),
        z: m("z", seeded.z)?.to_precision(p),
        dq: m("dq", seeded.dq)?.to_precision(p),
        dres: m("dres", seeded.dres)?.to_precision(p),
        x: x.to_precision(p),
        w: w.to_precision(p),
        cos,
        sin,
    })
}

pub fn cmd_demo(args: &DemoArgs, out: &mut dyn Write) -> CliResult<Outcome> {
    let cfg = load_config(args.config.as_deref())?;
    let problem = demo_problem(&cfg, args.seed, args.tensor_in.as_deref())?;
    let (q, residual, grads) = problem.fused()?;
    let mut checks = Vec::new();

    if let Some(dir) = &args.tensor_out {
        fs::create_dir_all(dir)?;
        let mut tensors = vec![("q", q.clone()), ("residual", residual.clone())];
        tensors.extend(grads.named());
        let mut mismatched = 0usize;
        for (name, t) in &tensors {
            let path = dir.join(format!("{name}.codt"));
            codt::save_matrix(&path, t)?;
            let back = codt::load(&path)?.into_matrix()?;
            let same = back.shape() == t.shape()
                && back
                    .as_slice()
                    .iter()
                    .zip(t.as_slice())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            mismatched += usize::from(!same);
        }
        checks.push(Check::at_most("demo/codt_roundtrip_mismatches", mismatched as f64, 0.0));
    }
    if args.check {
        if !cfg.precision.is_exact() {
            return Err(CliError::Usage(
                "--check compares against binary64 oracles; use precision Exact64".into(),
            ));
        }
        let floor = FD_ABS.max(problem.roundoff_floor());
        checks.extend(problem.gradient_checks_with_floor(&GRAD_PARAMS, floor)?);
    }
    let mut report = Report::new(args.seed, cfg.precision, checks);
    report.details = Some(serde_json::json!({
        "tokens": cfg.tokens,
        "d": cfg.d,
        "ffn": cfg.ffn_width(),
        "q_norm": q.frobenius_norm(),
        "residual_norm": residual.frobenius_norm(),
    }));
    match &args.json_out {
        Some(p) => emit(Some(p), &report.to_json(), out)?,
        None => {
            writeln!(
                out,
                "layer {}x{} (ffn {}): |q| = {:.6e}, |residual| = {:.6e}",
                cfg.tokens,
                cfg.d,
                cfg.ffn_width(),
                q.frobenius_norm(),
                residual.frobenius_norm()
            )?;
            summary_lines(&report, out)?;
        }
    }
    Ok(report.outcome())
}

/// Runs a parsed command, writing to `out`.
pub fn run(cli: &Cli, out: &mut dyn Write) -> CliResult<Outcome> {
    match &cli.command {
        Command::Verify(a) => cmd_verify(a, out),
        Command::Numerics(a) => cmd_numerics(a, out),
        Command::Traffic(a) => cmd_traffic(a, out),
        Command::Demo(a) => cmd_demo(a, out),
    }
}
