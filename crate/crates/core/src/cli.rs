use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use segt::bench::{run_bench, BenchOptions};
use segt::encoder::{bev_scatter, default_schedule, encoder_forward_with, EncoderParams, InitMode};
use segt::model_io::{
    init_params, load_params, read_voxels, save_params, write_bev, write_bev_csv, write_voxels, AnyParams, RunConfig,
};
use segt::spacecurve::{hilbert_decode, serialize, write_curve_csv, Strategy};
use segt::tensor::Real;
use segt::verify::{run_all, Faults};
use segt::voxelizer::{voxelize_with_stats, PointCloud, VoxelSet};
use segt::SegtError;

#[derive(Parser, Debug)]
#[command(name = "segt", version, about = "Voxelize, serialize and encode LiDAR point clouds")]
pub struct Cli {
    /// Worker threads; 1 forces the sequential reference path.
    #[arg(long, global = true, env = "SEGT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pool a point cloud into voxels (SEGV).
    Voxelize(VoxelizeArgs),
    /// Dump the ordered-field permutation of a voxel set as CSV.
    Serialize(SerializeArgs),
    /// Run the encoder and write the BEV grid (SEGB).
    Encode(EncodeArgs),
    /// Dump a full Hilbert curve as CSV, optionally as an SVG polyline.
    Curve(CurveArgs),
    /// Time serialization, attention and a full layer on random voxels.
    Bench(BenchArgs),
    /// Run the embedded invariant suite.
    Selftest(SelftestArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PointFormat {
    Bin,
    Csv,
}

#[derive(Args, Debug)]
struct VoxelizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Floats per point in binary input; overrides the config.
    #[arg(long)]
    stride: Option<usize>,
    /// Input format; guessed from the extension when omitted.
    #[arg(long, value_enum)]
    format: Option<PointFormat>,
}

#[derive(Args, Debug)]
struct SerializeArgs {
    #[arg(long)]
    input: PathBuf,
    /// `+` or `-`.
    #[arg(long, allow_hyphen_values = true)]
    strategy: Strategy,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Random,
    Identity,
}

#[derive(Args, Debug)]
struct EncodeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Stored parameters (SEGW); their config fixes the model shape.
    #[arg(long, conflicts_with_all = ["seed", "init"])]
    weights: Option<PathBuf>,
    /// Generate parameters from this seed instead of loading them.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    /// Also write the parameters used.
    #[arg(long)]
    save_weights: Option<PathBuf>,
    /// Also write one BEV channel as CSV.
    #[arg(long)]
    bev_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    bev_channel: usize,
}

#[derive(Args, Debug)]
struct CurveArgs {
    #[arg(long)]
    level: u32,
    #[arg(long, default_value_t = 2)]
    dims: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    svg: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, default_value_t = 100_000)]
    voxels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    repeat: usize,
    /// Also time the full 16-layer encoder.
    #[arg(long)]
    stages: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Fault {
    Curve,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

/// Exit codes.
const EXIT_SELFTEST: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_SHAPE: u8 = 4;

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<SegtError> for Failure {
    fn from(e: SegtError) -> Self {
        let code = match e {
            SegtError::Io(_)
            | SegtError::Ingest { .. }
            | SegtError::Parse { .. }
            | SegtError::Format { .. }
            | SegtError::Truncated { .. } => EXIT_IO,
            SegtError::Config { .. } | SegtError::Domain(_) => EXIT_CONFIG,
            SegtError::Shape(_) | SegtError::NonFinite { .. } => EXIT_SHAPE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

fn config_failure(e: SegtError) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: format!("config: {e}"),
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult<u8> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(config_failure(SegtError::Config {
                key: "threads".into(),
                reason: "must be at least 1".into(),
            }));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure {
                code: EXIT_CONFIG,
                message: format!("threads: {e}"),
            })?;
    }
    let mut out = String::new();
    let code = match cli.command {
        Command::Voxelize(a) => cmd_voxelize(a, &mut out).map(|_| 0),
        Command::Serialize(a) => cmd_serialize(a, &mut out).map(|_| 0),
        Command::Encode(a) => cmd_encode(a, &mut out).map(|_| 0),
        Command::Curve(a) => cmd_curve(a, &mut out).map(|_| 0),
        Command::Bench(a) => cmd_bench(a, &mut out).map(|_| 0),
        Command::Selftest(a) => Ok(cmd_selftest(a, &mut out)),
    };
    print!("{out}");
    code
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_failure(p, e))?;
            RunConfig::parse(&text).map_err(config_failure)
        }
    }
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| io_failure(path, e))
}

fn finish(path: &Path, mut w: BufWriter<File>) -> CliResult {
    w.flush().map_err(|e| io_failure(path, e))
}

fn dims_text(d: [u32; 3]) -> String {
    format!("{},{},{}", d[0], d[1], d[2])
}

fn cmd_voxelize(a: VoxelizeArgs, out: &mut String) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let stride = a.stride.unwrap_or(cfg.stride);
    let format = a.format.unwrap_or_else(|| {
        let csv = a.input.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        if csv {
            PointFormat::Csv
        } else {
            PointFormat::Bin
        }
    });
    let file = File::open(&a.input).map_err(|e| io_failure(&a.input, e))?;
    let cloud = match format {
        PointFormat::Bin => PointCloud::read_bin(BufReader::new(file), stride)?,
        PointFormat::Csv => PointCloud::read_csv(BufReader::new(file))?,
    };
    let (voxels, stats) = voxelize_with_stats(&cloud, &cfg.grid)?;
    let mut w = create(&a.output)?;
    write_voxels(&mut w, &voxels)?;
    finish(&a.output, w)?;
    let _ = writeln!(out, "points={}", cloud.len());
    let _ = writeln!(out, "n={}", voxels.len());
    let _ = writeln!(out, "c={}", voxels.channels());
    let _ = writeln!(out, "dims={}", dims_text(voxels.grid().dims()));
    let _ = writeln!(out, "dropped={}", stats.dropped);
    Ok(())
}

fn load_voxels(path: &Path) -> CliResult<VoxelSet> {
    Ok(read_voxels(&read_file(path)?)?)
}

fn cmd_serialize(a: SerializeArgs, out: &mut String) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let voxels = load_voxels(&a.input)?;
    let dims = voxels.grid().dims();
    let expansion = cfg.expansion(dims).map_err(config_failure)?;
    let plan = serialize(&voxels, a.strategy, &expansion)?;
    let mut w = create(&a.output)?;
    let mut write = || -> io::Result<()> {
        writeln!(w, "rank,voxel_row,global_key,local_key,x,y,z")?;
        for (rank, &row) in plan.order().iter().enumerate() {
            let (g, l) = plan.keys()[row];
            let c = voxels.coords()[row];
            writeln!(w, "{rank},{row},{g},{l},{},{},{}", c[0], c[1], c[2])?;
        }
        Ok(())
    };
    write().map_err(|e| io_failure(&a.output, e))?;
    finish(&a.output, w)?;
    let _ = writeln!(out, "n={}", plan.len());
    let _ = writeln!(out, "strategy={}", a.strategy.symbol());
    let _ = writeln!(out, "l_glb={}", expansion.l_glb());
    let _ = writeln!(out, "l_lcl={}", expansion.l_lcl());
    Ok(())
}

fn cmd_encode(a: EncodeArgs, out: &mut String) -> CliResult {
    let voxels = load_voxels(&a.input)?;
    let (cfg, params) = match &a.weights {
        Some(path) => load_params(&read_file(path)?)?,
        None => {
            let mut cfg = load_config(a.config.as_deref())?;
            if let Some(seed) = a.seed {
                cfg.seed = seed;
            }
            cfg.in_channels = voxels.channels().max(1);
            if cfg.grid.dims() != voxels.grid().dims() {
                cfg.grid = *voxels.grid();
            }
            let mode = match a.init {
                Some(InitArg::Identity) => InitMode::Identity,
                _ => InitMode::Random,
            };
            let params = init_params(&cfg, mode).map_err(config_failure)?;
            (cfg, params)
        }
    };
    if let Some(path) = &a.save_weights {
        let mut w = create(path)?;
        save_params(&mut w, &params, &cfg)?;
        finish(path, w)?;
    }

    let mut stage_ms = Vec::new();
    let encoded = match &params {
        AnyParams::F32(p) => run_encoder(&voxels, p, &mut stage_ms)?,
        AnyParams::F64(p) => run_encoder(&voxels, p, &mut stage_ms)?,
    };
    let bev = bev_scatter(&encoded);
    let mut w = create(&a.output)?;
    write_bev(&mut w, &bev)?;
    finish(&a.output, w)?;
    if let Some(path) = &a.bev_csv {
        let mut w = create(path)?;
        write_bev_csv(&mut w, &bev, a.bev_channel)?;
        finish(path, w)?;
    }

    let _ = writeln!(out, "n={}", voxels.len());
    let _ = writeln!(out, "c={}", bev.channels());
    let _ = writeln!(out, "bev={},{}", bev.nx(), bev.ny());
    let _ = writeln!(out, "precision={}", params.precision());
    for (i, ms) in stage_ms.iter().enumerate() {
        let _ = writeln!(out, "stage{i}_ms={ms:.3}");
    }
    let _ = writeln!(out, "total_ms={:.3}", stage_ms.iter().sum::<f64>());
    Ok(())
}

fn run_encoder<T: Real>(voxels: &VoxelSet, params: &EncoderParams<T>, stage_ms: &mut Vec<f64>) -> CliResult<VoxelSet> {
    let on_stage = |_, t: std::time::Duration| stage_ms.push(t.as_secs_f64() * 1e3);
    encoder_forward_with(voxels, params, &default_schedule(), on_stage).map_err(Failure::from)
}

/// Largest level the dump accepts.
const MAX_DUMP_LEVEL: u32 = 8;

fn cmd_curve(a: CurveArgs, out: &mut String) -> CliResult {
    let bad = |key: &str, reason: String| {
        config_failure(SegtError::Config {
            key: key.into(),
            reason,
        })
    };
    if a.level > MAX_DUMP_LEVEL {
        return Err(bad("level", format!("{} exceeds the dump limit {MAX_DUMP_LEVEL}", a.level)));
    }
    if a.dims != 2 && a.dims != 3 {
        return Err(bad("dims", format!("{} is not 2 or 3", a.dims)));
    }
    if a.svg.is_some() && a.dims != 2 {
        return Err(bad("svg", "only 2D curves can be drawn".into()));
    }
    let mut w = create(&a.output)?;
    write_curve_csv(&mut w, a.level, a.dims)?;
    finish(&a.output, w)?;
    if let Some(path) = &a.svg {
        let svg = curve_svg(a.level)?;
        fs::write(path, svg).map_err(|e| io_failure(path, e))?;
    }
    let _ = writeln!(out, "level={}", a.level);
    let _ = writeln!(out, "dims={}", a.dims);
    let _ = writeln!(out, "cells={}", 1u64 << (a.dims as u32 * a.level));
    Ok(())
}

/// One `<path>` through every cell centre in curve order, in cell units.
fn curve_svg(level: u32) -> CliResult<String> {
    let side = 1u64 << level;
    let mut d = String::new();
    for i in 0..side * side {
        let p = hilbert_decode(i, level, 2)?;
        let _ = write!(d, "{}{} {}", if i == 0 { "M" } else { " L" }, p[0], p[1]);
    }
    let px = 512;
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{px}\" height=\"{px}\" viewBox=\"-0.5 -0.5 {side} {side}\">\n\
         <path d=\"{d}\" fill=\"none\" stroke=\"black\" stroke-width=\"0.1\"/>\n</svg>\n"
    ))
}

fn cmd_bench(a: BenchArgs, out: &mut String) -> CliResult {
    let cfg = load_config(a.config.as_deref())?;
    let opts = BenchOptions {
        voxels: a.voxels,
        seed: a.seed,
        repeat: a.repeat,
        full_encoder: a.stages,
    };
    let timings = run_bench(&cfg, &opts).map_err(config_failure)?;
    let _ = writeln!(out, "voxels={}", a.voxels);
    let _ = writeln!(out, "repeat={}", a.repeat);
    let _ = writeln!(out, "threads={}", rayon::current_num_threads());
    let _ = writeln!(out, "precision={}", cfg.precision);
    for t in timings {
        let _ = writeln!(out, "{}_min_ms={:.6}", t.name, t.min.as_secs_f64() * 1e3);
        let _ = writeln!(out, "{}_median_ms={:.6}", t.name, t.median.as_secs_f64() * 1e3);
    }
    Ok(())
}

fn cmd_selftest(a: SelftestArgs, out: &mut String) -> u8 {
    let faults = Faults {
        corrupt_curve: matches!(a.inject_fault, Some(Fault::Curve)),
    };
    let outcomes = run_all(faults);
    let mut failed = Vec::new();
    for o in &outcomes {
        eprintln!("{o}");
        let _ = writeln!(out, "{}={}", o.name, if o.passed { "pass" } else { "fail" });
        if !o.passed {
            failed.push(o.name);
        }
    }
    let _ = writeln!(out, "passed={}", outcomes.len() - failed.len());
    let _ = writeln!(out, "failed={}", failed.len());
    if failed.is_empty() {
        0
    } else {
        let _ = writeln!(out, "failures={}", failed.join(","));
        eprintln!("selftest failed: {}", failed.join(", "));
        EXIT_SELFTEST
    }
}
