//! Command-line entry points. Every input file is read and parsed before
//! any work starts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::blockfile::{load_blocks, write_blocks};
use crate::circuit::LogicalCircuit;
use crate::compiler::{generate_blocks, Compilation, Granularity, QecSetting};
use crate::coordinator::{parse_trace, replay, write_log, write_trace, CoordinatorConfig, RuntimePlan};
use crate::error::{Error, Result};
use crate::sim::{monte_carlo, run_shot, Sampler};

#[derive(Debug, Parser)]
#[command(name = "blockdecode", version, about = "Decoding-block compiler, fusion decoder and runtime coordinator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compile a circuit into a blocks file.
    Compile(CompileArgs),
    /// Monte Carlo logical error rates and latency.
    Simulate(SimulateArgs),
    /// Replay an event trace through the coordinator.
    Decode(DecodeArgs),
    /// Schedule and utilization study over a worker-count sweep.
    Bench(BenchArgs),
}

fn parse_granularity(s: &str) -> std::result::Result<Granularity, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct Source {
    #[arg(long)]
    pub circuit: PathBuf,
    #[arg(long)]
    pub setting: PathBuf,
    /// Ops per block, or `inf` for one block per patch and path segment.
    #[arg(long, default_value = "1", value_parser = parse_granularity)]
    pub granularity: Granularity,
}

#[derive(Debug, Args)]
pub struct CompileArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 1000)]
    pub shots: u64,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Override the setting's distance with a sweep, e.g. `3,5`.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u32).range(3..))]
    pub distance: Vec<u32>,
    /// Write the event trace of shot 0 here.
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Write the machine-readable summary here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub blocks: PathBuf,
    #[arg(long)]
    pub trace: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long, default_value_t = 200)]
    pub shots: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker counts to sweep.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8", value_parser = clap::value_parser!(u32).range(1..))]
    pub workers: Vec<u32>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<Option<String>> {
    match out {
        Some(p) => {
            fs::write(p, text).map_err(|e| Error::Io(format!("{}: {e}", p.display())))?;
            Ok(None)
        }
        None => Ok(Some(text.to_string())),
    }
}

struct Loaded {
    src: String,
    circuit: LogicalCircuit,
    setting: QecSetting,
}

fn load_source(s: &Source) -> Result<Loaded> {
    let src = read(&s.circuit)?;
    let setting_src = read(&s.setting)?;
    let circuit = LogicalCircuit::parse(&src)?;
    circuit.validate_static()?;
    let setting = QecSetting::parse(&setting_src)?;
    Ok(Loaded { src, circuit, setting })
}

fn compile_source(l: &Loaded, setting: &QecSetting, g: Granularity) -> Result<Compilation> {
    generate_blocks(&l.circuit, setting, g)
}

/// Returns what should go to stdout.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Compile(a) => cmd_compile(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

pub fn cmd_compile(a: &CompileArgs) -> Result<String> {
    let l = load_source(&a.source)?;
    let comp = compile_source(&l, &l.setting, a.source.granularity)?;
    let text = write_blocks(&l.src, &comp);
    Ok(emit(a.out.as_deref(), &text)?.unwrap_or_else(|| {
        format!(
            "{} blocks, {} block types, {} paths\n",
            comp.blocks.len(),
            comp.type_table().len(),
            comp.paths.len()
        )
    }))
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<String> {
    let l = load_source(&a.source)?;
    if a.shots == 0 {
        return Err(Error::Input("--shots must be at least 1".into()));
    }
    if a.workers == 0 {
        return Err(Error::Input("--workers must be at least 1".into()));
    }
    let distances = if a.distance.is_empty() { vec![l.setting.distance] } else { a.distance.clone() };
    let mut settings = Vec::new();
    for d in distances {
        let s = l.setting.clone();
        settings.push(QecSetting::new(s.code, d, s.p_data, s.p_meas, s.rounds_per_op)?);
    }
    let comps = settings.iter().map(|s| compile_source(&l, s, a.source.granularity)).collect::<Result<Vec<_>>>()?;
    let mut table = String::from("d\tlabel\tshots\tfailures\tler\tci_low\tci_high\n");
    let mut latency = String::new();
    let mut summary = String::new();
    for (s, comp) in settings.iter().zip(&comps) {
        let r = monte_carlo(comp, a.shots, a.seed, a.workers)?;
        for row in r.table().lines().skip(1) {
            let _ = writeln!(table, "{}\t{row}", s.distance);
        }
        let _ = write!(latency, "d={}  {}", s.distance, r.latency_summary());
        let _ = write!(summary, "distance {}\n{}", s.distance, r.summary());
        if r.invalid_corrections > 0 {
            return Err(Error::Integrity(format!("{} corrections failed to annihilate their syndrome", r.invalid_corrections)));
        }
    }
    if let Some(path) = &a.trace {
        let plan = RuntimePlan::new(&comps[0]);
        let shot = run_shot(&plan, &CoordinatorConfig::uniform(a.workers), &Sampler::new(a.seed), 0, &Default::default())?;
        emit(Some(path), &write_trace(&shot.events))?;
    }
    if let Some(path) = &a.out {
        emit(Some(path), &summary)?;
    }
    Ok(format!("{table}\n{latency}"))
}

pub fn cmd_decode(a: &DecodeArgs) -> Result<String> {
    let blocks = load_blocks(&read(&a.blocks)?)?;
    let events = parse_trace(&read(&a.trace)?)?;
    if a.workers == 0 {
        return Err(Error::Input("--workers must be at least 1".into()));
    }
    let plan = RuntimePlan::new(&blocks.compilation);
    let log = replay(&plan, &CoordinatorConfig::uniform(a.workers), &events)?;
    Ok(emit(a.out.as_deref(), &write_log(&log))?.unwrap_or_default())
}

pub fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let l = load_source(&a.source)?;
    let comp = compile_source(&l, &l.setting, a.source.granularity)?;
    let mut out = String::from("workers\tmean_makespan\tmean_critical_path\tutilization\tmean_latency\tmax_latency\n");
    for &w in &a.workers {
        let r = monte_carlo(&comp, a.shots, a.seed, w as usize)?;
        let _ = writeln!(
            out,
            "{w}\t{:.3}\t{:.3}\t{:.4}\t{:.3}\t{}",
            r.mean_makespan, r.mean_critical_path, r.utilization, r.mean_latency, r.max_latency
        );
    }
    Ok(out)
}
