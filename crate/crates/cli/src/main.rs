//! `bruno`: training, benchmarking and verification of dual-timescale
//! spiking networks.
//!
//! Exit codes: 0 success, 1 check failure or I/O error, 2 usage error,
//! 3 numeric instability (exploded, diverged or out-of-budget run).

mod config;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bruno_core::bruno::{train_with, Checkpoint, Mode, RunStatus, TrainError};
use bruno_core::harness::bench::{bench_csv, run_bench};
use bruno_core::harness::grid::{rows_csv, run_grid, summary_csv, wide_csv, CellOverride};
use bruno_core::harness::hpo::{run_hpo, HpoResult};
use bruno_core::harness::verify::run_verify;
use bruno_core::harness::parse_quant;
use bruno_core::netdata::{build_network, generate_dataset, load_dataset, save_dataset, Architecture, Dataset, DatasetSpec};

use config::{DataFlags, NetFlags, TrainFlags};
use rundir::RunDir;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Check(String),
    Instability(String),
    Io(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) | Failure::Io(_) => 1,
            Failure::Instability(_) => 3,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Check(m) => write!(f, "check failed: {m}"),
            Failure::Instability(m) => write!(f, "numeric instability: {m}"),
            Failure::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Failure::Usage(m),
            TrainError::Instability(_) | TrainError::GradientExplosion { .. } | TrainError::OutOfMemory { .. } => {
                Failure::Instability(e.to_string())
            }
            other => Failure::Io(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "bruno", version, about = "Dual-timescale training of spiking networks with FeLIF neurons")]
struct Cli {
    /// TOML file overriding defaults; flags override the file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory under which run directories are created.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Exact run directory (overrides --out).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Repeat for more log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the verification suite; exit 0 iff every check passes.
    Verify {
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Time and tape-memory sweep of BRUNO against vanilla BPTT.
    Bench(BenchArgs),
    /// Train one network.
    Train {
        #[command(flatten)]
        net: NetFlags,
        #[command(flatten)]
        data: DataFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Architecture × quantization accuracy grid over seeds.
    Grid(GridArgs),
    /// Random-search hyperparameter optimization for one cell.
    Hpo(HpoArgs),
    /// Generate the synthetic spike dataset into the run directory.
    GenData {
        #[command(flatten)]
        data: DataFlags,
    },
}

#[derive(Args)]
struct BenchArgs {
    /// Network sizes (hidden = output neurons).
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    /// Sequence lengths in coarse steps.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<Mode>>,
    #[arg(long)]
    substeps: Option<usize>,
    #[arg(long)]
    dt_fine: Option<f64>,
    #[arg(long)]
    inputs: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    no_warmup: bool,
    #[arg(long)]
    tape_budget_mb: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, value_delimiter = ',')]
    archs: Option<Vec<Architecture>>,
    /// Quantization levels, e.g. FP,8,4,3.
    #[arg(long, value_delimiter = ',')]
    quants: Option<Vec<String>>,
    /// Number of seeds (0..n).
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    presets: bool,
    /// JSON list of HPO results or cell overrides to apply per cell.
    #[arg(long)]
    cells: Option<PathBuf>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct HpoArgs {
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long)]
    quant: Option<String>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    train: TrainFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("bruno: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn run(cli: Cli) -> Result<u8, Failure> {
    let file = config::load(cli.config.as_deref())?;
    let name = match &cli.command {
        Command::Verify { .. } => "verify",
        Command::Bench(_) => "bench",
        Command::Train { .. } => "train",
        Command::Grid(_) => "grid",
        Command::Hpo(_) => "hpo",
        Command::GenData { .. } => "gen-data",
    };
    let mut dir = RunDir::create(&cli.out, cli.run_dir.as_deref(), name)?;
    let result = match cli.command {
        Command::Verify { json } => verify(&mut dir, json),
        Command::Bench(a) => bench(&mut dir, &file, a),
        Command::Train { net, data, train } => train_cmd(&mut dir, &file, &net, &data, &train),
        Command::Grid(a) => grid(&mut dir, &file, a),
        Command::Hpo(a) => hpo(&mut dir, &file, a),
        Command::GenData { data } => gen_data(&mut dir, &file, &data),
    };
    let (code, status) = match &result {
        Ok((c, s)) => (*c, s.clone()),
        Err(f) => (f.code(), f.to_string()),
    };
    let path = dir.path.clone();
    dir.finish(code as i32, &status)?;
    if result.is_ok() {
        eprintln!("outputs in {}", path.display());
    }
    result.map(|(c, _)| c)
}

type Outcome = Result<(u8, String), Failure>;

fn dataset_spec(file: &config::ConfigFile, flags: &DataFlags) -> DatasetSpec {
    let mut spec = file.dataset.clone().unwrap_or_default();
    flags.apply(&mut spec);
    spec
}

fn dataset(file: &config::ConfigFile, flags: &DataFlags) -> Result<Dataset, Failure> {
    match &flags.data {
        Some(p) => load_dataset(p).map_err(|e| Failure::Usage(e.to_string())),
        None => generate_dataset(&dataset_spec(file, flags)).map_err(|e| Failure::Usage(e.to_string())),
    }
}

fn verify(dir: &mut RunDir, json: bool) -> Outcome {
    let report = run_verify();
    dir.write_json("verify.json", &report)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::Io(e.to_string()))?);
    } else {
        print!("{}", report.text());
    }
    if report.passed {
        Ok((0, "ok".into()))
    } else {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

fn bench(dir: &mut RunDir, file: &config::ConfigFile, a: BenchArgs) -> Outcome {
    let mut cfg = file.bench.clone().unwrap_or_default();
    if let Some(v) = a.sizes {
        cfg.sizes = v;
    }
    if let Some(v) = a.lengths {
        cfg.steps = v;
    }
    if let Some(v) = a.modes {
        cfg.modes = v;
    }
    if let Some(v) = a.substeps {
        cfg.substeps = v;
    }
    if let Some(v) = a.dt_fine {
        cfg.dt_fine = v;
    }
    if let Some(v) = a.inputs {
        cfg.inputs = v;
    }
    if let Some(v) = a.repeats {
        cfg.repeats = v;
    }
    if let Some(v) = a.tape_budget_mb {
        cfg.tape_budget = Some(v << 20);
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.warmup &= !a.no_warmup;
    dir.set_config(&cfg);
    let rows = run_bench(&cfg)?;
    let csv = bench_csv(&rows);
    dir.write("bench.csv", &csv)?;
    print!("{csv}");
    Ok((0, "ok".into()))
}

fn train_cmd(dir: &mut RunDir, file: &config::ConfigFile, net: &NetFlags, data: &DataFlags, flags: &TrainFlags) -> Outcome {
    let ds = dataset(file, data)?;
    let (spec, cfg) = config::network_and_train(file, net, &ds.spec, flags)?;
    dir.set_config(&serde_json::json!({ "network": spec, "train": cfg, "dataset": ds.spec }));
    let mut network = build_network(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut last: Option<Checkpoint> = None;
    let run = train_with(&mut network, &ds, &cfg, |c| last = Some(c.clone()))?;
    dir.write("train.jsonl", &run.to_jsonl())?;
    dir.write_json("train.json", &run)?;
    if let Some(c) = &last {
        dir.write_json("checkpoint.json", c)?;
    }
    let s = &run.summary;
    println!(
        "epochs {} train {:.4} val {:.4} test {:.4} peak nodes {}",
        s.epochs_completed, s.train_acc, s.val_acc, s.test_acc, s.peak_nodes
    );
    match &s.status {
        RunStatus::Ok => Ok((0, "ok".into())),
        other => {
            let st = serde_json::to_string(other).unwrap_or_default();
            eprintln!("run ended early: {st}");
            Ok((3, st))
        }
    }
}

fn grid(dir: &mut RunDir, file: &config::ConfigFile, a: GridArgs) -> Outcome {
    let mut spec = file.grid.clone().unwrap_or_default();
    if let Some(d) = &file.dataset {
        spec.dataset = d.clone();
    }
    if let Some(t) = &file.train {
        spec.train = t.clone();
    }
    a.data.apply(&mut spec.dataset);
    a.train.apply(&mut spec.train);
    if a.train.steps.is_none() && !file.steps_given {
        spec.train.steps = config::steps_for(spec.dataset.duration_ms, spec.train.dt_coarse);
    }
    if a.data.data.is_some() {
        return Err(Failure::Usage("grid generates its dataset; use the dataset flags".into()));
    }
    if let Some(v) = a.archs {
        spec.architectures = v;
    }
    if let Some(v) = a.quants {
        spec.quant = v.iter().map(|q| parse_quant(q)).collect::<Result<_, _>>().map_err(Failure::Usage)?;
    }
    if let Some(n) = a.seeds {
        spec.seeds = (0..n).collect();
    }
    if let Some(h) = a.hidden {
        spec.hidden = h;
    }
    spec.presets |= a.presets;
    if let Some(p) = a.cells {
        spec.cells.extend(read_cells(&p)?);
    }
    dir.set_config(&spec);
    let res = run_grid(&spec)?;
    dir.write("grid_rows.csv", &rows_csv(&res.rows))?;
    dir.write("grid_summary.csv", &summary_csv(&res.summary))?;
    let table = wide_csv(&res.summary);
    dir.write("grid_table.csv", &table)?;
    let runs: String = res.runs.iter().map(|r| r.to_jsonl()).collect();
    dir.write("grid_runs.jsonl", &runs)?;
    print!("{table}");
    let failed: usize = res.summary.iter().map(|s| s.failed).sum();
    if failed > 0 {
        eprintln!("{failed} run(s) did not finish; see grid_rows.csv");
    }
    Ok((0, format!("ok ({failed} failed runs)")))
}

/// Accepts a list of HPO results or of cell overrides.
fn read_cells(p: &std::path::Path) -> Result<Vec<CellOverride>, Failure> {
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
    if let Ok(v) = serde_json::from_str::<Vec<CellOverride>>(&text) {
        return Ok(v);
    }
    let hpo: Vec<HpoResult> = match serde_json::from_str::<Vec<HpoResult>>(&text) {
        Ok(v) => v,
        Err(_) => vec![serde_json::from_str::<HpoResult>(&text)
            .map_err(|e| Failure::Usage(format!("{}: not cell overrides or HPO results: {e}", p.display())))?],
    };
    hpo.into_iter()
        .map(|h| {
            Ok(CellOverride {
                architecture: h.architecture,
                bits: parse_quant(&h.quant).map_err(Failure::Usage)?,
                params: h.best,
            })
        })
        .collect()
}

fn hpo(dir: &mut RunDir, file: &config::ConfigFile, a: HpoArgs) -> Outcome {
    let mut spec = file.hpo.clone().unwrap_or_default();
    if let Some(d) = &file.dataset {
        spec.dataset = d.clone();
    }
    if let Some(t) = &file.train {
        spec.train = t.clone();
    }
    a.data.apply(&mut spec.dataset);
    a.train.apply(&mut spec.train);
    if a.train.steps.is_none() && !file.steps_given {
        spec.train.steps = config::steps_for(spec.dataset.duration_ms, spec.train.dt_coarse);
    }
    if let Some(e) = a.train.epochs {
        spec.epochs = e;
    }
    if let Some(s) = a.train.seed {
        spec.seed = s;
    }
    if let Some(x) = a.arch {
        spec.architecture = x;
    }
    if let Some(q) = &a.quant {
        spec.bits = parse_quant(q).map_err(Failure::Usage)?;
    }
    if let Some(t) = a.trials {
        spec.trials = t;
    }
    if let Some(h) = a.hidden {
        spec.hidden = h;
    }
    dir.set_config(&spec);
    let res = run_hpo(&spec)?;
    let log: String = res
        .trials
        .iter()
        .map(|t| serde_json::to_string(t).expect("serializable") + "\n")
        .collect();
    dir.write("hpo_trials.jsonl", &log)?;
    dir.write_json("hpo_best.json", &res)?;
    println!(
        "best trial {} val {:.4}: {}",
        res.best_trial,
        res.best_val_acc,
        serde_json::to_string(&res.best).expect("serializable")
    );
    Ok((0, "ok".into()))
}

fn gen_data(dir: &mut RunDir, file: &config::ConfigFile, flags: &DataFlags) -> Outcome {
    if flags.data.is_some() {
        return Err(Failure::Usage("gen-data does not take --data".into()));
    }
    let spec = dataset_spec(file, flags);
    dir.set_config(&spec);
    let ds = generate_dataset(&spec).map_err(|e| Failure::Usage(e.to_string()))?;
    let m = save_dataset(&ds, &dir.path).map_err(|e| Failure::Io(e.to_string()))?;
    dir.note(bruno_core::netdata::MANIFEST_FILE);
    for f in &m.files {
        dir.note(&f.file);
    }
    println!("{} samples in {}", m.files.len(), dir.path.display());
    Ok((0, "ok".into()))
}
