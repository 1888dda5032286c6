use std::fs;
use std::io::{self, BufReader, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use radioleader::experiment::{parse_device_sets, run_experiment, ExperimentSpec, SubsetGen};
use radioleader::lowerbound::check_protocol;
use radioleader::partitions::{
    balls_in_bins_singleton_prob, generate_family, verify_family, FamilyOptions, PartitionFamily,
    Verification, VerifyMode,
};
use radioleader::protocols::{build, InnerElection, ProtocolKind};
use radioleader::{CdModel, Error, ProtocolConfig, Result};

const SEED_ENV: &str = "RADIOLEADER_SEED";

#[derive(Parser)]
#[command(name = "radioleader", version, about = "Leader election experiments on a single-hop radio channel")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a protocol over a grid of ID spaces and device sets.
    Run(RunArgs),
    /// Generate a good partition family and write it to a file.
    Family(FamilyArgs),
    /// Verify a partition family file.
    Verify(VerifyArgs),
    /// Run the lower-bound checkers against a protocol.
    Check(CheckArgs),
    /// Monte Carlo estimate of the singleton probability for balls into bins.
    Bins(BinsArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq)]
enum Subsets {
    All,
    Random,
    File,
    Density,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    protocol: ProtocolKind,
    #[arg(long, default_value = "no-cd")]
    model: CdModel,
    /// ID space sizes, comma separated; `2^k` is accepted.
    #[arg(long = "N", value_delimiter = ',', required = true, value_parser = parse_size)]
    big_n: Vec<u64>,
    /// Known number of devices (or its upper bound); also the size of random sets.
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    b: Option<u64>,
    /// Family size constant for the partition trade-off.
    #[arg(long = "C")]
    c: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "auto")]
    inner: InnerElection,
    #[arg(long, value_enum, default_value = "random")]
    subsets: Subsets,
    /// Device sets for `--subsets file`, one per line.
    #[arg(long)]
    subsets_file: Option<PathBuf>,
    /// Fraction of occupied IDs for `--subsets density`.
    #[arg(long)]
    density: Option<f64>,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long)]
    assert_success: bool,
    #[arg(long)]
    emit_transcripts: Option<PathBuf>,
    #[arg(long)]
    family: Option<PathBuf>,
    /// Per-run CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aggregate CSV per (protocol, N).
    #[arg(long)]
    aggregate: Option<PathBuf>,
    /// Per-attempt CSV for exponential search.
    #[arg(long)]
    attempts: Option<PathBuf>,
    /// Rows, aggregates and attempts as one JSON document.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct FamilyArgs {
    #[arg(long = "N", value_parser = parse_size)]
    big_n: u64,
    #[arg(long)]
    b: u64,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    n_max: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "C", default_value_t = radioleader::partitions::DEFAULT_C)]
    c: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    family: PathBuf,
    /// Use this many random sets instead of the automatic choice.
    #[arg(long)]
    trials: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    protocol: ProtocolKind,
    #[arg(long, default_value = "strong-cd")]
    model: CdModel,
    #[arg(long = "N", value_parser = parse_size)]
    big_n: u64,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    k: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    b: Option<u64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BinsArgs {
    #[arg(long)]
    n: u64,
    #[arg(long)]
    b: u64,
    #[arg(long, default_value_t = 100_000)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_size(s: &str) -> std::result::Result<u64, String> {
    let s = s.trim();
    if let Some(e) = s.strip_prefix("2^") {
        let e: u32 = e.parse().map_err(|_| format!("bad exponent in `{s}`"))?;
        return 1u64.checked_shl(e).filter(|_| e < 64).ok_or_else(|| format!("`{s}` is too large"));
    }
    s.parse().map_err(|_| format!("bad size `{s}`"))
}

fn env_seed(seed: u64) -> Result<u64> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParams(format!("{SEED_ENV}={v} is not an integer"))),
        Err(_) => Ok(seed),
    }
}

fn io_err(path: &std::path::Path, e: io::Error) -> Error {
    Error::Parse(format!("{}: {e}", path.display()))
}

fn open_out(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p).map_err(|e| io_err(p, e))?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn run(args: RunArgs) -> Result<bool> {
    let subsets = match args.subsets {
        Subsets::All => SubsetGen::All,
        Subsets::Random => SubsetGen::Random {
            size: args.n,
            trials: args.trials,
        },
        Subsets::Density => SubsetGen::Density {
            c: args
                .density
                .ok_or_else(|| Error::InvalidParams("--subsets density needs --density".into()))?,
            trials: args.trials,
        },
        Subsets::File => {
            let p = args
                .subsets_file
                .as_ref()
                .ok_or_else(|| Error::InvalidParams("--subsets file needs --subsets-file".into()))?;
            SubsetGen::Explicit(parse_device_sets(&fs::read_to_string(p).map_err(|e| io_err(p, e))?)?)
        }
    };
    let mut spec = ExperimentSpec::new(args.protocol, args.model, args.big_n, subsets);
    spec.known_n = args.n;
    spec.k = args.k;
    spec.epsilon = args.epsilon;
    spec.b = args.b;
    spec.c = args.c;
    spec.seed = env_seed(args.seed)?;
    spec.inner = args.inner;
    spec.family = args.family;
    spec.emit_transcripts = args.emit_transcripts;

    let out = run_experiment(&spec)?;
    out.write_rows(open_out(&args.out)?)?;
    if let Some(p) = &args.aggregate {
        out.write_aggregates(fs::File::create(p).map_err(|e| io_err(p, e))?)?;
    }
    if let Some(p) = &args.attempts {
        out.write_attempts(fs::File::create(p).map_err(|e| io_err(p, e))?)?;
    }
    if let Some(p) = &args.json {
        let f = fs::File::create(p).map_err(|e| io_err(p, e))?;
        serde_json::to_writer_pretty(f, &out).map_err(|e| Error::Parse(e.to_string()))?;
    }
    if args.assert_success && !out.all_strict() {
        let failed = out.rows.iter().filter(|r| !r.strict).count();
        eprintln!("error: {failed} of {} runs did not elect exactly one leader", out.rows.len());
        return Ok(false);
    }
    Ok(true)
}

fn family(args: FamilyArgs) -> Result<bool> {
    let opts = FamilyOptions {
        c: args.c,
        ..Default::default()
    };
    let fam = generate_family(args.big_n, args.b, args.epsilon, args.n_max, env_seed(args.seed)?, &opts)?;
    eprintln!("K = {}, retries = {}, {}", fam.k(), fam.retries, fam.verified);
    let mut w = open_out(&args.out)?;
    fam.write_to(&mut w).map_err(|e| Error::Parse(e.to_string()))?;
    w.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(true)
}

fn verify(args: VerifyArgs) -> Result<bool> {
    let f = fs::File::open(&args.family).map_err(|e| io_err(&args.family, e))?;
    let fam = PartitionFamily::read_from(BufReader::new(f))?;
    let mode = match args.trials {
        Some(trials) => VerifyMode::Sampled {
            trials,
            seed: env_seed(args.seed)?,
        },
        None => VerifyMode::Auto,
    };
    match verify_family(&fam, mode, &FamilyOptions::default()) {
        Verification::Pass(cert) => {
            println!("pass {cert}");
            Ok(true)
        }
        Verification::Counterexample(v) => {
            println!("counterexample {v:?}");
            Ok(false)
        }
    }
}

fn check(args: CheckArgs) -> Result<bool> {
    let cfg = ProtocolConfig {
        model: args.model,
        id_space: args.big_n,
        known_n: args.n,
        known_upper_n: args.n,
        k: args.k,
        epsilon: args.epsilon,
        b: args.b,
        seed: env_seed(args.seed)?,
        inner_election: InnerElection::Auto,
    };
    let p = build(args.protocol, &cfg)?;
    let rows = check_protocol(p.as_ref())?;
    let ok = rows.iter().all(|r| r.result == "ok");
    let mut wr = csv::Writer::from_writer(open_out(&args.out)?);
    for r in &rows {
        wr.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    wr.flush().map_err(|e| Error::Parse(e.to_string()))?;
    Ok(ok)
}

fn bins(args: BinsArgs) -> Result<bool> {
    let r = balls_in_bins_singleton_prob(args.n, args.b, args.trials, env_seed(args.seed)?)?;
    println!(
        "n={} b={} trials={} estimate={:.6} std_err={:.6} bound={:.6}",
        r.n, r.b, r.trials, r.estimate, r.std_err, r.analytic_bound
    );
    Ok(r.estimate + 3.0 * r.std_err >= r.analytic_bound)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run(a) => run(a),
        Cmd::Family(a) => family(a),
        Cmd::Verify(a) => verify(a),
        Cmd::Check(a) => check(a),
        Cmd::Bins(a) => bins(a),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
