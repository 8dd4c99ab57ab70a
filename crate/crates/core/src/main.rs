use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use primitive_types::U256;

use gasbound::analysis::{self, analyze_code, report_json, report_table, ContractReport, Options};
use gasbound::crs::parse_crs;
use gasbound::evm::{decode, parse_hex, parse_u256};
use gasbound::gas::GasSchedule;
use gasbound::input::{self, LoadedContract};
use gasbound::meter::{Context, Meter};
use gasbound::size;
use gasbound::solver::{solve, AnalysisOutcome};

#[derive(Parser)]
#[command(name = "gasbound", version, about = "Static gas upper bounds for EVM bytecode")]
#[command(args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Cmd>,
    #[command(flatten)]
    analyze: AnalyzeArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Bytecode files (hex, binary or assembly), Solidity sources with
    /// --solc, or directories of such files.
    inputs: Vec<PathBuf>,
    /// JSON ABI used to name functions.
    #[arg(long)]
    abi: Option<PathBuf>,
    /// Solidity compiler used for .sol inputs.
    #[arg(long)]
    solc: Option<PathBuf>,
    /// Seconds per function and per bound.
    #[arg(long, default_value_t = analysis::DEFAULT_TIMEOUT_SECS)]
    timeout: u64,
    /// File of MNEMONIC=cost lines overriding constant opcode costs.
    #[arg(long)]
    schedule: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
    /// Print an intermediate form instead of the report.
    #[arg(long, value_enum)]
    dump: Option<Dump>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write every duration as 0.
    #[arg(long)]
    no_timings: bool,
    /// Treat inputs as runtime code even if they look like creation code.
    #[arg(long)]
    runtime: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dump {
    Cfg,
    Rbr,
    Sizes,
    Crs,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve a cost relation system written in text form.
    Solve {
        file: PathBuf,
        #[arg(long, default_value_t = analysis::DEFAULT_TIMEOUT_SECS)]
        timeout: u64,
    },
    /// Run bytecode concretely and print the gas it uses.
    #[command(hide = true)]
    Meter {
        file: PathBuf,
        /// Hex calldata.
        #[arg(long, default_value = "")]
        calldata: String,
        /// Storage entries as SLOT=VALUE.
        #[arg(long = "storage")]
        storage: Vec<String>,
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Some(Cmd::Solve { file, timeout }) => run_solve(&file, timeout),
        Some(Cmd::Meter { file, calldata, storage, steps }) => run_meter(&file, &calldata, &storage, steps),
        None => run_analyze(&cli.analyze),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn run_solve(file: &PathBuf, timeout: u64) -> Result<u8> {
    let text = std::fs::read_to_string(file).with_context(|| file.display().to_string())?;
    let crs = parse_crs(&text).map_err(|e| anyhow!("{}: {e}", file.display()))?;
    crs.check().map_err(|e| anyhow!("{}: {e}", file.display()))?;
    let s = solve(&crs, Duration::from_secs(timeout));
    emit(&format!("{}\n", s.outcome));
    if let Some(r) = s.outcome.reason() {
        eprintln!("{r}");
    }
    Ok(if matches!(s.outcome, AnalysisOutcome::Bound(_)) { 0 } else { 1 })
}

fn run_meter(file: &PathBuf, calldata: &str, storage: &[String], steps: u64) -> Result<u8> {
    let bytes = std::fs::read(file).with_context(|| file.display().to_string())?;
    let code = input::parse_bytecode(&file.display().to_string(), &bytes)?;
    let calldata = parse_hex(calldata).context("calldata")?;
    let mut st = BTreeMap::new();
    for kv in storage {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("storage entry {kv} is not SLOT=VALUE"))?;
        let k = parse_u256(k.trim()).ok_or_else(|| anyhow!("bad slot {k}"))?;
        let v = parse_u256(v.trim()).ok_or_else(|| anyhow!("bad value {v}"))?;
        st.insert(k, v);
    }
    let schedule = GasSchedule::byzantium();
    let r = Meter::new(&schedule, Context::default()).run(&decode(&code), &calldata, st, steps)?;
    let storage: BTreeMap<String, String> =
        r.storage.iter().map(|(k, v): (&U256, &U256)| (format!("{k:#x}"), format!("{v:#x}"))).collect();
    let out = serde_json::json!({
        "gas_used": r.gas_used,
        "mem_gas": r.mem_gas,
        "total": r.total_gas(),
        "active_words": r.active_words,
        "halt": format!("{:?}", r.halt),
        "steps": r.steps,
        "storage": storage,
    });
    emit(&format!("{}\n", serde_json::to_string_pretty(&out)?));
    Ok(0)
}

fn load_all(args: &AnalyzeArgs) -> Result<Vec<Result<LoadedContract, String>>> {
    let names = match &args.abi {
        Some(p) => input::abi_names(&std::fs::read_to_string(p).with_context(|| p.display().to_string())?)?,
        None => BTreeMap::new(),
    };
    let mut out = Vec::new();
    for path in input::expand_inputs(&args.inputs)? {
        let is_sol = path.extension().is_some_and(|e| e == "sol");
        let loaded = match (&args.solc, is_sol) {
            (Some(solc), true) => input::compile(solc, &path).map_err(|e| e.to_string()),
            (None, true) => Err(format!("{}: Solidity input needs --solc", path.display())),
            _ => input::load_file(&path, args.runtime).map(|c| vec![c]).map_err(|e| e.to_string()),
        };
        match loaded {
            Ok(cs) => out.extend(cs.into_iter().map(|mut c| {
                if c.names.is_empty() {
                    c.names = names.clone();
                }
                Ok(c)
            })),
            Err(e) => out.push(Err(format!("{}\t{e}", path.display()))),
        }
    }
    Ok(out)
}

fn run_analyze(args: &AnalyzeArgs) -> Result<u8> {
    if args.inputs.is_empty() {
        return Err(anyhow!("no inputs given"));
    }
    let mut schedule = GasSchedule::byzantium();
    let mut schedule_id = gasbound::evm::SCHEDULE_ID.to_string();
    if let Some(p) = &args.schedule {
        let text = std::fs::read_to_string(p).with_context(|| p.display().to_string())?;
        schedule = schedule.with_overrides(&text)?;
        schedule_id = format!("{schedule_id} + overrides from {}", p.display());
    }
    let opts = Options { timeout: Duration::from_secs(args.timeout), schedule, schedule_id, jobs: args.jobs, ..Options::default() };
    let loaded = load_all(args)?;

    if let Some(d) = args.dump {
        for c in loaded.iter().flatten() {
            let prep = analysis::prepare(&c.code, &opts);
            emit(&format!("# {}\n", c.label));
            match d {
                Dump::Cfg => emit(&prep.cfg.dump()),
                Dump::Rbr => emit(&prep.rbr.dump()),
                Dump::Sizes => emit(&size::dump(&prep.rbr, &prep.sizes)),
                Dump::Crs => emit(&format!("{}\n{}", prep.opcode_crs, prep.memory_crs)),
            }
        }
        return Ok(if loaded.iter().any(|c| c.is_err()) { 2 } else { 0 });
    }

    // one level of parallelism: across contracts, or across the
    // functions of a single contract
    let (outer, inner) = if loaded.len() > 1 { (args.jobs, 1) } else { (1, args.jobs) };
    let opts = Options { jobs: inner, ..opts };
    let reports: Vec<ContractReport> = analysis::run_pool(&loaded, outer, |c| match c {
            Ok(c) => {
                let mut r = analyze_code(&c.label, &c.code, &c.names, &opts);
                r.creation_stripped = c.creation_stripped;
                r
            }
            Err(e) => {
                let (path, msg) = e.split_once('\t').unwrap_or(("", e));
                ContractReport::failed(path, &opts.schedule_id, msg.to_string())
            }
        });
    match args.format {
        OutputFormat::Table => emit(&report_table(&reports, !args.no_timings)),
        OutputFormat::Json => emit(&format!("{}\n", serde_json::to_string_pretty(&report_json(&reports, !args.no_timings))?)),
    }
    Ok(if reports.iter().any(|r| r.error.is_some()) {
        2
    } else if reports.iter().all(|r| r.all_bounded()) {
        0
    } else {
        1
    })
}
