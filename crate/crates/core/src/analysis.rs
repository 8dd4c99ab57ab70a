//! Per-function pipeline and reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use crate::bound::BoundExpr;
use crate::cfg::{build_cfg_with_budget, Cfg, FunctionKind, DEFAULT_BUDGET};
use crate::crs::{generate_memory_crs, generate_opcode_crs, CVar, CostRelationSystem};
use crate::evm::{decode, SCHEDULE_ID};
use crate::gas::{mem_cost_bound, GasSchedule};
use crate::meter::keccak256;
use crate::rbr::{build_rbr, Entry, RbrProgram};
use crate::size::{self, SizeRelation};
use crate::solver::{solve, AnalysisOutcome};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

/// Outcome classes in report order.
pub const CLASSES: [&str; 7] = [
    "constant",
    "parametric",
    "finite_no_bound",
    "termination_unknown",
    "cover_point_error",
    "timeout",
    "unanalyzable",
];

#[derive(Debug, Clone)]
pub struct Options {
    /// Per function and per flavor.
    pub timeout: Duration,
    pub schedule: GasSchedule,
    pub schedule_id: String,
    pub cfg_budget: usize,
    pub jobs: usize,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            schedule: GasSchedule::byzantium(),
            schedule_id: SCHEDULE_ID.to_string(),
            cfg_budget: DEFAULT_BUDGET,
            jobs: 1,
        }
    }
}

pub fn outcome_class(o: &AnalysisOutcome) -> &'static str {
    match o {
        AnalysisOutcome::Bound(b) if b.vars().is_empty() => "constant",
        AnalysisOutcome::Bound(_) => "parametric",
        other => other.class(),
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

/// Everything shared by the functions of one contract.
pub struct Prepared {
    pub cfg: Cfg,
    pub rbr: RbrProgram,
    pub sizes: BTreeMap<String, SizeRelation>,
    pub opcode_crs: CostRelationSystem,
    pub memory_crs: CostRelationSystem,
    pub cfg_ms: f64,
    pub rbr_ms: f64,
    pub sizes_ms: f64,
    pub crs_ms: f64,
}

pub fn prepare(code: &[u8], opts: &Options) -> Prepared {
    let t = Instant::now();
    let cfg = build_cfg_with_budget(&decode(code), opts.cfg_budget);
    let cfg_ms = ms(t.elapsed());
    let t = Instant::now();
    let rbr = build_rbr(&cfg);
    let rbr_ms = ms(t.elapsed());
    let t = Instant::now();
    let sizes = size::analyze(&rbr);
    let sizes_ms = ms(t.elapsed());
    let t = Instant::now();
    let opcode_crs = generate_opcode_crs(&rbr, &sizes, &opts.schedule);
    let memory_crs = generate_memory_crs(&rbr, &sizes);
    let crs_ms = ms(t.elapsed());
    Prepared { cfg, rbr, sizes, opcode_crs, memory_crs, cfg_ms, rbr_ms, sizes_ms, crs_ms }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FunctionTimings {
    pub crs_ms: f64,
    pub solve_opcode_ms: f64,
    pub solve_memory_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionReport {
    /// `0x…`, `fallback` or `contract`.
    pub label: String,
    pub selector: Option<String>,
    pub name: Option<String>,
    pub entry_rule: String,
    pub opcode: AnalysisOutcome,
    pub memory: AnalysisOutcome,
    /// Highest memory word touched, when bounded.
    pub memory_extent: Option<BoundExpr<CVar>>,
    pub zero_cost_loops: usize,
    pub ranked_loops: usize,
    pub timings: FunctionTimings,
}

pub fn analyze_function(prep: &Prepared, entry: &Entry, opts: &Options) -> FunctionReport {
    let selector = match entry.function {
        Some(FunctionKind::Selector(s)) => Some(format!("0x{}", hex::encode(s))),
        _ => None,
    };
    let mut report = FunctionReport {
        label: entry.label.clone(),
        selector,
        name: None,
        entry_rule: entry.rule.clone(),
        opcode: AnalysisOutcome::Timeout,
        memory: AnalysisOutcome::Timeout,
        memory_extent: None,
        zero_cost_loops: 0,
        ranked_loops: 0,
        timings: FunctionTimings::default(),
    };
    if let Some(err) = prep.rbr.error_from(&entry.rule) {
        report.opcode = AnalysisOutcome::Unanalyzable(err.to_string());
        report.memory = report.opcode.clone();
        return report;
    }
    let t = Instant::now();
    let op = prep.opcode_crs.restrict(&entry.rule);
    let mem = prep.memory_crs.restrict(&entry.rule);
    report.timings.crs_ms = ms(t.elapsed());

    let t = Instant::now();
    let s = solve(&op, opts.timeout);
    report.timings.solve_opcode_ms = ms(t.elapsed());
    report.opcode = s.outcome;
    report.zero_cost_loops += s.stats.zero_cost_loops;
    report.ranked_loops += s.stats.ranked_loops;

    let t = Instant::now();
    let s = solve(&mem, opts.timeout);
    report.timings.solve_memory_ms = ms(t.elapsed());
    report.zero_cost_loops += s.stats.zero_cost_loops;
    report.ranked_loops += s.stats.ranked_loops;
    report.memory = match s.outcome {
        AnalysisOutcome::Bound(extent) => {
            let gas = mem_cost_bound(&extent);
            report.memory_extent = Some(extent);
            AnalysisOutcome::Bound(gas)
        }
        other => other,
    };
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractReport {
    pub path: String,
    /// keccak-256 of the analyzed bytes.
    pub content_hash: String,
    pub code_size: usize,
    pub creation_stripped: bool,
    pub schedule: String,
    pub functions: Vec<FunctionReport>,
    pub diagnostics: Vec<String>,
    pub cfg_ms: f64,
    pub rbr_ms: f64,
    pub sizes_ms: f64,
    pub crs_ms: f64,
    pub wall_ms: f64,
    /// Set when the input could not be analyzed at all.
    pub error: Option<String>,
}

impl ContractReport {
    pub fn failed(path: &str, schedule: &str, error: String) -> Self {
        ContractReport {
            path: path.to_string(),
            content_hash: String::new(),
            code_size: 0,
            creation_stripped: false,
            schedule: schedule.to_string(),
            functions: Vec::new(),
            diagnostics: Vec::new(),
            cfg_ms: 0.0,
            rbr_ms: 0.0,
            sizes_ms: 0.0,
            crs_ms: 0.0,
            wall_ms: 0.0,
            error: Some(error),
        }
    }

    pub fn all_bounded(&self) -> bool {
        self.error.is_none()
            && self
                .functions
                .iter()
                .all(|f| matches!(f.opcode, AnalysisOutcome::Bound(_)) && matches!(f.memory, AnalysisOutcome::Bound(_)))
    }
}

/// Runs `f` over `items` on up to `jobs` threads, keeping input order.
pub fn run_pool<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                out.lock().unwrap()[i] = Some(r);
            });
        }
    });
    out.into_inner().unwrap().into_iter().map(|r| r.expect("worker finished")).collect()
}

/// Analyzes every public function of `code`. `names` maps selectors to
/// function names.
pub fn analyze_code(path: &str, code: &[u8], names: &BTreeMap<[u8; 4], String>, opts: &Options) -> ContractReport {
    let start = Instant::now();
    let mut report = ContractReport::failed(path, &opts.schedule_id, String::new());
    report.error = None;
    report.content_hash = format!("0x{}", hex::encode(keccak256(code)));
    report.code_size = code.len();
    if code.is_empty() {
        report.wall_ms = ms(start.elapsed());
        return report;
    }
    let prep = prepare(code, opts);
    report.diagnostics = prep.cfg.diagnostics.clone();
    report.cfg_ms = prep.cfg_ms;
    report.rbr_ms = prep.rbr_ms;
    report.sizes_ms = prep.sizes_ms;
    report.crs_ms = prep.crs_ms;
    let mut functions = run_pool(&prep.rbr.entries, opts.jobs, |e| analyze_function(&prep, e, opts));
    for (f, e) in functions.iter_mut().zip(&prep.rbr.entries) {
        if let Some(FunctionKind::Selector(s)) = e.function {
            f.name = names.get(&s).cloned();
        }
    }
    report.functions = functions;
    report.wall_ms = ms(start.elapsed());
    report
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub contracts: usize,
    pub failed_inputs: usize,
    pub functions: usize,
    pub opcode: BTreeMap<&'static str, usize>,
    pub memory: BTreeMap<&'static str, usize>,
    pub timings: BTreeMap<&'static str, f64>,
}

pub fn aggregate(reports: &[ContractReport]) -> Aggregate {
    let mut a = Aggregate { contracts: reports.len(), ..Default::default() };
    for c in CLASSES {
        a.opcode.insert(c, 0);
        a.memory.insert(c, 0);
    }
    for k in ["cfg", "rbr", "sizes", "crs", "solve"] {
        a.timings.insert(k, 0.0);
    }
    for r in reports {
        if r.error.is_some() {
            a.failed_inputs += 1;
        }
        *a.timings.get_mut("cfg").unwrap() += r.cfg_ms;
        *a.timings.get_mut("rbr").unwrap() += r.rbr_ms;
        *a.timings.get_mut("sizes").unwrap() += r.sizes_ms;
        *a.timings.get_mut("crs").unwrap() += r.crs_ms;
        for f in &r.functions {
            a.functions += 1;
            *a.opcode.get_mut(outcome_class(&f.opcode)).unwrap() += 1;
            *a.memory.get_mut(outcome_class(&f.memory)).unwrap() += 1;
            *a.timings.get_mut("crs").unwrap() += f.timings.crs_ms;
            *a.timings.get_mut("solve").unwrap() += f.timings.solve_opcode_ms + f.timings.solve_memory_ms;
        }
    }
    a
}

fn outcome_json(o: &AnalysisOutcome) -> Value {
    let mut v = json!({ "class": outcome_class(o), "text": o.to_string() });
    match o {
        AnalysisOutcome::Bound(b) => {
            v["bound"] = json!(b.to_string());
            v["tree"] = b.to_json();
        }
        other => {
            if let Some(r) = other.reason() {
                v["reason"] = json!(r);
            }
        }
    }
    v
}

fn time(t: f64, timings: bool) -> Value {
    if timings {
        json!((t * 1000.0).round() / 1000.0)
    } else {
        json!(0)
    }
}

fn function_json(f: &FunctionReport, timings: bool) -> Value {
    json!({
        "label": f.label,
        "selector": f.selector,
        "name": f.name,
        "entry_rule": f.entry_rule,
        "opcode": outcome_json(&f.opcode),
        "memory": outcome_json(&f.memory),
        "memory_extent_words": f.memory_extent.as_ref().map(|e| e.to_string()),
        "solver": { "zero_cost_loops": f.zero_cost_loops, "ranked_loops": f.ranked_loops },
        "timings_ms": {
            "crs": time(f.timings.crs_ms, timings),
            "solve_opcode": time(f.timings.solve_opcode_ms, timings),
            "solve_memory": time(f.timings.solve_memory_ms, timings),
        },
    })
}

pub fn contract_json(r: &ContractReport, timings: bool) -> Value {
    json!({
        "input": { "path": r.path, "content_hash": r.content_hash, "code_size": r.code_size, "creation_stripped": r.creation_stripped },
        "schedule": r.schedule,
        "error": r.error,
        "diagnostics": r.diagnostics,
        "functions": r.functions.iter().map(|f| function_json(f, timings)).collect::<Vec<_>>(),
        "timings_ms": {
            "cfg": time(r.cfg_ms, timings),
            "rbr": time(r.rbr_ms, timings),
            "sizes": time(r.sizes_ms, timings),
            "crs": time(r.crs_ms, timings),
            "wall": time(r.wall_ms, timings),
        },
    })
}

fn counts_json(m: &BTreeMap<&'static str, usize>, total: usize) -> Value {
    let mut out = serde_json::Map::new();
    for c in CLASSES {
        let n = m.get(c).copied().unwrap_or(0);
        out.insert(c.to_string(), json!({ "count": n, "percent": percent(n, total) }));
    }
    Value::Object(out)
}

fn percent(n: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        (n as f64 * 10000.0 / total as f64).round() / 100.0
    }
}

pub fn aggregate_json(a: &Aggregate, timings: bool) -> Value {
    let mut t = serde_json::Map::new();
    for (k, v) in &a.timings {
        t.insert(k.to_string(), time(*v, timings));
    }
    json!({
        "contracts": a.contracts,
        "failed_inputs": a.failed_inputs,
        "functions": a.functions,
        "opcode": counts_json(&a.opcode, a.functions),
        "memory": counts_json(&a.memory, a.functions),
        "timings_ms": Value::Object(t),
    })
}

/// The full structured document. With `timings` false every duration is
/// written as 0 so runs can be compared byte for byte.
pub fn report_json(reports: &[ContractReport], timings: bool) -> Value {
    json!({
        "schema_version": SCHEMA_VERSION,
        "tool": "gasbound",
        "contracts": reports.iter().map(|r| contract_json(r, timings)).collect::<Vec<_>>(),
        "aggregate": aggregate_json(&aggregate(reports), timings),
    })
}

pub fn report_table(reports: &[ContractReport], timings: bool) -> String {
    let mut s = String::new();
    for r in reports {
        let _ = writeln!(s, "== {} ({} bytes, {})", r.path, r.code_size, r.content_hash);
        if let Some(e) = &r.error {
            let _ = writeln!(s, "   error: {e}");
            continue;
        }
        if r.functions.is_empty() {
            let _ = writeln!(s, "   no functions");
        }
        let rows: Vec<[String; 3]> = r
            .functions
            .iter()
            .map(|f| {
                let id = match &f.name {
                    Some(n) => format!("{} {n}", f.label),
                    None => f.label.clone(),
                };
                [id, f.opcode.to_string(), f.memory.to_string()]
            })
            .collect();
        let w0 = rows.iter().map(|r| r[0].len()).chain([8]).max().unwrap();
        let w1 = rows.iter().map(|r| r[1].len()).chain([12]).max().unwrap();
        if !rows.is_empty() {
            let _ = writeln!(s, "   {:w0$}  {:w1$}  {}", "function", "opcode bound", "memory bound");
        }
        for row in rows {
            let _ = writeln!(s, "   {:w0$}  {:w1$}  {}", row[0], row[1], row[2]);
        }
        for d in &r.diagnostics {
            let _ = writeln!(s, "   note: {d}");
        }
    }
    let a = aggregate(reports);
    let _ = writeln!(s, "\n{} contracts, {} functions, {} failed inputs", a.contracts, a.functions, a.failed_inputs);
    let _ = writeln!(s, "{:22} {:>8} {:>8} {:>8} {:>8}", "class", "opcode", "%", "memory", "%");
    for c in CLASSES {
        let (o, m) = (a.opcode[c], a.memory[c]);
        let _ = writeln!(
            s,
            "{:22} {:>8} {:>8.2} {:>8} {:>8.2}",
            c,
            o,
            percent(o, a.functions),
            m,
            percent(m, a.functions)
        );
    }
    if timings {
        let total: f64 = a.timings.values().sum();
        let _ = writeln!(s, "\nphase      ms        %");
        for k in ["cfg", "rbr", "sizes", "crs", "solve"] {
            let v = a.timings[k];
            let p = if total > 0.0 { v * 100.0 / total } else { 0.0 };
            let _ = writeln!(s, "{k:8} {v:>9.2} {p:>7.2}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::assemble;

    #[test]
    fn empty_code_has_no_functions() {
        let r = analyze_code("empty", &[], &BTreeMap::new(), &Options::default());
        assert!(r.functions.is_empty());
        assert!(r.error.is_none());
        assert!(r.all_bounded());
    }

    #[test]
    fn straight_line_constant() {
        let code = assemble("PUSH1 1\nPUSH1 2\nADD\nSTOP").unwrap();
        let r = analyze_code("t", &code, &BTreeMap::new(), &Options::default());
        assert_eq!(r.functions.len(), 1);
        assert_eq!(r.functions[0].opcode, AnalysisOutcome::Bound(BoundExpr::int(9)));
        assert_eq!(r.functions[0].memory, AnalysisOutcome::Bound(BoundExpr::zero()));
    }

    #[test]
    fn counter_loop_is_parametric() {
        let code = assemble(
            "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP",
        )
        .unwrap();
        let r = analyze_code("t", &code, &BTreeMap::new(), &Options::default());
        let f = &r.functions[0];
        assert_eq!(outcome_class(&f.opcode), "parametric", "{}", f.opcode);
        assert_eq!(f.opcode.bound().unwrap().vars().into_iter().map(|v| v.name).collect::<Vec<_>>(), ["g_0"]);
    }

    #[test]
    fn aggregate_counts_sum() {
        let code = assemble("PUSH1 1\nPOP\nSTOP").unwrap();
        let reps = vec![
            analyze_code("a", &code, &BTreeMap::new(), &Options::default()),
            analyze_code("b", &code, &BTreeMap::new(), &Options::default()),
        ];
        let a = aggregate(&reps);
        assert_eq!(a.functions, 2);
        assert_eq!(a.opcode.values().sum::<usize>(), 2);
        assert_eq!(a.memory.values().sum::<usize>(), 2);
        let j1 = report_json(&reps, false).to_string();
        let j2 = report_json(&reps, false).to_string();
        assert_eq!(j1, j2);
    }

    #[test]
    fn pool_keeps_order() {
        let xs: Vec<u32> = (0..50).collect();
        assert_eq!(run_pool(&xs, 4, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
