//! Closed-form upper bounds for cost relation systems.
//!
//! Strongly connected components of the call graph are solved bottom-up.
//! A cyclic component must have a single entry (its loop header); inner
//! loops found after cutting the edges into the header become macro
//! steps. Paths from the header are enumerated symbolically, split into
//! iteration and exit paths, and the iteration count is bounded by a
//! linear ranking function.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_traits::{One, Signed, ToPrimitive, Zero};
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;

use crate::bound::BoundExpr;
use crate::crs::{CVar, CostEquation, CostRelationSystem};
use crate::linear::{Atom, AtomKind, LinExpr, LinearConstraint, Rat, Rel, System};

/// Paths enumerated per loop before giving up.
pub const PATH_LIMIT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PVar {
    /// A parameter of the header the path starts from.
    Pre(String),
    Local(u32),
}

impl fmt::Display for PVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PVar::Pre(n) => f.write_str(n),
            PVar::Local(k) => write!(f, "_t{k}"),
        }
    }
}

type PExpr = LinExpr<PVar>;
type PCon = LinearConstraint<PVar>;
type PBound = BoundExpr<PVar>;
type Env = BTreeMap<String, PExpr>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnalysisOutcome {
    Bound(BoundExpr<CVar>),
    /// Terminates, but some cost could not be bounded.
    FiniteNoBound(String),
    /// No ranking function was found for some loop.
    TerminationUnknown(String),
    /// A loop has more than one entry.
    CoverPointError(String),
    Timeout,
    /// The bytecode could not be turned into equations.
    Unanalyzable(String),
}

impl AnalysisOutcome {
    pub fn class(&self) -> &'static str {
        match self {
            AnalysisOutcome::Bound(_) => "bound",
            AnalysisOutcome::FiniteNoBound(_) => "finite_no_bound",
            AnalysisOutcome::TerminationUnknown(_) => "termination_unknown",
            AnalysisOutcome::CoverPointError(_) => "cover_point_error",
            AnalysisOutcome::Timeout => "timeout",
            AnalysisOutcome::Unanalyzable(_) => "unanalyzable",
        }
    }

    pub fn bound(&self) -> Option<&BoundExpr<CVar>> {
        match self {
            AnalysisOutcome::Bound(b) => Some(b),
            _ => None,
        }
    }

    pub fn reason(&self) -> Option<&str> {
        match self {
            AnalysisOutcome::FiniteNoBound(r)
            | AnalysisOutcome::TerminationUnknown(r)
            | AnalysisOutcome::CoverPointError(r)
            | AnalysisOutcome::Unanalyzable(r) => Some(r),
            _ => None,
        }
    }
}

impl fmt::Display for AnalysisOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalysisOutcome::Bound(b) => write!(f, "{b}"),
            AnalysisOutcome::FiniteNoBound(_) => f.write_str("finite (maximization error)"),
            AnalysisOutcome::TerminationUnknown(_) => f.write_str("termination unknown (ranking function error)"),
            AnalysisOutcome::CoverPointError(_) => f.write_str("complex control flow (cover point error)"),
            AnalysisOutcome::Timeout => f.write_str("timeout"),
            AnalysisOutcome::Unanalyzable(r) => write!(f, "unanalyzable ({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankingFunction {
    pub header: String,
    pub function: LinExpr<CVar>,
    /// Minimum decrease per iteration.
    pub decrease: Rat,
    /// Lower bound of the function whenever an iteration starts.
    pub lower: Rat,
    pub iterations: BoundExpr<CVar>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SolverStats {
    /// Loops whose iterations cost nothing, so no ranking was searched.
    pub zero_cost_loops: usize,
    pub ranked_loops: usize,
    pub paths: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Solution {
    pub outcome: AnalysisOutcome,
    pub stats: SolverStats,
    pub rankings: Vec<RankingFunction>,
}

enum Abort {
    Timeout,
    CoverPoint(String),
    Ranking(String),
}

#[derive(Clone, PartialEq)]
enum End {
    Iterate,
    Exit(String),
    Halt,
}

#[derive(Clone)]
struct Path {
    cost: Vec<PBound>,
    cons: Vec<PCon>,
    env: Env,
    end: End,
}

struct LoopSummary {
    preserved: BTreeSet<String>,
    /// Cost of all iterations, over the header's parameters.
    iterations: PBound,
    exits: Vec<Path>,
}

struct StepOut {
    cost: PBound,
    cons: Vec<PCon>,
    next: Option<(String, Env)>,
}

struct Ctx<'a> {
    by_head: BTreeMap<&'a str, Vec<&'a CostEquation>>,
    params: BTreeMap<&'a str, &'a [String]>,
    bounds: BTreeMap<String, BoundExpr<CVar>>,
    deadline: Instant,
    next_local: u32,
    stats: SolverStats,
    rankings: Vec<RankingFunction>,
}

fn pre(n: &str) -> PExpr {
    LinExpr::var(PVar::Pre(n.to_string()))
}

fn to_cvar(b: &PBound) -> BoundExpr<CVar> {
    if b.vars().iter().any(|v| matches!(v, PVar::Local(_))) {
        return BoundExpr::Unknown;
    }
    b.map_vars(|v| match v {
        PVar::Pre(n) => CVar::new(n.clone()),
        PVar::Local(_) => unreachable!(),
    })
}

fn nonneg_atoms(vars: &BTreeSet<PVar>, except: Option<&PVar>) -> Vec<Atom<PVar>> {
    vars.iter().filter(|v| Some(*v) != except).map(|v| Atom::ge(LinExpr::var(v.clone()))).collect()
}

/// Atoms connected to `seed` through variables outside `keep`.
fn slice(atoms: &[Atom<PVar>], seed: &BTreeSet<PVar>, keep: &BTreeSet<PVar>) -> Vec<Atom<PVar>> {
    let mut reached: BTreeSet<PVar> = seed.iter().filter(|v| !keep.contains(v)).cloned().collect();
    let mut taken = vec![false; atoms.len()];
    loop {
        let mut changed = false;
        for (i, a) in atoms.iter().enumerate() {
            if !taken[i] && a.vars().any(|v| reached.contains(v)) {
                taken[i] = true;
                changed = true;
                reached.extend(a.vars().filter(|v| !keep.contains(*v)).cloned());
            }
        }
        if !changed {
            break;
        }
    }
    atoms.iter().zip(taken).filter(|(_, t)| *t).map(|(a, _)| a.clone()).collect()
}

fn atoms_of(cons: &[PCon]) -> Vec<Atom<PVar>> {
    cons.iter().flat_map(|c| c.atoms()).collect()
}

fn substitute_lin(e: &PExpr, sub: &BTreeMap<PVar, PExpr>) -> PExpr {
    e.map_exprs(|v| sub.get(v).cloned().unwrap_or_else(|| LinExpr::var(v.clone())))
}

fn substitute_con(c: &PCon, sub: &BTreeMap<PVar, PExpr>) -> PCon {
    LinearConstraint::new(substitute_lin(&c.lhs, sub), c.rel, substitute_lin(&c.rhs, sub))
}

fn substitute_bound(b: &PBound, sub: &BTreeMap<PVar, PExpr>) -> PBound {
    b.substitute(|v| sub.get(v).cloned().unwrap_or_else(|| LinExpr::var(v.clone())))
}

impl<'a> Ctx<'a> {
    fn check_time(&self) -> Result<(), Abort> {
        if Instant::now() >= self.deadline {
            Err(Abort::Timeout)
        } else {
            Ok(())
        }
    }

    fn local(&mut self) -> PVar {
        self.next_local += 1;
        PVar::Local(self.next_local)
    }

    /// Instantiates one equation at `env`. `None` when its constraints
    /// are trivially violated.
    fn step(&mut self, eq: &CostEquation, env: &Env) -> Result<Option<StepOut>, Abort> {
        let mut names: BTreeMap<CVar, PExpr> = BTreeMap::new();
        let mut fresh: BTreeSet<PVar> = BTreeSet::new();
        let mut vars: BTreeSet<CVar> = eq.cost.vars();
        for c in &eq.constraints {
            vars.extend(c.vars());
        }
        for call in &eq.calls {
            for a in &call.args {
                vars.extend(a.vars().cloned());
            }
        }
        for v in vars {
            let e = match (v.primed, env.get(&v.name)) {
                (false, Some(e)) if eq.params.contains(&v.name) => e.clone(),
                _ => {
                    let l = self.local();
                    fresh.insert(l.clone());
                    LinExpr::var(l)
                }
            };
            names.insert(v, e);
        }
        let rename = |e: &LinExpr<CVar>| e.map_exprs(|v| names[v].clone());
        let mut cons: Vec<PCon> =
            eq.constraints.iter().map(|c| LinearConstraint::new(rename(&c.lhs), c.rel, rename(&c.rhs))).collect();
        let mut cost = eq.cost.substitute(|v| names[v].clone());
        let mut args: Vec<(String, Vec<PExpr>)> =
            eq.calls.iter().map(|c| (c.callee.clone(), c.args.iter().map(rename).collect())).collect();

        // solve equalities for this step's fresh variables
        loop {
            let pick = cons.iter().enumerate().find_map(|(i, c)| {
                if c.rel != Rel::Eq {
                    return None;
                }
                let d = c.lhs.sub(&c.rhs);
                d.terms.keys().find(|v| fresh.contains(*v)).map(|v| (i, v.clone(), d.clone()))
            });
            let Some((i, v, d)) = pick else { break };
            cons.remove(i);
            let c = d.coeff(&v);
            let mut rest = d.clone();
            rest.terms.remove(&v);
            let sol = rest.scale(&(-Rat::one() / c));
            let sub = BTreeMap::from([(v.clone(), sol)]);
            cons = cons.iter().map(|k| substitute_con(k, &sub)).collect();
            cost = substitute_bound(&cost, &sub);
            for (_, a) in &mut args {
                for x in a.iter_mut() {
                    *x = substitute_lin(x, &sub);
                }
            }
            fresh.remove(&v);
        }
        let mut kept = Vec::new();
        for c in cons {
            let d = c.lhs.sub(&c.rhs);
            if let Some(k) = d.as_constant() {
                let ok = match c.rel {
                    Rel::Eq => k.is_zero(),
                    Rel::Le => !k.is_positive(),
                    Rel::Lt => k.is_negative(),
                    Rel::Ge => !k.is_negative(),
                    Rel::Gt => k.is_positive(),
                };
                if !ok {
                    return Ok(None);
                }
            } else {
                kept.push(c);
            }
        }

        let mut items = vec![cost];
        let mut next = None;
        for (callee, a) in args {
            let params: Vec<String> = self.params.get(callee.as_str()).map(|p| p.to_vec()).unwrap_or_default();
            let callee_env: Env = params.iter().cloned().zip(a).collect();
            if let Some(b) = self.bounds.get(&callee) {
                items.push(b.substitute(|v| {
                    callee_env.get(&v.name).cloned().unwrap_or_else(|| LinExpr::var(PVar::Local(u32::MAX)))
                }));
            } else if next.is_some() {
                return Err(Abort::Ranking(format!("unsupported shape: {} calls several unsolved heads", eq.head)));
            } else {
                next = Some((callee, callee_env));
            }
        }
        Ok(Some(StepOut { cost: BoundExpr::sum(items), cons: kept, next }))
    }

    fn feasible(&self, cons: &[PCon], seed: &BTreeSet<PVar>) -> bool {
        let atoms = atoms_of(cons);
        let mut sl = slice(&atoms, seed, &BTreeSet::new());
        let vars: BTreeSet<PVar> = sl.iter().flat_map(|a| a.vars().cloned()).collect();
        sl.extend(nonneg_atoms(&vars, None));
        !matches!(System { atoms: sl }.is_infeasible(), Ok(true))
    }

    /// Smallest value of `e` under `cons`, if bounded below.
    fn min_value(&mut self, e: &PExpr, cons: &[PCon]) -> Option<Rat> {
        if let Some(c) = e.as_constant() {
            return Some(c.clone());
        }
        let t = self.local();
        let mut atoms = atoms_of(cons);
        atoms.push(Atom::new(LinExpr::var(t.clone()).sub(e), AtomKind::Eq));
        let keep = BTreeSet::from([t.clone()]);
        let mut sl = slice(&atoms, &keep.iter().chain(e.vars()).cloned().collect(), &keep);
        let vars: BTreeSet<PVar> = sl.iter().flat_map(|a| a.vars().cloned()).collect();
        sl.extend(nonneg_atoms(&vars, Some(&t)));
        let projected = System { atoms: sl }.project(&keep).ok()??;
        projected.lower_bounds(&t).into_iter().filter_map(|b| b.as_constant().cloned()).max()
    }

    /// Upper bound of `expr` under `cons` using only variables in `keep`.
    /// `None` if the constraints are infeasible.
    fn maximize(&mut self, expr: &PBound, cons: &[PCon], keep: &BTreeSet<PVar>) -> Result<Option<PBound>, Abort> {
        self.check_time()?;
        let atoms = atoms_of(cons);
        let mut infeasible = false;
        let mut next_local = self.next_local;
        let out = expr.map_nats(&mut |l: &PExpr| {
            if l.vars().all(|v| keep.contains(v)) {
                return BoundExpr::Nat(l.clone());
            }
            next_local += 1;
            let t = PVar::Local(next_local);
            let mut with_t = atoms.clone();
            with_t.push(Atom::new(LinExpr::var(t.clone()).sub(l), AtomKind::Eq));
            let mut keep_t = keep.clone();
            keep_t.insert(t.clone());
            let mut sl = slice(&with_t, &BTreeSet::from([t.clone()]).into_iter().chain(l.vars().cloned()).collect(), keep);
            let vars: BTreeSet<PVar> = sl.iter().flat_map(|a| a.vars().cloned()).collect();
            sl.extend(nonneg_atoms(&vars, Some(&t)));
            match (System { atoms: sl }).project(&keep_t) {
                Ok(None) => {
                    infeasible = true;
                    BoundExpr::zero()
                }
                Ok(Some(s)) => {
                    let ubs: Vec<PExpr> =
                        s.upper_bounds(&t).into_iter().filter(|u| u.coeff(&t).is_zero()).collect();
                    let best = ubs.iter().filter(|u| u.is_constant()).min_by(|a, b| a.constant.cmp(&b.constant)).cloned();
                    let best = best.or_else(|| ubs.iter().min_by_key(|u| (u.terms.len(), (*u).clone())).cloned());
                    match best {
                        Some(u) => BoundExpr::Nat(u),
                        None => BoundExpr::Unknown,
                    }
                }
                Err(_) => BoundExpr::Unknown,
            }
        });
        self.next_local = next_local;
        if infeasible {
            return Ok(None);
        }
        Ok(Some(out.simplify()))
    }

    fn equations(&self, head: &str) -> Vec<&'a CostEquation> {
        self.by_head.get(head).cloned().unwrap_or_default()
    }

    fn start_env(&self, head: &str) -> Env {
        self.params.get(head).map(|ps| ps.iter().map(|p| (p.clone(), pre(p))).collect()).unwrap_or_default()
    }

    /// Renames the locals of a stored path and binds its parameters.
    fn instantiate(&mut self, p: &Path, env: &Env) -> Path {
        let mut sub: BTreeMap<PVar, PExpr> = env.iter().map(|(k, v)| (PVar::Pre(k.clone()), v.clone())).collect();
        let mut locals = BTreeSet::new();
        for c in &p.cons {
            locals.extend(c.vars().into_iter().filter(|v| matches!(v, PVar::Local(_))));
        }
        for b in &p.cost {
            locals.extend(b.vars().into_iter().filter(|v| matches!(v, PVar::Local(_))));
        }
        for e in p.env.values() {
            locals.extend(e.vars().filter(|v| matches!(v, PVar::Local(_))).cloned());
        }
        for l in locals {
            let n = self.local();
            sub.insert(l, LinExpr::var(n));
        }
        Path {
            cost: p.cost.iter().map(|b| substitute_bound(b, &sub)).collect(),
            cons: p.cons.iter().map(|c| substitute_con(c, &sub)).collect(),
            env: p.env.iter().map(|(k, e)| (k.clone(), substitute_lin(e, &sub))).collect(),
            end: p.end.clone(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        &mut self,
        region: &BTreeSet<String>,
        header: &str,
        inner: &BTreeMap<String, LoopSummary>,
        head: &str,
        state: Path,
        out: &mut Vec<Path>,
    ) -> Result<(), Abort> {
        self.check_time()?;
        if out.len() > PATH_LIMIT {
            return Err(Abort::Ranking(format!("more than {PATH_LIMIT} paths through the loop at {header}")));
        }
        let continue_at = |ctx: &mut Self, next: Option<(String, Env)>, mut p: Path, out: &mut Vec<Path>| {
            match next {
                None => {
                    p.end = End::Halt;
                    out.push(p);
                    Ok(())
                }
                Some((y, env)) => {
                    p.env = env;
                    if y == header {
                        p.end = End::Iterate;
                        out.push(p);
                        Ok(())
                    } else if region.contains(&y) {
                        ctx.dfs(region, header, inner, &y, p, out)
                    } else {
                        p.end = End::Exit(y);
                        out.push(p);
                        Ok(())
                    }
                }
            }
        };

        if head != header {
            if let Some(summary) = inner.get(head) {
                // run the inner loop as one step, then leave it
                let mut env = state.env.clone();
                let sub: BTreeMap<PVar, PExpr> = env.iter().map(|(k, v)| (PVar::Pre(k.clone()), v.clone())).collect();
                let mut cost = state.cost.clone();
                cost.push(substitute_bound(&summary.iterations, &sub));
                for (k, v) in env.iter_mut() {
                    if !summary.preserved.contains(k) {
                        let l = self.local();
                        *v = LinExpr::var(l);
                    }
                }
                for ex in &summary.exits {
                    let inst = self.instantiate(ex, &env);
                    let mut p = Path { cost: cost.clone(), cons: state.cons.clone(), env: Env::new(), end: End::Halt };
                    p.cost.extend(inst.cost);
                    p.cons.extend(inst.cons.iter().cloned());
                    let seed: BTreeSet<PVar> = inst.cons.iter().flat_map(|c| c.vars()).collect();
                    if !seed.is_empty() && !self.feasible(&p.cons, &seed) {
                        continue;
                    }
                    let next = match inst.end {
                        End::Halt => None,
                        End::Exit(y) => Some((y, inst.env)),
                        End::Iterate => Some((head.to_string(), inst.env)),
                    };
                    continue_at(self, next, p, out)?;
                }
                return Ok(());
            }
        }

        for eq in self.equations(head) {
            let Some(so) = self.step(eq, &state.env)? else { continue };
            let mut p = state.clone();
            p.cost.push(so.cost);
            let seed: BTreeSet<PVar> = so.cons.iter().flat_map(|c| c.vars()).collect();
            p.cons.extend(so.cons);
            if !seed.is_empty() && !self.feasible(&p.cons, &seed) {
                continue;
            }
            self.stats.paths += 1;
            continue_at(self, so.next, p, out)?;
        }
        Ok(())
    }

    fn analyze_loop(&mut self, region: &BTreeSet<String>, header: &str) -> Result<LoopSummary, Abort> {
        self.check_time()?;
        // inner loops: components left after cutting the edges into the header
        let mut inner = BTreeMap::new();
        for comp in components(region, |h| self.callees(h), Some(header)) {
            if !comp.cyclic {
                continue;
            }
            let entries: BTreeSet<&String> = comp
                .heads
                .iter()
                .filter(|h| {
                    region.iter().any(|g| !comp.heads.contains(g) && self.callees(g).contains(*h))
                })
                .collect();
            if entries.len() != 1 {
                return Err(Abort::CoverPoint(format!(
                    "loop with entries {} inside the loop at {header}",
                    entries.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
                )));
            }
            let h2 = entries.into_iter().next().unwrap().clone();
            let summary = self.analyze_loop(&comp.heads, &h2)?;
            inner.insert(h2, summary);
        }

        let params: Vec<String> = self.params.get(header).map(|p| p.to_vec()).unwrap_or_default();
        let start = Path { cost: Vec::new(), cons: Vec::new(), env: self.start_env(header), end: End::Halt };
        let mut paths = Vec::new();
        self.dfs(region, header, &inner, header, start, &mut paths)?;
        let (iters, exits): (Vec<Path>, Vec<Path>) = paths.into_iter().partition(|p| p.end == End::Iterate);

        let mut preserved = BTreeSet::new();
        for p in &params {
            let same = iters.iter().all(|it| it.env.get(p).map_or(false, |e| *e == pre(p)));
            if same {
                preserved.insert(p.clone());
            }
        }
        let keep: BTreeSet<PVar> = preserved.iter().map(|p| PVar::Pre(p.clone())).collect();

        let costs: Vec<PBound> = iters.iter().map(|p| BoundExpr::sum(p.cost.clone()).simplify()).collect();
        let iterations = if iters.is_empty() {
            BoundExpr::zero()
        } else if costs.iter().all(|c| c.is_zero()) {
            self.stats.zero_cost_loops += 1;
            BoundExpr::zero()
        } else {
            let k = self.find_ranking(header, &params, &iters)?;
            self.stats.ranked_loops += 1;
            let mut per = Vec::new();
            for (p, c) in iters.iter().zip(&costs) {
                if let Some(m) = self.maximize(c, &p.cons, &keep)? {
                    per.push(m);
                }
            }
            k.times(BoundExpr::max_of(per)).simplify()
        };
        Ok(LoopSummary { preserved, iterations, exits })
    }

    fn find_ranking(&mut self, header: &str, params: &[String], iters: &[Path]) -> Result<PBound, Abort> {
        let mut candidates: Vec<PExpr> = params.iter().map(|p| pre(p)).collect();
        for v in params {
            for n in params {
                if v != n {
                    candidates.push(pre(n).sub(&pre(v)));
                }
            }
        }
        for f in candidates {
            self.check_time()?;
            let mut delta: Option<Rat> = None;
            let mut low: Option<Rat> = None;
            let mut ok = true;
            for p in iters {
                let after = f.map_exprs(|v| match v {
                    PVar::Pre(n) => p.env.get(n).cloned().unwrap_or_else(|| LinExpr::var(v.clone())),
                    PVar::Local(_) => LinExpr::var(v.clone()),
                });
                let dec = f.sub(&after);
                if dec.as_constant().is_some_and(|c| !c.is_positive()) {
                    ok = false;
                    break;
                }
                let d = match self.min_value(&dec, &p.cons) {
                    Some(d) if d.is_positive() => d.ceil(),
                    _ => {
                        ok = false;
                        break;
                    }
                };
                let Some(l) = self.min_value(&f, &p.cons) else {
                    ok = false;
                    break;
                };
                delta = Some(delta.map_or(d.clone(), |x: Rat| x.min(d)));
                low = Some(low.map_or(l.clone(), |x: Rat| x.min(l)));
            }
            let (Some(delta), Some(low)) = (delta, low) else { continue };
            if !ok || !self.verify_ranking(&f, &delta, &low, iters) {
                continue;
            }
            // at most (f0 - L)/δ + 1 iterations
            let span = f.add_const(&(&delta - &low));
            let d = delta.to_integer().to_u64().unwrap_or(1).max(1);
            let k = if d == 1 { BoundExpr::Nat(span) } else { BoundExpr::Nat(span).floor_div(d) };
            self.rankings.push(RankingFunction {
                header: header.to_string(),
                function: f.map_vars(|v| match v {
                    PVar::Pre(n) => CVar::new(n.clone()),
                    PVar::Local(k) => CVar::new(format!("_t{k}")),
                }),
                decrease: delta,
                lower: low,
                iterations: to_cvar(&k),
            });
            return Ok(k);
        }
        Err(Abort::Ranking(format!("no linear ranking function for the loop at {header}")))
    }

    /// Independent re-check: each iteration path entails `f >= L` and a
    /// decrease of at least `δ`.
    fn verify_ranking(&self, f: &PExpr, delta: &Rat, low: &Rat, iters: &[Path]) -> bool {
        iters.iter().all(|p| {
            let after = f.map_exprs(|v| match v {
                PVar::Pre(n) => p.env.get(n).cloned().unwrap_or_else(|| LinExpr::var(v.clone())),
                PVar::Local(_) => LinExpr::var(v.clone()),
            });
            let dec = f.sub(&after);
            let refutes = |neg: Atom<PVar>| {
                let mut atoms = atoms_of(&p.cons);
                atoms.push(neg);
                let vars: BTreeSet<PVar> = atoms.iter().flat_map(|a| a.vars().cloned()).collect();
                atoms.extend(nonneg_atoms(&vars, None));
                matches!(System { atoms }.is_infeasible(), Ok(true))
            };
            // dec < δ and f < L must both be impossible
            refutes(Atom::strict(LinExpr::constant(delta.clone()).sub(&dec)))
                && refutes(Atom::strict(LinExpr::constant(low.clone()).sub(f)))
        })
    }

    fn callees(&self, head: &str) -> BTreeSet<String> {
        self.equations(head).iter().flat_map(|e| e.calls.iter().map(|c| c.callee.clone())).collect()
    }

    fn solve_acyclic(&mut self, head: &str) -> Result<BoundExpr<CVar>, Abort> {
        let env = self.start_env(head);
        let keep: BTreeSet<PVar> = env.keys().map(|k| PVar::Pre(k.clone())).collect();
        let mut items = Vec::new();
        for eq in self.equations(head) {
            let Some(so) = self.step(eq, &env)? else { continue };
            let seed: BTreeSet<PVar> = so.cons.iter().flat_map(|c| c.vars()).collect();
            if !seed.is_empty() && !self.feasible(&so.cons, &seed) {
                continue;
            }
            if let Some(m) = self.maximize(&so.cost, &so.cons, &keep)? {
                items.push(m);
            }
        }
        Ok(to_cvar(&BoundExpr::max_of(items).simplify()))
    }

    fn solve_cycle(&mut self, heads: &BTreeSet<String>, entry: &str) -> Result<(), Abort> {
        let summary = self.analyze_loop(heads, entry)?;
        let keep: BTreeSet<PVar> = summary.preserved.iter().map(|p| PVar::Pre(p.clone())).collect();
        let mut exits = Vec::new();
        for p in &summary.exits {
            let cost = BoundExpr::sum(p.cost.clone());
            if let Some(m) = self.maximize(&cost, &p.cons, &keep)? {
                exits.push(m);
            }
        }
        let total = summary.iterations.plus(BoundExpr::max_of(exits)).simplify();
        self.bounds.insert(entry.to_string(), to_cvar(&total));
        Ok(())
    }
}

struct Component {
    heads: BTreeSet<String>,
    cyclic: bool,
}

/// Strongly connected components of the call graph restricted to
/// `region`, callees first. Edges into `cut` are ignored.
fn components(
    region: &BTreeSet<String>,
    callees: impl Fn(&str) -> BTreeSet<String>,
    cut: Option<&str>,
) -> Vec<Component> {
    let mut g: DiGraph<String, ()> = DiGraph::new();
    let idx: BTreeMap<&String, _> = region.iter().map(|h| (h, g.add_node(h.clone()))).collect();
    let mut self_loops = BTreeSet::new();
    for h in region {
        for c in callees(h) {
            if Some(c.as_str()) == cut {
                continue;
            }
            if let Some(&to) = idx.get(&c) {
                if &c == h {
                    self_loops.insert(c.clone());
                }
                g.add_edge(idx[h], to, ());
            }
        }
    }
    tarjan_scc(&g)
        .into_iter()
        .map(|scc| {
            let heads: BTreeSet<String> = scc.iter().map(|n| g[*n].clone()).collect();
            let cyclic = heads.len() > 1 || heads.iter().any(|h| self_loops.contains(h));
            Component { heads, cyclic }
        })
        .collect()
}

pub fn solve(crs: &CostRelationSystem, timeout: Duration) -> Solution {
    let deadline = Instant::now() + timeout;
    let crs = crs.restrict(&crs.entry);
    let mut by_head: BTreeMap<&str, Vec<&CostEquation>> = BTreeMap::new();
    let mut params: BTreeMap<&str, &[String]> = BTreeMap::new();
    for e in &crs.equations {
        by_head.entry(e.head.as_str()).or_default().push(e);
        params.entry(e.head.as_str()).or_insert(e.params.as_slice());
    }
    let mut ctx = Ctx {
        by_head,
        params,
        bounds: BTreeMap::new(),
        deadline,
        next_local: 0,
        stats: SolverStats::default(),
        rankings: Vec::new(),
    };
    let result = run(&mut ctx, &crs);
    let outcome = match result {
        Ok(b) if b.contains_unknown() => AnalysisOutcome::FiniteNoBound("maximization error".into()),
        Ok(b) => AnalysisOutcome::Bound(b),
        Err(Abort::Timeout) => AnalysisOutcome::Timeout,
        Err(Abort::CoverPoint(m)) => AnalysisOutcome::CoverPointError(m),
        Err(Abort::Ranking(m)) => AnalysisOutcome::TerminationUnknown(m),
    };
    Solution { outcome, stats: ctx.stats, rankings: ctx.rankings }
}

fn run(ctx: &mut Ctx, crs: &CostRelationSystem) -> Result<BoundExpr<CVar>, Abort> {
    if crs.equations.is_empty() {
        return Ok(BoundExpr::zero());
    }
    let region: BTreeSet<String> = crs.heads().into_iter().map(String::from).collect();
    let comps = components(&region, |h| ctx.callees(h), None);
    for comp in comps {
        ctx.check_time()?;
        if !comp.cyclic {
            let h = comp.heads.iter().next().unwrap().clone();
            let b = ctx.solve_acyclic(&h)?;
            ctx.bounds.insert(h, b);
            continue;
        }
        let mut entries: BTreeSet<String> = region
            .iter()
            .filter(|g| !comp.heads.contains(*g))
            .flat_map(|g| ctx.callees(g))
            .filter(|c| comp.heads.contains(c))
            .collect();
        if comp.heads.contains(&crs.entry) {
            entries.insert(crs.entry.clone());
        }
        if entries.len() != 1 {
            return Err(Abort::CoverPoint(format!(
                "loop entered at {}",
                entries.into_iter().collect::<Vec<_>>().join(", ")
            )));
        }
        let entry = entries.into_iter().next().unwrap();
        ctx.solve_cycle(&comp.heads, &entry)?;
    }
    Ok(ctx.bounds.get(&crs.entry).cloned().unwrap_or_else(BoundExpr::zero).simplify())
}

/// Evaluates a bound at integer parameter values; missing ones are 0.
pub fn evaluate(b: &BoundExpr<CVar>, values: &BTreeMap<String, BigInt>) -> Option<Rat> {
    b.eval(&mut |v: &CVar| Rat::from_integer(values.get(&v.name).cloned().unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crs::parse_crs;

    fn solve_text(s: &str) -> Solution {
        solve(&parse_crs(s).unwrap(), Duration::from_secs(10))
    }

    fn bound_text(s: &str) -> String {
        match solve_text(s).outcome {
            AnalysisOutcome::Bound(b) => b.to_string(),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn countdown() {
        assert_eq!(bound_text("f(x) = 2 {x <= 0}\nf(x) = 5 + f(x') {x' = x - 1, x >= 1}"), "2 + 5*nat(x)");
    }

    #[test]
    fn straight_line() {
        assert_eq!(bound_text("f() = 9"), "9");
    }

    #[test]
    fn chain_inlines() {
        assert_eq!(bound_text("f(a) = 1 + g(a') {a' = a + 1}\ng(b) = 2 + h(b') {b' = b}\nh(c) = 3*nat(c)"), "3 + 3*nat(a + 1)");
    }

    #[test]
    fn counter_loop_with_exit() {
        let text = "\
            e(n) = 10 + h(n', i') {n' = n, i' = 0}\n\
            h(n, i) = 7 + h(n', i') {i < n, i' = i + 1, n' = n}\n\
            h(n, i) = 4 {i >= n}";
        assert_eq!(bound_text(text), "14 + 7*nat(n)");
    }

    #[test]
    fn unbounded_step_fails_ranking() {
        let out = solve_text("h(n, i) = 1 + h(n', i') {i < n, n' = n}\nh(n, i) = 0 {i >= n}").outcome;
        assert!(matches!(out, AnalysisOutcome::TerminationUnknown(_)), "{out:?}");
    }

    #[test]
    fn zero_cost_loop_skips_ranking() {
        let s = solve_text("h(n, i) = 0 + h(n', i') {n' = n}\nh(n, i) = 3");
        assert_eq!(s.outcome, AnalysisOutcome::Bound(BoundExpr::int(3)));
        assert_eq!(s.stats.zero_cost_loops, 1);
        assert_eq!(s.stats.ranked_loops, 0);
    }

    #[test]
    fn unbounded_cost_is_finite_no_bound() {
        let out = solve_text("f(x) = 3*nat(y) + g(x') {x' = x}\ng(x) = 1").outcome;
        assert!(matches!(out, AnalysisOutcome::FiniteNoBound(_)), "{out:?}");
    }

    #[test]
    fn two_entry_loop_is_cover_point() {
        let text = "\
            e(x) = 1 + a(x') {x' = x, x >= 5}\n\
            e(x) = 1 + b(x') {x' = x, x <= 4}\n\
            a(x) = 1 + b(x') {x' = x - 1, x >= 1}\n\
            a(x) = 0 {x <= 0}\n\
            b(x) = 1 + a(x') {x' = x - 1, x >= 1}\n\
            b(x) = 0 {x <= 0}";
        assert!(matches!(solve_text(text).outcome, AnalysisOutcome::CoverPointError(_)));
    }

    #[test]
    fn nested_loops() {
        let text = "\
            e(n, m) = 0 + o(n', m', i') {n' = n, m' = m, i' = 0}\n\
            o(n, m, i) = 1 + in(n', m', i', j') {i < n, n' = n, m' = m, i' = i, j' = 0}\n\
            o(n, m, i) = 0 {i >= n}\n\
            in(n, m, i, j) = 2 + in(n', m', i', j') {j < m, j' = j + 1, n' = n, m' = m, i' = i}\n\
            in(n, m, i, j) = 0 + o(n', m', i') {j >= m, n' = n, m' = m, i' = i + 1}";
        let s = solve_text(text);
        let b = s.outcome.bound().expect("bounded").clone();
        for n in 0..4i64 {
            for m in 0..4i64 {
                let vals = BTreeMap::from([("n".to_string(), BigInt::from(n)), ("m".to_string(), BigInt::from(m))]);
                let v = evaluate(&b, &vals).unwrap();
                assert!(v >= Rat::from_integer(BigInt::from(n + 2 * n * m)), "{b} at n={n} m={m}");
            }
        }
    }

    #[test]
    fn infeasible_branch_dropped() {
        assert_eq!(bound_text("f(x) = 100 {x <= 1, x >= 2}\nf(x) = 5"), "5");
    }
}
