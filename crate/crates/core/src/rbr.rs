//! Rule-based representation: one guarded rule per block with explicit
//! stack, memory, storage and environment variables. Every bytecode
//! instruction survives as a `nop` carrying its mnemonic so gas can be
//! charged later.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use primitive_types::U256;

use crate::cfg::{Addr, Annotations, BasicBlock, Cfg, CfgError, EdgeKind, FunctionKind, MemAccess, TerminatorKind};
use crate::evm::{eval_pure, Opcode};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Var {
    Stack(u32),
    /// Memory word at a concrete address.
    Local(U256),
    /// Storage slot.
    State(U256),
    /// Environment value such as `caller` or `calldata_4`.
    Chain(String),
}

impl Var {
    pub fn is_stack(&self) -> bool {
        matches!(self, Var::Stack(_))
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::Stack(i) => write!(f, "s_{i}"),
            Var::Local(a) => write!(f, "l_{a}"),
            Var::State(k) => write!(f, "g_{k}"),
            Var::Chain(n) => write!(f, "b_{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Const(U256),
    Var(Var),
    /// Opaque result of an operator; operands top of stack first.
    Op(Opcode, Vec<Var>),
    Fresh(u32),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Const(v) => write!(f, "{v}"),
            Expr::Var(v) => write!(f, "{v}"),
            Expr::Fresh(k) => write!(f, "fresh_{k}"),
            Expr::Op(op, args) => {
                write!(f, "{}(", op.mnemonic().to_lowercase())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Stmt {
    Assign(Var, Expr),
    Nop {
        opcode: Opcode,
        offset: usize,
        /// Stack operands before the instruction, top first.
        operands: Vec<Var>,
        mem: Vec<MemAccess>,
        immediate: Option<U256>,
    },
}

impl Stmt {
    pub fn reads(&self) -> Vec<&Var> {
        match self {
            Stmt::Assign(_, Expr::Var(v)) => vec![v],
            Stmt::Assign(_, Expr::Op(_, vs)) => vs.iter().collect(),
            Stmt::Assign(..) => Vec::new(),
            Stmt::Nop { operands, .. } => operands.iter().collect(),
        }
    }
}

impl fmt::Display for Stmt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stmt::Assign(v, e) => write!(f, "{v} = {e}"),
            Stmt::Nop { opcode, .. } => write!(f, "nop({})", opcode.mnemonic()),
        }
    }
}

/// Branch condition over naturals.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Guard {
    True,
    Eq(Var, Var),
    Lt(Var, Var),
    Le(Var, Var),
    Gt(Var, Var),
    Ge(Var, Var),
    NonZero(Var),
    Zero(Var),
}

impl Guard {
    pub fn vars(&self) -> Vec<&Var> {
        match self {
            Guard::True => Vec::new(),
            Guard::NonZero(v) | Guard::Zero(v) => vec![v],
            Guard::Eq(a, b) | Guard::Lt(a, b) | Guard::Le(a, b) | Guard::Gt(a, b) | Guard::Ge(a, b) => vec![a, b],
        }
    }

    pub fn holds(&self, val: &dyn Fn(&Var) -> U256) -> bool {
        match self {
            Guard::True => true,
            Guard::Eq(a, b) => val(a) == val(b),
            Guard::Lt(a, b) => val(a) < val(b),
            Guard::Le(a, b) => val(a) <= val(b),
            Guard::Gt(a, b) => val(a) > val(b),
            Guard::Ge(a, b) => val(a) >= val(b),
            Guard::NonZero(v) => !val(v).is_zero(),
            Guard::Zero(v) => val(v).is_zero(),
        }
    }
}

impl fmt::Display for Guard {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Guard::True => f.write_str("true"),
            Guard::Eq(a, b) => write!(f, "{a} = {b}"),
            Guard::Lt(a, b) => write!(f, "{a} < {b}"),
            Guard::Le(a, b) => write!(f, "{a} <= {b}"),
            Guard::Gt(a, b) => write!(f, "{a} > {b}"),
            Guard::Ge(a, b) => write!(f, "{a} >= {b}"),
            Guard::NonZero(v) => write!(f, "{v} >= 1"),
            Guard::Zero(v) => write!(f, "{v} = 0"),
        }
    }
}

/// A call to another rule. Arguments are passed by name: each callee
/// parameter is bound to the caller's variable of the same name.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Continuation {
    pub guard: Guard,
    pub callee: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RuleKind {
    Block,
    Jump,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RbrError {
    #[error(transparent)]
    Cfg(#[from] CfgError),
    #[error("return address of the jump at {0} cannot be linked to a call site")]
    ReturnAddressUnlinked(usize),
    #[error("stack underflow translating block {0}")]
    StackUnderflow(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub name: String,
    pub kind: RuleKind,
    pub block: usize,
    /// CFG node the rule was generated from, once cloned.
    pub node: Option<usize>,
    /// Stack height on entry.
    pub height: usize,
    pub params: Vec<Var>,
    pub body: Vec<Stmt>,
    pub conts: Vec<Continuation>,
    pub error: Option<RbrError>,
}

impl Rule {
    pub fn nops(&self) -> impl Iterator<Item = &Stmt> {
        self.body.iter().filter(|s| matches!(s, Stmt::Nop { .. }))
    }

    pub fn stack_params(&self) -> impl Iterator<Item = Var> {
        (0..self.height as u32).map(Var::Stack)
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params.iter().map(|p| p.to_string()).collect();
        writeln!(f, "{}({}) =>", self.name, params.join(", "))?;
        if let Some(e) = &self.error {
            writeln!(f, "    error: {e}")?;
        }
        for s in &self.body {
            writeln!(f, "    {s}")?;
        }
        for c in &self.conts {
            if c.guard == Guard::True {
                writeln!(f, "    call({})", c.callee)?;
            } else {
                writeln!(f, "    {} -> call({})", c.guard, c.callee)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    /// Selector hex, `fallback` or `contract`.
    pub label: String,
    pub function: Option<FunctionKind>,
    pub rule: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RbrProgram {
    pub rules: BTreeMap<String, Rule>,
    pub entries: Vec<Entry>,
    /// Concrete memory addresses read or written by word loads/stores.
    pub locals: BTreeSet<U256>,
    pub next_fresh: u32,
}

impl RbrProgram {
    pub fn rule(&self, name: &str) -> Option<&Rule> {
        self.rules.get(name)
    }

    /// Rules in block order.
    pub fn ordered(&self) -> Vec<&Rule> {
        let mut v: Vec<&Rule> = self.rules.values().collect();
        v.sort_by(|a, b| (a.block, a.node, a.kind, &a.name).cmp(&(b.block, b.node, b.kind, &b.name)));
        v
    }

    pub fn reachable(&self, root: &str) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![root.to_string()];
        while let Some(n) = stack.pop() {
            if let Some(r) = self.rules.get(&n) {
                if seen.insert(n) {
                    stack.extend(r.conts.iter().map(|c| c.callee.clone()));
                }
            }
        }
        seen.into_iter().collect()
    }

    /// First error among rules reachable from `root`.
    pub fn error_from(&self, root: &str) -> Option<RbrError> {
        self.reachable(root).iter().find_map(|n| self.rules[n].error.clone())
    }

    /// Nop mnemonics with multiplicity.
    pub fn nop_multiset(&self) -> BTreeMap<&'static str, usize> {
        let mut m = BTreeMap::new();
        for r in self.rules.values() {
            for s in r.nops() {
                if let Stmt::Nop { opcode, .. } = s {
                    *m.entry(opcode.mnemonic()).or_insert(0) += 1;
                }
            }
        }
        m
    }

    /// Checks that every read is a parameter or assigned earlier, and
    /// that every call target exists.
    pub fn check_well_scoped(&self) -> Result<(), String> {
        for r in self.rules.values() {
            let mut scope: BTreeSet<&Var> = r.params.iter().collect();
            for s in &r.body {
                for v in s.reads() {
                    if !scope.contains(v) {
                        return Err(format!("{}: {v} read before assignment", r.name));
                    }
                }
                if let Stmt::Assign(v, _) = s {
                    scope.insert(v);
                }
            }
            for c in &r.conts {
                for v in c.guard.vars() {
                    if !scope.contains(v) {
                        return Err(format!("{}: guard reads unbound {v}", r.name));
                    }
                }
                let callee = self.rules.get(&c.callee).ok_or_else(|| format!("{}: unknown callee {}", r.name, c.callee))?;
                for p in &callee.params {
                    if !scope.contains(p) {
                        return Err(format!("{}: {} needs {p}", r.name, callee.name));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("entry {} -> {}\n", e.label, e.rule));
        }
        for r in self.ordered() {
            out.push_str(&r.to_string());
        }
        out
    }
}

fn env_var(op: Opcode) -> Option<&'static str> {
    use Opcode::*;
    Some(match op {
        Address => "address",
        Origin => "origin",
        Caller => "caller",
        Callvalue => "callvalue",
        Calldatasize => "calldatasize",
        Codesize => "codesize",
        Gasprice => "gasprice",
        Returndatasize => "returndatasize",
        Coinbase => "coinbase",
        Timestamp => "timestamp",
        Number => "number",
        Difficulty => "difficulty",
        Gaslimit => "gaslimit",
        _ => return None,
    })
}

fn is_comparison(op: Opcode) -> bool {
    matches!(op, Opcode::Lt | Opcode::Gt | Opcode::Slt | Opcode::Sgt | Opcode::Eq)
}

/// Guards for (taken, fallthrough).
fn branch_guards(cmp: Option<(Opcode, Var, Var)>, base: Var, negations: usize) -> (Guard, Guard) {
    let (t, e) = match cmp {
        Some((Opcode::Lt, a, b)) => (Guard::Lt(a.clone(), b.clone()), Guard::Ge(a, b)),
        Some((Opcode::Gt, a, b)) => (Guard::Gt(a.clone(), b.clone()), Guard::Le(a, b)),
        Some((Opcode::Eq, a, b)) => (Guard::Eq(a, b), Guard::True),
        Some(_) => (Guard::True, Guard::True),
        None => (Guard::NonZero(base.clone()), Guard::Zero(base)),
    };
    if negations % 2 == 0 {
        (t, e)
    } else {
        (e, t)
    }
}

struct Gen<'a> {
    locals: &'a BTreeSet<U256>,
    fresh: &'a mut u32,
}

fn overlapping(locals: &BTreeSet<U256>, start: U256, len: U256) -> Vec<U256> {
    let end = start.saturating_add(len);
    locals.iter().filter(|a| **a < end && start < a.saturating_add(U256::from(32))).copied().collect()
}

fn s(i: usize) -> Var {
    Var::Stack(i as u32)
}

/// Targets of a rule, resolved to rule names.
pub(crate) struct Targets {
    pub fall: Vec<String>,
    pub jump: Vec<String>,
    pub taken: Vec<String>,
}

impl<'a> Gen<'a> {
    fn fresh(&mut self) -> Expr {
        *self.fresh += 1;
        Expr::Fresh(*self.fresh)
    }

    fn rules_for(
        &mut self,
        block: &BasicBlock,
        height: usize,
        ann: &Annotations,
        names: (String, String),
        targets: Targets,
        node: Option<usize>,
    ) -> Vec<Rule> {
        let ins = &block.instructions;
        let n = ins.len();
        // start of the nop-only JUMPI suffix
        let mut suffix = n;
        let mut negations = 0;
        let mut has_cmp = false;
        if block.terminator_kind == TerminatorKind::Jumpi {
            suffix = n - 1;
            if n >= 2 && matches!(ins[n - 2].opcode, Opcode::Push(_)) {
                suffix = n - 2;
                while suffix > 0 && ins[suffix - 1].opcode == Opcode::Iszero {
                    suffix -= 1;
                    negations += 1;
                }
                if suffix > 0 && is_comparison(ins[suffix - 1].opcode) {
                    suffix -= 1;
                    has_cmp = true;
                }
            }
        }

        let mut body = Vec::new();
        let mut h = height;
        let mut error = None;
        let mut hs = Vec::with_capacity(n);
        for (i, inst) in ins.iter().enumerate() {
            hs.push(h);
            let op = inst.opcode;
            let info = op.info();
            let depth = info.stack_depth as usize;
            let ok = error.is_none() && h >= depth;
            if !ok && error.is_none() {
                error = Some(RbrError::StackUnderflow(block.id));
            }
            let operands: Vec<Var> = if ok { (1..=depth).map(|k| s(h - k)).collect() } else { Vec::new() };
            // values made inside the suffix are never assigned
            let visible = if i > suffix {
                let base = hs[suffix];
                operands.iter().filter(|v| matches!(v, Var::Stack(j) if (*j as usize) < base)).cloned().collect()
            } else {
                operands.clone()
            };
            body.push(Stmt::Nop {
                opcode: op,
                offset: inst.offset,
                operands: visible,
                mem: ann.memory.get(&inst.offset).cloned().unwrap_or_default(),
                immediate: inst.push_value(),
            });
            if !ok {
                continue;
            }
            if i < suffix {
                self.assignments(inst.offset, op, inst.push_value(), h, &operands, ann, &mut body);
            }
            h = h - info.stack_pops as usize + info.stack_pushes as usize;
        }
        let guards = if error.is_some() || block.terminator_kind != TerminatorKind::Jumpi {
            (Guard::True, Guard::True)
        } else {
            let hc = hs[suffix];
            if has_cmp {
                branch_guards(Some((ins[suffix].opcode, s(hc - 1), s(hc - 2))), s(hc - 1), negations)
            } else if suffix < n - 1 {
                branch_guards(None, s(hc - 1), negations)
            } else {
                branch_guards(None, s(hc - 2), 0)
            }
        };
        let jump_height = guards
            .0
            .vars()
            .into_iter()
            .chain(guards.1.vars())
            .filter_map(|v| match v {
                Var::Stack(i) => Some(*i as usize + 1),
                _ => None,
            })
            .fold(h, usize::max);
        let (name, jump_name) = names;
        let mk = |name: String, kind, body, conts| Rule {
            name,
            kind,
            block: block.id,
            node,
            height,
            params: Vec::new(),
            body,
            conts,
            error: error.clone(),
        };
        let unguarded = |ts: Vec<String>| ts.into_iter().map(|callee| Continuation { guard: Guard::True, callee }).collect();
        match block.terminator_kind {
            TerminatorKind::Jumpi => {
                let mut conts: Vec<Continuation> = targets
                    .taken
                    .into_iter()
                    .map(|callee| Continuation { guard: guards.0.clone(), callee })
                    .collect();
                conts.extend(targets.fall.into_iter().map(|callee| Continuation { guard: guards.1.clone(), callee }));
                // guards may read the condition operands above the exit height
                let jump_rule = Rule { height: jump_height, ..mk(jump_name.clone(), RuleKind::Jump, Vec::new(), conts) };
                let block_rule = mk(name, RuleKind::Block, body, unguarded(vec![jump_name]));
                vec![block_rule, jump_rule]
            }
            TerminatorKind::Jump => vec![mk(name, RuleKind::Block, body, unguarded(targets.jump))],
            TerminatorKind::Fallthrough => vec![mk(name, RuleKind::Block, body, unguarded(targets.fall))],
            TerminatorKind::Halt => vec![mk(name, RuleKind::Block, body, Vec::new())],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn assignments(
        &mut self,
        pc: usize,
        op: Opcode,
        imm: Option<U256>,
        h: usize,
        x: &[Var],
        ann: &Annotations,
        body: &mut Vec<Stmt>,
    ) {
        use Opcode::*;
        let info = op.info();
        let pops = info.stack_pops as usize;
        let out = s(h - pops);
        let mut emit = |v: Var, e: Expr| body.push(Stmt::Assign(v, e));
        match op {
            Push(_) => emit(s(h), Expr::Const(imm.unwrap_or_default())),
            Dup(n) => emit(s(h), Expr::Var(s(h - usize::from(n)))),
            Swap(n) => {
                let other = s(h - 1 - usize::from(n));
                emit(s(h), Expr::Var(s(h - 1)));
                emit(s(h - 1), Expr::Var(other.clone()));
                emit(other, Expr::Var(s(h)));
            }
            Pop | Jumpdest | Jump | Jumpi | Stop | Return | Revert | Invalid | Selfdestruct => {}
            Pc => emit(out, Expr::Const(U256::from(pc))),
            Mload => {
                let e = match first_start(ann, pc) {
                    Some(a) => Expr::Var(Var::Local(a)),
                    None => Expr::Op(Mload, x.to_vec()),
                };
                emit(out, e);
            }
            Sload => {
                let e = match ann.storage.get(&pc).and_then(|a| a.concrete()) {
                    Some(k) => Expr::Var(Var::State(k)),
                    None => Expr::Op(Sload, x.to_vec()),
                };
                emit(out, e);
            }
            Sstore => {
                if let Some(k) = ann.storage.get(&pc).and_then(|a| a.concrete()) {
                    emit(Var::State(k), Expr::Var(x[1].clone()));
                }
            }
            Calldataload => {
                let e = match ann.calldata.get(&pc).and_then(|a| a.concrete()) {
                    Some(c) => Expr::Var(Var::Chain(format!("calldata_{c}"))),
                    None => Expr::Op(Calldataload, x.to_vec()),
                };
                emit(out, e);
            }
            _ => {
                if info.stack_pushes > 0 {
                    let e = match env_var(op) {
                        Some(name) => Expr::Var(Var::Chain(name.into())),
                        None => Expr::Op(op, x[..pops].to_vec()),
                    };
                    emit(out, e);
                }
            }
        }
        // concrete writes clobber overlapping memory variables
        let accesses = ann.memory.get(&pc).cloned().unwrap_or_default();
        for acc in accesses.iter().filter(|a| a.writes) {
            let (Addr::Concrete(start), Addr::Concrete(len)) = (acc.start, acc.len) else { continue };
            for a in overlapping(self.locals, start, len) {
                if op == Mstore && a == start {
                    body.push(Stmt::Assign(Var::Local(a), Expr::Var(x[1].clone())));
                } else {
                    let f = self.fresh();
                    body.push(Stmt::Assign(Var::Local(a), f));
                }
            }
        }
    }
}

fn first_start(ann: &Annotations, pc: usize) -> Option<U256> {
    ann.memory.get(&pc).and_then(|v| v.first()).and_then(|a| a.start.concrete())
}

fn collect_locals(cfg: &Cfg) -> BTreeSet<U256> {
    let mut out = BTreeSet::new();
    let anns = cfg.blocks.values().map(|b| (&b.instructions, &b.annotations));
    let node_anns = cfg.nodes.iter().map(|n| (&cfg.blocks[&n.block].instructions, &n.annotations));
    for (ins, ann) in anns.chain(node_anns) {
        for i in ins.iter() {
            if matches!(i.opcode, Opcode::Mload | Opcode::Mstore) {
                if let Some(a) = first_start(ann, i.offset) {
                    out.insert(a);
                }
            }
        }
    }
    out
}

fn label_of(kind: FunctionKind) -> String {
    match kind {
        FunctionKind::Selector(s) => format!("0x{}", hex::encode(s)),
        FunctionKind::Fallback => "fallback".into(),
    }
}

/// Non-stack variables appearing anywhere in the program.
fn universe(rules: &BTreeMap<String, Rule>) -> BTreeSet<Var> {
    let mut out = BTreeSet::new();
    for r in rules.values() {
        for st in &r.body {
            for v in st.reads() {
                if !v.is_stack() {
                    out.insert(v.clone());
                }
            }
            if let Stmt::Assign(v, _) = st {
                if !v.is_stack() {
                    out.insert(v.clone());
                }
            }
        }
    }
    out
}

fn with_full_params(mut rules: BTreeMap<String, Rule>) -> BTreeMap<String, Rule> {
    let all = universe(&rules);
    for r in rules.values_mut() {
        r.params = r.stack_params().chain(all.iter().cloned()).collect();
    }
    rules
}

/// One rule per block, plus a jump rule per conditional block.
pub fn translate(cfg: &Cfg) -> RbrProgram {
    let locals = collect_locals(cfg);
    let mut fresh = 0;
    let mut rules = BTreeMap::new();
    let mut gen = Gen { locals: &locals, fresh: &mut fresh };
    for block in cfg.blocks.values() {
        let height = cfg.nodes.iter().filter(|n| n.block == block.id).map(|n| n.entry_height).min().unwrap_or(0);
        let fall_off = block.last().map(|i| i.next_offset());
        let name = |b: &usize| format!("block{b}");
        let targets = match block.terminator_kind {
            TerminatorKind::Jumpi => Targets {
                fall: block.successors.iter().filter(|b| Some(**b) == fall_off).map(name).collect(),
                taken: block.successors.iter().filter(|b| Some(**b) != fall_off).map(name).collect(),
                jump: Vec::new(),
            },
            TerminatorKind::Jump => Targets { fall: Vec::new(), taken: Vec::new(), jump: block.successors.iter().map(name).collect() },
            _ => Targets { fall: block.successors.iter().map(name).collect(), taken: Vec::new(), jump: Vec::new() },
        };
        let mut rs = gen.rules_for(
            block,
            height,
            &block.annotations,
            (format!("block{}", block.id), format!("jump{}", block.id)),
            targets,
            None,
        );
        let errors: Vec<CfgError> =
            cfg.nodes.iter().filter(|n| n.block == block.id).filter_map(|n| n.error.clone()).collect();
        if let Some(e) = errors.into_iter().next() {
            for r in &mut rs {
                r.error.get_or_insert(RbrError::Cfg(e.clone()));
            }
        }
        for r in rs {
            rules.insert(r.name.clone(), r);
        }
    }
    let entries = entries_for(cfg, |f| format!("block{}", f));
    RbrProgram { rules: with_full_params(rules), entries, locals, next_fresh: fresh }
}

fn entries_for(cfg: &Cfg, rule_of: impl Fn(usize) -> String) -> Vec<Entry> {
    if cfg.program.instructions.is_empty() {
        return Vec::new();
    }
    if cfg.public_functions.is_empty() {
        return vec![Entry { label: "contract".into(), function: None, rule: rule_of(0) }];
    }
    cfg.public_functions
        .iter()
        .map(|f| Entry { label: label_of(f.kind), function: Some(f.kind), rule: rule_of(f.entry_block) })
        .collect()
}

fn node_names(cfg: &Cfg) -> Vec<(String, String)> {
    cfg.nodes
        .iter()
        .map(|n| {
            let same = cfg.nodes_of_block(n.block);
            if same.len() == 1 {
                (format!("block{}", n.block), format!("jump{}", n.block))
            } else {
                let k = same.iter().position(|m| *m == n.id).unwrap_or(0);
                (format!("block{}_{k}", n.block), format!("jump{}_{k}", n.block))
            }
        })
        .collect()
}

/// Regenerates the rules per CFG node so that every internal-call site
/// gets its own copy of the callee's rules, each returning to its caller.
/// Blocks never reached keep their block-level rule.
pub fn clone_internal_calls(rbr: &RbrProgram, cfg: &Cfg) -> RbrProgram {
    let names = node_names(cfg);
    let mut fresh = rbr.next_fresh;
    let mut rules = BTreeMap::new();
    let mut gen = Gen { locals: &rbr.locals, fresh: &mut fresh };
    for n in &cfg.nodes {
        let block = &cfg.blocks[&n.block];
        let mut targets = Targets { fall: Vec::new(), taken: Vec::new(), jump: Vec::new() };
        for (kind, to) in &n.successors {
            let callee = names[*to].0.clone();
            match kind {
                EdgeKind::Fall => targets.fall.push(callee),
                EdgeKind::Taken => targets.taken.push(callee),
                EdgeKind::Jump => targets.jump.push(callee),
            }
        }
        let mut rs = gen.rules_for(block, n.entry_height, &n.annotations, names[n.id].clone(), targets, Some(n.id));
        if let Some(e) = &n.error {
            let err = match e {
                CfgError::UnresolvableJump(pc) if is_return_jump(block, *pc) => RbrError::ReturnAddressUnlinked(*pc),
                other => RbrError::Cfg(other.clone()),
            };
            for r in &mut rs {
                r.error = Some(err.clone());
            }
        }
        for r in rs {
            rules.insert(r.name.clone(), r);
        }
    }
    let reached: BTreeSet<usize> = cfg.nodes.iter().map(|n| n.block).collect();
    for r in rbr.rules.values() {
        if !reached.contains(&r.block) {
            rules.insert(r.name.clone(), r.clone());
        }
    }
    let node_of_block = |b: usize| cfg.nodes.iter().find(|n| n.block == b).map(|n| n.id);
    let entries = if cfg.program.instructions.is_empty() {
        Vec::new()
    } else if cfg.public_functions.is_empty() {
        vec![Entry { label: "contract".into(), function: None, rule: names[0].0.clone() }]
    } else {
        cfg.public_functions
            .iter()
            .map(|f| Entry {
                label: label_of(f.kind),
                function: Some(f.kind),
                rule: names[node_of_block(f.entry_block).map_or(f.entry_node, |_| f.entry_node)].0.clone(),
            })
            .collect()
    };
    RbrProgram { rules: with_full_params(rules), entries, locals: rbr.locals.clone(), next_fresh: fresh }
}

/// A JUMP whose target was not pushed in the same block.
fn is_return_jump(block: &BasicBlock, pc: usize) -> bool {
    let ins = &block.instructions;
    match ins.iter().position(|i| i.offset == pc) {
        Some(k) if ins[k].opcode == Opcode::Jump => k == 0 || !matches!(ins[k - 1].opcode, Opcode::Push(_)),
        _ => false,
    }
}

/// After each memory write to an unknown address every memory variable
/// gets a fresh value.
pub fn forget_unknown_memory(rbr: &RbrProgram) -> RbrProgram {
    let mut out = rbr.clone();
    let mut fresh = rbr.next_fresh;
    for r in out.rules.values_mut() {
        let mut body = Vec::with_capacity(r.body.len());
        for st in std::mem::take(&mut r.body) {
            let unknown_write = matches!(&st, Stmt::Nop { mem, .. }
                if mem.iter().any(|m| m.writes && (m.start == Addr::Unknown
                    || (m.len == Addr::Unknown))));
            body.push(st);
            if unknown_write {
                for a in &rbr.locals {
                    fresh += 1;
                    body.push(Stmt::Assign(Var::Local(*a), Expr::Fresh(fresh)));
                }
            }
        }
        r.body = body;
    }
    out.next_fresh = fresh;
    out.rules = with_full_params(out.rules);
    out
}

/// The short/long byte-array length decoding sequence.
const LENGTH_PATTERN: [(Opcode, Option<u64>); 12] = [
    (Opcode::Push(1), Some(1)),
    (Opcode::Dup(2), None),
    (Opcode::Push(1), Some(1)),
    (Opcode::And, None),
    (Opcode::Iszero, None),
    (Opcode::Push(2), Some(0x100)),
    (Opcode::Mul, None),
    (Opcode::Sub, None),
    (Opcode::And, None),
    (Opcode::Push(1), Some(2)),
    (Opcode::Swap(1), None),
    (Opcode::Div, None),
];

/// Drops the assignments of each length-decoding sequence so the stack
/// slot keeps the storage word it was applied to. Nops stay.
pub fn rewrite_length_pattern(rbr: &RbrProgram) -> RbrProgram {
    let mut out = rbr.clone();
    for r in out.rules.values_mut() {
        let nop_idx: Vec<usize> =
            r.body.iter().enumerate().filter(|(_, s)| matches!(s, Stmt::Nop { .. })).map(|(i, _)| i).collect();
        let mut drop = BTreeSet::new();
        let mut k = 0;
        while k + LENGTH_PATTERN.len() <= nop_idx.len() {
            let matched = LENGTH_PATTERN.iter().enumerate().all(|(j, (op, c))| match &r.body[nop_idx[k + j]] {
                Stmt::Nop { opcode, immediate, .. } => {
                    opcode == op && c.map_or(true, |c| *immediate == Some(U256::from(c)))
                }
                _ => false,
            });
            if matched {
                let from = nop_idx[k];
                let to = nop_idx.get(k + LENGTH_PATTERN.len()).copied().unwrap_or(r.body.len());
                drop.extend((from..to).filter(|i| matches!(r.body[*i], Stmt::Assign(..))));
                k += LENGTH_PATTERN.len();
            } else {
                k += 1;
            }
        }
        if !drop.is_empty() {
            r.body = r.body.iter().enumerate().filter(|(i, _)| !drop.contains(i)).map(|(_, s)| s.clone()).collect();
        }
    }
    out
}

/// Keeps, for each rule, the stack slice plus the variables the rule or
/// anything it can reach actually reads.
pub fn slim_parameters(rbr: &RbrProgram) -> RbrProgram {
    let mut exposed: BTreeMap<String, BTreeSet<Var>> = BTreeMap::new();
    let mut defined: BTreeMap<String, BTreeSet<Var>> = BTreeMap::new();
    for r in rbr.rules.values() {
        let mut def = BTreeSet::new();
        let mut exp: BTreeSet<Var> = r.stack_params().collect();
        for st in &r.body {
            for v in st.reads() {
                if !def.contains(v) {
                    exp.insert(v.clone());
                }
            }
            if let Stmt::Assign(v, _) = st {
                def.insert(v.clone());
            }
        }
        for c in &r.conts {
            for v in c.guard.vars() {
                if !def.contains(v) {
                    exp.insert(v.clone());
                }
            }
        }
        exposed.insert(r.name.clone(), exp);
        defined.insert(r.name.clone(), def);
    }
    let mut need = exposed.clone();
    loop {
        let mut changed = false;
        for r in rbr.rules.values() {
            let mut add = Vec::new();
            for c in &r.conts {
                if let Some(callee) = need.get(&c.callee) {
                    for v in callee {
                        if !defined[&r.name].contains(v) && !need[&r.name].contains(v) {
                            add.push(v.clone());
                        }
                    }
                }
            }
            if !add.is_empty() {
                changed = true;
                need.get_mut(&r.name).unwrap().extend(add);
            }
        }
        if !changed {
            break;
        }
    }
    let mut out = rbr.clone();
    for r in out.rules.values_mut() {
        let n = &need[&r.name];
        let mut params: Vec<Var> = r.stack_params().collect();
        params.extend(n.iter().filter(|v| !v.is_stack()).cloned());
        // stack slots above the entry height cannot be inputs
        r.params = params;
    }
    out
}

/// The full pipeline: translate, clone, rewrite, forget, slim.
pub fn build_rbr(cfg: &Cfg) -> RbrProgram {
    let rbr = translate(cfg);
    let rbr = clone_internal_calls(&rbr, cfg);
    let rbr = rewrite_length_pattern(&rbr);
    let rbr = forget_unknown_memory(&rbr);
    slim_parameters(&rbr)
}

/// Concrete evaluation of an assignment right-hand side, for testing.
pub fn eval_expr(e: &Expr, val: &dyn Fn(&Var) -> U256) -> Option<U256> {
    match e {
        Expr::Const(c) => Some(*c),
        Expr::Var(v) => Some(val(v)),
        Expr::Op(op, args) => {
            let vs: Vec<U256> = args.iter().map(val).collect();
            eval_pure(*op, &vs)
        }
        Expr::Fresh(_) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::evm::{assemble, decode};

    fn rbr_of(src: &str) -> (Cfg, RbrProgram) {
        let cfg = build_cfg(&decode(&assemble(src).unwrap()));
        let rbr = build_rbr(&cfg);
        (cfg, rbr)
    }

    #[test]
    fn push_mstore_rule() {
        let (_, rbr) = rbr_of("PUSH1 5\nPUSH1 0\nMSTORE\nSTOP");
        let r = &rbr.rules["block0"];
        let text: Vec<String> = r.body.iter().map(|s| s.to_string()).collect();
        assert_eq!(
            text,
            vec!["nop(PUSH1)", "s_0 = 5", "nop(PUSH1)", "s_1 = 0", "nop(MSTORE)", "l_0 = s_0", "nop(STOP)"]
        );
    }

    #[test]
    fn gt_iszero_guards() {
        let (_, rbr) = rbr_of("PUSH1 0\nSLOAD\nPUSH1 1\nGT\nISZERO\nPUSH1 0x0b\nJUMPI\nSTOP\nJUMPDEST\nSTOP");
        let b = &rbr.rules["block0"];
        assert_eq!(b.conts, vec![Continuation { guard: Guard::True, callee: "jump0".into() }]);
        let j = &rbr.rules["jump0"];
        let gs: Vec<String> = j.conts.iter().map(|c| format!("{} -> {}", c.guard, c.callee)).collect();
        assert_eq!(gs, vec!["s_1 <= s_0 -> block11", "s_1 > s_0 -> block10"]);
        let tail: Vec<String> = b.body.iter().rev().take(4).map(|s| s.to_string()).collect();
        assert_eq!(tail, vec!["nop(JUMPI)", "nop(PUSH1)", "nop(ISZERO)", "nop(GT)"]);
    }

    #[test]
    fn lone_jumpdest() {
        let (_, rbr) = rbr_of("PUSH1 3\nJUMP\nJUMPDEST\nJUMPDEST\nSTOP");
        let r = &rbr.rules["block3"];
        assert_eq!(r.body.len(), 1);
        assert_eq!(r.conts.len(), 1);
    }

    #[test]
    fn storage_is_state_var() {
        let (_, rbr) = rbr_of("PUSH1 3\nSLOAD\nPUSH1 1\nADD\nPUSH1 3\nSSTORE\nSTOP");
        let r = &rbr.rules["block0"];
        assert!(r.body.contains(&Stmt::Assign(Var::Stack(0), Expr::Var(Var::State(3.into())))));
        assert!(r.body.contains(&Stmt::Assign(Var::State(3.into()), Expr::Var(Var::Stack(0)))));
        assert_eq!(r.params, vec![Var::State(3.into())]);
    }

    #[test]
    fn well_scoped_and_nops_conserved() {
        let (cfg, rbr) = rbr_of(
            "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP",
        );
        rbr.check_well_scoped().unwrap();
        let mut expected = BTreeMap::new();
        for b in cfg.blocks.values() {
            for i in &b.instructions {
                *expected.entry(i.opcode.mnemonic()).or_insert(0) += 1;
            }
        }
        assert_eq!(rbr.nop_multiset(), expected);
    }

    #[test]
    fn unknown_store_forgets_locals() {
        let (_, rbr) = rbr_of("PUSH1 1\nPUSH1 0\nMSTORE\nPUSH1 2\nPUSH1 0x20\nMSTORE\nPUSH1 3\nPUSH1 0\nCALLDATALOAD\nMSTORE\nPUSH1 0\nMLOAD\nSTOP");
        let r = &rbr.rules["block0"];
        let text: Vec<String> = r.body.iter().map(|s| s.to_string()).collect();
        let at = text.iter().rposition(|t| t == "nop(MSTORE)").unwrap();
        assert!(text[at + 1].starts_with("l_0 = fresh_"));
        assert!(text[at + 2].starts_with("l_32 = fresh_"));
    }

    #[test]
    fn length_pattern_dropped() {
        let src = "PUSH1 0\nSLOAD\nPUSH1 1\nDUP2\nPUSH1 1\nAND\nISZERO\nPUSH2 0x100\nMUL\nSUB\nAND\nPUSH1 2\nSWAP1\nDIV\nSTOP";
        let (_, rbr) = rbr_of(src);
        let r = &rbr.rules["block0"];
        let assigns: Vec<String> =
            r.body.iter().filter(|s| matches!(s, Stmt::Assign(..))).map(|s| s.to_string()).collect();
        assert_eq!(assigns, vec!["s_0 = 0", "s_0 = g_0"]);
        assert_eq!(r.nops().count(), 15);
        // a shuffled copy is left alone
        let shuffled = "PUSH1 0\nSLOAD\nDUP2\nPUSH1 1\nPUSH1 1\nAND\nISZERO\nPUSH2 0x100\nMUL\nSUB\nAND\nPUSH1 2\nSWAP1\nDIV\nSTOP";
        let cfg = build_cfg(&decode(&assemble(&format!("PUSH1 0\n{shuffled}")).unwrap()));
        let rbr = rewrite_length_pattern(&translate(&cfg));
        assert!(rbr.rules["block0"].body.iter().filter(|s| matches!(s, Stmt::Assign(..))).count() > 2);
    }

    #[test]
    fn internal_calls_cloned() {
        let src = "\
            PUSH1 0x08\nPUSH1 0x10\nJUMP\nINVALID\nINVALID\nINVALID\n\
            JUMPDEST\nPUSH1 0x0e\nPUSH1 0x10\nJUMP\n\
            JUMPDEST\nSTOP\n\
            JUMPDEST\nPUSH1 1\nPOP\nJUMP";
        let (_, rbr) = rbr_of(src);
        let a = &rbr.rules["block16_0"];
        let b = &rbr.rules["block16_1"];
        assert_eq!(a.conts.len(), 1);
        assert_eq!(b.conts.len(), 1);
        let mut callees = vec![a.conts[0].callee.clone(), b.conts[0].callee.clone()];
        callees.sort();
        assert_eq!(callees, vec!["block14", "block8"]);
        rbr.check_well_scoped().unwrap();
    }
}
