//! Cost relation systems: one equation per rule clause, costing the
//! rule's nops and calling the continuations under their size
//! constraints. A second flavor bounds the highest memory word touched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};

use crate::bound::BoundExpr;
use crate::gas::{memory_ranges, GasSchedule, MemLen, Operand};
use crate::linear::{LinExpr, LinearConstraint, Rat, Rel};
use crate::rbr::RbrProgram;
use crate::size::{SizeExpr, SizeRelation, SizeVar};

/// A variable of an equation; `primed` marks the value passed to a call.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CVar {
    pub name: String,
    pub primed: bool,
}

impl CVar {
    pub fn new(name: impl Into<String>) -> Self {
        CVar { name: name.into(), primed: false }
    }

    pub fn primed(name: impl Into<String>) -> Self {
        CVar { name: name.into(), primed: true }
    }
}

impl fmt::Display for CVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.primed {
            write!(f, "{}'", self.name)
        } else {
            f.write_str(&self.name)
        }
    }
}

pub type CExpr = LinExpr<CVar>;
pub type CConstraint = LinearConstraint<CVar>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Call {
    pub callee: String,
    /// One argument per callee parameter, in order.
    pub args: Vec<CExpr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEquation {
    pub head: String,
    pub params: Vec<String>,
    pub cost: BoundExpr<CVar>,
    pub calls: Vec<Call>,
    pub constraints: Vec<CConstraint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Flavor {
    Opcode,
    Memory,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::Opcode => "opcode",
            Flavor::Memory => "memory",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRelationSystem {
    pub flavor: Flavor,
    pub entry: String,
    pub equations: Vec<CostEquation>,
}

impl CostRelationSystem {
    pub fn heads(&self) -> BTreeSet<&str> {
        self.equations.iter().map(|e| e.head.as_str()).collect()
    }

    pub fn params_of(&self, head: &str) -> Option<&[String]> {
        self.equations.iter().find(|e| e.head == head).map(|e| e.params.as_slice())
    }

    /// Equations reachable from the entry, with the entry replaced.
    pub fn restrict(&self, entry: &str) -> CostRelationSystem {
        let mut seen = BTreeSet::new();
        let mut stack = vec![entry.to_string()];
        while let Some(h) = stack.pop() {
            if seen.insert(h.clone()) {
                for e in self.equations.iter().filter(|e| e.head == h) {
                    stack.extend(e.calls.iter().map(|c| c.callee.clone()));
                }
            }
        }
        CostRelationSystem {
            flavor: self.flavor,
            entry: entry.to_string(),
            equations: self.equations.iter().filter(|e| seen.contains(&e.head)).cloned().collect(),
        }
    }

    pub fn check(&self) -> Result<(), String> {
        let heads = self.heads();
        if !heads.contains(self.entry.as_str()) {
            return Err(format!("no equation for entry {}", self.entry));
        }
        for e in &self.equations {
            for c in &e.calls {
                let params = self.params_of(&c.callee).ok_or_else(|| format!("{}: unknown callee {}", e.head, c.callee))?;
                if params.len() != c.args.len() {
                    return Err(format!("{}: {} takes {} arguments", e.head, c.callee, params.len()));
                }
            }
        }
        Ok(())
    }
}

fn cvar(v: &SizeVar) -> CVar {
    match v {
        SizeVar::Cur(v) => CVar::new(v.to_string()),
        SizeVar::Next(v) => CVar::primed(v.to_string()),
        SizeVar::Fresh(k) => CVar::new(format!("f_{k}")),
    }
}

fn cexpr(e: &SizeExpr) -> CExpr {
    e.map_vars(cvar)
}

fn operand(e: &SizeExpr) -> Operand<CVar> {
    match e.as_constant() {
        Some(c) if c.is_integer() && !c.is_negative() => {
            let n = c.to_integer();
            match n.to_biguint() {
                Some(b) if b.bits() <= 256 => Operand::Const(crate::evm::from_big(&b)),
                _ => Operand::Unknown,
            }
        }
        _ => Operand::Linear(cexpr(e)),
    }
}

fn calls_and_constraints(rel: &SizeRelation, rbr: &RbrProgram) -> Vec<(Call, Vec<CConstraint>)> {
    rel.conts
        .iter()
        .map(|c| {
            let params = rbr.rules.get(&c.callee).map(|r| r.params.clone()).unwrap_or_default();
            let args = params.iter().map(|p| LinExpr::var(CVar::primed(p.to_string()))).collect();
            let mut cs: Vec<CConstraint> = c.constraints().iter().map(|k| k.map_vars(cvar)).collect();
            cs.extend(rel.side.iter().map(|k| k.map_vars(cvar)));
            (Call { callee: c.callee.clone(), args }, cs)
        })
        .collect()
}

fn param_names(rel: &SizeRelation) -> Vec<String> {
    rel.params.iter().map(|p| p.to_string()).collect()
}

/// Gas of one rule: the sum over its nops.
pub fn rule_cost(rel: &SizeRelation, schedule: &GasSchedule) -> BoundExpr<CVar> {
    let items =
        rel.nops.iter().map(|n| schedule.opcode_cost_upper(n.opcode, &n.operands.iter().map(operand).collect::<Vec<_>>()));
    BoundExpr::sum(items.collect()).simplify()
}

pub fn generate_opcode_crs(
    rbr: &RbrProgram,
    sizes: &BTreeMap<String, SizeRelation>,
    schedule: &GasSchedule,
) -> CostRelationSystem {
    let mut equations = Vec::new();
    for r in rbr.ordered() {
        let rel = &sizes[&r.name];
        let cost = rule_cost(rel, schedule);
        let params = param_names(rel);
        let conts = calls_and_constraints(rel, rbr);
        if conts.is_empty() {
            equations.push(CostEquation {
                head: r.name.clone(),
                params,
                cost,
                calls: Vec::new(),
                constraints: rel.side.iter().map(|k| k.map_vars(cvar)).collect(),
            });
        } else {
            for (call, constraints) in conts {
                equations.push(CostEquation {
                    head: r.name.clone(),
                    params: params.clone(),
                    cost: cost.clone(),
                    calls: vec![call],
                    constraints,
                });
            }
        }
    }
    let entry = rbr.entries.first().map(|e| e.rule.clone()).unwrap_or_else(|| "block0".into());
    CostRelationSystem { flavor: Flavor::Opcode, entry, equations }
}

/// Candidate extents, in words, of the memory ranges a rule touches.
pub fn memory_extents(rel: &SizeRelation) -> Vec<BoundExpr<CVar>> {
    let mut out = Vec::new();
    for n in &rel.nops {
        for r in memory_ranges(n.opcode) {
            let (Some(off), len) = (n.operands.get(r.offset), r.len) else {
                out.push(BoundExpr::Unknown);
                continue;
            };
            let len = match len {
                MemLen::Fixed(k) => LinExpr::int(k as i64),
                MemLen::Operand(i) => match n.operands.get(i) {
                    Some(l) => l.clone(),
                    None => {
                        out.push(BoundExpr::Unknown);
                        continue;
                    }
                },
            };
            if len.as_constant().is_some_and(|c| c.is_zero()) {
                continue;
            }
            // a huge constant offset or length would never be paid for
            let end = off.add(&len);
            if end.as_constant().is_some_and(|c| c > &Rat::from_integer(BigInt::one() << 64)) {
                out.push(BoundExpr::Unknown);
                continue;
            }
            let words = BoundExpr::Nat(cexpr(&end.add_const(&Rat::from_integer(31.into())))).floor_div(32);
            out.push(words.simplify());
        }
    }
    out
}

/// Highest word touched. Each candidate extent becomes a halting
/// equation of its own, and each continuation a zero-cost one, so the
/// solver's maximum over equations covers every access on every path.
pub fn generate_memory_crs(rbr: &RbrProgram, sizes: &BTreeMap<String, SizeRelation>) -> CostRelationSystem {
    let mut equations = Vec::new();
    for r in rbr.ordered() {
        let rel = &sizes[&r.name];
        let params = param_names(rel);
        let side: Vec<CConstraint> = rel.side.iter().map(|k| k.map_vars(cvar)).collect();
        let extents = memory_extents(rel);
        let conts = calls_and_constraints(rel, rbr);
        for e in &extents {
            equations.push(CostEquation {
                head: r.name.clone(),
                params: params.clone(),
                cost: e.clone(),
                calls: Vec::new(),
                constraints: side.clone(),
            });
        }
        for (call, constraints) in conts.iter().cloned() {
            equations.push(CostEquation {
                head: r.name.clone(),
                params: params.clone(),
                cost: BoundExpr::zero(),
                calls: vec![call],
                constraints,
            });
        }
        if extents.is_empty() && conts.is_empty() {
            equations.push(CostEquation {
                head: r.name.clone(),
                params,
                cost: BoundExpr::zero(),
                calls: Vec::new(),
                constraints: side,
            });
        }
    }
    let entry = rbr.entries.first().map(|e| e.rule.clone()).unwrap_or_else(|| "block0".into());
    CostRelationSystem { flavor: Flavor::Memory, entry, equations }
}

impl fmt::Display for CostEquation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}({}) = {}", self.head, self.params.join(", "), self.cost)?;
        for c in &self.calls {
            let args: Vec<String> = c.args.iter().map(|a| a.to_string()).collect();
            write!(f, " + {}({})", c.callee, args.join(", "))?;
        }
        let cs: Vec<String> = self.constraints.iter().map(|c| c.to_string()).collect();
        write!(f, " {{{}}}", cs.join(", "))
    }
}

impl fmt::Display for CostRelationSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "flavor {}", self.flavor)?;
        writeln!(f, "entry {}", self.entry)?;
        for e in &self.equations {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String, bool),
    Num(BigInt),
    Sym(&'static str),
}

fn tokenize(s: &str) -> Result<Vec<Tok>, String> {
    let cs: Vec<char> = s.chars().collect();
    let mut i = 0;
    let mut out = Vec::new();
    while i < cs.len() {
        let c = cs[i];
        if c.is_whitespace() {
            i += 1;
        } else if c.is_ascii_alphabetic() || c == '_' {
            let st = i;
            while i < cs.len() && (cs[i].is_ascii_alphanumeric() || cs[i] == '_') {
                i += 1;
            }
            let name: String = cs[st..i].iter().collect();
            let primed = i < cs.len() && cs[i] == '\'';
            if primed {
                i += 1;
            }
            out.push(Tok::Ident(name, primed));
        } else if c.is_ascii_digit() {
            let st = i;
            while i < cs.len() && cs[i].is_ascii_digit() {
                i += 1;
            }
            let text: String = cs[st..i].iter().collect();
            out.push(Tok::Num(text.parse().map_err(|_| format!("bad number {text}"))?));
        } else {
            let two: String = cs[i..(i + 2).min(cs.len())].iter().collect();
            let sym = match two.as_str() {
                "<=" => Some("<="),
                ">=" => Some(">="),
                "==" => Some("="),
                _ => None,
            };
            if let Some(s) = sym {
                out.push(Tok::Sym(s));
                i += 2;
                continue;
            }
            let s = match c {
                '+' => "+",
                '-' => "-",
                '*' => "*",
                '/' => "/",
                '(' => "(",
                ')' => ")",
                ',' => ",",
                '{' => "{",
                '}' => "}",
                '=' => "=",
                '<' => "<",
                '>' => ">",
                _ => return Err(format!("unexpected character `{c}`")),
            };
            out.push(Tok::Sym(s));
            i += 1;
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_sym(&self, s: &str) -> bool {
        matches!(self.peek(), Some(Tok::Sym(t)) if *t == s)
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.peek_sym(s) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), String> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(format!("expected `{s}` at token {}", self.pos))
        }
    }

    fn ident(&mut self) -> Result<(String, bool), String> {
        match self.peek().cloned() {
            Some(Tok::Ident(n, p)) => {
                self.pos += 1;
                Ok((n, p))
            }
            other => Err(format!("expected a name, found {other:?}")),
        }
    }

    fn num(&mut self) -> Result<BigInt, String> {
        match self.peek().cloned() {
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Ok(n)
            }
            other => Err(format!("expected a number, found {other:?}")),
        }
    }

    /// `int` or `int/int`.
    fn rational(&mut self) -> Result<Rat, String> {
        let n = self.num()?;
        if self.peek_sym("/") && matches!(self.toks.get(self.pos + 1), Some(Tok::Num(_))) {
            self.pos += 1;
            let d = self.num()?;
            if d.is_zero() {
                return Err("zero denominator".into());
            }
            return Ok(Rat::new(n, d));
        }
        Ok(Rat::from_integer(n))
    }

    fn lin_term(&mut self) -> Result<CExpr, String> {
        match self.peek() {
            Some(Tok::Num(_)) => {
                let c = self.rational()?;
                if self.eat("*") {
                    let (n, p) = self.ident()?;
                    let mut e = LinExpr::zero();
                    e.add_term(CVar { name: n, primed: p }, c);
                    Ok(e)
                } else {
                    Ok(LinExpr::constant(c))
                }
            }
            Some(Tok::Ident(..)) => {
                let (n, p) = self.ident()?;
                Ok(LinExpr::var(CVar { name: n, primed: p }))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                let e = self.lin()?;
                self.expect(")")?;
                Ok(e)
            }
            other => Err(format!("expected a linear term, found {other:?}")),
        }
    }

    fn lin(&mut self) -> Result<CExpr, String> {
        let neg = self.eat("-");
        let mut e = self.lin_term()?;
        if neg {
            e = e.scale(&-Rat::one());
        }
        loop {
            if self.eat("+") {
                e = e.add(&self.lin_term()?);
            } else if self.eat("-") {
                e = e.sub(&self.lin_term()?);
            } else {
                return Ok(e);
            }
        }
    }

    fn constraint(&mut self) -> Result<CConstraint, String> {
        let lhs = self.lin()?;
        let rel = match self.peek() {
            Some(Tok::Sym(s)) => Rel::parse(s).ok_or_else(|| format!("expected a relation, found `{s}`"))?,
            other => return Err(format!("expected a relation, found {other:?}")),
        };
        self.pos += 1;
        let rhs = self.lin()?;
        Ok(LinearConstraint::new(lhs, rel, rhs))
    }

    fn bound_atom(&mut self) -> Result<BoundExpr<CVar>, String> {
        match self.peek().cloned() {
            Some(Tok::Num(_)) => {
                let n = self.num()?;
                Ok(BoundExpr::Const(Rat::from_integer(n)))
            }
            Some(Tok::Sym("(")) => {
                self.pos += 1;
                if matches!(self.peek(), Some(Tok::Num(_)))
                    && self.toks.get(self.pos + 1) == Some(&Tok::Sym("/"))
                    && self.toks.get(self.pos + 3) == Some(&Tok::Sym(")"))
                {
                    let r = self.rational()?;
                    self.expect(")")?;
                    return Ok(BoundExpr::Const(r));
                }
                let e = self.bound()?;
                self.expect(")")?;
                Ok(e)
            }
            Some(Tok::Ident(name, false)) => {
                self.pos += 1;
                match name.as_str() {
                    "unknown" => Ok(BoundExpr::Unknown),
                    "nat" => {
                        self.expect("(")?;
                        let l = self.lin()?;
                        self.expect(")")?;
                        Ok(BoundExpr::Nat(l))
                    }
                    "max" => {
                        self.expect("(")?;
                        let mut xs = vec![self.bound()?];
                        while self.eat(",") {
                            xs.push(self.bound()?);
                        }
                        self.expect(")")?;
                        Ok(BoundExpr::Max(xs))
                    }
                    "floor" => {
                        self.expect("(")?;
                        if matches!(self.peek(), Some(Tok::Ident(n, false)) if n == "log256") {
                            self.pos += 1;
                            self.expect("(")?;
                            let e = self.bound()?;
                            self.expect(")")?;
                            self.expect(")")?;
                            return Ok(BoundExpr::Log256(Box::new(e)));
                        }
                        let e = self.bound_product()?;
                        self.expect("/")?;
                        let k = self.num()?;
                        self.expect(")")?;
                        if k.is_zero() {
                            return Err("floor division by zero".into());
                        }
                        Ok(BoundExpr::FloorDiv(Box::new(e), k))
                    }
                    other => Err(format!("unexpected `{other}` in a cost expression")),
                }
            }
            other => Err(format!("expected a cost expression, found {other:?}")),
        }
    }

    fn bound_product(&mut self) -> Result<BoundExpr<CVar>, String> {
        let mut xs = vec![self.bound_atom()?];
        while self.eat("*") {
            xs.push(self.bound_atom()?);
        }
        Ok(if xs.len() == 1 { xs.pop().unwrap() } else { BoundExpr::Mul(xs) })
    }

    fn is_call_start(&self) -> bool {
        matches!(self.peek(), Some(Tok::Ident(n, false)) if !matches!(n.as_str(), "nat" | "max" | "floor" | "unknown"))
            && self.toks.get(self.pos + 1) == Some(&Tok::Sym("("))
    }

    fn bound(&mut self) -> Result<BoundExpr<CVar>, String> {
        let mut xs = vec![self.bound_product()?];
        while self.peek_sym("+") && !self.call_follows_plus() {
            self.pos += 1;
            xs.push(self.bound_product()?);
        }
        Ok(if xs.len() == 1 { xs.pop().unwrap() } else { BoundExpr::Add(xs) })
    }

    fn call_follows_plus(&self) -> bool {
        matches!(self.toks.get(self.pos + 1), Some(Tok::Ident(n, false)) if !matches!(n.as_str(), "nat" | "max" | "floor" | "unknown"))
            && self.toks.get(self.pos + 2) == Some(&Tok::Sym("("))
    }

    fn call(&mut self) -> Result<Call, String> {
        let (callee, _) = self.ident()?;
        self.expect("(")?;
        let mut args = Vec::new();
        if !self.eat(")") {
            args.push(self.lin()?);
            while self.eat(",") {
                args.push(self.lin()?);
            }
            self.expect(")")?;
        }
        Ok(Call { callee, args })
    }

    fn equation(&mut self) -> Result<CostEquation, String> {
        let (head, _) = self.ident()?;
        self.expect("(")?;
        let mut params = Vec::new();
        if !self.eat(")") {
            loop {
                let (p, primed) = self.ident()?;
                if primed {
                    return Err(format!("parameter {p}' of {head} is primed"));
                }
                params.push(p);
                if self.eat(")") {
                    break;
                }
                self.expect(",")?;
            }
        }
        self.expect("=")?;
        let cost = if self.is_call_start() { BoundExpr::zero() } else { self.bound()? };
        let mut calls = Vec::new();
        if self.is_call_start() {
            calls.push(self.call()?);
        }
        while self.eat("+") {
            if !self.is_call_start() {
                return Err("expected a call after `+`".into());
            }
            calls.push(self.call()?);
        }
        let mut constraints = Vec::new();
        if self.eat("{") {
            if !self.eat("}") {
                constraints.push(self.constraint()?);
                while self.eat(",") {
                    constraints.push(self.constraint()?);
                }
                self.expect("}")?;
            }
        }
        if self.pos != self.toks.len() {
            return Err(format!("trailing input at token {}", self.pos));
        }
        Ok(CostEquation { head, params, cost, calls, constraints })
    }
}

/// Parses the line-oriented format written by `Display`. Lines are
/// `flavor opcode|memory`, `entry NAME` or equations
/// `HEAD(params) = COST + callee(args) ... {constraints}`; `#` starts a
/// comment. Without an `entry` line the first head is the entry.
pub fn parse_crs(text: &str) -> Result<CostRelationSystem, ParseError> {
    let mut flavor = Flavor::Opcode;
    let mut entry = None;
    let mut equations = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let err = |message: String| ParseError { line: i + 1, message };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("flavor ") {
            flavor = match rest.trim() {
                "opcode" => Flavor::Opcode,
                "memory" => Flavor::Memory,
                other => return Err(err(format!("unknown flavor `{other}`"))),
            };
            continue;
        }
        if let Some(rest) = line.strip_prefix("entry ") {
            entry = Some(rest.trim().to_string());
            continue;
        }
        let toks = tokenize(line).map_err(err)?;
        let mut p = Parser { toks, pos: 0 };
        equations.push(p.equation().map_err(err)?);
    }
    let entry = entry
        .or_else(|| equations.first().map(|e| e.head.clone()))
        .ok_or(ParseError { line: 0, message: "no equations".into() })?;
    let crs = CostRelationSystem { flavor, entry, equations };
    crs.check().map_err(|m| ParseError { line: 0, message: m })?;
    Ok(crs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::evm::{assemble, decode};
    use crate::rbr::build_rbr;
    use crate::size::analyze;

    fn crs_of(src: &str) -> (CostRelationSystem, CostRelationSystem) {
        let rbr = build_rbr(&build_cfg(&decode(&assemble(src).unwrap())));
        let sizes = analyze(&rbr);
        (generate_opcode_crs(&rbr, &sizes, &GasSchedule::byzantium()), generate_memory_crs(&rbr, &sizes))
    }

    #[test]
    fn straight_line_cost() {
        let (op, _) = crs_of("PUSH1 1\nPUSH1 2\nADD");
        assert_eq!(op.equations.len(), 1);
        assert_eq!(op.equations[0].cost, BoundExpr::int(9));
        assert!(op.equations[0].calls.is_empty());
    }

    #[test]
    fn sha3_two_words() {
        let (op, mem) = crs_of("PUSH1 0x40\nPUSH1 0\nSHA3\nSTOP");
        assert_eq!(op.equations[0].cost, BoundExpr::int(3 + 3 + 30 + 6 * 2));
        assert_eq!(mem.equations[0].cost, BoundExpr::int(2));
    }

    #[test]
    fn loop_body_equation() {
        let (op, _) = crs_of(
            "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP",
        );
        let body = op.equations.iter().find(|e| e.head == "block13").unwrap();
        assert_eq!(body.cost, BoundExpr::int(3 + 3 + 3 + 8));
        let s = body.to_string();
        assert!(s.contains("+ block5(s_0', s_1')"), "{s}");
        assert!(s.contains("s_1' = s_1 + 1"), "{s}");
        let jumps: Vec<_> = op.equations.iter().filter(|e| e.head == "jump5").collect();
        assert_eq!(jumps.len(), 2);
    }

    #[test]
    fn no_memory_no_extent() {
        let (_, mem) = crs_of("PUSH1 1\nPOP\nSTOP");
        assert_eq!(mem.equations.len(), 1);
        assert!(mem.equations[0].cost.is_zero());
    }

    #[test]
    fn round_trip() {
        let (op, mem) = crs_of(
            "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nDUP1\nMSTORE\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP",
        );
        for crs in [op, mem] {
            let parsed = parse_crs(&crs.to_string()).unwrap();
            assert_eq!(parsed.to_string(), crs.to_string());
        }
    }

    #[test]
    fn parse_handwritten() {
        let crs = parse_crs(
            "# countdown\nf(x) = 2 {x <= 0}\nf(x) = 5 + f(x') {x' = x - 1, x >= 1}\ng(a, b) = 3*nat(a - b) + floor((nat(a) + 1)/32) + max(1, nat(b)) + floor(log256(nat(a)))",
        )
        .unwrap();
        assert_eq!(crs.entry, "f");
        assert_eq!(crs.equations.len(), 3);
        assert_eq!(crs.equations[1].calls[0].args[0].to_string(), "x'");
        assert!(parse_crs("f(x) = 1 + g(x)").is_err());
        assert!(parse_crs("f(x) = 1 {x ? 2}").is_err());
    }
}
