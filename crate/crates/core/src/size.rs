//! Linear size relations. Each rule is walked forward keeping, for every
//! variable, a linear expression over the rule's parameters. Operations
//! without a linear meaning produce fresh, unconstrained variables.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::{BigInt, Sign};
use num_traits::Zero;
use primitive_types::U256;

use crate::evm::{u256_to_bytes, Opcode};
use crate::linear::{LinExpr, LinearConstraint, Rat, Rel};
use crate::rbr::{Expr, Guard, RbrProgram, Rule, Stmt, Var};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeVar {
    /// Parameter value on rule entry.
    Cur(Var),
    /// Argument value passed to a continuation.
    Next(Var),
    Fresh(u32),
}

impl fmt::Display for SizeVar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SizeVar::Cur(v) => write!(f, "{v}"),
            SizeVar::Next(v) => write!(f, "{v}'"),
            SizeVar::Fresh(k) => write!(f, "f_{k}"),
        }
    }
}

pub type SizeExpr = LinExpr<SizeVar>;
pub type SizeConstraint = LinearConstraint<SizeVar>;

pub fn u256_rat(v: U256) -> Rat {
    Rat::from_integer(BigInt::from_bytes_be(Sign::Plus, &u256_to_bytes(&v)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContSizes {
    pub callee: String,
    /// `Next(p) = e` for each callee parameter bound to a tracked value.
    pub bindings: Vec<(Var, SizeExpr)>,
    /// Callee parameters bound to nothing we can describe.
    pub unconstrained: Vec<Var>,
    pub guard: Vec<SizeConstraint>,
}

impl ContSizes {
    /// Bindings and guard as one constraint list.
    pub fn constraints(&self) -> Vec<SizeConstraint> {
        let mut out = self.guard.clone();
        out.extend(
            self.bindings.iter().map(|(p, e)| LinearConstraint::eq(LinExpr::var(SizeVar::Next(p.clone())), e.clone())),
        );
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NopSizes {
    pub opcode: Opcode,
    pub offset: usize,
    /// Operand expressions, top of stack first.
    pub operands: Vec<SizeExpr>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeRelation {
    pub rule: String,
    pub params: Vec<Var>,
    pub nops: Vec<NopSizes>,
    /// Constraints on fresh variables (division bounds).
    pub side: Vec<SizeConstraint>,
    pub conts: Vec<ContSizes>,
    pub fresh: u32,
}

impl fmt::Display for SizeRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params.iter().map(|p| p.to_string()).collect();
        for c in &self.conts {
            let mut cs: Vec<String> = c.constraints().iter().map(|c| c.to_string()).collect();
            cs.extend(self.side.iter().map(|c| c.to_string()));
            writeln!(f, "{}({}) -> {} {{{}}}", self.rule, params.join(", "), c.callee, cs.join(", "))?;
        }
        if self.conts.is_empty() {
            writeln!(f, "{}({}) halts", self.rule, params.join(", "))?;
        }
        Ok(())
    }
}

struct Walker {
    env: BTreeMap<Var, SizeExpr>,
    side: Vec<SizeConstraint>,
    fresh: u32,
}

impl Walker {
    fn get(&self, v: &Var) -> SizeExpr {
        self.env.get(v).cloned().unwrap_or_else(|| LinExpr::var(SizeVar::Cur(v.clone())))
    }

    fn fresh(&mut self) -> SizeExpr {
        self.fresh += 1;
        LinExpr::var(SizeVar::Fresh(self.fresh))
    }

    fn eval(&mut self, e: &Expr) -> SizeExpr {
        match e {
            Expr::Const(c) => LinExpr::constant(u256_rat(*c)),
            Expr::Var(v) => self.get(v),
            Expr::Fresh(_) => self.fresh(),
            Expr::Op(op, args) => {
                let xs: Vec<SizeExpr> = args.iter().map(|a| self.get(a)).collect();
                match (op, xs.as_slice()) {
                    (Opcode::Add, [a, b]) => a.add(b),
                    (Opcode::Sub, [a, b]) => a.sub(b),
                    (Opcode::Mul, [a, b]) => match (a.as_constant(), b.as_constant()) {
                        (Some(k), _) => b.scale(k),
                        (_, Some(k)) => a.scale(k),
                        _ => self.fresh(),
                    },
                    (Opcode::Div, [a, b]) => match b.as_constant() {
                        Some(c) if c.is_integer() && !c.is_zero() => {
                            if let Some(k) = a.as_constant() {
                                return LinExpr::constant((k / c).floor());
                            }
                            // c·f <= a <= c·f + c - 1
                            let f = self.fresh();
                            let cf = f.scale(c);
                            self.side.push(LinearConstraint::new(cf.clone(), Rel::Le, a.clone()));
                            self.side.push(LinearConstraint::new(
                                cf.add_const(&(c - Rat::from_integer(1.into()))),
                                Rel::Ge,
                                a.clone(),
                            ));
                            f
                        }
                        _ => self.fresh(),
                    },
                    _ => self.fresh(),
                }
            }
        }
    }

    fn guard(&self, g: &Guard) -> Vec<SizeConstraint> {
        let c = |a: &Var, rel, b: &Var| vec![LinearConstraint::new(self.get(a), rel, self.get(b))];
        match g {
            Guard::True => Vec::new(),
            Guard::Eq(a, b) => c(a, Rel::Eq, b),
            Guard::Lt(a, b) => c(a, Rel::Lt, b),
            Guard::Le(a, b) => c(a, Rel::Le, b),
            Guard::Gt(a, b) => c(a, Rel::Gt, b),
            Guard::Ge(a, b) => c(a, Rel::Ge, b),
            Guard::NonZero(v) => vec![LinearConstraint::new(self.get(v), Rel::Ge, LinExpr::int(1))],
            Guard::Zero(v) => vec![LinearConstraint::eq(self.get(v), LinExpr::zero())],
        }
    }
}

/// Size relation of one rule. `callee_params` gives each callee's
/// parameter list.
pub fn abstract_rule(rule: &Rule, callee_params: &dyn Fn(&str) -> Vec<Var>) -> SizeRelation {
    let mut w = Walker { env: BTreeMap::new(), side: Vec::new(), fresh: 0 };
    let mut nops = Vec::new();
    for st in &rule.body {
        match st {
            Stmt::Nop { opcode, offset, operands, .. } => nops.push(NopSizes {
                opcode: *opcode,
                offset: *offset,
                operands: operands.iter().map(|v| w.get(v)).collect(),
            }),
            Stmt::Assign(v, e) => {
                let x = w.eval(e);
                w.env.insert(v.clone(), x);
            }
        }
    }
    let conts = rule
        .conts
        .iter()
        .map(|c| {
            let mut bindings = Vec::new();
            let mut unconstrained = Vec::new();
            for p in callee_params(&c.callee) {
                let e = w.get(&p);
                if matches!(e.as_var(), Some(SizeVar::Fresh(_))) {
                    unconstrained.push(p);
                } else {
                    bindings.push((p, e));
                }
            }
            ContSizes { callee: c.callee.clone(), bindings, unconstrained, guard: w.guard(&c.guard) }
        })
        .collect();
    SizeRelation { rule: rule.name.clone(), params: rule.params.clone(), nops, side: w.side, conts, fresh: w.fresh }
}

pub fn analyze(rbr: &RbrProgram) -> BTreeMap<String, SizeRelation> {
    let params = |name: &str| rbr.rules.get(name).map(|r| r.params.clone()).unwrap_or_default();
    rbr.rules.iter().map(|(n, r)| (n.clone(), abstract_rule(r, &params))).collect()
}

pub fn dump(rbr: &RbrProgram, sizes: &BTreeMap<String, SizeRelation>) -> String {
    rbr.ordered().iter().filter_map(|r| sizes.get(&r.name)).map(|s| s.to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfg::build_cfg;
    use crate::evm::{assemble, decode};
    use crate::rbr::build_rbr;

    fn sizes_of(src: &str) -> (RbrProgram, BTreeMap<String, SizeRelation>) {
        let rbr = build_rbr(&build_cfg(&decode(&assemble(src).unwrap())));
        let s = analyze(&rbr);
        (rbr, s)
    }

    const COUNTER: &str =
        "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP";

    #[test]
    fn increment_binding() {
        let (_, s) = sizes_of(COUNTER);
        let body = &s["block13"];
        let c = &body.conts[0];
        assert_eq!(c.callee, "block5");
        let b1: Vec<String> = c.bindings.iter().map(|(p, e)| format!("{p}' = {e}")).collect();
        assert!(b1.contains(&"s_1' = s_1 + 1".to_string()), "{b1:?}");
        assert!(b1.contains(&"s_0' = s_0".to_string()));
    }

    #[test]
    fn loop_guards_complement() {
        let (_, s) = sizes_of(COUNTER);
        let j = &s["jump5"];
        let gs: Vec<String> = j.conts.iter().map(|c| c.guard.iter().map(|g| g.to_string()).collect()).collect();
        assert_eq!(gs, vec!["s_3 >= s_2", "s_3 < s_2"]);
    }

    #[test]
    fn sload_binds_state() {
        let (_, s) = sizes_of(COUNTER);
        let e = &s["block0"];
        let b: Vec<String> = e.conts[0].bindings.iter().map(|(p, e)| format!("{p}' = {e}")).collect();
        assert!(b.contains(&"s_0' = g_0".to_string()), "{b:?}");
    }

    #[test]
    fn bitwise_is_unconstrained() {
        let (_, s) = sizes_of("PUSH1 0\nSLOAD\nPUSH1 3\nAND\nPUSH1 9\nJUMP\nJUMPDEST\nSTOP");
        assert_eq!(s["block0"].conts[0].unconstrained, vec![Var::Stack(0)]);
    }

    #[test]
    fn division_is_bracketed() {
        let (_, s) = sizes_of("PUSH1 0\nSLOAD\nPUSH1 2\nSWAP1\nDIV\nPUSH1 0x0a\nJUMP\nJUMPDEST\nSTOP");
        let r = &s["block0"];
        let side: Vec<String> = r.side.iter().map(|c| c.to_string()).collect();
        assert_eq!(side, vec!["2*f_1 <= g_0", "2*f_1 + 1 >= g_0"]);
    }

    #[test]
    fn nops_do_not_matter() {
        let (rbr, s) = sizes_of(COUNTER);
        let params = |name: &str| rbr.rules[name].params.clone();
        for r in rbr.rules.values() {
            let mut stripped = r.clone();
            stripped.body.retain(|st| matches!(st, Stmt::Assign(..)));
            let a = abstract_rule(&stripped, &params);
            assert_eq!(a.conts, s[&r.name].conts);
            assert_eq!(a.side, s[&r.name].side);
        }
    }
}
