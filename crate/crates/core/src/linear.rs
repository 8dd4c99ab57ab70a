//! Exact rational linear expressions, constraints and Fourier–Motzkin
//! projection.
//!
//! All variables are integer-valued and non-negative in the analyses that
//! use this module; [`System::project`] exploits integrality when it
//! tightens constraints (`e > 0` becomes `e >= 1`, coefficients are
//! divided by their gcd and the constant rounded down).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

pub type Rat = BigRational;

pub fn rat(n: i64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

/// `constant + Σ coeff·var`; zero coefficients are never stored.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinExpr<V: Ord> {
    pub constant: Rat,
    pub terms: BTreeMap<V, Rat>,
}

impl<V: Ord + Clone> LinExpr<V> {
    pub fn zero() -> Self {
        LinExpr { constant: Rat::zero(), terms: BTreeMap::new() }
    }

    pub fn constant(c: Rat) -> Self {
        LinExpr { constant: c, terms: BTreeMap::new() }
    }

    pub fn int(c: i64) -> Self {
        Self::constant(rat(c))
    }

    pub fn var(v: V) -> Self {
        let mut terms = BTreeMap::new();
        terms.insert(v, Rat::one());
        LinExpr { constant: Rat::zero(), terms }
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn as_constant(&self) -> Option<&Rat> {
        self.terms.is_empty().then_some(&self.constant)
    }

    /// The variable when the expression is exactly `1·v`.
    pub fn as_var(&self) -> Option<&V> {
        if self.constant.is_zero() && self.terms.len() == 1 {
            let (v, c) = self.terms.iter().next()?;
            c.is_one().then_some(v)
        } else {
            None
        }
    }

    pub fn coeff(&self, v: &V) -> Rat {
        self.terms.get(v).cloned().unwrap_or_else(Rat::zero)
    }

    pub fn add_term(&mut self, v: V, c: Rat) {
        if c.is_zero() {
            return;
        }
        let entry = self.terms.entry(v).or_insert_with(Rat::zero);
        *entry += c;
        if entry.is_zero() {
            let key = self.terms.iter().find(|(_, c)| c.is_zero()).map(|(k, _)| k.clone());
            if let Some(k) = key {
                self.terms.remove(&k);
            }
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.constant += &other.constant;
        for (v, c) in &other.terms {
            out.add_term(v.clone(), c.clone());
        }
        out
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.add(&other.scale(&-Rat::one()))
    }

    pub fn scale(&self, k: &Rat) -> Self {
        if k.is_zero() {
            return Self::zero();
        }
        LinExpr {
            constant: &self.constant * k,
            terms: self.terms.iter().map(|(v, c)| (v.clone(), c * k)).collect(),
        }
    }

    pub fn add_const(&self, k: &Rat) -> Self {
        let mut out = self.clone();
        out.constant += k;
        out
    }

    pub fn vars(&self) -> impl Iterator<Item = &V> {
        self.terms.keys()
    }

    /// Replaces `v` by `e`.
    pub fn substitute(&self, v: &V, e: &Self) -> Self {
        match self.terms.get(v) {
            None => self.clone(),
            Some(c) => {
                let mut rest = self.clone();
                let c = c.clone();
                rest.terms.remove(v);
                rest.add(&e.scale(&c))
            }
        }
    }

    pub fn map_vars<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> W) -> LinExpr<W> {
        let mut out = LinExpr::constant(self.constant.clone());
        for (v, c) in &self.terms {
            out.add_term(f(v), c.clone());
        }
        out
    }

    /// Substitutes every variable by an expression over another variable type.
    pub fn map_exprs<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> LinExpr<W>) -> LinExpr<W> {
        let mut out = LinExpr::constant(self.constant.clone());
        for (v, c) in &self.terms {
            out = out.add(&f(v).scale(c));
        }
        out
    }

    pub fn eval(&self, mut env: impl FnMut(&V) -> Rat) -> Rat {
        let mut acc = self.constant.clone();
        for (v, c) in &self.terms {
            acc += c * env(v);
        }
        acc
    }

    /// Smallest positive integer `k` such that `k·self` has integer coefficients.
    fn denominator_lcm(&self) -> BigInt {
        let mut l = self.constant.denom().clone();
        for c in self.terms.values() {
            l = l.lcm(c.denom());
        }
        l
    }
}

impl<V: Ord + Clone + fmt::Display> fmt::Display for LinExpr<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (v, c) in &self.terms {
            let neg = c.is_negative();
            let mag = c.abs();
            if first {
                if neg {
                    f.write_str("-")?;
                }
            } else {
                f.write_str(if neg { " - " } else { " + " })?;
            }
            if mag.is_one() {
                write!(f, "{v}")?;
            } else {
                write!(f, "{}*{v}", fmt_rat(&mag))?;
            }
            first = false;
        }
        if first {
            return f.write_str(&fmt_rat(&self.constant));
        }
        if !self.constant.is_zero() {
            let neg = self.constant.is_negative();
            write!(f, "{}{}", if neg { " - " } else { " + " }, fmt_rat(&self.constant.abs()))?;
        }
        Ok(())
    }
}

pub fn fmt_rat(r: &Rat) -> String {
    if r.is_integer() {
        r.numer().to_string()
    } else {
        format!("{}/{}", r.numer(), r.denom())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Rel {
    Eq,
    Le,
    Lt,
    Ge,
    Gt,
}

impl Rel {
    pub fn symbol(self) -> &'static str {
        match self {
            Rel::Eq => "=",
            Rel::Le => "<=",
            Rel::Lt => "<",
            Rel::Ge => ">=",
            Rel::Gt => ">",
        }
    }

    pub fn parse(s: &str) -> Option<Rel> {
        Some(match s {
            "=" | "==" => Rel::Eq,
            "<=" => Rel::Le,
            "<" => Rel::Lt,
            ">=" => Rel::Ge,
            ">" => Rel::Gt,
            _ => return None,
        })
    }
}

/// `lhs rel rhs`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LinearConstraint<V: Ord> {
    pub lhs: LinExpr<V>,
    pub rel: Rel,
    pub rhs: LinExpr<V>,
}

impl<V: Ord + Clone> LinearConstraint<V> {
    pub fn new(lhs: LinExpr<V>, rel: Rel, rhs: LinExpr<V>) -> Self {
        LinearConstraint { lhs, rel, rhs }
    }

    pub fn eq(lhs: LinExpr<V>, rhs: LinExpr<V>) -> Self {
        Self::new(lhs, Rel::Eq, rhs)
    }

    pub fn vars(&self) -> BTreeSet<V> {
        self.lhs.vars().chain(self.rhs.vars()).cloned().collect()
    }

    pub fn map_vars<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> W) -> LinearConstraint<W> {
        LinearConstraint { lhs: self.lhs.map_vars(&mut f), rel: self.rel, rhs: self.rhs.map_vars(&mut f) }
    }

    pub fn map_exprs<W: Ord + Clone>(
        &self,
        mut f: impl FnMut(&V) -> LinExpr<W>,
    ) -> LinearConstraint<W> {
        LinearConstraint { lhs: self.lhs.map_exprs(&mut f), rel: self.rel, rhs: self.rhs.map_exprs(&mut f) }
    }

    /// The complementary constraint over the integers, when it is a single
    /// linear constraint (`=` has no such complement).
    pub fn negate(&self) -> Option<Self> {
        let rel = match self.rel {
            Rel::Eq => return None,
            Rel::Le => Rel::Gt,
            Rel::Lt => Rel::Ge,
            Rel::Ge => Rel::Lt,
            Rel::Gt => Rel::Le,
        };
        Some(LinearConstraint { lhs: self.lhs.clone(), rel, rhs: self.rhs.clone() })
    }

    pub fn holds(&self, mut env: impl FnMut(&V) -> Rat) -> bool {
        let l = self.lhs.eval(&mut env);
        let r = self.rhs.eval(&mut env);
        match self.rel {
            Rel::Eq => l == r,
            Rel::Le => l <= r,
            Rel::Lt => l < r,
            Rel::Ge => l >= r,
            Rel::Gt => l > r,
        }
    }

    /// Normal form as atoms `e >= 0` / `e = 0`, tightened for integer variables.
    pub fn atoms(&self) -> Vec<Atom<V>> {
        let d = self.lhs.sub(&self.rhs);
        match self.rel {
            Rel::Eq => vec![Atom::new(d, AtomKind::Eq)],
            Rel::Ge => vec![Atom::new(d, AtomKind::Ge)],
            Rel::Le => vec![Atom::new(d.scale(&-Rat::one()), AtomKind::Ge)],
            Rel::Gt => vec![Atom::strict(d)],
            Rel::Lt => vec![Atom::strict(d.scale(&-Rat::one()))],
        }
    }
}

impl<V: Ord + Clone + fmt::Display> fmt::Display for LinearConstraint<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.lhs, self.rel.symbol(), self.rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AtomKind {
    Ge,
    Eq,
}

/// `expr >= 0` or `expr = 0`, kept with integer coefficients.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Atom<V: Ord> {
    pub expr: LinExpr<V>,
    pub kind: AtomKind,
}

impl<V: Ord + Clone> Atom<V> {
    pub fn new(expr: LinExpr<V>, kind: AtomKind) -> Self {
        Atom { expr, kind }.normalized()
    }

    pub fn ge(expr: LinExpr<V>) -> Self {
        Self::new(expr, AtomKind::Ge)
    }

    /// `expr > 0`, i.e. `expr >= 1` once coefficients are integral.
    pub fn strict(expr: LinExpr<V>) -> Self {
        let k = Rat::from_integer(expr.denominator_lcm());
        let scaled = expr.scale(&k);
        Self::new(scaled.add_const(&-Rat::one()), AtomKind::Ge)
    }

    fn normalized(self) -> Self {
        let Atom { expr, kind } = self;
        if expr.terms.is_empty() {
            return Atom { expr, kind };
        }
        let k = Rat::from_integer(expr.denominator_lcm());
        let mut e = expr.scale(&k);
        let mut g = BigInt::zero();
        for c in e.terms.values() {
            g = g.gcd(c.numer());
        }
        if g.is_zero() || g.is_one() {
            if kind == AtomKind::Eq {
                e = canonical_sign(e);
            }
            return Atom { expr: e, kind };
        }
        let gr = Rat::from_integer(g.clone());
        match kind {
            AtomKind::Ge => {
                // Σ a x + c >= 0 with gcd(a) = g over integers ⇒ Σ (a/g) x + floor(c/g) >= 0
                let c = e.constant.numer().div_floor(&g);
                let mut terms = BTreeMap::new();
                for (v, a) in e.terms {
                    terms.insert(v, a / &gr);
                }
                Atom { expr: LinExpr { constant: Rat::from_integer(c), terms }, kind }
            }
            AtomKind::Eq => {
                let scaled = e.scale(&(Rat::one() / gr));
                Atom { expr: canonical_sign(scaled), kind }
            }
        }
    }

    pub fn holds(&self, env: impl FnMut(&V) -> Rat) -> bool {
        let v = self.expr.eval(env);
        match self.kind {
            AtomKind::Ge => !v.is_negative(),
            AtomKind::Eq => v.is_zero(),
        }
    }

    pub fn vars(&self) -> impl Iterator<Item = &V> {
        self.expr.vars()
    }

    /// `Some(true)` if trivially valid, `Some(false)` if trivially violated.
    fn trivial(&self) -> Option<bool> {
        let c = self.expr.as_constant()?;
        Some(match self.kind {
            AtomKind::Ge => !c.is_negative(),
            AtomKind::Eq => c.is_zero(),
        })
    }
}

fn canonical_sign<V: Ord + Clone>(e: LinExpr<V>) -> LinExpr<V> {
    match e.terms.values().next() {
        Some(c) if c.is_negative() => e.scale(&-Rat::one()),
        _ => e,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProjectionError {
    #[error("projection needs to eliminate {0} variables (limit {FM_VAR_LIMIT})")]
    TooManyVariables(usize),
    #[error("constraint system grew beyond {FM_ATOM_LIMIT} atoms")]
    TooManyAtoms,
}

/// Fourier–Motzkin eliminates at most this many variables per projection.
pub const FM_VAR_LIMIT: usize = 16;
pub const FM_ATOM_LIMIT: usize = 4000;

/// A conjunction of atoms.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct System<V: Ord> {
    pub atoms: Vec<Atom<V>>,
}

impl<V: Ord + Clone> System<V> {
    pub fn new() -> Self {
        System { atoms: Vec::new() }
    }

    pub fn from_constraints<'a>(cs: impl IntoIterator<Item = &'a LinearConstraint<V>>) -> Self
    where
        V: 'a,
    {
        let mut s = System::new();
        for c in cs {
            s.atoms.extend(c.atoms());
        }
        s
    }

    pub fn push(&mut self, a: Atom<V>) {
        self.atoms.push(a);
    }

    pub fn add_constraint(&mut self, c: &LinearConstraint<V>) {
        self.atoms.extend(c.atoms());
    }

    pub fn vars(&self) -> BTreeSet<V> {
        self.atoms.iter().flat_map(|a| a.vars().cloned()).collect()
    }

    /// Keeps only atoms transitively sharing variables with `seed`.
    pub fn relevant_to(&self, seed: &BTreeSet<V>) -> System<V> {
        let mut reached: BTreeSet<V> = seed.clone();
        let mut taken = vec![false; self.atoms.len()];
        loop {
            let mut changed = false;
            for (i, a) in self.atoms.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                if a.vars().any(|v| reached.contains(v)) {
                    taken[i] = true;
                    for v in a.vars() {
                        reached.insert(v.clone());
                    }
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        System {
            atoms: self
                .atoms
                .iter()
                .zip(taken)
                .filter(|(_, t)| *t)
                .map(|(a, _)| a.clone())
                .collect(),
        }
    }

    /// Projects onto `keep`: the result mentions only variables in `keep`
    /// and is implied by `self`. Returns `Ok(None)` when the system is
    /// found infeasible.
    pub fn project(&self, keep: &BTreeSet<V>) -> Result<Option<System<V>>, ProjectionError> {
        let mut atoms: Vec<Atom<V>> = Vec::new();
        for a in &self.atoms {
            match a.trivial() {
                Some(true) => {}
                Some(false) => return Ok(None),
                None => atoms.push(a.clone()),
            }
        }

        // Equalities first: substitution never grows the system.
        loop {
            let pick = atoms.iter().enumerate().find_map(|(i, a)| {
                if a.kind != AtomKind::Eq {
                    return None;
                }
                a.expr.terms.keys().find(|v| !keep.contains(*v)).map(|v| (i, v.clone()))
            });
            let Some((i, v)) = pick else { break };
            let eq = atoms.swap_remove(i);
            let c = eq.expr.coeff(&v);
            let mut rest = eq.expr.clone();
            rest.terms.remove(&v);
            let solution = rest.scale(&(-Rat::one() / c));
            let mut next = Vec::with_capacity(atoms.len());
            for a in atoms {
                let a = if a.expr.terms.contains_key(&v) {
                    Atom::new(a.expr.substitute(&v, &solution), a.kind)
                } else {
                    a
                };
                match a.trivial() {
                    Some(true) => {}
                    Some(false) => return Ok(None),
                    None => next.push(a),
                }
            }
            atoms = next;
        }

        // Remaining equalities over eliminable variables have been consumed;
        // split the rest for Fourier–Motzkin.
        let mut ineqs: Vec<Atom<V>> = Vec::new();
        for a in atoms {
            match a.kind {
                AtomKind::Ge => ineqs.push(a),
                AtomKind::Eq => {
                    ineqs.push(Atom::new(a.expr.clone(), AtomKind::Ge));
                    ineqs.push(Atom::new(a.expr.scale(&-Rat::one()), AtomKind::Ge));
                }
            }
        }
        dedup(&mut ineqs);

        let to_eliminate: BTreeSet<V> =
            ineqs.iter().flat_map(|a| a.vars().cloned()).filter(|v| !keep.contains(v)).collect();
        if to_eliminate.len() > FM_VAR_LIMIT {
            return Err(ProjectionError::TooManyVariables(to_eliminate.len()));
        }
        let mut remaining = to_eliminate;
        while !remaining.is_empty() {
            // cheapest variable first
            let v = remaining
                .iter()
                .min_by_key(|v| {
                    let (mut p, mut n) = (0usize, 0usize);
                    for a in &ineqs {
                        let c = a.expr.coeff(v);
                        if c.is_positive() {
                            p += 1;
                        } else if c.is_negative() {
                            n += 1;
                        }
                    }
                    p * n
                })
                .cloned()
                .expect("non-empty");
            remaining.remove(&v);
            let (mut pos, mut neg, mut rest) = (Vec::new(), Vec::new(), Vec::new());
            for a in ineqs {
                let c = a.expr.coeff(&v);
                if c.is_positive() {
                    pos.push((c, a));
                } else if c.is_negative() {
                    neg.push((c, a));
                } else {
                    rest.push(a);
                }
            }
            for (cp, p) in &pos {
                for (cn, n) in &neg {
                    // cp > 0, cn < 0: (-cn)·p + cp·n cancels v
                    let combined = p.expr.scale(&-cn.clone()).add(&n.expr.scale(cp));
                    let a = Atom::new(combined, AtomKind::Ge);
                    match a.trivial() {
                        Some(true) => {}
                        Some(false) => return Ok(None),
                        None => rest.push(a),
                    }
                }
            }
            dedup(&mut rest);
            if rest.len() > FM_ATOM_LIMIT {
                return Err(ProjectionError::TooManyAtoms);
            }
            ineqs = rest;
        }
        Ok(Some(System { atoms: ineqs }))
    }

    /// Upper bounds `v <= e` implied directly by atoms of this system
    /// (`e` free of `v`).
    pub fn upper_bounds(&self, v: &V) -> Vec<LinExpr<V>> {
        self.bounds(v, true)
    }

    pub fn lower_bounds(&self, v: &V) -> Vec<LinExpr<V>> {
        self.bounds(v, false)
    }

    fn bounds(&self, v: &V, upper: bool) -> Vec<LinExpr<V>> {
        let mut out = Vec::new();
        for a in &self.atoms {
            let c = a.expr.coeff(v);
            if c.is_zero() {
                continue;
            }
            let mut rest = a.expr.clone();
            rest.terms.remove(v);
            // c·v + rest (>=|=) 0  ⇒  v (>=|<=) -rest/c
            let bound = rest.scale(&(-Rat::one() / &c));
            let gives_upper = c.is_negative();
            if a.kind == AtomKind::Eq || gives_upper == upper {
                out.push(bound);
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Whether the system is infeasible over the rationals (with integer
    /// tightening), by eliminating everything.
    pub fn is_infeasible(&self) -> Result<bool, ProjectionError> {
        Ok(self.project(&BTreeSet::new())?.is_none())
    }
}

fn dedup<V: Ord + Clone>(atoms: &mut Vec<Atom<V>>) {
    // For identical variable parts keep the tightest constant.
    let mut best: BTreeMap<BTreeMap<V, Rat>, Rat> = BTreeMap::new();
    for a in atoms.iter() {
        debug_assert_eq!(a.kind, AtomKind::Ge);
        let e = best.entry(a.expr.terms.clone()).or_insert_with(|| a.expr.constant.clone());
        if a.expr.constant < *e {
            *e = a.expr.constant.clone();
        }
    }
    *atoms = best
        .into_iter()
        .map(|(terms, constant)| Atom { expr: LinExpr { constant, terms }, kind: AtomKind::Ge })
        .collect();
}
