//! Closed-form bound expressions over non-negative parameters.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use num_bigint::BigInt;
use num_traits::{One, Signed, Zero};
use serde_json::{json, Value};

use crate::linear::{fmt_rat, rat, LinExpr, Rat};

/// `nat(l) = max(0, l)`. All operators are monotone in their arguments,
/// which is what lets the solver maximize sub-terms independently.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BoundExpr<V: Ord> {
    Const(Rat),
    Nat(LinExpr<V>),
    Add(Vec<BoundExpr<V>>),
    Mul(Vec<BoundExpr<V>>),
    Max(Vec<BoundExpr<V>>),
    /// `floor(e / k)` with `k > 0`.
    FloorDiv(Box<BoundExpr<V>>, BigInt),
    /// `floor(log256(e))`, taken as 0 below 1.
    Log256(Box<BoundExpr<V>>),
    /// Finite but not expressible: a lost operand or an unbounded variable.
    Unknown,
}

pub fn floor_log256(n: &BigInt) -> u64 {
    if n < &BigInt::one() {
        0
    } else {
        (n.bits() - 1) / 8
    }
}

impl<V: Ord + Clone> BoundExpr<V> {
    pub fn zero() -> Self {
        BoundExpr::Const(Rat::zero())
    }

    pub fn int(n: i64) -> Self {
        BoundExpr::Const(rat(n))
    }

    pub fn from_u128(n: u128) -> Self {
        BoundExpr::Const(Rat::from_integer(BigInt::from(n)))
    }

    pub fn nat(l: LinExpr<V>) -> Self {
        BoundExpr::Nat(l)
    }

    pub fn nat_var(v: V) -> Self {
        BoundExpr::Nat(LinExpr::var(v))
    }

    pub fn sum(items: Vec<Self>) -> Self {
        BoundExpr::Add(items)
    }

    pub fn product(items: Vec<Self>) -> Self {
        BoundExpr::Mul(items)
    }

    pub fn max_of(items: Vec<Self>) -> Self {
        BoundExpr::Max(items)
    }

    pub fn plus(self, other: Self) -> Self {
        BoundExpr::Add(vec![self, other])
    }

    pub fn times(self, other: Self) -> Self {
        BoundExpr::Mul(vec![self, other])
    }

    pub fn floor_div(self, k: u64) -> Self {
        BoundExpr::FloorDiv(Box::new(self), BigInt::from(k))
    }

    pub fn log256(self) -> Self {
        BoundExpr::Log256(Box::new(self))
    }

    pub fn as_const(&self) -> Option<&Rat> {
        match self {
            BoundExpr::Const(c) => Some(c),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BoundExpr::Const(c) if c.is_zero())
    }

    pub fn contains_unknown(&self) -> bool {
        match self {
            BoundExpr::Unknown => true,
            BoundExpr::Const(_) | BoundExpr::Nat(_) => false,
            BoundExpr::Add(xs) | BoundExpr::Mul(xs) | BoundExpr::Max(xs) => {
                xs.iter().any(|x| x.contains_unknown())
            }
            BoundExpr::FloorDiv(e, _) | BoundExpr::Log256(e) => e.contains_unknown(),
        }
    }

    pub fn vars(&self) -> BTreeSet<V> {
        let mut out = BTreeSet::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars(&self, out: &mut BTreeSet<V>) {
        match self {
            BoundExpr::Nat(l) => out.extend(l.vars().cloned()),
            BoundExpr::Add(xs) | BoundExpr::Mul(xs) | BoundExpr::Max(xs) => {
                xs.iter().for_each(|x| x.collect_vars(out))
            }
            BoundExpr::FloorDiv(e, _) | BoundExpr::Log256(e) => e.collect_vars(out),
            BoundExpr::Const(_) | BoundExpr::Unknown => {}
        }
    }

    /// Linear arguments of every `nat` in the tree.
    pub fn nat_args(&self) -> Vec<&LinExpr<V>> {
        let mut out = Vec::new();
        self.collect_nats(&mut out);
        out
    }

    fn collect_nats<'a>(&'a self, out: &mut Vec<&'a LinExpr<V>>) {
        match self {
            BoundExpr::Nat(l) => out.push(l),
            BoundExpr::Add(xs) | BoundExpr::Mul(xs) | BoundExpr::Max(xs) => {
                xs.iter().for_each(|x| x.collect_nats(out))
            }
            BoundExpr::FloorDiv(e, _) | BoundExpr::Log256(e) => e.collect_nats(out),
            BoundExpr::Const(_) | BoundExpr::Unknown => {}
        }
    }

    /// Rewrites every `nat` argument.
    pub fn map_nats<W: Ord + Clone>(&self, f: &mut impl FnMut(&LinExpr<V>) -> BoundExpr<W>) -> BoundExpr<W> {
        match self {
            BoundExpr::Const(c) => BoundExpr::Const(c.clone()),
            BoundExpr::Nat(l) => f(l),
            BoundExpr::Add(xs) => BoundExpr::Add(xs.iter().map(|x| x.map_nats(f)).collect()),
            BoundExpr::Mul(xs) => BoundExpr::Mul(xs.iter().map(|x| x.map_nats(f)).collect()),
            BoundExpr::Max(xs) => BoundExpr::Max(xs.iter().map(|x| x.map_nats(f)).collect()),
            BoundExpr::FloorDiv(e, k) => BoundExpr::FloorDiv(Box::new(e.map_nats(f)), k.clone()),
            BoundExpr::Log256(e) => BoundExpr::Log256(Box::new(e.map_nats(f))),
            BoundExpr::Unknown => BoundExpr::Unknown,
        }
    }

    pub fn map_vars<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> W) -> BoundExpr<W> {
        self.map_nats(&mut |l| BoundExpr::Nat(l.map_vars(&mut f)))
    }

    /// Substitutes every variable by a linear expression.
    pub fn substitute<W: Ord + Clone>(&self, mut f: impl FnMut(&V) -> LinExpr<W>) -> BoundExpr<W> {
        self.map_nats(&mut |l| BoundExpr::Nat(l.map_exprs(&mut f)))
    }

    /// `None` when the expression contains `Unknown`.
    pub fn eval(&self, env: &mut impl FnMut(&V) -> Rat) -> Option<Rat> {
        Some(match self {
            BoundExpr::Const(c) => c.clone(),
            BoundExpr::Nat(l) => {
                let v = l.eval(&mut *env);
                if v.is_negative() {
                    Rat::zero()
                } else {
                    v
                }
            }
            BoundExpr::Add(xs) => {
                let mut acc = Rat::zero();
                for x in xs {
                    acc += x.eval(env)?;
                }
                acc
            }
            BoundExpr::Mul(xs) => {
                let mut acc = Rat::one();
                for x in xs {
                    acc *= x.eval(env)?;
                }
                acc
            }
            BoundExpr::Max(xs) => {
                let mut acc = Rat::zero();
                for x in xs {
                    let v = x.eval(env)?;
                    if v > acc {
                        acc = v;
                    }
                }
                acc
            }
            BoundExpr::FloorDiv(e, k) => {
                let v = e.eval(env)?;
                Rat::from_integer((v / Rat::from_integer(k.clone())).floor().to_integer())
            }
            BoundExpr::Log256(e) => {
                let v = e.eval(env)?;
                Rat::from_integer(BigInt::from(floor_log256(&v.floor().to_integer())))
            }
            BoundExpr::Unknown => return None,
        })
    }

    pub fn eval_with(&self, values: &BTreeMap<V, Rat>) -> Option<Rat> {
        self.eval(&mut |v| values.get(v).cloned().unwrap_or_else(Rat::zero))
    }

    pub fn simplify(&self) -> Self {
        match self {
            BoundExpr::Const(c) => BoundExpr::Const(c.clone()),
            BoundExpr::Unknown => BoundExpr::Unknown,
            BoundExpr::Nat(l) => match l.as_constant() {
                Some(c) if c.is_negative() => BoundExpr::zero(),
                Some(c) => BoundExpr::Const(c.clone()),
                None => BoundExpr::Nat(l.clone()),
            },
            BoundExpr::FloorDiv(e, k) => {
                let e = e.simplify();
                if k.is_one() {
                    return e;
                }
                match &e {
                    BoundExpr::Const(c) => BoundExpr::Const(Rat::from_integer(
                        (c / Rat::from_integer(k.clone())).floor().to_integer(),
                    )),
                    BoundExpr::Unknown => BoundExpr::Unknown,
                    _ => BoundExpr::FloorDiv(Box::new(e), k.clone()),
                }
            }
            BoundExpr::Log256(e) => {
                let e = e.simplify();
                match &e {
                    BoundExpr::Const(c) => BoundExpr::Const(Rat::from_integer(BigInt::from(
                        floor_log256(&c.floor().to_integer()),
                    ))),
                    BoundExpr::Unknown => BoundExpr::Unknown,
                    _ => BoundExpr::Log256(Box::new(e)),
                }
            }
            BoundExpr::Add(xs) => simplify_add(xs.iter().map(|x| x.simplify()).collect()),
            BoundExpr::Mul(xs) => simplify_mul(xs.iter().map(|x| x.simplify()).collect()),
            BoundExpr::Max(xs) => simplify_max(xs.iter().map(|x| x.simplify()).collect()),
        }
    }

    /// Splits `c·base` (the base is `None` for constants).
    fn split_coeff(self) -> (Rat, Option<Self>) {
        match self {
            BoundExpr::Const(c) => (c, None),
            BoundExpr::Mul(mut xs) if matches!(xs.first(), Some(BoundExpr::Const(_))) => {
                let c = match xs.remove(0) {
                    BoundExpr::Const(c) => c,
                    _ => unreachable!(),
                };
                let base = if xs.len() == 1 { xs.pop().unwrap() } else { BoundExpr::Mul(xs) };
                (c, Some(base))
            }
            other => (Rat::one(), Some(other)),
        }
    }

    /// Splits off the additive constant.
    fn split_const(&self) -> (Rat, Self) {
        match self {
            BoundExpr::Const(c) => (c.clone(), BoundExpr::zero()),
            BoundExpr::Add(xs) => {
                let mut c = Rat::zero();
                let mut rest = Vec::new();
                for x in xs {
                    match x {
                        BoundExpr::Const(k) => c += k,
                        other => rest.push(other.clone()),
                    }
                }
                let rest = match rest.len() {
                    0 => BoundExpr::zero(),
                    1 => rest.pop().unwrap(),
                    _ => BoundExpr::Add(rest),
                };
                (c, rest)
            }
            other => (Rat::zero(), other.clone()),
        }
    }
}

fn simplify_add<V: Ord + Clone>(items: Vec<BoundExpr<V>>) -> BoundExpr<V> {
    let mut flat = Vec::new();
    for x in items {
        match x {
            BoundExpr::Add(inner) => flat.extend(inner),
            BoundExpr::Unknown => return BoundExpr::Unknown,
            other => flat.push(other),
        }
    }
    let mut constant = Rat::zero();
    let mut terms: BTreeMap<BoundExpr<V>, Rat> = BTreeMap::new();
    for x in flat {
        match x.split_coeff() {
            (c, None) => constant += c,
            (c, Some(base)) => *terms.entry(base).or_insert_with(Rat::zero) += c,
        }
    }
    let mut out = Vec::new();
    if !constant.is_zero() {
        out.push(BoundExpr::Const(constant));
    }
    for (base, c) in terms {
        if c.is_zero() {
            continue;
        }
        if c.is_one() {
            out.push(base);
        } else {
            out.push(with_coeff(c, base));
        }
    }
    match out.len() {
        0 => BoundExpr::zero(),
        1 => out.pop().unwrap(),
        _ => BoundExpr::Add(out),
    }
}

fn with_coeff<V: Ord + Clone>(c: Rat, base: BoundExpr<V>) -> BoundExpr<V> {
    match base {
        BoundExpr::Mul(mut xs) => {
            xs.insert(0, BoundExpr::Const(c));
            BoundExpr::Mul(xs)
        }
        other => BoundExpr::Mul(vec![BoundExpr::Const(c), other]),
    }
}

fn simplify_mul<V: Ord + Clone>(items: Vec<BoundExpr<V>>) -> BoundExpr<V> {
    let mut flat = Vec::new();
    for x in items {
        match x {
            BoundExpr::Mul(inner) => flat.extend(inner),
            other => flat.push(other),
        }
    }
    if flat.iter().any(|x| x.is_zero()) {
        return BoundExpr::zero();
    }
    if flat.iter().any(|x| matches!(x, BoundExpr::Unknown)) {
        return BoundExpr::Unknown;
    }
    let mut c = Rat::one();
    let mut rest = Vec::new();
    for x in flat {
        match x {
            BoundExpr::Const(k) => c *= k,
            other => rest.push(other),
        }
    }
    rest.sort();
    if rest.is_empty() {
        return BoundExpr::Const(c);
    }
    if rest.len() == 1 {
        let only = rest.pop().unwrap();
        if c.is_one() {
            return only;
        }
        if let BoundExpr::Add(summands) = only {
            // distribute constants so like terms can merge upstream
            return simplify_add(
                summands.into_iter().map(|s| simplify_mul(vec![BoundExpr::Const(c.clone()), s])).collect(),
            );
        }
        return BoundExpr::Mul(vec![BoundExpr::Const(c), only]);
    }
    if !c.is_one() {
        rest.insert(0, BoundExpr::Const(c));
    }
    BoundExpr::Mul(rest)
}

fn simplify_max<V: Ord + Clone>(items: Vec<BoundExpr<V>>) -> BoundExpr<V> {
    let mut flat = Vec::new();
    for x in items {
        match x {
            BoundExpr::Max(inner) => flat.extend(inner),
            BoundExpr::Unknown => return BoundExpr::Unknown,
            other => flat.push(other),
        }
    }
    // same symbolic part: keep the largest constant offset
    let mut by_rest: BTreeMap<BoundExpr<V>, Rat> = BTreeMap::new();
    for x in &flat {
        let (c, rest) = x.split_const();
        let e = by_rest.entry(rest).or_insert_with(|| c.clone());
        if c > *e {
            *e = c;
        }
    }
    let zero = BoundExpr::zero();
    let bare_const = by_rest.get(&zero).cloned();
    let mut out = Vec::new();
    let mut dominated = false;
    for (rest, c) in &by_rest {
        if *rest == zero {
            continue;
        }
        if let Some(k) = &bare_const {
            if c >= k {
                dominated = true;
            }
        }
        out.push(simplify_add(vec![BoundExpr::Const(c.clone()), rest.clone()]));
    }
    if let Some(k) = bare_const {
        if !dominated && (out.is_empty() || !k.is_zero()) {
            out.insert(0, BoundExpr::Const(k));
        }
    }
    out.sort();
    out.dedup();
    match out.len() {
        0 => BoundExpr::zero(),
        1 => out.pop().unwrap(),
        _ => BoundExpr::Max(out),
    }
}

fn needs_parens_in_product<V: Ord>(e: &BoundExpr<V>) -> bool {
    matches!(e, BoundExpr::Add(_))
}

impl<V: Ord + Clone + fmt::Display> fmt::Display for BoundExpr<V> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundExpr::Const(c) => f.write_str(&fmt_rat(c)),
            BoundExpr::Nat(l) => write!(f, "nat({l})"),
            BoundExpr::Add(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" + ")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
            BoundExpr::Mul(xs) => {
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str("*")?;
                    }
                    if needs_parens_in_product(x) {
                        write!(f, "({x})")?;
                    } else {
                        write!(f, "{x}")?;
                    }
                }
                Ok(())
            }
            BoundExpr::Max(xs) => {
                f.write_str("max(")?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
            BoundExpr::FloorDiv(e, k) => {
                if matches!(**e, BoundExpr::Add(_)) {
                    write!(f, "floor(({e})/{k})")
                } else {
                    write!(f, "floor({e}/{k})")
                }
            }
            BoundExpr::Log256(e) => write!(f, "floor(log256({e}))"),
            BoundExpr::Unknown => f.write_str("unknown"),
        }
    }
}

impl<V: Ord + Clone + fmt::Display> BoundExpr<V> {
    /// Expression tree for structured reports.
    pub fn to_json(&self) -> Value {
        match self {
            BoundExpr::Const(c) => json!({ "const": fmt_rat(c) }),
            BoundExpr::Nat(l) => {
                let terms: Vec<Value> = l
                    .terms
                    .iter()
                    .map(|(v, c)| json!({ "var": v.to_string(), "coeff": fmt_rat(c) }))
                    .collect();
                json!({ "nat": { "constant": fmt_rat(&l.constant), "terms": terms } })
            }
            BoundExpr::Add(xs) => json!({ "add": xs.iter().map(|x| x.to_json()).collect::<Vec<_>>() }),
            BoundExpr::Mul(xs) => json!({ "mul": xs.iter().map(|x| x.to_json()).collect::<Vec<_>>() }),
            BoundExpr::Max(xs) => json!({ "max": xs.iter().map(|x| x.to_json()).collect::<Vec<_>>() }),
            BoundExpr::FloorDiv(e, k) => json!({ "floor_div": { "expr": e.to_json(), "divisor": k.to_string() } }),
            BoundExpr::Log256(e) => json!({ "floor_log256": e.to_json() }),
            BoundExpr::Unknown => json!("unknown"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type B = BoundExpr<&'static str>;

    fn nat(v: &'static str) -> B {
        B::nat_var(v)
    }

    #[test]
    fn simplify_examples() {
        assert_eq!(B::Nat(LinExpr::int(5)).simplify(), B::int(5));
        assert_eq!(B::Nat(LinExpr::int(-5)).simplify(), B::int(0));
        let e = B::sum(vec![B::int(3), nat("x"), B::int(2)]).simplify();
        assert_eq!(e.to_string(), "5 + nat(x)");
        assert_eq!(B::max_of(vec![B::int(7), B::int(7)]).simplify(), B::int(7));
    }

    #[test]
    fn like_terms_merge() {
        let e = B::sum(vec![
            B::product(vec![B::int(2), nat("g")]),
            B::int(1555),
            B::product(vec![nat("g"), B::int(777)]),
        ])
        .simplify();
        assert_eq!(e.to_string(), "1555 + 779*nat(g)");
    }

    #[test]
    fn max_merges_offsets() {
        let a = B::sum(vec![B::int(3), nat("x")]);
        let b = B::sum(vec![B::int(9), nat("x")]);
        let e = B::max_of(vec![a, b, B::int(4)]).simplify();
        assert_eq!(e.to_string(), "9 + nat(x)");
    }

    #[test]
    fn unknown_absorbs() {
        let e = B::sum(vec![B::int(1), B::Unknown]).simplify();
        assert!(matches!(e, B::Unknown));
        let z = B::product(vec![B::int(0), B::Unknown]).simplify();
        assert!(z.is_zero());
    }

    #[test]
    fn evaluation() {
        // 3x + floor(x*x/512) at x = 1024
        let x = nat("x");
        let e = B::sum(vec![B::product(vec![B::int(3), x.clone()]), B::product(vec![x.clone(), x]).floor_div(512)]);
        let mut env = |_: &&str| rat(1024);
        assert_eq!(e.eval(&mut env), Some(rat(5120)));
        assert_eq!(B::int(256).log256().eval(&mut env), Some(rat(1)));
        assert_eq!(B::int(255).log256().eval(&mut env), Some(rat(0)));
    }

    #[test]
    fn log256_boundaries() {
        assert_eq!(floor_log256(&BigInt::from(0)), 0);
        assert_eq!(floor_log256(&BigInt::from(1)), 0);
        assert_eq!(floor_log256(&BigInt::from(65535)), 1);
        assert_eq!(floor_log256(&BigInt::from(65536)), 2);
        assert_eq!(floor_log256(&(BigInt::one() << 256usize)), 32);
    }
}
