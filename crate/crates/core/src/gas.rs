//! Gas schedule, per-opcode cost upper bounds and the memory cost function.

use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use primitive_types::U256;

use crate::bound::BoundExpr;
use crate::evm::{to_big, Opcode};
use crate::linear::{LinExpr, Rat};

/// Gas per active memory word.
pub const G_MEMORY: u64 = 3;

// Fee constants of the Byzantium schedule, with their conventional names.
pub const G_ZERO: u64 = 0;
pub const G_BASE: u64 = 2;
pub const G_VERYLOW: u64 = 3;
pub const G_LOW: u64 = 5;
pub const G_MID: u64 = 8;
pub const G_HIGH: u64 = 10;
pub const G_EXTCODE: u64 = 700;
pub const G_BALANCE: u64 = 400;
pub const G_SLOAD: u64 = 200;
pub const G_JUMPDEST: u64 = 1;
pub const G_SSET: u64 = 20000;
pub const G_SRESET: u64 = 5000;
pub const G_SELFDESTRUCT: u64 = 5000;
pub const G_NEWACCOUNT: u64 = 25000;
pub const G_CREATE: u64 = 32000;
pub const G_CALL: u64 = 700;
pub const G_CALLVALUE: u64 = 9000;
pub const G_EXP: u64 = 10;
/// Per byte of exponent. Byzantium charges 50 here; see the README.
pub const G_EXPBYTE: u64 = 10;
pub const G_LOG: u64 = 375;
pub const G_LOGDATA: u64 = 8;
pub const G_LOGTOPIC: u64 = 375;
pub const G_SHA3: u64 = 30;
pub const G_SHA3WORD: u64 = 6;
pub const G_COPY: u64 = 3;
pub const G_BLOCKHASH: u64 = 20;

/// A derived quantity of one stack operand (0 is the top of stack).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// The operand itself.
    Value(usize),
    /// `ceil(x / 32)`.
    Words(usize),
    /// Bytes needed to represent `x`: `0` for zero, else `1 + floor(log256 x)`.
    ByteLen(usize),
    /// `1` when `x != 0`.
    NonZero(usize),
}

impl Role {
    pub fn operand(self) -> usize {
        match self {
            Role::Value(i) | Role::Words(i) | Role::ByteLen(i) | Role::NonZero(i) => i,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTemplate {
    pub base: u64,
    pub terms: Vec<(u64, Role)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CostClass {
    Constant(u64),
    Conditional(u64, u64),
    Parametric(CostTemplate),
}

/// What is known about an operand at a program point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Operand<V: Ord> {
    Const(U256),
    Linear(LinExpr<V>),
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GasError {
    #[error("memory size cannot shrink ({before} -> {after})")]
    ShrinkingMemory { before: u64, after: u64 },
    #[error("line {line}: {message}")]
    Override { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GasSchedule {
    pub constant_costs: BTreeMap<Opcode, u64>,
    pub conditional_costs: BTreeMap<Opcode, (u64, u64)>,
    pub parametric_costs: BTreeMap<Opcode, CostTemplate>,
    pub g_memory: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self::byzantium()
    }
}

fn constant_cost(op: Opcode) -> Option<u64> {
    use Opcode::*;
    Some(match op {
        Stop | Return | Revert => G_ZERO,
        // designated-invalid consumes all gas at runtime; it only ever ends a path
        Invalid => G_ZERO,
        Address | Origin | Caller | Callvalue | Calldatasize | Codesize | Gasprice | Coinbase
        | Timestamp | Number | Difficulty | Gaslimit | Returndatasize | Pop | Pc | Msize | Gas => G_BASE,
        Add | Sub | Not | Lt | Gt | Slt | Sgt | Eq | Iszero | And | Or | Xor | Byte | Calldataload
        | Mload | Mstore | Mstore8 | Push(_) | Dup(_) | Swap(_) => G_VERYLOW,
        Mul | Div | Sdiv | Mod | Smod | Signextend => G_LOW,
        Addmod | Mulmod | Jump => G_MID,
        Jumpi => G_HIGH,
        Balance => G_BALANCE,
        Extcodesize => G_EXTCODE,
        Blockhash => G_BLOCKHASH,
        Sload => G_SLOAD,
        Jumpdest => G_JUMPDEST,
        Create => G_CREATE,
        Delegatecall | Staticcall => G_CALL,
        _ => return None,
    })
}

fn conditional_cost(op: Opcode) -> Option<(u64, u64)> {
    use Opcode::*;
    Some(match op {
        Sstore => (G_SSET, G_SRESET),
        Selfdestruct => (G_SELFDESTRUCT, G_SELFDESTRUCT + G_NEWACCOUNT),
        Callcode => (G_CALL, G_CALL + G_CALLVALUE),
        _ => return None,
    })
}

fn parametric_cost(op: Opcode) -> Option<CostTemplate> {
    use Opcode::*;
    let t = |base, terms: Vec<(u64, Role)>| CostTemplate { base, terms };
    Some(match op {
        Exp => t(G_EXP, vec![(G_EXPBYTE, Role::ByteLen(1))]),
        Sha3 => t(G_SHA3, vec![(G_SHA3WORD, Role::Words(1))]),
        Calldatacopy | Codecopy | Returndatacopy => t(G_VERYLOW, vec![(G_COPY, Role::Words(2))]),
        Extcodecopy => t(G_EXTCODE, vec![(G_COPY, Role::Words(3))]),
        Log(n) => t(G_LOG + G_LOGTOPIC * u64::from(n), vec![(G_LOGDATA, Role::Value(1))]),
        // value transfer to a fresh account; forwarded gas is not counted
        Call => t(G_CALL, vec![(G_CALLVALUE + G_NEWACCOUNT, Role::NonZero(2))]),
        _ => return None,
    })
}

fn big(v: U256) -> BigInt {
    BigInt::from(to_big(v))
}

fn role_const(role: Role, x: U256) -> BigInt {
    match role {
        Role::Value(_) => big(x),
        Role::Words(_) => (big(x) + 31) / 32,
        Role::ByteLen(_) => {
            if x.is_zero() {
                BigInt::from(0)
            } else {
                BigInt::from((x.bits() as u64).div_ceil(8))
            }
        }
        Role::NonZero(_) => BigInt::from(u8::from(!x.is_zero())),
    }
}

fn role_expr<V: Ord + Clone>(role: Role, operand: &Operand<V>) -> BoundExpr<V> {
    match operand {
        Operand::Const(x) => BoundExpr::Const(Rat::from_integer(role_const(role, *x))),
        Operand::Linear(l) => {
            if let Some(c) = l.as_constant() {
                if !c.is_integer() || c < &Rat::from_integer(0.into()) {
                    return BoundExpr::Unknown;
                }
                if let Some(v) = U256::from_dec_str(&c.to_integer().to_string()).ok() {
                    return role_expr(role, &Operand::Const(v));
                }
            }
            match role {
                Role::Value(_) => BoundExpr::Nat(l.clone()),
                Role::Words(_) => BoundExpr::Nat(l.add_const(&Rat::from_integer(31.into()))).floor_div(32),
                Role::ByteLen(_) => BoundExpr::int(1).plus(BoundExpr::Nat(l.clone()).log256()),
                Role::NonZero(_) => BoundExpr::int(1),
            }
        }
        Operand::Unknown => match role {
            // 256-bit words never need more than 32 bytes
            Role::ByteLen(_) => BoundExpr::int(32),
            Role::NonZero(_) => BoundExpr::int(1),
            Role::Value(_) | Role::Words(_) => BoundExpr::Unknown,
        },
    }
}

impl GasSchedule {
    pub fn byzantium() -> Self {
        let mut s = GasSchedule {
            constant_costs: BTreeMap::new(),
            conditional_costs: BTreeMap::new(),
            parametric_costs: BTreeMap::new(),
            g_memory: G_MEMORY,
        };
        for op in Opcode::all() {
            if let Some(c) = constant_cost(op) {
                s.constant_costs.insert(op, c);
            } else if let Some(c) = conditional_cost(op) {
                s.conditional_costs.insert(op, c);
            } else if let Some(t) = parametric_cost(op) {
                s.parametric_costs.insert(op, t);
            }
        }
        s
    }

    /// Applies `MNEMONIC=cost` lines. Only constant-cost opcodes may be overridden.
    pub fn with_overrides(mut self, text: &str) -> Result<Self, GasError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| GasError::Override { line: i + 1, message };
            let (name, value) = line.split_once('=').ok_or_else(|| err("expected MNEMONIC=cost".into()))?;
            let op = Opcode::from_mnemonic(name.trim())
                .ok_or_else(|| err(format!("unknown mnemonic {}", name.trim())))?;
            let cost: u64 = value.trim().parse().map_err(|_| err(format!("bad cost {}", value.trim())))?;
            match self.constant_costs.get_mut(&op) {
                Some(slot) => *slot = cost,
                None => return Err(err(format!("{op} does not have a constant cost"))),
            }
        }
        Ok(self)
    }

    pub fn class_of(&self, op: Opcode) -> CostClass {
        if let Some(c) = self.constant_costs.get(&op) {
            CostClass::Constant(*c)
        } else if let Some((a, b)) = self.conditional_costs.get(&op) {
            CostClass::Conditional(*a, *b)
        } else if let Some(t) = self.parametric_costs.get(&op) {
            CostClass::Parametric(t.clone())
        } else {
            unreachable!("{op} missing from the schedule")
        }
    }

    /// Upper bound on the opcode gas of `op`; `operands[i]` describes stack slot `i`.
    pub fn opcode_cost_upper<V: Ord + Clone>(&self, op: Opcode, operands: &[Operand<V>]) -> BoundExpr<V> {
        match self.class_of(op) {
            CostClass::Constant(c) => BoundExpr::from_u128(c.into()),
            CostClass::Conditional(a, b) => BoundExpr::from_u128(a.max(b).into()),
            CostClass::Parametric(t) => {
                let mut items = vec![BoundExpr::from_u128(t.base.into())];
                for (coeff, role) in &t.terms {
                    let operand = operands.get(role.operand()).cloned().unwrap_or(Operand::Unknown);
                    items.push(BoundExpr::from_u128((*coeff).into()).times(role_expr(*role, &operand)));
                }
                BoundExpr::sum(items).simplify()
            }
        }
    }

    /// Exact cost on concrete operands, with class-2 opcodes at their maximum.
    /// `None` if it does not fit in 64 bits.
    pub fn concrete_cost(&self, op: Opcode, operands: &[U256]) -> Option<u64> {
        match self.class_of(op) {
            CostClass::Constant(c) => Some(c),
            CostClass::Conditional(a, b) => Some(a.max(b)),
            CostClass::Parametric(t) => {
                let mut acc = BigInt::from(t.base);
                for (coeff, role) in &t.terms {
                    let x = operands.get(role.operand()).copied().unwrap_or_default();
                    acc += BigInt::from(*coeff) * role_const(*role, x);
                }
                u64::try_from(acc).ok()
            }
        }
    }
}

/// `C_mem(a) = G_memory·a + floor(a²/512)` for `a` active words.
pub fn mem_cost(a: u64) -> u128 {
    let a = u128::from(a);
    u128::from(G_MEMORY) * a + a * a / 512
}

pub fn mem_cost_big(a: &BigInt) -> BigInt {
    BigInt::from(G_MEMORY) * a + (a * a) / 512
}

/// Gas for growing active memory from `before` to `after` words.
pub fn mem_cost_delta(before: u64, after: u64) -> Result<u128, GasError> {
    if after < before {
        return Err(GasError::ShrinkingMemory { before, after });
    }
    Ok(mem_cost(after) - mem_cost(before))
}

/// The memory cost function over a symbolic extent.
pub fn mem_cost_bound<V: Ord + Clone>(extent: &BoundExpr<V>) -> BoundExpr<V> {
    let e = extent.clone();
    BoundExpr::sum(vec![
        BoundExpr::int(G_MEMORY as i64).times(e.clone()),
        e.clone().times(e).floor_div(512),
    ])
    .simplify()
}

/// Length of a memory range touched by an opcode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemLen {
    Fixed(u64),
    Operand(usize),
}

/// A memory range an opcode touches: start operand index and length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemRange {
    pub offset: usize,
    pub len: MemLen,
    pub writes: bool,
}

/// Memory ranges touched by `op`, in operand-index terms.
pub fn memory_ranges(op: Opcode) -> Vec<MemRange> {
    use Opcode::*;
    let r = |offset, len, writes| MemRange { offset, len, writes };
    match op {
        Mload => vec![r(0, MemLen::Fixed(32), false)],
        Mstore => vec![r(0, MemLen::Fixed(32), true)],
        Mstore8 => vec![r(0, MemLen::Fixed(1), true)],
        Sha3 => vec![r(0, MemLen::Operand(1), false)],
        Calldatacopy | Codecopy | Returndatacopy => vec![r(0, MemLen::Operand(2), true)],
        Extcodecopy => vec![r(1, MemLen::Operand(3), true)],
        Log(_) => vec![r(0, MemLen::Operand(1), false)],
        Create => vec![r(1, MemLen::Operand(2), false)],
        Call | Callcode => vec![r(3, MemLen::Operand(4), false), r(5, MemLen::Operand(6), true)],
        Delegatecall | Staticcall => vec![r(2, MemLen::Operand(3), false), r(4, MemLen::Operand(5), true)],
        Return | Revert => vec![r(0, MemLen::Operand(1), false)],
        _ => Vec::new(),
    }
}

/// Active words after touching `[offset, offset+len)`; `None` past 2^64 words.
pub fn words_after(offset: U256, len: U256) -> Option<u64> {
    if len.is_zero() {
        return Some(0);
    }
    let end = big(offset) + big(len);
    u64::try_from((end + 31) / 32).ok()
}

impl fmt::Display for CostClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CostClass::Constant(c) => write!(f, "{c}"),
            CostClass::Conditional(a, b) => write!(f, "max({a}, {b})"),
            CostClass::Parametric(t) => {
                write!(f, "{}", t.base)?;
                for (c, role) in &t.terms {
                    write!(f, " + {c}*{role:?}")?;
                }
                Ok(())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::rat;

    #[test]
    fn fixed_costs() {
        let s = GasSchedule::byzantium();
        let none: [Operand<&str>; 0] = [];
        assert_eq!(s.opcode_cost_upper(Opcode::Sstore, &none), BoundExpr::int(20000));
        assert_eq!(s.opcode_cost_upper(Opcode::Jumpdest, &none), BoundExpr::int(1));
        assert_eq!(s.opcode_cost_upper(Opcode::Selfdestruct, &none), BoundExpr::int(30000));
    }

    #[test]
    fn exp_template() {
        let s = GasSchedule::byzantium();
        let ops = [Operand::Unknown, Operand::Linear(LinExpr::var("e"))];
        let c = s.opcode_cost_upper(Opcode::Exp, &ops);
        assert_eq!(c.to_string(), "20 + 10*floor(log256(nat(e)))");
        let unknown = [Operand::<&str>::Unknown, Operand::Unknown];
        assert_eq!(s.opcode_cost_upper(Opcode::Exp, &unknown), BoundExpr::int(10 + 10 * 32));
        let zero = [Operand::<&str>::Unknown, Operand::Const(U256::zero())];
        assert_eq!(s.opcode_cost_upper(Opcode::Exp, &zero), BoundExpr::int(10));
        let big = [Operand::<&str>::Unknown, Operand::Const(U256::from(256))];
        assert_eq!(s.opcode_cost_upper(Opcode::Exp, &big), BoundExpr::int(30));
        assert_eq!(s.concrete_cost(Opcode::Exp, &[U256::from(3), U256::from(256)]), Some(30));
    }

    #[test]
    fn sha3_words() {
        let s = GasSchedule::byzantium();
        let ops = [Operand::<&str>::Const(U256::zero()), Operand::Const(U256::from(64))];
        assert_eq!(s.opcode_cost_upper(Opcode::Sha3, &ops), BoundExpr::int(30 + 12));
        let sym = [Operand::Const(U256::zero()), Operand::Linear(LinExpr::var("n"))];
        let c = s.opcode_cost_upper(Opcode::Sha3, &sym);
        let mut env = |_: &&str| rat(33);
        assert_eq!(c.eval(&mut env), Some(rat(30 + 12)));
    }

    #[test]
    fn class_partition() {
        let s = GasSchedule::byzantium();
        let mut parametric = Vec::new();
        for op in Opcode::all() {
            let n = usize::from(s.constant_costs.contains_key(&op))
                + usize::from(s.conditional_costs.contains_key(&op))
                + usize::from(s.parametric_costs.contains_key(&op));
            assert_eq!(n, 1, "{op}");
            if s.parametric_costs.contains_key(&op) {
                parametric.push(op.mnemonic());
            }
        }
        parametric.sort();
        let mut expected = vec![
            "EXP", "CALLDATACOPY", "CODECOPY", "RETURNDATACOPY", "CALL", "SHA3", "LOG0", "LOG1", "LOG2",
            "LOG3", "LOG4", "EXTCODECOPY",
        ];
        expected.sort();
        assert_eq!(parametric, expected);
        assert_eq!(s.g_memory, 3);
    }

    #[test]
    fn memory_cost_values() {
        assert_eq!(mem_cost(0), 0);
        assert_eq!(mem_cost(1), 3);
        assert_eq!(mem_cost(1024), 5120);
        assert_eq!(mem_cost_delta(0, 1), Ok(3));
        assert_eq!(mem_cost_delta(5, 5), Ok(0));
        assert_eq!(mem_cost_delta(0, 32), Ok(98));
        assert!(mem_cost_delta(3, 2).is_err());
    }

    #[test]
    fn symbolic_memory_cost_matches() {
        let e = BoundExpr::Nat(LinExpr::var("a"));
        let c = mem_cost_bound(&e);
        for a in [0u64, 1, 7, 512, 1000] {
            let mut env = |_: &&str| rat(a as i64);
            assert_eq!(c.eval(&mut env), Some(Rat::from_integer(BigInt::from(mem_cost(a)))));
        }
    }

    #[test]
    fn overrides() {
        let s = GasSchedule::byzantium().with_overrides("# test\nSLOAD=50\nbalance = 20\n").unwrap();
        assert_eq!(s.class_of(Opcode::Sload), CostClass::Constant(50));
        assert_eq!(s.class_of(Opcode::Balance), CostClass::Constant(20));
        assert!(GasSchedule::byzantium().with_overrides("SSTORE=1").is_err());
        assert!(GasSchedule::byzantium().with_overrides("FOO=1").is_err());
        assert!(GasSchedule::byzantium().with_overrides("ADD").is_err());
    }

    #[test]
    fn words_after_ranges() {
        assert_eq!(words_after(U256::zero(), U256::from(32)), Some(1));
        assert_eq!(words_after(U256::from(0x80), U256::from(0x20)), Some(5));
        assert_eq!(words_after(U256::from(5), U256::zero()), Some(0));
        assert_eq!(words_after(U256::MAX, U256::from(1)), None);
    }
}
