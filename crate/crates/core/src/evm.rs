//! Bytecode decoding and static opcode metadata.
//!
//! The opcode set is the Byzantium schedule (the one shipped with geth
//! 1.8.x): no SHL/SHR/SAR, CREATE2, EXTCODEHASH or CHAINID. Bytes outside
//! the set decode to [`Opcode::Invalid`]; the raw byte is kept on the
//! [`Instruction`] so decoding can be reversed exactly.

use std::fmt;

use primitive_types::U256;

/// Identifier written into reports so readers know which opcode table was used.
pub const SCHEDULE_ID: &str = "evm-byzantium (geth 1.8.x opcode set)";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Opcode {
    Stop,
    Add,
    Mul,
    Sub,
    Div,
    Sdiv,
    Mod,
    Smod,
    Addmod,
    Mulmod,
    Exp,
    Signextend,
    Lt,
    Gt,
    Slt,
    Sgt,
    Eq,
    Iszero,
    And,
    Or,
    Xor,
    Not,
    Byte,
    Sha3,
    Address,
    Balance,
    Origin,
    Caller,
    Callvalue,
    Calldataload,
    Calldatasize,
    Calldatacopy,
    Codesize,
    Codecopy,
    Gasprice,
    Extcodesize,
    Extcodecopy,
    Returndatasize,
    Returndatacopy,
    Blockhash,
    Coinbase,
    Timestamp,
    Number,
    Difficulty,
    Gaslimit,
    Pop,
    Mload,
    Mstore,
    Mstore8,
    Sload,
    Sstore,
    Jump,
    Jumpi,
    Pc,
    Msize,
    Gas,
    Jumpdest,
    /// PUSH1..PUSH32; the payload is the immediate width in bytes.
    Push(u8),
    /// DUP1..DUP16.
    Dup(u8),
    /// SWAP1..SWAP16.
    Swap(u8),
    /// LOG0..LOG4; the payload is the topic count.
    Log(u8),
    Create,
    Call,
    Callcode,
    Return,
    Delegatecall,
    Staticcall,
    Revert,
    Invalid,
    Selfdestruct,
}

const PUSH_NAMES: [&str; 32] = [
    "PUSH1", "PUSH2", "PUSH3", "PUSH4", "PUSH5", "PUSH6", "PUSH7", "PUSH8", "PUSH9", "PUSH10",
    "PUSH11", "PUSH12", "PUSH13", "PUSH14", "PUSH15", "PUSH16", "PUSH17", "PUSH18", "PUSH19",
    "PUSH20", "PUSH21", "PUSH22", "PUSH23", "PUSH24", "PUSH25", "PUSH26", "PUSH27", "PUSH28",
    "PUSH29", "PUSH30", "PUSH31", "PUSH32",
];
const DUP_NAMES: [&str; 16] = [
    "DUP1", "DUP2", "DUP3", "DUP4", "DUP5", "DUP6", "DUP7", "DUP8", "DUP9", "DUP10", "DUP11",
    "DUP12", "DUP13", "DUP14", "DUP15", "DUP16",
];
const SWAP_NAMES: [&str; 16] = [
    "SWAP1", "SWAP2", "SWAP3", "SWAP4", "SWAP5", "SWAP6", "SWAP7", "SWAP8", "SWAP9", "SWAP10",
    "SWAP11", "SWAP12", "SWAP13", "SWAP14", "SWAP15", "SWAP16",
];
const LOG_NAMES: [&str; 5] = ["LOG0", "LOG1", "LOG2", "LOG3", "LOG4"];

impl Opcode {
    /// Decodes one opcode byte. Total: unknown bytes map to `Invalid`.
    pub fn from_byte(b: u8) -> Opcode {
        use Opcode::*;
        match b {
            0x00 => Stop,
            0x01 => Add,
            0x02 => Mul,
            0x03 => Sub,
            0x04 => Div,
            0x05 => Sdiv,
            0x06 => Mod,
            0x07 => Smod,
            0x08 => Addmod,
            0x09 => Mulmod,
            0x0a => Exp,
            0x0b => Signextend,
            0x10 => Lt,
            0x11 => Gt,
            0x12 => Slt,
            0x13 => Sgt,
            0x14 => Eq,
            0x15 => Iszero,
            0x16 => And,
            0x17 => Or,
            0x18 => Xor,
            0x19 => Not,
            0x1a => Byte,
            0x20 => Sha3,
            0x30 => Address,
            0x31 => Balance,
            0x32 => Origin,
            0x33 => Caller,
            0x34 => Callvalue,
            0x35 => Calldataload,
            0x36 => Calldatasize,
            0x37 => Calldatacopy,
            0x38 => Codesize,
            0x39 => Codecopy,
            0x3a => Gasprice,
            0x3b => Extcodesize,
            0x3c => Extcodecopy,
            0x3d => Returndatasize,
            0x3e => Returndatacopy,
            0x40 => Blockhash,
            0x41 => Coinbase,
            0x42 => Timestamp,
            0x43 => Number,
            0x44 => Difficulty,
            0x45 => Gaslimit,
            0x50 => Pop,
            0x51 => Mload,
            0x52 => Mstore,
            0x53 => Mstore8,
            0x54 => Sload,
            0x55 => Sstore,
            0x56 => Jump,
            0x57 => Jumpi,
            0x58 => Pc,
            0x59 => Msize,
            0x5a => Gas,
            0x5b => Jumpdest,
            0x60..=0x7f => Push(b - 0x5f),
            0x80..=0x8f => Dup(b - 0x7f),
            0x90..=0x9f => Swap(b - 0x8f),
            0xa0..=0xa4 => Log(b - 0xa0),
            0xf0 => Create,
            0xf1 => Call,
            0xf2 => Callcode,
            0xf3 => Return,
            0xf4 => Delegatecall,
            0xfa => Staticcall,
            0xfd => Revert,
            0xff => Selfdestruct,
            _ => Invalid,
        }
    }

    /// Canonical encoding. `Invalid` encodes as the designated 0xfe byte.
    pub fn byte(self) -> u8 {
        use Opcode::*;
        match self {
            Stop => 0x00,
            Add => 0x01,
            Mul => 0x02,
            Sub => 0x03,
            Div => 0x04,
            Sdiv => 0x05,
            Mod => 0x06,
            Smod => 0x07,
            Addmod => 0x08,
            Mulmod => 0x09,
            Exp => 0x0a,
            Signextend => 0x0b,
            Lt => 0x10,
            Gt => 0x11,
            Slt => 0x12,
            Sgt => 0x13,
            Eq => 0x14,
            Iszero => 0x15,
            And => 0x16,
            Or => 0x17,
            Xor => 0x18,
            Not => 0x19,
            Byte => 0x1a,
            Sha3 => 0x20,
            Address => 0x30,
            Balance => 0x31,
            Origin => 0x32,
            Caller => 0x33,
            Callvalue => 0x34,
            Calldataload => 0x35,
            Calldatasize => 0x36,
            Calldatacopy => 0x37,
            Codesize => 0x38,
            Codecopy => 0x39,
            Gasprice => 0x3a,
            Extcodesize => 0x3b,
            Extcodecopy => 0x3c,
            Returndatasize => 0x3d,
            Returndatacopy => 0x3e,
            Blockhash => 0x40,
            Coinbase => 0x41,
            Timestamp => 0x42,
            Number => 0x43,
            Difficulty => 0x44,
            Gaslimit => 0x45,
            Pop => 0x50,
            Mload => 0x51,
            Mstore => 0x52,
            Mstore8 => 0x53,
            Sload => 0x54,
            Sstore => 0x55,
            Jump => 0x56,
            Jumpi => 0x57,
            Pc => 0x58,
            Msize => 0x59,
            Gas => 0x5a,
            Jumpdest => 0x5b,
            Push(n) => 0x5f + n,
            Dup(n) => 0x7f + n,
            Swap(n) => 0x8f + n,
            Log(n) => 0xa0 + n,
            Create => 0xf0,
            Call => 0xf1,
            Callcode => 0xf2,
            Return => 0xf3,
            Delegatecall => 0xf4,
            Staticcall => 0xfa,
            Revert => 0xfd,
            Invalid => 0xfe,
            Selfdestruct => 0xff,
        }
    }

    pub fn mnemonic(self) -> &'static str {
        use Opcode::*;
        match self {
            Stop => "STOP",
            Add => "ADD",
            Mul => "MUL",
            Sub => "SUB",
            Div => "DIV",
            Sdiv => "SDIV",
            Mod => "MOD",
            Smod => "SMOD",
            Addmod => "ADDMOD",
            Mulmod => "MULMOD",
            Exp => "EXP",
            Signextend => "SIGNEXTEND",
            Lt => "LT",
            Gt => "GT",
            Slt => "SLT",
            Sgt => "SGT",
            Eq => "EQ",
            Iszero => "ISZERO",
            And => "AND",
            Or => "OR",
            Xor => "XOR",
            Not => "NOT",
            Byte => "BYTE",
            Sha3 => "SHA3",
            Address => "ADDRESS",
            Balance => "BALANCE",
            Origin => "ORIGIN",
            Caller => "CALLER",
            Callvalue => "CALLVALUE",
            Calldataload => "CALLDATALOAD",
            Calldatasize => "CALLDATASIZE",
            Calldatacopy => "CALLDATACOPY",
            Codesize => "CODESIZE",
            Codecopy => "CODECOPY",
            Gasprice => "GASPRICE",
            Extcodesize => "EXTCODESIZE",
            Extcodecopy => "EXTCODECOPY",
            Returndatasize => "RETURNDATASIZE",
            Returndatacopy => "RETURNDATACOPY",
            Blockhash => "BLOCKHASH",
            Coinbase => "COINBASE",
            Timestamp => "TIMESTAMP",
            Number => "NUMBER",
            Difficulty => "DIFFICULTY",
            Gaslimit => "GASLIMIT",
            Pop => "POP",
            Mload => "MLOAD",
            Mstore => "MSTORE",
            Mstore8 => "MSTORE8",
            Sload => "SLOAD",
            Sstore => "SSTORE",
            Jump => "JUMP",
            Jumpi => "JUMPI",
            Pc => "PC",
            Msize => "MSIZE",
            Gas => "GAS",
            Jumpdest => "JUMPDEST",
            Push(n) => PUSH_NAMES[usize::from(n - 1)],
            Dup(n) => DUP_NAMES[usize::from(n - 1)],
            Swap(n) => SWAP_NAMES[usize::from(n - 1)],
            Log(n) => LOG_NAMES[usize::from(n)],
            Create => "CREATE",
            Call => "CALL",
            Callcode => "CALLCODE",
            Return => "RETURN",
            Delegatecall => "DELEGATECALL",
            Staticcall => "STATICCALL",
            Revert => "REVERT",
            Invalid => "INVALID",
            Selfdestruct => "SELFDESTRUCT",
        }
    }

    /// Parses a mnemonic as printed by [`Opcode::mnemonic`] (case-insensitive).
    /// `KECCAK256` is accepted as an alias of `SHA3`.
    pub fn from_mnemonic(name: &str) -> Option<Opcode> {
        let upper = name.to_ascii_uppercase();
        if upper == "KECCAK256" {
            return Some(Opcode::Sha3);
        }
        Opcode::all().find(|op| op.mnemonic() == upper)
    }

    /// Every opcode of the pinned set, in byte order (`Invalid` included once).
    pub fn all() -> impl Iterator<Item = Opcode> {
        (0u8..=255)
            .map(Opcode::from_byte)
            .filter(|op| *op != Opcode::Invalid)
            .chain(std::iter::once(Opcode::Invalid))
    }

    /// Width of the immediate operand in bytes.
    pub fn immediate_len(self) -> usize {
        match self {
            Opcode::Push(n) => usize::from(n),
            _ => 0,
        }
    }

    pub fn info(self) -> OpcodeInfo {
        opcode_info(self)
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

/// Static per-opcode metadata.
///
/// `stack_pops`/`stack_pushes` are the net stack effect, so DUPn is
/// (0, 1) and SWAPn is (0, 0); `stack_depth` is how deep the instruction
/// reaches and is what underflow checks must use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpcodeInfo {
    pub mnemonic: &'static str,
    pub stack_pops: u32,
    pub stack_pushes: u32,
    pub stack_depth: u32,
    pub is_terminator: bool,
    pub is_jump: bool,
    pub touches_memory: bool,
    pub touches_storage: bool,
}

pub fn opcode_info(op: Opcode) -> OpcodeInfo {
    use Opcode::*;
    let (pops, pushes): (u32, u32) = match op {
        Stop | Jumpdest | Invalid => (0, 0),
        Add | Mul | Sub | Div | Sdiv | Mod | Smod | Exp | Signextend | Lt | Gt | Slt | Sgt
        | Eq | And | Or | Xor | Byte | Sha3 => (2, 1),
        Addmod | Mulmod => (3, 1),
        Iszero | Not | Balance | Calldataload | Extcodesize | Blockhash | Mload | Sload => (1, 1),
        Address | Origin | Caller | Callvalue | Calldatasize | Codesize | Gasprice
        | Returndatasize | Coinbase | Timestamp | Number | Difficulty | Gaslimit | Pc | Msize
        | Gas => (0, 1),
        Calldatacopy | Codecopy | Returndatacopy => (3, 0),
        Extcodecopy => (4, 0),
        Pop | Jump | Selfdestruct => (1, 0),
        Mstore | Mstore8 | Sstore | Jumpi | Return | Revert => (2, 0),
        Push(_) | Dup(_) => (0, 1),
        Swap(_) => (0, 0),
        Log(n) => (2 + u32::from(n), 0),
        Create => (3, 1),
        Call | Callcode => (7, 1),
        Delegatecall | Staticcall => (6, 1),
    };
    let depth = match op {
        Dup(n) => u32::from(n),
        Swap(n) => u32::from(n) + 1,
        _ => pops,
    };
    OpcodeInfo {
        mnemonic: op.mnemonic(),
        stack_pops: pops,
        stack_pushes: pushes,
        stack_depth: depth,
        is_terminator: matches!(op, Stop | Return | Revert | Selfdestruct | Invalid | Jump),
        is_jump: matches!(op, Jump | Jumpi),
        touches_memory: matches!(
            op,
            Mload
                | Mstore
                | Mstore8
                | Sha3
                | Calldatacopy
                | Codecopy
                | Extcodecopy
                | Returndatacopy
                | Log(_)
                | Create
                | Call
                | Callcode
                | Delegatecall
                | Staticcall
                | Return
                | Revert
        ),
        touches_storage: matches!(op, Sload | Sstore),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub offset: usize,
    pub opcode: Opcode,
    /// The byte as found in the input; differs from `opcode.byte()` only for
    /// unknown bytes decoded as `Invalid`.
    pub raw: u8,
    pub immediate: Vec<u8>,
    /// Set when a PUSH ran past the end of code and was zero-padded.
    pub truncated: bool,
}

impl Instruction {
    pub fn size(&self) -> usize {
        1 + self.immediate.len()
    }

    pub fn next_offset(&self) -> usize {
        self.offset + self.size()
    }

    /// The pushed value for PUSH instructions.
    pub fn push_value(&self) -> Option<U256> {
        match self.opcode {
            Opcode::Push(_) => Some(U256::from_big_endian(&self.immediate)),
            _ => None,
        }
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.immediate.is_empty() {
            write!(f, "{}", self.opcode)
        } else {
            write!(f, "{} 0x{}", self.opcode, hex::encode(&self.immediate))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DecodedProgram {
    pub instructions: Vec<Instruction>,
    pub code_size: usize,
}

impl DecodedProgram {
    /// Index of the instruction starting at `offset`, if any.
    pub fn index_of(&self, offset: usize) -> Option<usize> {
        self.instructions.binary_search_by_key(&offset, |i| i.offset).ok()
    }

    pub fn at(&self, offset: usize) -> Option<&Instruction> {
        self.index_of(offset).map(|i| &self.instructions[i])
    }

    pub fn is_jumpdest(&self, offset: usize) -> bool {
        self.at(offset).is_some_and(|i| i.opcode == Opcode::Jumpdest)
    }

    /// Re-encodes the instruction stream. Truncated pushes come back padded.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.code_size);
        for ins in &self.instructions {
            out.push(ins.raw);
            out.extend_from_slice(&ins.immediate);
        }
        out
    }

    pub fn has_truncated_push(&self) -> bool {
        self.instructions.iter().any(|i| i.truncated)
    }
}

/// Decodes raw bytecode. Total over all inputs.
pub fn decode(bytecode: &[u8]) -> DecodedProgram {
    let mut instructions = Vec::new();
    let mut pc = 0;
    while pc < bytecode.len() {
        let raw = bytecode[pc];
        let opcode = Opcode::from_byte(raw);
        let width = opcode.immediate_len();
        let start = pc + 1;
        let end = (start + width).min(bytecode.len());
        let mut immediate = bytecode[start..end].to_vec();
        let truncated = immediate.len() < width;
        immediate.resize(width, 0);
        instructions.push(Instruction { offset: pc, opcode, raw, immediate, truncated });
        pc = start + width;
    }
    DecodedProgram { instructions, code_size: bytecode.len() }
}

/// Parses a hex string, tolerating a `0x` prefix and interior whitespace.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, hex::FromHexError> {
    let cleaned: String = text.split_whitespace().collect();
    let body = cleaned.strip_prefix("0x").or_else(|| cleaned.strip_prefix("0X")).unwrap_or(&cleaned);
    hex::decode(body)
}

/// Assembles a whitespace/line separated mnemonic listing.
///
/// Accepts lines such as `PUSH1 0x80`, `0x0004 JUMPDEST` or `4: MSTORE`;
/// a leading offset column is ignored. `;` and `//` start comments.
/// `name:` marks a label (it emits nothing) and a push operand `@name`
/// stands for the label's offset.
pub fn assemble(text: &str) -> Result<Vec<u8>, String> {
    enum Item<'a> {
        Op(Opcode, Option<&'a str>, usize),
        Label(&'a str),
    }
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split(';').next().unwrap_or("");
        let line = line.split("//").next().unwrap_or("");
        let mut tokens = line.split_whitespace().peekable();
        if let Some(first) = tokens.peek() {
            let bare = first.trim_end_matches(':');
            let is_offset = bare.starts_with("0x") && Opcode::from_mnemonic(bare).is_none()
                || bare.chars().all(|c| c.is_ascii_digit());
            if is_offset && !bare.is_empty() {
                tokens.next();
            }
        }
        while let Some(tok) = tokens.next() {
            if let Some(name) = tok.strip_suffix(':') {
                items.push(Item::Label(name));
                continue;
            }
            let op = Opcode::from_mnemonic(tok)
                .ok_or_else(|| format!("line {}: unknown mnemonic `{tok}`", lineno + 1))?;
            let arg = match op {
                Opcode::Push(_) => Some(
                    tokens.next().ok_or_else(|| format!("line {}: {tok} needs an operand", lineno + 1))?,
                ),
                _ => None,
            };
            items.push(Item::Op(op, arg, lineno + 1));
        }
    }
    let mut labels = std::collections::HashMap::new();
    let mut pc = 0usize;
    for it in &items {
        match it {
            Item::Label(name) => {
                if labels.insert(*name, pc).is_some() {
                    return Err(format!("label `{name}` defined twice"));
                }
            }
            Item::Op(op, ..) => pc += 1 + op.immediate_len(),
        }
    }
    let mut out = Vec::with_capacity(pc);
    for it in &items {
        let Item::Op(op, arg, lineno) = it else { continue };
        out.push(op.byte());
        let (Opcode::Push(n), Some(arg)) = (op, arg) else { continue };
        let value = match arg.strip_prefix('@') {
            Some(name) => labels
                .get(name)
                .map(|&o| U256::from(o))
                .ok_or_else(|| format!("line {lineno}: unknown label `{name}`"))?,
            None => parse_u256(arg).ok_or_else(|| format!("line {lineno}: bad operand `{arg}`"))?,
        };
        let bytes = u256_to_bytes(&value);
        let width = usize::from(*n);
        if bytes[..32 - width].iter().any(|b| *b != 0) {
            return Err(format!("line {lineno}: operand `{arg}` does not fit {}", op.mnemonic()));
        }
        out.extend_from_slice(&bytes[32 - width..]);
    }
    Ok(out)
}

/// Parses `0x`-prefixed hex or decimal.
pub fn parse_u256(s: &str) -> Option<U256> {
    if let Some(h) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        if h.is_empty() || h.len() > 64 {
            return None;
        }
        U256::from_str_radix(h, 16).ok()
    } else {
        U256::from_dec_str(s).ok()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn decodes_push_jump_program() {
        let p = decode(&[0x60, 0x04, 0x56, 0x00, 0x5b, 0x00]);
        let ops: Vec<_> = p.instructions.iter().map(|i| (i.offset, i.opcode)).collect();
        assert_eq!(
            ops,
            vec![
                (0, Opcode::Push(1)),
                (2, Opcode::Jump),
                (3, Opcode::Stop),
                (4, Opcode::Jumpdest),
                (5, Opcode::Stop)
            ]
        );
        assert_eq!(p.instructions[0].immediate, vec![0x04]);
        assert_eq!(p.code_size, 6);
    }

    #[test]
    fn empty_input() {
        let p = decode(&[]);
        assert!(p.instructions.is_empty());
        assert_eq!(p.code_size, 0);
    }

    #[test]
    fn truncated_push_is_padded() {
        let p = decode(&[0x61, 0x00]);
        assert_eq!(p.instructions.len(), 1);
        let i = &p.instructions[0];
        assert_eq!(i.opcode, Opcode::Push(2));
        assert_eq!(i.immediate, vec![0, 0]);
        assert!(i.truncated);
    }

    #[test]
    fn unknown_bytes_are_invalid() {
        let p = decode(&[0x0c, 0x1b, 0xf5, 0x3f]);
        assert!(p.instructions.iter().all(|i| i.opcode == Opcode::Invalid));
        assert_eq!(p.to_bytes(), vec![0x0c, 0x1b, 0xf5, 0x3f]);
    }

    #[test]
    fn opcode_metadata_spot_checks() {
        let add = opcode_info(Opcode::Add);
        assert_eq!((add.stack_pops, add.stack_pushes, add.is_terminator), (2, 1, false));
        let jumpi = opcode_info(Opcode::Jumpi);
        assert_eq!((jumpi.stack_pops, jumpi.stack_pushes, jumpi.is_jump), (2, 0, true));
        let stop = opcode_info(Opcode::Stop);
        assert_eq!((stop.stack_pops, stop.stack_pushes, stop.is_terminator), (0, 0, true));
        assert_eq!(opcode_info(Opcode::Call).stack_pops, 7);
        assert_eq!(opcode_info(Opcode::Log(3)).stack_pops, 5);
        assert_eq!(opcode_info(Opcode::Swap(16)).stack_depth, 17);
        assert!(opcode_info(Opcode::Jump).is_terminator);
        assert!(!opcode_info(Opcode::Jumpi).is_terminator);
    }

    #[test]
    fn byte_encoding_is_a_bijection_on_known_opcodes() {
        for op in Opcode::all() {
            assert_eq!(Opcode::from_byte(op.byte()), op);
            assert_eq!(Opcode::from_mnemonic(op.mnemonic()), Some(op));
        }
        // pre-Constantinople: SHL, SHR, SAR, CREATE2, EXTCODEHASH are not in the set
        for b in [0x1b, 0x1c, 0x1d, 0xf5, 0x3f, 0x46] {
            assert_eq!(Opcode::from_byte(b), Opcode::Invalid);
        }
        assert!(opcode_info(Opcode::Push(1)).stack_pushes <= 1);
        assert!(Opcode::all().all(|op| opcode_info(op).stack_pushes <= 1));
    }

    #[test]
    fn labels_resolve() {
        let bytes = assemble("PUSH1 @end\nJUMP\nloop:\nSTOP\nend: JUMPDEST\nPUSH2 @loop\nSTOP").unwrap();
        assert_eq!(bytes, vec![0x60, 0x04, 0x56, 0x00, 0x5b, 0x61, 0x00, 0x03, 0x00]);
        assert!(assemble("PUSH1 @nowhere").is_err());
        assert!(assemble("a:\na:\nSTOP").is_err());
    }

    #[test]
    fn assembles_listing() {
        let bytes = assemble("PUSH1 0x04\n0x0002 JUMP ; go\nSTOP\n4: JUMPDEST\nSTOP").unwrap();
        assert_eq!(bytes, vec![0x60, 0x04, 0x56, 0x00, 0x5b, 0x00]);
        assert!(assemble("PUSH1 0x100").is_err());
        assert!(assemble("FOO").is_err());
    }

    #[test]
    fn hex_parsing() {
        assert_eq!(parse_hex("0x6004 5600").unwrap(), vec![0x60, 0x04, 0x56, 0x00]);
        assert!(parse_hex("0xzz").is_err());
    }

    proptest! {
        #[test]
        fn coverage_and_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..300)) {
            let p = decode(&bytes);
            let covered: usize = p.instructions.iter().map(Instruction::size).sum();
            prop_assert_eq!(covered, p.code_size.max(covered));
            if !p.has_truncated_push() {
                prop_assert_eq!(covered, bytes.len());
                prop_assert_eq!(p.to_bytes(), bytes.clone());
            }
            let mut expected = 0;
            for ins in &p.instructions {
                prop_assert_eq!(ins.offset, expected);
                prop_assert_eq!(ins.immediate.len(), ins.opcode.immediate_len());
                expected = ins.next_offset();
            }
        }
    }
}

/// Big-endian 32-byte encoding.
pub fn u256_to_bytes(v: &U256) -> [u8; 32] {
    let mut out = [0u8; 32];
    v.to_big_endian(&mut out);
    out
}

fn is_negative(v: &U256) -> bool {
    v.bit(255)
}

fn twos_neg(v: U256) -> U256 {
    (!v).overflowing_add(U256::one()).0
}

fn abs(v: U256) -> U256 {
    if is_negative(&v) {
        twos_neg(v)
    } else {
        v
    }
}

/// Result of a stack-only opcode on concrete operands (top of stack
/// first). `None` for opcodes that read machine or world state.
pub fn eval_pure(op: Opcode, args: &[U256]) -> Option<U256> {
    use Opcode::*;
    let a = |i: usize| args.get(i).copied();
    let bool_word = |b: bool| if b { U256::one() } else { U256::zero() };
    Some(match op {
        Add => a(0)?.overflowing_add(a(1)?).0,
        Mul => a(0)?.overflowing_mul(a(1)?).0,
        Sub => a(0)?.overflowing_sub(a(1)?).0,
        Div => {
            let d = a(1)?;
            if d.is_zero() {
                U256::zero()
            } else {
                a(0)? / d
            }
        }
        Sdiv => {
            let (x, y) = (a(0)?, a(1)?);
            if y.is_zero() {
                U256::zero()
            } else {
                let q = abs(x) / abs(y);
                if is_negative(&x) != is_negative(&y) {
                    twos_neg(q)
                } else {
                    q
                }
            }
        }
        Mod => {
            let d = a(1)?;
            if d.is_zero() {
                U256::zero()
            } else {
                a(0)? % d
            }
        }
        Smod => {
            let (x, y) = (a(0)?, a(1)?);
            if y.is_zero() {
                U256::zero()
            } else {
                let r = abs(x) % abs(y);
                if is_negative(&x) {
                    twos_neg(r)
                } else {
                    r
                }
            }
        }
        Addmod | Mulmod => {
            let (x, y, m) = (a(0)?, a(1)?, a(2)?);
            if m.is_zero() {
                U256::zero()
            } else {
                let (x, y, m) = (to_big(x), to_big(y), to_big(m));
                let r = if op == Addmod { (x + y) % m } else { (x * y) % m };
                from_big(&r)
            }
        }
        Exp => a(0)?.overflowing_pow(a(1)?).0,
        Signextend => {
            let (k, x) = (a(0)?, a(1)?);
            if k >= U256::from(31) {
                x
            } else {
                let bit = k.low_u32() as usize * 8 + 7;
                let mask = (U256::one() << bit) - U256::one();
                if x.bit(bit) {
                    x | !mask
                } else {
                    x & mask
                }
            }
        }
        Lt => bool_word(a(0)? < a(1)?),
        Gt => bool_word(a(0)? > a(1)?),
        Slt | Sgt => {
            let (x, y) = (a(0)?, a(1)?);
            let less = match (is_negative(&x), is_negative(&y)) {
                (true, false) => true,
                (false, true) => false,
                _ => x < y,
            };
            let greater = x != y && !less;
            bool_word(if op == Slt { less } else { greater })
        }
        Eq => bool_word(a(0)? == a(1)?),
        Iszero => bool_word(a(0)?.is_zero()),
        And => a(0)? & a(1)?,
        Or => a(0)? | a(1)?,
        Xor => a(0)? ^ a(1)?,
        Not => !a(0)?,
        Byte => {
            let (i, x) = (a(0)?, a(1)?);
            if i >= U256::from(32) {
                U256::zero()
            } else {
                U256::from(x.byte(31 - i.low_u32() as usize))
            }
        }
        _ => return None,
    })
}

pub fn to_big(v: U256) -> num_bigint::BigUint {
    num_bigint::BigUint::from_bytes_be(&u256_to_bytes(&v))
}

/// Truncates to the low 256 bits.
pub fn from_big(v: &num_bigint::BigUint) -> U256 {
    let bytes = v.to_bytes_be();
    let tail = &bytes[bytes.len().saturating_sub(32)..];
    U256::from_big_endian(tail)
}
