//! Concrete EVM interpreter that meters gas exactly.
//!
//! It exists to check the analyzer, so it runs in a fixed context: a
//! single contract with a non-zero balance, every other account empty,
//! and external calls that succeed without executing anything.

use std::collections::BTreeMap;

use primitive_types::U256;
use tiny_keccak::{Hasher, Keccak};

use crate::evm::{decode, eval_pure, u256_to_bytes, DecodedProgram, Opcode};
use crate::gas::{self, memory_ranges, words_after, GasSchedule, MemLen};

pub const STACK_LIMIT: usize = 1024;
/// Memory beyond this many words is refused instead of allocated.
pub const MEMORY_WORD_LIMIT: u64 = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MeterError {
    #[error("unsupported opcode {0} at {1}")]
    UnsupportedOpcode(Opcode, usize),
    #[error("step limit {0} exceeded")]
    StepLimitExceeded(u64),
    #[error("stack underflow at {0}")]
    StackUnderflow(usize),
    #[error("stack overflow at {0}")]
    StackOverflow(usize),
    #[error("bad jump destination {target:#x} at {offset}")]
    BadJumpDest { offset: usize, target: U256 },
    #[error("memory access beyond the supported size at {0}")]
    MemoryLimit(usize),
    #[error("gas overflow at {0}")]
    GasOverflow(usize),
}

/// Fixed environment the meter runs in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Context {
    pub address: U256,
    pub caller: U256,
    pub origin: U256,
    pub callvalue: U256,
    pub gasprice: U256,
    pub coinbase: U256,
    pub timestamp: U256,
    pub number: U256,
    pub difficulty: U256,
    pub gaslimit: U256,
    pub balance: U256,
}

impl Default for Context {
    fn default() -> Self {
        Context {
            address: U256::from(0xc0ffee_u64),
            caller: U256::from(0xca11e4_u64),
            origin: U256::from(0xca11e4_u64),
            callvalue: U256::zero(),
            gasprice: U256::from(1),
            coinbase: U256::from(0xc0b_u64),
            timestamp: U256::from(1_500_000_000_u64),
            number: U256::from(4_000_000_u64),
            difficulty: U256::from(1),
            gaslimit: U256::from(8_000_000_u64),
            balance: U256::from(1_000_000_000_u64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Halt {
    Stop,
    Return,
    Revert,
    Invalid,
    Selfdestruct,
    /// Ran off the end of code.
    End,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecState {
    pub stack: Vec<U256>,
    pub memory: Vec<u8>,
    pub active_words: u64,
    pub storage: BTreeMap<U256, U256>,
    pub gas_used: u64,
    pub mem_gas: u64,
    pub calldata: Vec<u8>,
    pub halted: Option<Halt>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecResult {
    pub gas_used: u64,
    pub mem_gas: u64,
    pub active_words: u64,
    pub storage: BTreeMap<U256, U256>,
    pub halt: Halt,
    pub steps: u64,
    pub output: Vec<u8>,
}

impl ExecResult {
    pub fn total_gas(&self) -> u64 {
        self.gas_used + self.mem_gas
    }
}

pub fn keccak256(data: &[u8]) -> [u8; 32] {
    let mut k = Keccak::v256();
    k.update(data);
    let mut out = [0u8; 32];
    k.finalize(&mut out);
    out
}

/// Runs `code` with the default schedule and context.
pub fn execute(
    code: &[u8],
    calldata: &[u8],
    storage: BTreeMap<U256, U256>,
    step_limit: u64,
) -> Result<ExecResult, MeterError> {
    Meter::new(&GasSchedule::byzantium(), Context::default()).run(&decode(code), calldata, storage, step_limit)
}

pub struct Meter<'a> {
    schedule: &'a GasSchedule,
    ctx: Context,
}

fn as_usize(v: U256) -> Option<usize> {
    (v <= U256::from(usize::MAX)).then(|| v.as_usize())
}

impl<'a> Meter<'a> {
    pub fn new(schedule: &'a GasSchedule, ctx: Context) -> Self {
        Meter { schedule, ctx }
    }

    pub fn run(
        &self,
        program: &DecodedProgram,
        calldata: &[u8],
        storage: BTreeMap<U256, U256>,
        step_limit: u64,
    ) -> Result<ExecResult, MeterError> {
        let mut st = ExecState {
            stack: Vec::new(),
            memory: Vec::new(),
            active_words: 0,
            storage,
            gas_used: 0,
            mem_gas: 0,
            calldata: calldata.to_vec(),
            halted: None,
        };
        let mut pc = 0usize;
        let mut steps = 0u64;
        let mut output = Vec::new();
        let code = program.to_bytes();
        let halt = loop {
            let Some(idx) = program.index_of(pc) else { break Halt::End };
            if steps >= step_limit {
                return Err(MeterError::StepLimitExceeded(step_limit));
            }
            steps += 1;
            let ins = &program.instructions[idx];
            let op = ins.opcode;
            let info = op.info();
            if st.stack.len() < info.stack_depth as usize {
                return Err(MeterError::StackUnderflow(pc));
            }
            let peek = |st: &ExecState, i: usize| st.stack[st.stack.len() - 1 - i];
            let operands: Vec<U256> = (0..info.stack_depth as usize).map(|i| peek(&st, i)).collect();

            // memory expansion is charged before the instruction runs
            for r in memory_ranges(op) {
                let off = operands[r.offset];
                let len = match r.len {
                    MemLen::Fixed(n) => U256::from(n),
                    MemLen::Operand(i) => operands[i],
                };
                let words = words_after(off, len).ok_or(MeterError::MemoryLimit(pc))?;
                if words > MEMORY_WORD_LIMIT {
                    return Err(MeterError::MemoryLimit(pc));
                }
                if words > st.active_words {
                    let delta = gas::mem_cost_delta(st.active_words, words).expect("growing");
                    st.mem_gas += delta as u64;
                    st.active_words = words;
                    st.memory.resize(words as usize * 32, 0);
                }
            }

            let cost = match op {
                Opcode::Sstore => {
                    let cur = st.storage.get(&operands[0]).copied().unwrap_or_default();
                    if cur.is_zero() && !operands[1].is_zero() {
                        gas::G_SSET
                    } else {
                        gas::G_SRESET
                    }
                }
                Opcode::Selfdestruct => {
                    let mut c = gas::G_SELFDESTRUCT;
                    if !self.ctx.balance.is_zero() {
                        c += gas::G_NEWACCOUNT;
                    }
                    c
                }
                Opcode::Callcode => {
                    gas::G_CALL + if operands[2].is_zero() { 0 } else { gas::G_CALLVALUE }
                }
                _ => self.schedule.concrete_cost(op, &operands).ok_or(MeterError::GasOverflow(pc))?,
            };
            st.gas_used = st.gas_used.checked_add(cost).ok_or(MeterError::GasOverflow(pc))?;

            let mut next = ins.next_offset();
            let pops = info.stack_pops as usize;
            let mut push: Option<U256> = None;
            use Opcode::*;
            match op {
                Stop => break Halt::Stop,
                Invalid => break Halt::Invalid,
                Return | Revert => {
                    let off = as_usize(operands[0]).unwrap_or(0);
                    let len = as_usize(operands[1]).unwrap_or(0);
                    if len > 0 {
                        output = st.memory[off..off + len].to_vec();
                    }
                    break if op == Return { Halt::Return } else { Halt::Revert };
                }
                Selfdestruct => break Halt::Selfdestruct,
                Jump | Jumpi => {
                    let take = op == Jump || !operands[1].is_zero();
                    if take {
                        let target = operands[0];
                        match as_usize(target) {
                            Some(t) if program.is_jumpdest(t) => next = t,
                            _ => return Err(MeterError::BadJumpDest { offset: pc, target }),
                        }
                    }
                }
                Push(_) => push = ins.push_value(),
                Dup(n) => push = Some(operands[usize::from(n) - 1]),
                Swap(n) => {
                    let len = st.stack.len();
                    st.stack.swap(len - 1, len - 1 - usize::from(n));
                }
                Pop | Jumpdest => {}
                Mload => {
                    let off = operands[0].as_usize();
                    push = Some(U256::from_big_endian(&st.memory[off..off + 32]));
                }
                Mstore => {
                    let off = operands[0].as_usize();
                    st.memory[off..off + 32].copy_from_slice(&u256_to_bytes(&operands[1]));
                }
                Mstore8 => {
                    let off = operands[0].as_usize();
                    st.memory[off] = operands[1].byte(0);
                }
                Sload => push = Some(st.storage.get(&operands[0]).copied().unwrap_or_default()),
                Sstore => {
                    if operands[1].is_zero() {
                        st.storage.remove(&operands[0]);
                    } else {
                        st.storage.insert(operands[0], operands[1]);
                    }
                }
                Sha3 => {
                    let off = as_usize(operands[0]).unwrap_or(0);
                    let len = operands[1].as_usize();
                    let data = if len == 0 { &[][..] } else { &st.memory[off..off + len] };
                    push = Some(U256::from_big_endian(&keccak256(data)));
                }
                Address => push = Some(self.ctx.address),
                Balance => {
                    push = Some(if operands[0] == self.ctx.address { self.ctx.balance } else { U256::zero() })
                }
                Origin => push = Some(self.ctx.origin),
                Caller => push = Some(self.ctx.caller),
                Callvalue => push = Some(self.ctx.callvalue),
                Calldataload => {
                    let mut word = [0u8; 32];
                    if let Some(off) = as_usize(operands[0]) {
                        for (i, b) in word.iter_mut().enumerate() {
                            *b = st.calldata.get(off.saturating_add(i)).copied().unwrap_or(0);
                        }
                    }
                    push = Some(U256::from_big_endian(&word));
                }
                Calldatasize => push = Some(U256::from(st.calldata.len())),
                Codesize => push = Some(U256::from(code.len())),
                Gasprice => push = Some(self.ctx.gasprice),
                Extcodesize | Returndatasize | Blockhash => push = Some(U256::zero()),
                Calldatacopy | Codecopy | Returndatacopy | Extcodecopy => {
                    let (dst, src, len) = if op == Extcodecopy {
                        (operands[1], operands[2], operands[3])
                    } else {
                        (operands[0], operands[1], operands[2])
                    };
                    let len = len.as_usize();
                    if len > 0 {
                        let dst = dst.as_usize();
                        let source: &[u8] = match op {
                            Calldatacopy => &st.calldata,
                            Codecopy => &code,
                            _ => &[],
                        };
                        let src = as_usize(src);
                        for i in 0..len {
                            let b = src
                                .and_then(|s| s.checked_add(i))
                                .and_then(|j| source.get(j).copied())
                                .unwrap_or(0);
                            st.memory[dst + i] = b;
                        }
                    }
                }
                Coinbase => push = Some(self.ctx.coinbase),
                Timestamp => push = Some(self.ctx.timestamp),
                Number => push = Some(self.ctx.number),
                Difficulty => push = Some(self.ctx.difficulty),
                Gaslimit => push = Some(self.ctx.gaslimit),
                Pc => push = Some(U256::from(pc)),
                Msize => push = Some(U256::from(st.active_words) * U256::from(32)),
                Gas => push = Some(self.ctx.gaslimit.saturating_sub(U256::from(st.gas_used + st.mem_gas))),
                Log(_) => {}
                Call | Callcode | Delegatecall | Staticcall => push = Some(U256::one()),
                Create => return Err(MeterError::UnsupportedOpcode(op, pc)),
                _ => {
                    push = Some(eval_pure(op, &operands).ok_or(MeterError::UnsupportedOpcode(op, pc))?);
                }
            }
            if !matches!(op, Dup(_) | Swap(_)) {
                let len = st.stack.len();
                st.stack.truncate(len - pops);
            }
            if let Some(v) = push {
                if st.stack.len() >= STACK_LIMIT {
                    return Err(MeterError::StackOverflow(pc));
                }
                st.stack.push(v);
            }
            pc = next;
        };
        st.halted = Some(halt);
        Ok(ExecResult {
            gas_used: st.gas_used,
            mem_gas: st.mem_gas,
            active_words: st.active_words,
            storage: st.storage,
            halt,
            steps,
            output,
        })
    }
}
