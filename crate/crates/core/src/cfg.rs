//! Control-flow graph recovery by shallow symbolic execution.
//!
//! Blocks are the static partition of the code. Exploration runs over
//! *nodes*: a block together with the return addresses sitting on the
//! stack when it is entered. States reaching the same node are joined
//! (values that disagree become unknown), so loops are explored until
//! their entry state stops changing instead of being unrolled, and each
//! internal-call site gets its own copy of the callee's blocks.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use primitive_types::U256;

use crate::evm::{eval_pure, DecodedProgram, Instruction, Opcode};
use crate::gas::{memory_ranges, MemLen};

/// Unknown produced by a join rather than by an instruction.
pub const JOINED: u32 = u32::MAX;
const OP_DEPTH_CAP: usize = 3;
const MAX_CONTEXT_DEPTH: usize = 32;
const MAX_STACK: usize = 1024;
/// Writes spanning more words than this forget all of memory.
const RANGE_WRITE_WORDS: u64 = 64;
pub const DEFAULT_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SymWord {
    /// `origin` is the offset of the PUSH that produced the value, if any.
    Concrete { value: U256, origin: Option<usize> },
    /// Identified by the offset of the producing instruction.
    Unknown(u32),
    OpResult(Opcode, Vec<SymWord>),
}

impl SymWord {
    pub fn concrete(value: U256) -> Self {
        SymWord::Concrete { value, origin: None }
    }

    pub fn value(&self) -> Option<U256> {
        match self {
            SymWord::Concrete { value, .. } => Some(*value),
            _ => None,
        }
    }

    fn depth(&self) -> usize {
        match self {
            SymWord::OpResult(_, xs) => 1 + xs.iter().map(|x| x.depth()).max().unwrap_or(0),
            _ => 0,
        }
    }

    /// Applies a pure operator, folding when every operand is concrete.
    pub fn apply(op: Opcode, args: Vec<SymWord>, at: usize) -> SymWord {
        let values: Option<Vec<U256>> = args.iter().map(|a| a.value()).collect();
        if let Some(vs) = values {
            if let Some(v) = eval_pure(op, &vs) {
                return SymWord::concrete(v);
            }
        }
        let w = SymWord::OpResult(op, args);
        if w.depth() > OP_DEPTH_CAP {
            SymWord::Unknown(at as u32)
        } else {
            w
        }
    }

    pub fn join(&self, other: &SymWord) -> SymWord {
        match (self, other) {
            _ if self == other => self.clone(),
            (SymWord::Concrete { value: a, origin: oa }, SymWord::Concrete { value: b, origin: ob }) if a == b => {
                let origin = match (oa, ob) {
                    (Some(x), Some(y)) => Some(*x.min(y)),
                    _ => None,
                };
                SymWord::Concrete { value: *a, origin }
            }
            _ => SymWord::Unknown(JOINED),
        }
    }
}

impl fmt::Display for SymWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymWord::Concrete { value, .. } => write!(f, "{value:#x}"),
            SymWord::Unknown(JOINED) => f.write_str("?"),
            SymWord::Unknown(at) => write!(f, "?{at}"),
            SymWord::OpResult(op, xs) => {
                write!(f, "{}(", op.mnemonic().to_lowercase())?;
                for (i, x) in xs.iter().enumerate() {
                    if i > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// A known address or `?`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Addr {
    Concrete(U256),
    Unknown,
}

impl Addr {
    fn of(w: &SymWord) -> Addr {
        w.value().map_or(Addr::Unknown, Addr::Concrete)
    }

    fn merge(self, other: Addr) -> Addr {
        if self == other {
            self
        } else {
            Addr::Unknown
        }
    }

    pub fn concrete(self) -> Option<U256> {
        match self {
            Addr::Concrete(v) => Some(v),
            Addr::Unknown => None,
        }
    }
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Concrete(v) => write!(f, "{v}"),
            Addr::Unknown => f.write_str("?"),
        }
    }
}

/// One memory range touched by an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemAccess {
    pub start: Addr,
    pub len: Addr,
    pub writes: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Annotations {
    /// SLOAD/SSTORE slot per instruction offset.
    pub storage: BTreeMap<usize, Addr>,
    /// Ranges touched by memory instructions per offset.
    pub memory: BTreeMap<usize, Vec<MemAccess>>,
    /// CALLDATALOAD offset per instruction offset.
    pub calldata: BTreeMap<usize, Addr>,
}

impl Annotations {
    fn merge(&mut self, other: &Annotations) {
        for (k, v) in &other.storage {
            let e = self.storage.entry(*k).or_insert(*v);
            *e = e.merge(*v);
        }
        for (k, v) in &other.calldata {
            let e = self.calldata.entry(*k).or_insert(*v);
            *e = e.merge(*v);
        }
        for (k, v) in &other.memory {
            let e = self.memory.entry(*k).or_insert_with(|| v.clone());
            for (a, b) in e.iter_mut().zip(v) {
                a.start = a.start.merge(b.start);
                a.len = a.len.merge(b.len);
            }
        }
    }
}

/// Word-granular memory contents. Missing keys read as zero until an
/// unknown write makes the whole memory `dirty`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SymMemory {
    words: BTreeMap<U256, SymWord>,
    dirty: bool,
}

fn overlaps(k: U256, start: U256, len: U256) -> bool {
    let end_k = k.saturating_add(U256::from(32));
    let end = start.saturating_add(len);
    k < end && start < end_k
}

impl SymMemory {
    fn load(&self, at: U256, pc: usize) -> SymWord {
        if let Some(v) = self.words.get(&at) {
            return v.clone();
        }
        let overlapped = self.words.keys().any(|k| overlaps(*k, at, U256::from(32)));
        if overlapped || self.dirty {
            SymWord::Unknown(pc as u32)
        } else {
            SymWord::concrete(U256::zero())
        }
    }

    fn clobber(&mut self, start: U256, len: U256, pc: usize) {
        for (k, v) in self.words.iter_mut() {
            if overlaps(*k, start, len) {
                *v = SymWord::Unknown(pc as u32);
            }
        }
    }

    fn store(&mut self, at: U256, value: SymWord, pc: usize) {
        self.clobber(at, U256::from(32), pc);
        self.words.insert(at, value);
    }

    fn store_byte(&mut self, at: U256, pc: usize) {
        self.clobber(at, U256::one(), pc);
        self.words.entry(at).or_insert(SymWord::Unknown(pc as u32));
    }

    fn write_range(&mut self, start: Addr, len: Addr, pc: usize) {
        match (start, len) {
            (_, Addr::Concrete(l)) if l.is_zero() => {}
            (Addr::Concrete(s), Addr::Concrete(l)) if l <= U256::from(RANGE_WRITE_WORDS * 32) => {
                self.clobber(s, l, pc);
                let mut k = s;
                while k < s.saturating_add(l) {
                    self.words.insert(k, SymWord::Unknown(pc as u32));
                    k = k.saturating_add(U256::from(32));
                }
            }
            _ => self.forget(),
        }
    }

    fn forget(&mut self) {
        self.words.clear();
        self.dirty = true;
    }

    fn value_at(&self, k: &U256) -> SymWord {
        match self.words.get(k) {
            Some(v) => v.clone(),
            None if self.dirty => SymWord::Unknown(JOINED),
            None if self.words.keys().any(|o| overlaps(*o, *k, U256::from(32))) => SymWord::Unknown(JOINED),
            None => SymWord::concrete(U256::zero()),
        }
    }

    fn join(&self, other: &SymMemory) -> SymMemory {
        let dirty = self.dirty || other.dirty;
        let keys: BTreeSet<U256> = self.words.keys().chain(other.words.keys()).copied().collect();
        let mut words = BTreeMap::new();
        for k in keys {
            let v = self.value_at(&k).join(&other.value_at(&k));
            if !(dirty && matches!(v, SymWord::Unknown(_))) {
                words.insert(k, v);
            }
        }
        SymMemory { words, dirty }
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct SymState {
    pub stack: Vec<SymWord>,
    pub memory: SymMemory,
}

impl SymState {
    /// Return addresses: PUSHed constants on the stack that name a JUMPDEST.
    fn context(&self, program: &DecodedProgram) -> Vec<U256> {
        self.stack
            .iter()
            .filter_map(|w| match w {
                SymWord::Concrete { value, origin: Some(_) } if value_is_jumpdest(program, *value) => Some(*value),
                _ => None,
            })
            .collect()
    }

    fn join(&self, other: &SymState) -> SymState {
        SymState {
            stack: self.stack.iter().zip(&other.stack).map(|(a, b)| a.join(b)).collect(),
            memory: self.memory.join(&other.memory),
        }
    }
}

fn value_is_jumpdest(program: &DecodedProgram, v: U256) -> bool {
    v <= U256::from(program.code_size) && program.is_jumpdest(v.as_usize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TerminatorKind {
    Fallthrough,
    Jump,
    Jumpi,
    Halt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeKind {
    /// Falling into the next block, including the not-taken side of JUMPI.
    Fall,
    Jump,
    /// Taken side of JUMPI.
    Taken,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CfgError {
    #[error("jump at {0} has no concrete target")]
    UnresolvableJump(usize),
    #[error("block {block} entered with stack heights {expected} and {found}")]
    StackHeightMismatch { block: usize, expected: usize, found: usize },
    #[error("stack underflow at {0}")]
    StackUnderflow(usize),
    #[error("stack overflow at {0}")]
    StackOverflow(usize),
    #[error("more than {MAX_CONTEXT_DEPTH} nested internal calls at block {0}")]
    RecursionLimit(usize),
    #[error("exploration budget exhausted")]
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BasicBlock {
    /// Offset of the first instruction.
    pub id: usize,
    pub instructions: Vec<Instruction>,
    /// Annotations merged over every context the block was reached in.
    pub annotations: Annotations,
    pub successors: Vec<usize>,
    pub terminator_kind: TerminatorKind,
}

impl BasicBlock {
    pub fn storage_annotations(&self) -> &BTreeMap<usize, Addr> {
        &self.annotations.storage
    }

    pub fn memory_annotations(&self) -> &BTreeMap<usize, Vec<MemAccess>> {
        &self.annotations.memory
    }

    pub fn last(&self) -> Option<&Instruction> {
        self.instructions.last()
    }
}

/// A block reached with a particular return-address context.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CfgNode {
    pub id: usize,
    pub block: usize,
    pub context: Vec<U256>,
    pub entry_height: usize,
    pub successors: Vec<(EdgeKind, usize)>,
    pub annotations: Annotations,
    pub error: Option<CfgError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FunctionKind {
    Selector([u8; 4]),
    Fallback,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PublicFunction {
    pub kind: FunctionKind,
    pub entry_block: usize,
    pub entry_node: usize,
}

impl PublicFunction {
    pub fn selector_hex(&self) -> Option<String> {
        match self.kind {
            FunctionKind::Selector(s) => Some(format!("0x{}", hex::encode(s))),
            FunctionKind::Fallback => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildStats {
    /// Symbolic executions of a block.
    pub block_executions: usize,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cfg {
    pub program: DecodedProgram,
    pub blocks: BTreeMap<usize, BasicBlock>,
    pub entry: usize,
    pub nodes: Vec<CfgNode>,
    pub public_functions: Vec<PublicFunction>,
    pub back_edges: BTreeSet<(usize, usize)>,
    pub diagnostics: Vec<String>,
    pub stats: BuildStats,
}

impl Cfg {
    /// Block-level edges.
    pub fn edges(&self) -> BTreeSet<(usize, usize)> {
        self.blocks.values().flat_map(|b| b.successors.iter().map(move |s| (b.id, *s))).collect()
    }

    pub fn entry_node(&self) -> usize {
        0
    }

    /// Nodes reachable from `root`, in ascending id order.
    pub fn reachable_nodes(&self, root: usize) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.nodes[n].successors.iter().map(|(_, s)| *s));
            }
        }
        seen.into_iter().collect()
    }

    /// Block ids that have more than one node.
    pub fn nodes_of_block(&self, block: usize) -> Vec<usize> {
        self.nodes.iter().filter(|n| n.block == block).map(|n| n.id).collect()
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for b in self.blocks.values() {
            out.push_str(&format!("block {} ({:?}) -> {:?}\n", b.id, b.terminator_kind, b.successors));
            for ins in &b.instructions {
                let mut note = String::new();
                if let Some(a) = b.annotations.storage.get(&ins.offset) {
                    note = format!("  ; slot {a}");
                }
                if let Some(ms) = b.annotations.memory.get(&ins.offset) {
                    let parts: Vec<String> = ms.iter().map(|m| format!("[{}; {}]", m.start, m.len)).collect();
                    note = format!("  ; mem {}", parts.join(" "));
                }
                out.push_str(&format!("  {:>5}: {ins}{note}\n", ins.offset));
            }
        }
        for f in &self.public_functions {
            out.push_str(&format!(
                "function {} -> block {}\n",
                f.selector_hex().unwrap_or_else(|| "fallback".into()),
                f.entry_block
            ));
        }
        for (u, v) in &self.back_edges {
            out.push_str(&format!("back edge {u} -> {v}\n"));
        }
        for n in &self.nodes {
            if let Some(e) = &n.error {
                out.push_str(&format!("error at block {}: {e}\n", n.block));
            }
        }
        out
    }
}

fn is_block_end(op: Opcode) -> bool {
    matches!(op, Opcode::Jump | Opcode::Jumpi) || op.info().is_terminator
}

/// Static partition into blocks.
fn partition(program: &DecodedProgram) -> BTreeMap<usize, BasicBlock> {
    let mut blocks = BTreeMap::new();
    if program.instructions.is_empty() {
        blocks.insert(
            0,
            BasicBlock {
                id: 0,
                instructions: Vec::new(),
                annotations: Annotations::default(),
                successors: Vec::new(),
                terminator_kind: TerminatorKind::Halt,
            },
        );
        return blocks;
    }
    let mut current: Vec<Instruction> = Vec::new();
    let flush = |current: &mut Vec<Instruction>, blocks: &mut BTreeMap<usize, BasicBlock>| {
        if let Some(first) = current.first() {
            let last = current.last().unwrap().opcode;
            let kind = match last {
                Opcode::Jump => TerminatorKind::Jump,
                Opcode::Jumpi => TerminatorKind::Jumpi,
                op if op.info().is_terminator => TerminatorKind::Halt,
                _ => TerminatorKind::Fallthrough,
            };
            let id = first.offset;
            blocks.insert(
                id,
                BasicBlock {
                    id,
                    instructions: std::mem::take(current),
                    annotations: Annotations::default(),
                    successors: Vec::new(),
                    terminator_kind: kind,
                },
            );
        }
    };
    for ins in &program.instructions {
        if ins.opcode == Opcode::Jumpdest {
            flush(&mut current, &mut blocks);
        }
        current.push(ins.clone());
        if is_block_end(ins.opcode) {
            flush(&mut current, &mut blocks);
        }
    }
    flush(&mut current, &mut blocks);
    blocks
}

enum Exit {
    Fall(usize),
    Jump(SymWord, usize),
    Jumpi(SymWord, usize, usize),
    Halt,
}

fn annotate_memory(op: Opcode, operands: &[SymWord]) -> Vec<MemAccess> {
    memory_ranges(op)
        .into_iter()
        .map(|r| MemAccess {
            start: Addr::of(&operands[r.offset]),
            len: match r.len {
                MemLen::Fixed(n) => Addr::Concrete(U256::from(n)),
                MemLen::Operand(i) => Addr::of(&operands[i]),
            },
            writes: r.writes,
        })
        .collect()
}

/// Runs one block symbolically.
fn exec_block(block: &BasicBlock, mut st: SymState, ann: &mut Annotations) -> Result<(SymState, Exit), CfgError> {
    for ins in &block.instructions {
        let pc = ins.offset;
        let op = ins.opcode;
        let info = op.info();
        let depth = info.stack_depth as usize;
        if st.stack.len() < depth {
            return Err(CfgError::StackUnderflow(pc));
        }
        let operands: Vec<SymWord> = st.stack.iter().rev().take(depth).cloned().collect();
        let accesses = annotate_memory(op, &operands);
        if !accesses.is_empty() {
            ann.memory.insert(pc, accesses.clone());
        }
        let unknown = SymWord::Unknown(pc as u32);
        let pops = info.stack_pops as usize;
        let mut push = None;
        use Opcode::*;
        match op {
            Push(_) => {
                push = Some(SymWord::Concrete { value: ins.push_value().unwrap_or_default(), origin: Some(pc) })
            }
            Dup(n) => push = Some(operands[usize::from(n) - 1].clone()),
            Swap(n) => {
                let len = st.stack.len();
                st.stack.swap(len - 1, len - 1 - usize::from(n));
            }
            Pc => push = Some(SymWord::concrete(U256::from(pc))),
            Mload => {
                push = Some(match operands[0].value() {
                    Some(a) => st.memory.load(a, pc),
                    None => unknown,
                })
            }
            Mstore => match operands[0].value() {
                Some(a) => st.memory.store(a, operands[1].clone(), pc),
                None => st.memory.forget(),
            },
            Mstore8 => match operands[0].value() {
                Some(a) => st.memory.store_byte(a, pc),
                None => st.memory.forget(),
            },
            Sload | Sstore => {
                ann.storage.insert(pc, Addr::of(&operands[0]));
                if op == Sload {
                    push = Some(unknown);
                }
            }
            Calldataload => {
                ann.calldata.insert(pc, Addr::of(&operands[0]));
                push = Some(unknown);
            }
            _ => {
                for a in accesses.iter().filter(|a| a.writes) {
                    st.memory.write_range(a.start, a.len, pc);
                }
                if info.stack_pushes > 0 {
                    let args = operands[..pops].to_vec();
                    push = Some(if eval_pure(op, &vec![U256::zero(); pops]).is_some() {
                        SymWord::apply(op, args, pc)
                    } else {
                        unknown
                    });
                }
            }
        }
        if !matches!(op, Dup(_) | Swap(_)) {
            let len = st.stack.len();
            st.stack.truncate(len - pops);
        }
        if let Some(v) = push {
            if st.stack.len() >= MAX_STACK {
                return Err(CfgError::StackOverflow(pc));
            }
            st.stack.push(v);
        }
        if op == Jump {
            return Ok((st, Exit::Jump(operands[0].clone(), pc)));
        }
        if op == Jumpi {
            return Ok((st, Exit::Jumpi(operands[0].clone(), pc, ins.next_offset())));
        }
        if info.is_terminator {
            return Ok((st, Exit::Halt));
        }
    }
    match block.instructions.last() {
        Some(i) => Ok((st, Exit::Fall(i.next_offset()))),
        None => Ok((st, Exit::Halt)),
    }
}

struct Builder<'a> {
    program: &'a DecodedProgram,
    blocks: BTreeMap<usize, BasicBlock>,
    nodes: Vec<CfgNode>,
    states: Vec<Option<SymState>>,
    index: BTreeMap<(usize, Vec<U256>), usize>,
    diagnostics: BTreeSet<String>,
    stats: BuildStats,
}

impl<'a> Builder<'a> {
    fn node_for(&mut self, block: usize, context: Vec<U256>) -> usize {
        if let Some(id) = self.index.get(&(block, context.clone())) {
            return *id;
        }
        let id = self.nodes.len();
        self.nodes.push(CfgNode {
            id,
            block,
            context: context.clone(),
            entry_height: 0,
            successors: Vec::new(),
            annotations: Annotations::default(),
            error: None,
        });
        self.states.push(None);
        self.index.insert((block, context), id);
        id
    }

    /// Joins `st` into the node's entry state; true if it changed.
    fn flow_into(&mut self, node: usize, st: SymState) -> bool {
        if self.nodes[node].error.is_some() {
            return false;
        }
        match &self.states[node] {
            None => {
                if self.nodes[node].context.len() > MAX_CONTEXT_DEPTH {
                    self.nodes[node].error = Some(CfgError::RecursionLimit(self.nodes[node].block));
                    return false;
                }
                self.nodes[node].entry_height = st.stack.len();
                self.states[node] = Some(st);
                true
            }
            Some(old) if old.stack.len() != st.stack.len() => {
                self.nodes[node].error = Some(CfgError::StackHeightMismatch {
                    block: self.nodes[node].block,
                    expected: old.stack.len(),
                    found: st.stack.len(),
                });
                false
            }
            Some(old) => {
                let joined = old.join(&st);
                if &joined == old {
                    false
                } else {
                    self.states[node] = Some(joined);
                    true
                }
            }
        }
    }

    fn add_edge(&mut self, from: usize, kind: EdgeKind, to: usize) {
        let succ = &mut self.nodes[from].successors;
        if !succ.contains(&(kind, to)) {
            succ.push((kind, to));
        }
    }

    fn follow(&mut self, from: usize, kind: EdgeKind, target: usize, st: &SymState, queue: &mut VecDeque<usize>) {
        let ctx = st.context(self.program);
        let to = self.node_for(target, ctx);
        self.add_edge(from, kind, to);
        if self.flow_into(to, st.clone()) {
            queue.push_back(to);
        }
    }

    fn jump_target(&mut self, w: &SymWord, pc: usize) -> Result<Option<usize>, CfgError> {
        match w.value() {
            Some(v) if value_is_jumpdest(self.program, v) => Ok(Some(v.as_usize())),
            Some(v) => {
                self.diagnostics.insert(format!("jump at {pc} to non-JUMPDEST {v:#x} treated as halt"));
                Ok(None)
            }
            None => Err(CfgError::UnresolvableJump(pc)),
        }
    }

    fn run(&mut self, budget: usize) {
        let root = self.node_for(0, Vec::new());
        self.flow_into(root, SymState::default());
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            if self.nodes[n].error.is_some() {
                continue;
            }
            if self.stats.block_executions >= budget {
                self.nodes[n].error = Some(CfgError::Budget);
                continue;
            }
            self.stats.block_executions += 1;
            let st = self.states[n].clone().expect("queued nodes have a state");
            let block = &self.blocks[&self.nodes[n].block];
            let mut ann = Annotations::default();
            let result = exec_block(block, st, &mut ann);
            let mut merged = self.nodes[n].annotations.clone();
            if merged == Annotations::default() {
                merged = ann;
            } else {
                merged.merge(&ann);
            }
            self.nodes[n].annotations = merged;
            let (out, exit) = match result {
                Ok(r) => r,
                Err(e) => {
                    self.nodes[n].error = Some(e);
                    continue;
                }
            };
            match exit {
                Exit::Halt => {}
                Exit::Fall(next) => {
                    if self.blocks.contains_key(&next) {
                        self.follow(n, EdgeKind::Fall, next, &out, &mut queue);
                    }
                }
                Exit::Jump(target, pc) => match self.jump_target(&target, pc) {
                    Ok(Some(t)) => self.follow(n, EdgeKind::Jump, t, &out, &mut queue),
                    Ok(None) => {}
                    Err(e) => self.nodes[n].error = Some(e),
                },
                Exit::Jumpi(target, pc, next) => {
                    // both sides are explored whatever the condition
                    match self.jump_target(&target, pc) {
                        Ok(Some(t)) => self.follow(n, EdgeKind::Taken, t, &out, &mut queue),
                        Ok(None) => {}
                        Err(e) => {
                            self.nodes[n].error = Some(e);
                            continue;
                        }
                    }
                    if self.blocks.contains_key(&next) {
                        self.follow(n, EdgeKind::Fall, next, &out, &mut queue);
                    }
                }
            }
        }
        self.stats.nodes = self.nodes.len();
    }
}

/// Back edges found by depth-first search over nodes: edges into a node
/// still on the search path.
fn find_back_edges(nodes: &[CfgNode]) -> BTreeSet<(usize, usize)> {
    let mut out = BTreeSet::new();
    if nodes.is_empty() {
        return out;
    }
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        New,
        Open,
        Done,
    }
    let mut mark = vec![Mark::New; nodes.len()];
    let mut stack: Vec<(usize, usize)> = vec![(0, 0)];
    mark[0] = Mark::Open;
    while let Some((n, i)) = stack.pop() {
        if i < nodes[n].successors.len() {
            stack.push((n, i + 1));
            let s = nodes[n].successors[i].1;
            match mark[s] {
                Mark::Open => {
                    out.insert((nodes[n].block, nodes[s].block));
                }
                Mark::New => {
                    mark[s] = Mark::Open;
                    stack.push((s, 0));
                }
                Mark::Done => {}
            }
        } else {
            mark[n] = Mark::Done;
        }
    }
    out
}

pub fn build_cfg(program: &DecodedProgram) -> Cfg {
    build_cfg_with_budget(program, DEFAULT_BUDGET)
}

pub fn build_cfg_with_budget(program: &DecodedProgram, budget: usize) -> Cfg {
    let mut b = Builder {
        program,
        blocks: partition(program),
        nodes: Vec::new(),
        states: Vec::new(),
        index: BTreeMap::new(),
        diagnostics: BTreeSet::new(),
        stats: BuildStats::default(),
    };
    b.run(budget);
    for n in &mut b.nodes {
        n.successors.sort();
    }

    let mut blocks = b.blocks;
    for n in &b.nodes {
        let block = blocks.get_mut(&n.block).expect("node of a known block");
        block.annotations.merge_or_take(&n.annotations);
        for (_, s) in &n.successors {
            let t = b.nodes[*s].block;
            if !block.successors.contains(&t) {
                block.successors.push(t);
            }
        }
    }
    for block in blocks.values_mut() {
        // taken target first for jumpi, matching (taken, fallthrough)
        if block.terminator_kind == TerminatorKind::Jumpi {
            let fall = block.instructions.last().map(|i| i.next_offset());
            block.successors.sort_by_key(|s| (Some(*s) == fall, *s));
        } else {
            block.successors.sort();
        }
    }
    let back_edges = find_back_edges(&b.nodes);
    let mut cfg = Cfg {
        program: program.clone(),
        blocks,
        entry: 0,
        nodes: b.nodes,
        public_functions: Vec::new(),
        back_edges,
        diagnostics: b.diagnostics.into_iter().collect(),
        stats: b.stats,
    };
    cfg.public_functions = discover_public_functions(&cfg);
    if cfg.public_functions.is_empty() && !program.instructions.is_empty() {
        cfg.diagnostics.push("no selector dispatcher found; analyzing the whole contract".into());
    }
    cfg
}

impl Annotations {
    fn merge_or_take(&mut self, other: &Annotations) {
        if *self == Annotations::default() {
            *self = other.clone();
        } else {
            self.merge(other);
        }
    }
}

/// A dispatcher comparison: `... PUSH4 sel ... EQ PUSHn tag JUMPI`.
fn dispatcher_selector(block: &BasicBlock) -> Option<[u8; 4]> {
    let ins = &block.instructions;
    let n = ins.len();
    if n < 4 || ins[n - 1].opcode != Opcode::Jumpi || !matches!(ins[n - 2].opcode, Opcode::Push(_)) {
        return None;
    }
    if ins[n - 3].opcode != Opcode::Eq {
        return None;
    }
    ins[n.saturating_sub(7)..n - 3].iter().rev().find(|i| i.opcode == Opcode::Push(4)).map(|i| {
        let mut s = [0u8; 4];
        s.copy_from_slice(&i.immediate);
        s
    })
}

/// Only stack shuffling followed by REVERT or INVALID.
fn is_revert_only(block: &BasicBlock) -> bool {
    let Some(last) = block.last() else { return false };
    matches!(last.opcode, Opcode::Revert | Opcode::Invalid)
        && block.instructions[..block.instructions.len() - 1].iter().all(|i| {
            matches!(i.opcode, Opcode::Jumpdest | Opcode::Push(_) | Opcode::Dup(_) | Opcode::Swap(_) | Opcode::Pop)
        })
}

pub fn discover_public_functions(cfg: &Cfg) -> Vec<PublicFunction> {
    let mut out: Vec<PublicFunction> = Vec::new();
    let mut last_dispatch: Option<usize> = None;
    for node in &cfg.nodes {
        let block = &cfg.blocks[&node.block];
        let Some(sel) = dispatcher_selector(block) else { continue };
        let Some(&(_, taken)) = node.successors.iter().find(|(k, _)| *k == EdgeKind::Taken) else { continue };
        let kind = FunctionKind::Selector(sel);
        if out.iter().any(|f| f.kind == kind) {
            continue;
        }
        out.push(PublicFunction { kind, entry_block: cfg.nodes[taken].block, entry_node: taken });
        if last_dispatch.map_or(true, |l| cfg.nodes[l].block < node.block) {
            last_dispatch = Some(node.id);
        }
    }
    if let Some(d) = last_dispatch {
        if let Some(&(_, fall)) = cfg.nodes[d].successors.iter().find(|(k, _)| *k == EdgeKind::Fall) {
            let fb = &cfg.blocks[&cfg.nodes[fall].block];
            if !is_revert_only(fb) {
                out.push(PublicFunction { kind: FunctionKind::Fallback, entry_block: fb.id, entry_node: fall });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evm::{assemble, decode};

    fn cfg_of(src: &str) -> Cfg {
        build_cfg(&decode(&assemble(src).unwrap()))
    }

    #[test]
    fn push_jump_example() {
        let cfg = build_cfg(&decode(&[0x60, 0x04, 0x56, 0x00, 0x5b, 0x00]));
        assert_eq!(cfg.blocks.keys().copied().collect::<Vec<_>>(), vec![0, 3, 4]);
        assert_eq!(cfg.edges(), BTreeSet::from([(0, 4)]));
        assert!(cfg.back_edges.is_empty());
        assert_eq!(cfg.blocks[&0].terminator_kind, TerminatorKind::Jump);
    }

    #[test]
    fn empty_program() {
        let cfg = build_cfg(&decode(&[]));
        assert_eq!(cfg.blocks.len(), 1);
        assert!(cfg.blocks[&0].successors.is_empty());
        assert!(cfg.public_functions.is_empty());
    }

    #[test]
    fn counter_loop_back_edge() {
        let cfg = cfg_of(
            "PUSH1 0\nSLOAD\nPUSH1 0\nJUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 0x13\nJUMPI\nPUSH1 1\nADD\nPUSH1 5\nJUMP\nJUMPDEST\nSTOP",
        );
        assert_eq!(cfg.back_edges, BTreeSet::from([(13, 5)]));
        assert_eq!(cfg.blocks[&5].successors, vec![19, 13]);
        assert!(cfg.nodes.iter().all(|n| n.error.is_none()));
    }

    #[test]
    fn loop_varying_address_is_unknown() {
        // mstore(i, 1) in a loop over i
        let cfg = cfg_of(
            "PUSH1 0\nJUMPDEST\nPUSH1 1\nDUP2\nMSTORE\nPUSH1 0x20\nADD\nDUP1\nPUSH1 0\nSLOAD\nGT\nPUSH1 2\nJUMPI\nSTOP",
        );
        let ann = &cfg.blocks[&2].annotations.memory[&6];
        assert_eq!(ann[0].start, Addr::Unknown);
    }

    #[test]
    fn internal_call_gets_one_node_per_site() {
        // sub at 0x10 returns to the address pushed by each caller
        let src = "\
            PUSH1 0x08\nPUSH1 0x10\nJUMP\n\
            INVALID\nINVALID\nINVALID\n\
            0x08: JUMPDEST\nPUSH1 0x0e\nPUSH1 0x10\nJUMP\n\
            0x0e: JUMPDEST\nSTOP\n\
            0x10: JUMPDEST\nPUSH1 1\nPOP\nJUMP";
        let cfg = cfg_of(src);
        assert_eq!(cfg.nodes_of_block(0x10).len(), 2);
        assert!(cfg.edges().contains(&(0x10, 0x08)));
        assert!(cfg.edges().contains(&(0x10, 0x0e)));
        assert!(cfg.nodes.iter().all(|n| n.error.is_none()));
    }

    #[test]
    fn unresolved_jump_is_reported() {
        let cfg = cfg_of("PUSH1 0\nCALLDATALOAD\nJUMP\nJUMPDEST\nSTOP");
        assert_eq!(cfg.nodes[0].error, Some(CfgError::UnresolvableJump(3)));
    }

    #[test]
    fn stack_height_mismatch() {
        // loop body pushes one word per iteration
        let cfg = cfg_of("JUMPDEST\nPUSH1 1\nPUSH1 0\nSLOAD\nPUSH1 0\nJUMPI\nSTOP");
        assert!(matches!(cfg.nodes[0].error, Some(CfgError::StackHeightMismatch { .. })));
    }

    #[test]
    fn dispatcher() {
        let src = "\
            PUSH1 0\nCALLDATALOAD\nPUSH29 0x0100000000000000000000000000000000000000000000000000000000\nSWAP1\nDIV\n\
            DUP1\nPUSH4 0xcdbbb5bd\nEQ\nPUSH1 0x40\nJUMPI\n\
            DUP1\nPUSH4 0x12345678\nEQ\nPUSH1 0x44\nJUMPI\n\
            JUMPDEST\nPUSH1 0\nDUP1\nREVERT\nINVALID\nINVALID\nINVALID\nINVALID\n\
            0x40: JUMPDEST\nPUSH1 1\nSTOP\n\
            0x44: JUMPDEST\nPUSH1 2\nSTOP";
        let cfg = cfg_of(src);
        let fs: Vec<_> = cfg.public_functions.iter().map(|f| (f.kind, f.entry_block)).collect();
        assert_eq!(
            fs,
            vec![
                (FunctionKind::Selector([0xcd, 0xbb, 0xb5, 0xbd]), 0x40),
                (FunctionKind::Selector([0x12, 0x34, 0x56, 0x78]), 0x44),
            ]
        );
    }

    #[test]
    fn deterministic() {
        let src = "PUSH1 0\nJUMPDEST\nPUSH1 1\nADD\nDUP1\nPUSH1 0\nSLOAD\nGT\nPUSH1 2\nJUMPI\nSTOP";
        assert_eq!(cfg_of(src), cfg_of(src));
    }
}
