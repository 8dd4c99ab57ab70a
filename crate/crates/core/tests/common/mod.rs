#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use gasbound::analysis::{analyze_code, FunctionReport, Options};
use gasbound::evm::{assemble, Opcode};
use primitive_types::U256;
use rand::Rng;

/// Straight-line programs: every run takes the same path.
pub const STRAIGHT_LINE: &[(&str, &str)] = &[
    ("add", "PUSH1 1\nPUSH1 2\nADD\nSTOP"),
    ("mstore_zero", "PUSH1 0\nPUSH1 0\nMSTORE\nSTOP"),
    ("mload_0x40", "PUSH1 0x40\nMLOAD\nPOP\nSTOP"),
    ("mstore8", "PUSH1 7\nPUSH1 0x3f\nMSTORE8\nSTOP"),
    ("sha3_word", "PUSH1 0x20\nPUSH1 0\nSHA3\nPOP\nSTOP"),
    ("calldatacopy", "PUSH1 0x44\nPUSH1 0\nPUSH1 0\nCALLDATACOPY\nSTOP"),
    ("exp_one_byte", "PUSH1 2\nPUSH1 3\nEXP\nPOP\nSTOP"),
    ("exp_two_bytes", "PUSH2 0x0100\nPUSH1 3\nEXP\nPOP\nSTOP"),
    ("exp_zero", "PUSH1 0\nPUSH1 3\nEXP\nPOP\nSTOP"),
    ("sstore_fresh", "PUSH1 1\nPUSH1 0\nSSTORE\nSTOP"),
    ("sload", "PUSH1 0\nSLOAD\nPOP\nSTOP"),
    ("balance", "ADDRESS\nBALANCE\nCALLER\nPOP\nPOP\nSTOP"),
    ("return_word", "PUSH1 0x20\nPUSH1 0\nRETURN"),
    ("revert_empty", "PUSH1 0\nPUSH1 0\nREVERT"),
    ("log0_empty", "PUSH1 0\nPUSH1 0\nLOG0\nSTOP"),
    ("log1_data", "PUSH1 0xaa\nPUSH1 0x20\nPUSH1 0x40\nLOG1\nSTOP"),
    ("stack_shuffle", "PUSH1 1\nDUP1\nSWAP1\nPOP\nPOP\nSTOP"),
    ("jump_over", "PUSH1 @t\nJUMP\nINVALID\nt: JUMPDEST\nSTOP"),
    ("codecopy", "PUSH1 0x10\nPUSH1 0\nPUSH1 0x80\nCODECOPY\nSTOP"),
    ("mstore_high_then_low", "PUSH1 1\nPUSH2 0x0100\nMSTORE\nPUSH1 0\nMLOAD\nPOP\nSTOP"),
    ("addmod", "PUSH1 5\nPUSH1 3\nPUSH1 2\nADDMOD\nPOP\nSTOP"),
    ("env_reads", "GAS\nPC\nMSIZE\nPOP\nPOP\nPOP\nSTOP"),
    ("calldataload", "PUSH1 0\nCALLDATALOAD\nPOP\nSTOP"),
    ("two_stores", "PUSH1 1\nPUSH1 0x3f\nMSTORE8\nPUSH1 2\nPUSH1 0\nMSTORE\nSTOP"),
    ("returndatasize", "RETURNDATASIZE\nPOP\nSTOP"),
    ("taken_branch", "PUSH1 1\nPUSH1 @t\nJUMPI\nINVALID\nt: JUMPDEST\nPUSH1 3\nPOP\nSTOP"),
    ("big_memory", "PUSH1 1\nPUSH2 0x1000\nMSTORE\nSTOP"),
];

/// Where a loop reads its bound from.
#[derive(Clone, Copy, Debug)]
pub enum BoundSource {
    Slot(u64),
    Calldata(u64),
}

pub struct LoopFixture {
    pub name: &'static str,
    pub asm: String,
    pub source: BoundSource,
    /// Name of the bound's parameter.
    pub param: &'static str,
}

impl LoopFixture {
    /// Storage and calldata that make the loop run for bound `n`.
    pub fn inputs(&self, n: u64) -> (BTreeMap<U256, U256>, Vec<u8>) {
        match self.source {
            BoundSource::Slot(k) => (BTreeMap::from([(U256::from(k), U256::from(n))]), Vec::new()),
            BoundSource::Calldata(off) => {
                let mut cd = vec![0u8; off as usize + 32];
                let mut word = [0u8; 32];
                U256::from(n).to_big_endian(&mut word);
                cd[off as usize..].copy_from_slice(&word);
                (BTreeMap::new(), cd)
            }
        }
    }
}

fn up_counter(load: &str, start: u64, body: &str) -> String {
    format!(
        "{load}\nPUSH1 {start}\nloop: JUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 @end\nJUMPI\n{body}\nPUSH1 1\nADD\nPUSH1 @loop\nJUMP\nend: JUMPDEST\nSTOP"
    )
}

/// Counter loops whose iteration count is a linear function of one input.
pub fn counter_loops() -> Vec<LoopFixture> {
    vec![
        LoopFixture {
            name: "count_up",
            asm: up_counter("PUSH1 0\nSLOAD", 0, ""),
            source: BoundSource::Slot(0),
            param: "g_0",
        },
        LoopFixture {
            name: "count_up_arith_body",
            asm: up_counter("PUSH1 0\nSLOAD", 0, "PUSH1 3\nPUSH1 4\nMUL\nPOP"),
            source: BoundSource::Slot(0),
            param: "g_0",
        },
        LoopFixture {
            name: "count_down",
            asm: "PUSH1 0\nSLOAD\nloop: JUMPDEST\nDUP1\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 1\nSWAP1\nSUB\nPUSH1 @loop\nJUMP\nend: JUMPDEST\nSTOP"
                .into(),
            source: BoundSource::Slot(0),
            param: "g_0",
        },
        LoopFixture {
            name: "count_up_gt",
            asm: "PUSH1 1\nSLOAD\nPUSH1 0\nloop: JUMPDEST\nDUP1\nDUP3\nGT\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 1\nADD\nPUSH1 @loop\nJUMP\nend: JUMPDEST\nSTOP"
                .into(),
            source: BoundSource::Slot(1),
            param: "g_1",
        },
        LoopFixture {
            name: "count_up_mstore_body",
            asm: up_counter("PUSH1 0\nSLOAD", 0, "DUP1\nPUSH1 0\nMSTORE"),
            source: BoundSource::Slot(0),
            param: "g_0",
        },
        LoopFixture {
            name: "count_up_calldata",
            asm: up_counter("PUSH1 4\nCALLDATALOAD", 0, ""),
            source: BoundSource::Calldata(4),
            param: "b_calldata_4",
        },
        LoopFixture {
            name: "count_up_sload_body",
            asm: up_counter("PUSH1 0\nSLOAD", 0, "PUSH1 1\nSLOAD\nPOP"),
            source: BoundSource::Slot(0),
            param: "g_0",
        },
        LoopFixture {
            name: "count_from_three",
            asm: up_counter("PUSH1 2\nSLOAD", 3, ""),
            source: BoundSource::Slot(2),
            param: "g_2",
        },
    ]
}

/// `i += g_1 & 7`: the step can be zero, so no ranking function exists.
pub const UNRANKABLE_LOOP: &str = "PUSH1 0\nSLOAD\nPUSH1 0\nloop: JUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 1\nSLOAD\nPUSH1 7\nAND\nADD\nPUSH1 @loop\nJUMP\nend: JUMPDEST\nSTOP";

/// Two loop heads that jump into each other; the pair can be entered at
/// either head.
pub const CROSS_JUMP: &str = "PUSH1 0\nSLOAD\nPUSH1 0\nCALLDATALOAD\nPUSH1 @b\nJUMPI\na: JUMPDEST\nDUP1\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 1\nSWAP1\nSUB\nPUSH1 @b\nJUMP\nb: JUMPDEST\nDUP1\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 1\nSWAP1\nSUB\nPUSH1 @a\nJUMP\nend: JUMPDEST\nSTOP";

/// A terminating loop hashing a length loaded from an unknown address.
pub const FORGOTTEN_LENGTH: &str = "PUSH1 0\nSLOAD\nPUSH1 0\nloop: JUMPDEST\nDUP2\nDUP2\nLT\nISZERO\nPUSH1 @end\nJUMPI\nPUSH1 2\nSLOAD\nMLOAD\nPUSH1 0\nSHA3\nPOP\nPUSH1 1\nADD\nPUSH1 @loop\nJUMP\nend: JUMPDEST\nSTOP";

pub fn asm(text: &str) -> Vec<u8> {
    assemble(text).unwrap_or_else(|e| panic!("{e}\n{text}"))
}

/// The report of a contract analyzed as a single function.
pub fn single_function(code: &[u8]) -> FunctionReport {
    let r = analyze_code("fixture", code, &BTreeMap::new(), &Options::default());
    assert_eq!(r.functions.len(), 1, "expected one function");
    r.functions.into_iter().next().unwrap()
}

/// Random program with at least one backward conditional jump, and
/// sometimes a subroutine called from several sites.
pub fn random_loop_program(rng: &mut impl Rng) -> String {
    let k = rng.gen_range(3..8);
    let back_from = rng.gen_range(1..k);
    let with_sub = rng.gen_bool(0.5);
    let mut s = String::new();
    for i in 0..k {
        s += &format!("b{i}: JUMPDEST\n");
        for _ in 0..rng.gen_range(0..3) {
            s += match rng.gen_range(0..4) {
                0 => "PUSH1 9\nPOP\n",
                1 => "PUSH1 2\nPUSH1 3\nADD\nPOP\n",
                2 => "PUSH1 1\nSLOAD\nPOP\n",
                _ => "CALLVALUE\nPOP\n",
            };
        }
        if with_sub && rng.gen_bool(0.4) {
            s += &format!("PUSH1 @r{i}\nPUSH1 @sub\nJUMP\nr{i}: JUMPDEST\n");
        }
        if i == k - 1 {
            s += "STOP\n";
        } else if i == back_from {
            let j = rng.gen_range(0..=i);
            s += &format!("PUSH1 0\nCALLDATALOAD\nPUSH1 @b{j}\nJUMPI\n");
        } else {
            match rng.gen_range(0..4) {
                0 => {
                    let j = rng.gen_range(0..k);
                    s += &format!("PUSH1 {}\nSLOAD\nPUSH1 @b{j}\nJUMPI\n", rng.gen_range(0..3));
                }
                1 => {
                    let j = rng.gen_range(i + 1..k);
                    s += &format!("PUSH1 @b{j}\nJUMP\n");
                }
                2 => s += "",
                _ => s += if rng.gen_bool(0.5) { "STOP\n" } else { "PUSH1 0\nPUSH1 0\nRETURN\n" },
            }
        }
    }
    if with_sub {
        s += "sub: JUMPDEST\nPUSH1 4\nPOP\nJUMP\n";
    }
    s
}

/// Block edges found by exploring paths of at most `depth` blocks,
/// tracking only pushed constants on the stack.
pub fn explore_edges(code: &[u8], depth: usize) -> BTreeSet<(usize, usize)> {
    let mut ops = BTreeMap::new();
    let mut pc = 0;
    while pc < code.len() {
        let op = Opcode::from_byte(code[pc]);
        let n = op.immediate_len();
        let mut v = [0u8; 32];
        let imm = &code[(pc + 1).min(code.len())..(pc + 1 + n).min(code.len())];
        v[32 - n..32 - n + imm.len()].copy_from_slice(imm);
        ops.insert(pc, (op, U256::from_big_endian(&v), pc + 1 + n));
        pc += 1 + n;
    }
    let is_dest = |t: usize| matches!(ops.get(&t), Some((Opcode::Jumpdest, _, _)));

    let mut edges = BTreeSet::new();
    let mut seen: HashSet<(usize, Vec<Option<U256>>)> = HashSet::new();
    let mut queue = VecDeque::from([(0usize, Vec::<Option<U256>>::new(), 1usize)]);
    while let Some((start, mut stack, d)) = queue.pop_front() {
        if !seen.insert((start, stack.clone())) {
            continue;
        }
        let mut pc = start;
        let mut next = |from: usize, to: usize, stack: &Vec<Option<U256>>, edges: &mut BTreeSet<(usize, usize)>| {
            edges.insert((from, to));
            if d < depth {
                queue.push_back((to, stack.clone(), d + 1));
            }
        };
        loop {
            let Some(&(op, imm, after)) = ops.get(&pc) else { break };
            if pc != start && op == Opcode::Jumpdest {
                next(start, pc, &stack, &mut edges);
                break;
            }
            let info = op.info();
            match op {
                Opcode::Push(_) => stack.push(Some(imm)),
                Opcode::Jump => {
                    let t = stack.pop().flatten();
                    if let Some(t) = t.filter(|t| *t < U256::from(code.len())).map(|t| t.as_usize()) {
                        if is_dest(t) {
                            next(start, t, &stack, &mut edges);
                        }
                    }
                    break;
                }
                Opcode::Jumpi => {
                    let t = stack.pop().flatten();
                    stack.pop();
                    if let Some(t) = t.filter(|t| *t < U256::from(code.len())).map(|t| t.as_usize()) {
                        if is_dest(t) {
                            next(start, t, &stack, &mut edges);
                        }
                    }
                    if after < code.len() {
                        next(start, after, &stack, &mut edges);
                    }
                    break;
                }
                _ if (0x80..=0x8f).contains(&op.byte()) => {
                    let n = (op.byte() - 0x7f) as usize;
                    let v = stack[stack.len() - n];
                    stack.push(v);
                }
                _ if (0x90..=0x9f).contains(&op.byte()) => {
                    let n = (op.byte() - 0x8f) as usize;
                    let len = stack.len();
                    stack.swap(len - 1, len - 1 - n);
                }
                _ => {
                    if info.is_terminator {
                        break;
                    }
                    for _ in 0..info.stack_pops {
                        stack.pop();
                    }
                    for _ in 0..info.stack_pushes {
                        stack.push(None);
                    }
                }
            }
            pc = after;
        }
    }
    edges
}
