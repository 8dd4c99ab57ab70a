mod common;

use std::collections::BTreeMap;
use std::time::Duration;

use gasbound::analysis::{analyze_code, report_json, Options};
use gasbound::bound::BoundExpr;
use gasbound::crs::parse_crs;
use gasbound::linear::{LinExpr, Rat};
use gasbound::meter::execute;
use gasbound::solver::{evaluate, solve};
use num_bigint::BigInt;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

type B = BoundExpr<String>;

fn int(n: i64) -> Rat {
    Rat::from_integer(BigInt::from(n))
}

fn leaf() -> impl Strategy<Value = B> {
    prop_oneof![
        (0i64..50).prop_map(|n| B::Const(int(n))),
        (prop::sample::select(vec!["a", "b"]), -3i64..4, -10i64..10).prop_map(|(v, k, c)| {
            let mut l = LinExpr::var(v.to_string()).scale(&int(k));
            l = l.add_const(&int(c));
            B::Nat(l)
        }),
    ]
}

fn tree() -> impl Strategy<Value = B> {
    leaf().prop_recursive(4, 24, 3, |inner| {
        prop_oneof![
            prop::collection::vec(inner.clone(), 1..4).prop_map(B::Add),
            prop::collection::vec(inner.clone(), 1..3).prop_map(B::Mul),
            prop::collection::vec(inner.clone(), 1..4).prop_map(B::Max),
            (inner.clone(), 1i64..5).prop_map(|(e, k)| B::FloorDiv(Box::new(e), BigInt::from(k))),
            inner.prop_map(|e| B::Log256(Box::new(e))),
        ]
    })
}

/// A stack-safe straight-line program ending in STOP.
fn straight_line() -> impl Strategy<Value = String> {
    let chunk = (0u8..9, any::<u8>(), any::<u8>());
    prop::collection::vec(chunk, 1..25).prop_map(|chunks| {
        let mut out = String::new();
        let mut h = 0usize;
        for (kind, x, y) in chunks {
            let small = x % 200;
            match kind {
                0 => {
                    let op = ["ADD", "MUL", "SUB", "AND", "XOR", "LT", "DIV", "BYTE"][(y % 8) as usize];
                    out += &format!("PUSH1 {x}\nPUSH1 {y}\n{op}\n");
                    h += 1;
                }
                1 => {
                    out += &format!("PUSH1 {small}\nMLOAD\n");
                    h += 1;
                }
                2 => out += &format!("PUSH1 {y}\nPUSH1 {small}\nMSTORE\n"),
                3 => out += &format!("PUSH1 {y}\nPUSH1 {small}\nMSTORE8\n"),
                4 => {
                    out += &format!("PUSH1 {}\nSLOAD\n", y % 4);
                    h += 1;
                }
                5 => {
                    out += &format!("PUSH1 {}\nPUSH1 {small}\nSHA3\n", y % 96);
                    h += 1;
                }
                6 => {
                    out += &format!("PUSH1 {small}\nCALLDATALOAD\n");
                    h += 1;
                }
                7 if h >= 1 => {
                    out += ["POP\n", "ISZERO\n", "DUP1\n"][(y % 3) as usize];
                    if y % 3 == 0 {
                        h -= 1
                    } else if y % 3 == 2 {
                        h += 1
                    }
                }
                8 if h >= 2 => {
                    out += ["SWAP1\n", "ADD\n"][(y % 2) as usize];
                    h -= (y % 2) as usize;
                }
                _ => {
                    out += "PUSH1 1\n";
                    h += 1;
                }
            }
        }
        out + "STOP"
    })
}

/// Cost of `f(x) = step + f(x - 1) for x >= 1, f(x) = base otherwise`,
/// computed by running the recursion.
fn unrolled(step: i64, base: i64, x: i64) -> i64 {
    let mut total = 0;
    let mut x = x;
    while x >= 1 {
        total += step;
        x -= 1;
    }
    total + base
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn simplify_preserves_value(e in tree(), a in -20i64..40, b in -20i64..40) {
        let env = BTreeMap::from([("a".to_string(), int(a)), ("b".to_string(), int(b))]);
        prop_assert_eq!(e.eval_with(&env), e.simplify().eval_with(&env), "{}", e);
    }

    #[test]
    fn countdown_bound_matches_unrolling(step in 1i64..100, base in 0i64..100, x in 0i64..60) {
        let crs = parse_crs(&format!("f(x) = {step} + f(x') {{x' = x - 1, x >= 1}}\nf(x) = {base} {{x <= 0}}")).unwrap();
        let s = solve(&crs, Duration::from_secs(10));
        let b = s.outcome.bound().expect("countdown is bounded");
        let v = evaluate(b, &BTreeMap::from([("x".to_string(), BigInt::from(x))])).unwrap();
        prop_assert_eq!(v, int(unrolled(step, base, x)), "{}", b);
    }

    #[test]
    fn straight_line_bound_is_exact(src in straight_line()) {
        let code = asm(&src);
        let run = execute(&code, &[], BTreeMap::new(), 10_000).unwrap();
        let f = single_function(&code);
        let op = f.opcode.bound().and_then(|b| evaluate(b, &BTreeMap::new()));
        let mem = f.memory.bound().and_then(|b| evaluate(b, &BTreeMap::new()));
        prop_assert_eq!(op, Some(int(run.gas_used as i64)), "{}\n{}", src, f.opcode);
        prop_assert_eq!(mem, Some(int(run.mem_gas as i64)), "{}\n{}", src, f.memory);
    }

    #[test]
    fn analysis_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let code = asm(&random_loop_program(&mut rng));
        let opts = Options::default();
        let one = report_json(&[analyze_code("p", &code, &BTreeMap::new(), &opts)], false);
        let two = report_json(&[analyze_code("p", &code, &BTreeMap::new(), &opts)], false);
        prop_assert_eq!(one, two);
    }
}
