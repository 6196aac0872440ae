use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::logits::{derive_distributions, Label, LogitsRecord, Slice};
use crate::metrics::baseline_kinds;
use crate::strategy::ScoreOutcome;

pub(crate) const HELICITY: &str = "mean(drop_last(abs(gradient(TLP) * gradient(gradient(TLP)))))";

/// A distribution whose target log-probabilities are exactly `tlp`: each
/// row puts `exp(tlp[i])` on token 0 and spreads the rest over the others.
fn dist_with_tlp(tlp: &[f64], vocab: usize) -> crate::logits::Distributions {
    let n = tlp.len();
    let mut probs = vec![0.0; n * vocab];
    let mut log_probs = vec![0.0; n * vocab];
    for (i, &lp) in tlp.iter().enumerate() {
        let p = lp.exp();
        let rest = (1.0 - p) / (vocab - 1) as f64;
        for j in 0..vocab {
            let q = if j == 0 { p } else { rest };
            probs[i * vocab + j] = q;
            log_probs[i * vocab + j] = if j == 0 { lp } else { rest.ln() };
        }
    }
    crate::logits::Distributions {
        seq_len: n,
        vocab,
        probs,
        log_probs,
        targets: vec![0; n],
        has_targets: true,
    }
}

fn record(rng: &mut ChaCha8Rng, n: usize, v: usize, scale: f32) -> LogitsRecord {
    let logits = (0..n * v)
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    let targets = (0..n).map(|_| rng.random_range(0..v as u32)).collect();
    LogitsRecord::new("r", Label::Member, Slice::Text, targets, logits)
}

fn value(src: &str, d: &crate::logits::Distributions) -> f64 {
    match evaluate(&Program::compile(src).unwrap(), d) {
        ScoreOutcome::Value(v) => v,
        other => panic!("{src}: {other:?}"),
    }
}

#[test]
fn spec_programs_compile() {
    let p = Program::compile("mean(abs(gradient(TLP) * gradient(gradient(TLP))))").unwrap();
    assert_eq!(p.inferred_type, Type::Scalar);
    assert_eq!(p.vocab_passes, 0);
    let p = Program::compile("mean(relu(max_v(LP) - TLP))").unwrap();
    assert_eq!(p.vocab_passes, 1);
    assert_eq!(p.cost_class, CostClass::Ok);
    let err = Program::compile("mean(sort(TLP))").unwrap_err();
    assert!(err.to_string().contains("unknown function `sort`"), "{err}");
}

#[test]
fn helicity_hand_trace() {
    // g1 = (1, 2, 3), g2 = (1, 1, 1); |g1 g2| without the last entry = (1, 2).
    let d = dist_with_tlp(&[-0.1, -0.2, -0.3], 4);
    let p = Program::compile(HELICITY).unwrap();
    let ctx = EvalContext {
        target_log_probs: vec![0.0, 1.0, 4.0],
        ..EvalContext::new(&d)
    };
    match evaluate_value(&p, &ctx).unwrap() {
        Value::Scalar(x) => assert_eq!(x, 1.5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn helicity_guard_below_three_positions() {
    let p = Program::compile(HELICITY).unwrap();
    assert_eq!(p.min_positions, 3);
    let d = dist_with_tlp(&[-0.5, -0.1], 4);
    assert_eq!(evaluate(&p, &d), ScoreOutcome::Insufficient);
    assert_eq!(evaluate(&p, &d).score(), Some(0.0));
}

#[test]
fn gap_is_zero_when_target_is_argmax() {
    let d = dist_with_tlp(&[-0.1, -0.2, -0.05], 5);
    assert_eq!(value("mean(relu(max_v(LP) - TLP))", &d), 0.0);
}

#[test]
fn uniform_rows() {
    let rec = LogitsRecord::new(
        "u",
        Label::Member,
        Slice::Text,
        vec![1, 2, 3],
        vec![0.0; 12],
    );
    let d = derive_distributions(&rec).unwrap();
    assert!((value("mean(TP)", &d) - 0.25).abs() < 1e-15);
    let p = Program::compile("sum(sum_v(P))").unwrap();
    assert!(matches!(evaluate(&p, &d), ScoreOutcome::Value(x) if (x - 3.0).abs() < 1e-12));

    let parsed = typecheck(parse("sum_v(P) ").unwrap()).unwrap();
    assert_eq!(parsed.inferred_type, Type::Seq { trimmed: 0 });
    let ctx = EvalContext::new(&d);
    match evaluate_value(&parsed, &ctx).unwrap() {
        Value::Seq(s) => assert!(s.iter().all(|x| (x - 1.0).abs() < 1e-12)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn type_errors_name_the_node() {
    let err = Program::compile("entropy_v(TP)").unwrap_err();
    match err {
        DslError::Type(e) => {
            assert_eq!(e.node, "entropy_v(TP)");
            assert!(e.message.contains("matrix"));
        }
        other => panic!("{other:?}"),
    }
    for bad in [
        "mean(mean(TLP))",
        "mean(P)",
        "mean(diff(TLP) + TLP)",
        "mean(renyi_v(P, TP))",
        "mean(renyi_v(P, 0))",
        "min_k_mean(TLP, 120)",
        "mean(clamp(TLP, 1, 0))",
        "mean(pow(TLP, TP))",
        "diff(mean(TLP))",
    ] {
        assert!(
            matches!(Program::compile(bad), Err(DslError::Type(_))),
            "{bad} should not typecheck"
        );
    }
    assert!(matches!(
        Program::compile("TLP"),
        Err(DslError::NotScalar(_))
    ));
    assert!(matches!(
        Program::compile("P * 2"),
        Err(DslError::NotScalar(Type::Matrix))
    ));
}

fn count_vocab_calls(e: &Expr) -> u32 {
    let mut n = 0;
    e.visit(&mut |node| {
        if let Expr::Call { func, .. } = node {
            if matches!(
                func.name(),
                "sum_v" | "max_v" | "max2_v" | "entropy_v" | "renyi_v"
            ) {
                n += 1;
            }
        }
    });
    n
}

#[test]
fn cost_limit_matches_counting_oracle() {
    let four = "mean(sum_v(P) + max_v(LP) + max2_v(LP) + entropy_v(P))";
    let five = "mean(sum_v(P) + max_v(LP) + max2_v(LP) + entropy_v(P) + renyi_v(P, 2))";
    let p = typecheck(parse(four).unwrap()).unwrap();
    assert_eq!(p.vocab_passes, count_vocab_calls(&p.ast));
    assert_eq!(p.cost_class, CostClass::Ok);
    let p = typecheck(parse(five).unwrap()).unwrap();
    assert_eq!(p.vocab_passes, 5);
    assert_eq!(p.vocab_passes, count_vocab_calls(&p.ast));
    assert_eq!(p.cost_class, CostClass::Rejected);
    assert_eq!(
        Program::compile(five).unwrap_err(),
        DslError::CostRejected { passes: 5 }
    );
}

#[test]
fn division_by_zero_is_non_finite() {
    let d = dist_with_tlp(&[-0.5, -0.2, -0.3], 4);
    let p = Program::compile("mean(TLP) / 0").unwrap();
    assert_eq!(evaluate(&p, &d), ScoreOutcome::NonFinite);
}

#[test]
fn image_records_make_target_programs_not_applicable() {
    let rec = LogitsRecord::new("i", Label::Member, Slice::Img, vec![0; 3], vec![0.5; 12]);
    let d = derive_distributions(&rec).unwrap();
    assert_eq!(
        evaluate(&Program::compile("mean(TLP)").unwrap(), &d),
        ScoreOutcome::NotApplicable
    );
    assert!(matches!(
        evaluate(&Program::compile("mean(entropy_v(P))").unwrap(), &d),
        ScoreOutcome::Value(_)
    ));
}

#[test]
fn reductions_match_definitions() {
    let x = [1.0, 2.0, 4.0, 8.0];
    let d = dist_with_tlp(&x.map(|v: f64| -v / 10.0), 8);
    let tlp: Vec<f64> = x.iter().map(|v| -v / 10.0).collect();
    let mean = tlp.iter().sum::<f64>() / 4.0;
    let m2 = tlp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    let m3 = tlp.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / 4.0;
    let m4 = tlp.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / 4.0;
    let close = |a: f64, b: f64| assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    close(value("mean(TLP)", &d), mean);
    close(value("sum(TLP)", &d), mean * 4.0);
    close(value("var(TLP)", &d), m2);
    close(value("std(TLP)", &d), m2.sqrt());
    close(value("min(TLP)", &d), -0.8);
    close(value("max(TLP)", &d), -0.1);
    close(value("skew(TLP)", &d), m3 / m2.powf(1.5));
    close(value("kurt(TLP)", &d), m4 / (m2 * m2) - 3.0);
    close(value("min_k_mean(TLP, 50)", &d), (-0.8 - 0.4) / 2.0);
    close(value("max_k_mean(TLP, 0)", &d), -0.1);
    close(value("mean(diff(TLP))", &d), (-0.8 + 0.1) / 3.0);
    close(value("mean(drop_last(TLP))", &d), (-0.1 - 0.2 - 0.4) / 3.0);
    close(
        value("mean(clamp(TLP, -0.3, -0.15))", &d),
        (-0.15 - 0.2 - 0.3 - 0.3) / 4.0,
    );
    close(value("-mean(TLP) * 2", &d), -2.0 * mean);
}

#[test]
fn matrix_broadcasts_against_sequences() {
    let d = dist_with_tlp(&[-0.5, -1.5], 3);
    // max_j (LP_ij - TLP_i) is the gap itself.
    let a = value("mean(max_v(LP - TLP))", &d);
    let b = value("mean(max_v(LP) - TLP)", &d);
    assert!((a - b).abs() < 1e-15);
}

#[test]
fn gradient_is_exact_on_polynomials() {
    // Quadratic: central differences are exact in the interior.
    let x: Vec<f64> = (0..7)
        .map(|i| 3.0 * (i * i) as f64 - 2.0 * i as f64 + 1.0)
        .collect();
    let g = eval::gradient(&x);
    for i in 1..6 {
        assert_eq!(g[i], 6.0 * i as f64 - 2.0);
    }
    assert_eq!(g[0], x[1] - x[0]);
    assert_eq!(g[6], x[6] - x[5]);
    // Linear: exact everywhere.
    let g = eval::gradient(&[2.0, 5.0, 8.0, 11.0]);
    assert_eq!(g, vec![3.0; 4]);
}

#[test]
fn every_builtin_round_trips() {
    let table = builtin_reference();
    assert!(table.len() >= 20);
    assert_eq!(table, builtin_reference());
    for info in &table {
        let p = Program::compile(info.example).unwrap_or_else(|e| panic!("{}: {e}", info.example));
        assert!(info.example.contains(&format!("{}(", info.name)));
        assert_eq!(parse_expr(&p.pretty()).unwrap(), p.ast, "{}", info.name);
    }
    assert!(builtin_reference_text().lines().count() == table.len());
}

#[test]
fn baselines_match_native_on_random_records() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kinds = baseline_kinds();
    let programs: Vec<Program> = kinds
        .iter()
        .map(|k| Program::compile(&k.dsl()).unwrap_or_else(|e| panic!("{}: {e}", k.name())))
        .collect();
    for _ in 0..100 {
        let rec = record(&mut rng, 16, 64, 4.0);
        let d = derive_distributions(&rec).unwrap();
        for (kind, program) in kinds.iter().zip(&programs) {
            let native = kind.compute(&d).unwrap();
            let dsl = match evaluate(program, &d) {
                ScoreOutcome::Value(v) => v,
                other => panic!("{}: {other:?}", kind.name()),
            };
            let tol = 1e-9 * native.abs().max(1.0);
            assert!(
                (native - dsl).abs() <= tol,
                "{}: {native} vs {dsl}",
                kind.name()
            );
        }
    }
}

#[test]
fn evaluation_is_bit_identical_across_threads() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let recs: Vec<_> = (0..8).map(|_| record(&mut rng, 12, 32, 3.0)).collect();
    let p = Program::compile(HELICITY).unwrap();
    let serial: Vec<u64> = recs
        .iter()
        .map(|r| evaluate_record(&p, r).unwrap().score().unwrap().to_bits())
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let parallel: Vec<u64> = pool.install(|| {
        use rayon::prelude::*;
        recs.par_iter()
            .map(|r| evaluate_record(&p, r).unwrap().score().unwrap().to_bits())
            .collect()
    });
    assert_eq!(serial, parallel);
}

fn arb_leaf() -> impl Strategy<Value = Expr> {
    prop_oneof![
        (-1000.0f64..1000.0).prop_map(Expr::Num),
        Just(Expr::Num(f64::INFINITY)),
        prop_oneof![
            Just(Var::P),
            Just(Var::LP),
            Just(Var::Y),
            Just(Var::TP),
            Just(Var::TLP)
        ]
        .prop_map(Expr::Var),
    ]
}

fn arb_expr() -> impl Strategy<Value = Expr> {
    arb_leaf().prop_recursive(5, 40, 3, |inner| {
        prop_oneof![
            inner.clone().prop_map(Expr::negate),
            (
                prop_oneof![
                    Just(BinOp::Add),
                    Just(BinOp::Sub),
                    Just(BinOp::Mul),
                    Just(BinOp::Div)
                ],
                inner.clone(),
                inner.clone()
            )
                .prop_map(|(op, a, b)| Expr::binary(op, a, b)),
            (0..Builtin::ALL.len(), prop::collection::vec(inner, 3)).prop_map(|(i, args)| {
                let func = Builtin::ALL[i];
                Expr::call(func, args.into_iter().take(func.arity()).collect())
            }),
        ]
    })
}

proptest! {
    #[test]
    fn parse_print_round_trip(e in arb_expr()) {
        let printed = e.to_string();
        let reparsed = parse_expr(&printed).map_err(|err| TestCaseError::fail(format!("{printed}: {err}")))?;
        prop_assert_eq!(reparsed, e, "{}", printed);
    }
}
