//! Offline candidate generator: deterministic syntactic mutations of
//! baselines and strong archived programs. Needs no network.

use std::collections::{HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::guidance::{family, GuidanceReport};
use crate::dsl::{BinOp, Builtin, Expr, Program};
use crate::library::{ContextWindow, Library};
use crate::metrics::list_baselines;
use crate::strategy::StrategySpec;

const ALPHAS: [f64; 4] = [0.5, 1.0, 2.0, f64::INFINITY];
const KS: [f64; 5] = [0.0, 10.0, 20.0, 50.0, 100.0];
const PLAIN_REDUCTIONS: [Builtin; 8] = [
    Builtin::Mean,
    Builtin::Sum,
    Builtin::Var,
    Builtin::Std,
    Builtin::Min,
    Builtin::Max,
    Builtin::Skew,
    Builtin::Kurt,
];
const ATTEMPTS_PER_CANDIDATE: usize = 50;
const PARENT_NAME_CHARS: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mutation {
    SwapReduction,
    Alpha,
    K,
    Compose,
    Wrap,
}

impl Mutation {
    const ALL: [Mutation; 5] = [
        Mutation::SwapReduction,
        Mutation::Alpha,
        Mutation::K,
        Mutation::Compose,
        Mutation::Wrap,
    ];

    fn tag(self) -> &'static str {
        match self {
            Mutation::SwapReduction => "reduce",
            Mutation::Alpha => "alpha",
            Mutation::K => "k",
            Mutation::Compose => "compose",
            Mutation::Wrap => "wrap",
        }
    }
}

fn is_reduction(e: &Expr) -> bool {
    matches!(e, Expr::Call { func, .. } if PLAIN_REDUCTIONS.contains(func)
        || matches!(func, Builtin::MinKMean | Builtin::MaxKMean))
}

fn is_entropy(e: &Expr) -> bool {
    matches!(
        e,
        Expr::Call {
            func: Builtin::EntropyV | Builtin::RenyiV,
            ..
        }
    )
}

fn is_k_pool(e: &Expr) -> bool {
    matches!(
        e,
        Expr::Call {
            func: Builtin::MinKMean | Builtin::MaxKMean,
            ..
        }
    )
}

fn count(e: &Expr, pred: fn(&Expr) -> bool) -> usize {
    let mut n = 0;
    e.visit(&mut |x| {
        if pred(x) {
            n += 1
        }
    });
    n
}

/// Copy of `e` with the `target`-th pre-order node matching `pred` replaced
/// by `f(node)`.
fn replace_nth(
    e: &Expr,
    pred: fn(&Expr) -> bool,
    target: usize,
    seen: &mut usize,
    f: &mut dyn FnMut(&Expr) -> Expr,
) -> Expr {
    if pred(e) {
        *seen += 1;
        if *seen - 1 == target {
            return f(e);
        }
    }
    let mut rec = |x: &Expr| replace_nth(x, pred, target, seen, f);
    match e {
        Expr::Num(_) | Expr::Var(_) => e.clone(),
        Expr::Neg(x) => Expr::Neg(Box::new(rec(x))),
        Expr::Binary { op, lhs, rhs } => {
            let l = rec(lhs);
            Expr::binary(*op, l, rec(rhs))
        }
        Expr::Call { func, args } => Expr::call(*func, args.iter().map(rec).collect()),
    }
}

fn mutate_random(
    e: &Expr,
    pred: fn(&Expr) -> bool,
    rng: &mut ChaCha8Rng,
    f: &mut dyn FnMut(&Expr, &mut ChaCha8Rng) -> Option<Expr>,
) -> Option<Expr> {
    let n = count(e, pred);
    if n == 0 {
        return None;
    }
    let target = rng.random_range(0..n);
    let mut failed = false;
    let out = replace_nth(e, pred, target, &mut 0, &mut |node| {
        f(node, rng).unwrap_or_else(|| {
            failed = true;
            node.clone()
        })
    });
    (!failed).then_some(out)
}

fn first_arg(node: &Expr) -> Expr {
    match node {
        Expr::Call { args, .. } => args[0].clone(),
        _ => unreachable!("mutations only target calls"),
    }
}

fn literal_arg(node: &Expr, i: usize) -> Option<f64> {
    match node {
        Expr::Call { args, .. } => match args.get(i) {
            Some(Expr::Num(x)) => Some(*x),
            _ => None,
        },
        _ => None,
    }
}

fn pick_other<'a, T: PartialEq>(
    rng: &mut ChaCha8Rng,
    options: &'a [T],
    current: &T,
) -> Option<&'a T> {
    let rest: Vec<&T> = options.iter().filter(|o| *o != current).collect();
    rest.choose(rng).copied()
}

fn swap_reduction(node: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let Expr::Call { func, .. } = node else {
        return None;
    };
    let arg = first_arg(node);
    // Plain reductions plus the two k-pools, each k a separate option.
    let mut options: Vec<(Builtin, Option<f64>)> =
        PLAIN_REDUCTIONS.iter().map(|b| (*b, None)).collect();
    for b in [Builtin::MinKMean, Builtin::MaxKMean] {
        options.extend(KS[1..4].iter().map(|k| (b, Some(*k))));
    }
    let current = (*func, literal_arg(node, 1));
    let &(b, k) = pick_other(rng, &options, &current)?;
    let mut args = vec![arg];
    args.extend(k.map(Expr::Num));
    Some(Expr::call(b, args))
}

fn perturb_alpha(node: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let Expr::Call { func, .. } = node else {
        return None;
    };
    let current = match func {
        Builtin::EntropyV => 1.0,
        _ => literal_arg(node, 1)?,
    };
    let &alpha = pick_other(rng, &ALPHAS, &current)?;
    let arg = first_arg(node);
    Some(if alpha == 1.0 {
        Expr::call(Builtin::EntropyV, vec![arg])
    } else {
        Expr::call(Builtin::RenyiV, vec![arg, Expr::Num(alpha)])
    })
}

fn perturb_k(node: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let Expr::Call { func, .. } = node else {
        return None;
    };
    let &k = pick_other(rng, &KS, &literal_arg(node, 1)?)?;
    Some(Expr::call(*func, vec![first_arg(node), Expr::Num(k)]))
}

fn wrap(e: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let f = *[Builtin::Abs, Builtin::Relu].choose(rng)?;
    if rng.random_bool(0.5) {
        return Some(Expr::call(f, vec![e.clone()]));
    }
    mutate_random(e, is_reduction, rng, &mut |node, _| {
        let Expr::Call { func, args } = node else {
            return None;
        };
        let mut args = args.clone();
        args[0] = Expr::call(f, vec![args[0].clone()]);
        Some(Expr::call(*func, args))
    })
}

struct Parent {
    spec: StrategySpec,
    ast: Expr,
    fitness: f64,
}

const TOURNAMENT: usize = 3;
/// Mutants larger than this many AST nodes are discarded.
const MAX_NODES: usize = 60;

/// Best of a few uniform draws.
fn select<'a>(parents: &'a [Parent], rng: &mut ChaCha8Rng) -> &'a Parent {
    let mut best = parents.choose(rng).expect("baselines always compile");
    for _ in 1..TOURNAMENT {
        let p = parents.choose(rng).expect("non-empty");
        if p.fitness > best.fitness {
            best = p;
        }
    }
    best
}

fn pool(
    context: &ContextWindow,
    guidance: Option<&GuidanceReport>,
    baseline_q: &HashMap<String, f64>,
) -> Vec<Parent> {
    let strong_families: HashSet<&str> = guidance
        .map(|g| {
            g.useful_insights
                .strong_metric_families
                .iter()
                .map(String::as_str)
                .collect()
        })
        .unwrap_or_default();
    let mut out = Vec::new();
    let mut push = |spec: &StrategySpec, copies: usize, fitness: f64| {
        if let Ok(p) = Program::compile(&spec.code) {
            for _ in 0..copies {
                out.push(Parent {
                    spec: spec.clone(),
                    ast: p.ast.clone(),
                    fitness,
                });
            }
        }
    };
    for spec in list_baselines() {
        let copies = if strong_families.contains(family(&spec).as_str()) {
            2
        } else {
            1
        };
        let fitness = baseline_q.get(&spec.name).copied().unwrap_or(0.0);
        push(&spec, copies, fitness);
    }
    for e in &context.strong {
        let copies = if strong_families.contains(family(&e.spec).as_str()) {
            4
        } else {
            2
        };
        push(&e.spec, copies, e.q);
    }
    out
}

fn short(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' {
                c
            } else {
                '_'
            }
        })
        .take(PARENT_NAME_CHARS)
        .collect()
}

/// Canonical text of a program, or None if it does not compile.
pub fn canonical(code: &str) -> Option<String> {
    Program::compile(code).ok().map(|p| p.pretty())
}

/// Inputs to one offline generation call.
pub struct MutationInput<'a> {
    pub context: &'a ContextWindow,
    pub guidance: Option<&'a GuidanceReport>,
    pub library: &'a Library,
    /// Known Q of each baseline by name, used as parent fitness. Missing
    /// baselines count as 0.
    pub baseline_q: &'a HashMap<String, f64>,
    pub round: u32,
    pub k: usize,
    pub seed: u64,
}

/// Up to `k` compiling candidates whose canonical code is new to the
/// library, the baselines and the batch. Fewer are returned only if the
/// attempt budget runs out.
pub fn generate(input: &MutationInput) -> Vec<StrategySpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(input.seed);
    rng.set_stream(input.round as u64);
    let parents = pool(input.context, input.guidance, input.baseline_q);
    let mut seen: HashSet<String> = list_baselines()
        .iter()
        .chain(input.library.entries().iter().map(|e| &e.spec))
        .filter_map(|s| canonical(&s.code))
        .collect();

    let mut out = Vec::new();
    let mut attempts = 0;
    while out.len() < input.k && attempts < input.k * ATTEMPTS_PER_CANDIDATE {
        attempts += 1;
        // The first slot of every round always works on the fittest parent.
        let parent = if out.is_empty() {
            parents
                .iter()
                .reduce(|a, b| if b.fitness > a.fitness { b } else { a })
                .expect("baselines always compile")
        } else {
            select(&parents, &mut rng)
        };
        let mutation = *Mutation::ALL.choose(&mut rng).expect("non-empty");
        let mut note = String::new();
        let mutated = match mutation {
            Mutation::SwapReduction => {
                mutate_random(&parent.ast, is_reduction, &mut rng, &mut swap_reduction)
            }
            Mutation::Alpha => mutate_random(&parent.ast, is_entropy, &mut rng, &mut perturb_alpha),
            Mutation::K => mutate_random(&parent.ast, is_k_pool, &mut rng, &mut perturb_k),
            Mutation::Wrap => wrap(&parent.ast, &mut rng),
            Mutation::Compose => {
                let other = select(&parents, &mut rng);
                let op = if other.spec.direction == parent.spec.direction {
                    BinOp::Add
                } else {
                    BinOp::Sub
                };
                note = format!(" combined with {}", other.spec.name);
                Some(Expr::binary(op, parent.ast.clone(), other.ast.clone()))
            }
        };
        let Some(ast) = mutated else { continue };
        if count(&ast, |_| true) > MAX_NODES {
            continue;
        }
        let code = ast.to_string();
        let Some(canon) = canonical(&code) else {
            continue;
        };
        if !seen.insert(canon) {
            continue;
        }
        let i = out.len();
        out.push(
            StrategySpec::new(
                format!(
                    "m{}_{}_{}_{}",
                    input.round,
                    i,
                    mutation.tag(),
                    short(&parent.spec.name)
                ),
                code,
                parent.spec.direction,
            )
            .with_description(format!(
                "{} mutation of {}{note}",
                mutation.tag(),
                parent.spec.name
            )),
        );
    }
    out
}
