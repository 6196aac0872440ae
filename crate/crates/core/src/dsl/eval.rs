use std::borrow::Cow;

use super::ast::{Expr, Var};
use super::builtins::Builtin;
use super::Program;
use crate::logits::{derive_distributions, DistributionError, Distributions, LogitsRecord};
use crate::metrics::{extreme_k_mean, top_two};
use crate::strategy::ScoreOutcome;

/// Read-only inputs for one record.
pub struct EvalContext<'a> {
    pub seq_len: usize,
    pub vocab: usize,
    pub probs: &'a [f64],
    pub log_probs: &'a [f64],
    pub targets: Vec<f64>,
    pub target_probs: Vec<f64>,
    pub target_log_probs: Vec<f64>,
    pub has_targets: bool,
}

impl<'a> EvalContext<'a> {
    pub fn new(d: &'a Distributions) -> Self {
        Self {
            seq_len: d.seq_len,
            vocab: d.vocab,
            probs: &d.probs,
            log_probs: &d.log_probs,
            targets: d.targets.iter().map(|&t| t as f64).collect(),
            target_probs: d.target_probs(),
            target_log_probs: d.target_log_probs(),
            has_targets: d.has_targets,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value<'a> {
    Scalar(f64),
    Seq(Cow<'a, [f64]>),
    /// Row-major `N x V`.
    Matrix(Cow<'a, [f64]>),
}

impl<'a> Value<'a> {
    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        match self {
            Value::Scalar(x) => Value::Scalar(f(x)),
            Value::Seq(v) => Value::Seq(Cow::Owned(v.iter().map(|&x| f(x)).collect())),
            Value::Matrix(m) => Value::Matrix(Cow::Owned(m.iter().map(|&x| f(x)).collect())),
        }
    }

    fn seq(self) -> Cow<'a, [f64]> {
        match self {
            Value::Seq(v) => v,
            _ => unreachable!("type checker guarantees a sequence"),
        }
    }

    fn scalar(&self) -> f64 {
        match self {
            Value::Scalar(x) => *x,
            _ => unreachable!("type checker guarantees a scalar"),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Value::Scalar(x) => x.is_finite(),
            Value::Seq(v) | Value::Matrix(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

fn literal(e: &Expr) -> f64 {
    match e {
        Expr::Num(x) => *x,
        _ => unreachable!("type checker guarantees a literal"),
    }
}

/// numpy-style gradient with unit spacing.
pub(crate) fn gradient(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| match i {
            0 => x[1] - x[0],
            i if i == n - 1 => x[n - 1] - x[n - 2],
            i => (x[i + 1] - x[i - 1]) / 2.0,
        })
        .collect()
}

fn central_moments(x: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    (m2 / n, m3 / n, m4 / n)
}

fn reduce_rows(ctx: &EvalContext, m: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    m.chunks_exact(ctx.vocab).map(f).collect()
}

fn shannon(row: &[f64]) -> f64 {
    -row.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

fn renyi(row: &[f64], alpha: f64) -> f64 {
    if alpha == 1.0 {
        shannon(row)
    } else if alpha == f64::INFINITY {
        -row.iter().copied().fold(f64::NEG_INFINITY, f64::max).ln()
    } else {
        row.iter().map(|&p| p.powf(alpha)).sum::<f64>().ln() / (1.0 - alpha)
    }
}

fn binary<'a>(op: super::BinOp, a: Value<'a>, b: Value<'a>, vocab: usize) -> Value<'a> {
    use Value::*;
    let zip = |x: &[f64], y: &[f64]| -> Vec<f64> {
        x.iter().zip(y).map(|(&p, &q)| op.apply(p, q)).collect()
    };
    match (a, b) {
        (Scalar(x), Scalar(y)) => Scalar(op.apply(x, y)),
        (Scalar(x), other) => other.map(|y| op.apply(x, y)),
        (other, Scalar(y)) => other.map(|x| op.apply(x, y)),
        (Seq(x), Seq(y)) => Seq(Cow::Owned(zip(&x, &y))),
        (Matrix(x), Matrix(y)) => Matrix(Cow::Owned(zip(&x, &y))),
        (Matrix(m), Seq(s)) => Matrix(Cow::Owned(
            m.chunks_exact(vocab)
                .zip(s.iter())
                .flat_map(|(row, &c)| row.iter().map(move |&x| op.apply(x, c)))
                .collect(),
        )),
        (Seq(s), Matrix(m)) => Matrix(Cow::Owned(
            m.chunks_exact(vocab)
                .zip(s.iter())
                .flat_map(|(row, &c)| row.iter().map(move |&x| op.apply(c, x)))
                .collect(),
        )),
    }
}

fn eval<'a>(e: &Expr, ctx: &'a EvalContext<'a>) -> Value<'a> {
    match e {
        Expr::Num(x) => Value::Scalar(*x),
        Expr::Var(v) => match v {
            Var::P => Value::Matrix(Cow::Borrowed(ctx.probs)),
            Var::LP => Value::Matrix(Cow::Borrowed(ctx.log_probs)),
            Var::Y => Value::Seq(Cow::Borrowed(&ctx.targets)),
            Var::TP => Value::Seq(Cow::Borrowed(&ctx.target_probs)),
            Var::TLP => Value::Seq(Cow::Borrowed(&ctx.target_log_probs)),
        },
        Expr::Neg(inner) => eval(inner, ctx).map(|x| -x),
        Expr::Binary { op, lhs, rhs } => binary(*op, eval(lhs, ctx), eval(rhs, ctx), ctx.vocab),
        Expr::Call { func, args } => {
            let arg = eval(&args[0], ctx);
            call(*func, arg, args, ctx)
        }
    }
}

fn call<'a>(func: Builtin, arg: Value<'a>, args: &[Expr], ctx: &'a EvalContext<'a>) -> Value<'a> {
    let vocab_reduce = |f: &dyn Fn(&[f64]) -> f64| match &arg {
        Value::Matrix(m) => Value::Seq(Cow::Owned(reduce_rows(ctx, m, f))),
        _ => unreachable!("type checker guarantees a matrix"),
    };
    match func {
        Builtin::SumV => vocab_reduce(&|r| r.iter().sum()),
        Builtin::MaxV => vocab_reduce(&|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Builtin::Max2V => vocab_reduce(&|r| top_two(r.iter().copied()).1),
        Builtin::EntropyV => vocab_reduce(&shannon),
        Builtin::RenyiV => {
            let alpha = literal(&args[1]);
            vocab_reduce(&|r| renyi(r, alpha))
        }
        Builtin::Abs => arg.map(f64::abs),
        Builtin::Log => arg.map(f64::ln),
        Builtin::Exp => arg.map(f64::exp),
        Builtin::Relu => arg.map(|x| x.max(0.0)),
        Builtin::Pow => {
            let c = literal(&args[1]);
            arg.map(|x| x.powf(c))
        }
        Builtin::Clamp => {
            let (lo, hi) = (literal(&args[1]), literal(&args[2]));
            arg.map(|x| x.clamp(lo, hi))
        }
        Builtin::Diff => {
            let s = arg.seq();
            Value::Seq(Cow::Owned(s.windows(2).map(|w| w[1] - w[0]).collect()))
        }
        Builtin::Gradient => Value::Seq(Cow::Owned(gradient(&arg.seq()))),
        Builtin::DropLast => {
            let s = arg.seq();
            Value::Seq(Cow::Owned(s[..s.len() - 1].to_vec()))
        }
        reduction => {
            let s = arg.seq();
            let n = s.len() as f64;
            Value::Scalar(match reduction {
                Builtin::Mean => s.iter().sum::<f64>() / n,
                Builtin::Sum => s.iter().sum(),
                Builtin::Var => central_moments(&s).0,
                Builtin::Std => central_moments(&s).0.sqrt(),
                Builtin::Min => s.iter().copied().fold(f64::INFINITY, f64::min),
                Builtin::Max => s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                Builtin::Skew => {
                    let (m2, m3, _) = central_moments(&s);
                    m3 / m2.powf(1.5)
                }
                Builtin::Kurt => {
                    let (m2, _, m4) = central_moments(&s);
                    m4 / (m2 * m2) - 3.0
                }
                Builtin::MinKMean => extreme_k_mean(&s, literal(&args[1]), false),
                Builtin::MaxKMean => extreme_k_mean(&s, literal(&args[1]), true),
                _ => unreachable!("non-reduction builtins handled above"),
            })
        }
    }
}

/// Evaluates a program to whatever shape it has. Returns `None` when the
/// record is too short for the program.
pub fn evaluate_value<'a>(program: &Program, ctx: &'a EvalContext<'a>) -> Option<Value<'a>> {
    if ctx.seq_len < program.min_positions {
        return None;
    }
    Some(eval(&program.ast, ctx))
}

/// Scores one record. The program must be scalar-typed (see
/// [`Program::compile`]).
pub fn evaluate(program: &Program, d: &Distributions) -> ScoreOutcome {
    if program.uses_targets && !d.has_targets {
        return ScoreOutcome::NotApplicable;
    }
    let ctx = EvalContext::new(d);
    match evaluate_value(program, &ctx) {
        None => ScoreOutcome::Insufficient,
        Some(v) => ScoreOutcome::from_value(v.scalar()),
    }
}

pub fn evaluate_record(
    program: &Program,
    record: &LogitsRecord,
) -> Result<ScoreOutcome, DistributionError> {
    Ok(evaluate(program, &derive_distributions(record)?))
}
