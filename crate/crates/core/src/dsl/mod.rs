//! A small, pure expression language for logits-level strategies.
//!
//! Programs read five inputs: `P` and `LP` (`N x V` probabilities and
//! log-probabilities), `Y` (target ids), and `TP` / `TLP` (target
//! probabilities and log-probabilities, length `N`). There are no loops,
//! user functions or sorting primitives. A program is parsed, type-checked
//! and cost-checked once, then evaluated deterministically in 64 bits.

mod ast;
mod builtins;
mod eval;
mod parser;

use std::fmt;

use thiserror::Error;

pub use ast::{BinOp, Expr, Var};
pub use builtins::{builtin_reference, builtin_reference_text, Builtin, BuiltinClass, BuiltinInfo};
pub use eval::{evaluate, evaluate_record, evaluate_value, EvalContext, Value};
pub use parser::{parse_expr, ParseError};

/// Programs may make at most this many passes over the vocabulary axis.
pub const MAX_VOCAB_PASSES: u32 = 4;

/// Static type of an expression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Type {
    Scalar,
    /// Per-position sequence, `trimmed` positions shorter than `N`.
    Seq {
        trimmed: usize,
    },
    /// `N x V`.
    Matrix,
}

impl fmt::Display for Type {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Type::Scalar => f.write_str("scalar"),
            Type::Seq { trimmed: 0 } => f.write_str("seq_vector"),
            Type::Seq { trimmed } => write!(f, "seq_vector[N-{trimmed}]"),
            Type::Matrix => f.write_str("matrix"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostClass {
    Ok,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("type error in `{node}`: {message}")]
pub struct TypeError {
    pub node: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DslError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error("program makes {passes} vocabulary passes, limit is {MAX_VOCAB_PASSES}")]
    CostRejected { passes: u32 },
    #[error("program evaluates to {0}, expected a scalar")]
    NotScalar(Type),
}

/// A parsed and type-checked program.
#[derive(Debug, Clone, PartialEq)]
pub struct Program {
    pub source: String,
    pub ast: Expr,
    pub inferred_type: Type,
    pub vocab_passes: u32,
    pub cost_class: CostClass,
    /// Records shorter than this evaluate to the insufficient-positions
    /// sentinel.
    pub min_positions: usize,
    pub uses_targets: bool,
}

impl Program {
    /// Parses, type-checks and cost-checks a strategy program, which must
    /// reduce to a scalar.
    pub fn compile(source: &str) -> Result<Self, DslError> {
        let program = typecheck(parse(source)?)?;
        if program.cost_class == CostClass::Rejected {
            return Err(DslError::CostRejected {
                passes: program.vocab_passes,
            });
        }
        if program.inferred_type != Type::Scalar {
            return Err(DslError::NotScalar(program.inferred_type));
        }
        Ok(program)
    }

    /// Canonical source text.
    pub fn pretty(&self) -> String {
        self.ast.to_string()
    }
}

/// An untyped parse result.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub source: String,
    pub ast: Expr,
}

pub fn parse(source: &str) -> Result<Parsed, ParseError> {
    Ok(Parsed {
        source: source.to_string(),
        ast: parse_expr(source)?,
    })
}

struct Checker {
    passes: u32,
    min_positions: usize,
    uses_targets: bool,
}

impl Checker {
    fn fail<T>(node: &Expr, message: impl Into<String>) -> Result<T, TypeError> {
        Err(TypeError {
            node: node.to_string(),
            message: message.into(),
        })
    }

    fn literal(node: &Expr, what: &str) -> Result<f64, TypeError> {
        match node {
            Expr::Num(x) => Ok(*x),
            other => Self::fail(other, format!("{what} must be a numeric literal")),
        }
    }

    fn seq(&mut self, ty: Type) -> Type {
        if let Type::Seq { trimmed } = ty {
            self.min_positions = self.min_positions.max(trimmed + 1);
        }
        ty
    }

    fn check(&mut self, e: &Expr) -> Result<Type, TypeError> {
        match e {
            Expr::Num(_) => Ok(Type::Scalar),
            Expr::Var(v) => {
                self.uses_targets |= v.uses_targets();
                Ok(match v {
                    Var::P | Var::LP => Type::Matrix,
                    Var::Y | Var::TP | Var::TLP => Type::Seq { trimmed: 0 },
                })
            }
            Expr::Neg(inner) => self.check(inner),
            Expr::Binary { lhs, rhs, .. } => {
                let a = self.check(lhs)?;
                let b = self.check(rhs)?;
                match (a, b) {
                    (Type::Scalar, t) | (t, Type::Scalar) => Ok(t),
                    (Type::Matrix, Type::Matrix) => Ok(Type::Matrix),
                    (Type::Matrix, Type::Seq { trimmed: 0 })
                    | (Type::Seq { trimmed: 0 }, Type::Matrix) => Ok(Type::Matrix),
                    (Type::Seq { trimmed: x }, Type::Seq { trimmed: y }) if x == y => Ok(a),
                    _ => Self::fail(e, format!("cannot combine {a} with {b}")),
                }
            }
            Expr::Call { func, args } => self.check_call(e, *func, args),
        }
    }

    fn check_call(&mut self, e: &Expr, func: Builtin, args: &[Expr]) -> Result<Type, TypeError> {
        let arg = self.check(&args[0])?;
        match func.class() {
            BuiltinClass::VocabAxis => {
                self.passes += 1;
                if arg != Type::Matrix {
                    return Self::fail(e, format!("`{}` needs a matrix, got {arg}", func.name()));
                }
                if func == Builtin::RenyiV {
                    let alpha = Self::literal(&args[1], "Rényi order")?;
                    if !(alpha > 0.0) {
                        return Self::fail(e, "Rényi order must be positive");
                    }
                }
                Ok(self.seq(Type::Seq { trimmed: 0 }))
            }
            BuiltinClass::Elementwise => {
                match func {
                    Builtin::Pow => {
                        if !Self::literal(&args[1], "exponent")?.is_finite() {
                            return Self::fail(e, "exponent must be finite");
                        }
                    }
                    Builtin::Clamp => {
                        let lo = Self::literal(&args[1], "lower bound")?;
                        let hi = Self::literal(&args[2], "upper bound")?;
                        if !(lo <= hi) {
                            return Self::fail(e, "clamp bounds must satisfy lo <= hi");
                        }
                    }
                    _ => {}
                }
                Ok(arg)
            }
            BuiltinClass::Sequence => {
                let Type::Seq { trimmed } = arg else {
                    return Self::fail(
                        e,
                        format!("`{}` needs a seq_vector, got {arg}", func.name()),
                    );
                };
                match func {
                    Builtin::Gradient => {
                        // Numerical gradients need two points; callers guard with three.
                        self.min_positions = self.min_positions.max(3).max(trimmed + 2);
                        Ok(Type::Seq { trimmed })
                    }
                    _ => Ok(self.seq(Type::Seq {
                        trimmed: trimmed + 1,
                    })),
                }
            }
            BuiltinClass::Reduction => {
                if !matches!(arg, Type::Seq { .. }) {
                    return Self::fail(
                        e,
                        format!("`{}` reduces a seq_vector, got {arg}", func.name()),
                    );
                }
                if matches!(func, Builtin::MinKMean | Builtin::MaxKMean) {
                    let k = Self::literal(&args[1], "k")?;
                    if !(0.0..=100.0).contains(&k) {
                        return Self::fail(e, "k must lie in [0, 100]");
                    }
                }
                Ok(Type::Scalar)
            }
        }
    }
}

/// Assigns types and cost to a parsed program.
pub fn typecheck(parsed: Parsed) -> Result<Program, TypeError> {
    let mut checker = Checker {
        passes: 0,
        min_positions: 1,
        uses_targets: false,
    };
    let ty = checker.check(&parsed.ast)?;
    Ok(Program {
        source: parsed.source,
        ast: parsed.ast,
        inferred_type: ty,
        vocab_passes: checker.passes,
        cost_class: if checker.passes <= MAX_VOCAB_PASSES {
            CostClass::Ok
        } else {
            CostClass::Rejected
        },
        min_positions: checker.min_positions,
        uses_targets: checker.uses_targets,
    })
}

#[cfg(test)]
mod tests;
