use std::fmt;

use super::builtins::Builtin;

/// Inputs a program may read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Var {
    /// Probabilities, `N x V`.
    P,
    /// Log-probabilities, `N x V`.
    LP,
    /// Target ids as reals, length `N`.
    Y,
    /// Target probabilities, length `N`.
    TP,
    /// Target log-probabilities, length `N`.
    TLP,
}

impl Var {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "P" => Some(Var::P),
            "LP" => Some(Var::LP),
            "Y" => Some(Var::Y),
            "TP" => Some(Var::TP),
            "TLP" => Some(Var::TLP),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::P => "P",
            Var::LP => "LP",
            Var::Y => "Y",
            Var::TP => "TP",
            Var::TLP => "TLP",
        }
    }

    pub fn uses_targets(self) -> bool {
        matches!(self, Var::Y | Var::TP | Var::TLP)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinOp::Add => a + b,
            BinOp::Sub => a - b,
            BinOp::Mul => a * b,
            BinOp::Div => a / b,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(Var),
    Neg(Box<Expr>),
    Binary {
        op: BinOp,
        lhs: Box<Expr>,
        rhs: Box<Expr>,
    },
    Call {
        func: Builtin,
        args: Vec<Expr>,
    },
}

const NEG_PRECEDENCE: u8 = 3;

impl Expr {
    pub fn binary(op: BinOp, lhs: Expr, rhs: Expr) -> Self {
        Expr::Binary {
            op,
            lhs: Box::new(lhs),
            rhs: Box::new(rhs),
        }
    }

    pub fn call(func: Builtin, args: Vec<Expr>) -> Self {
        Expr::Call { func, args }
    }

    /// Negation with literal folding, so `-3` is the literal `-3`.
    pub fn negate(inner: Expr) -> Self {
        match inner {
            Expr::Num(x) => Expr::Num(-x),
            other => Expr::Neg(Box::new(other)),
        }
    }

    /// Pre-order walk.
    pub fn visit<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        match self {
            Expr::Num(_) | Expr::Var(_) => {}
            Expr::Neg(e) => e.visit(f),
            Expr::Binary { lhs, rhs, .. } => {
                lhs.visit(f);
                rhs.visit(f);
            }
            Expr::Call { args, .. } => args.iter().for_each(|a| a.visit(f)),
        }
    }

    /// Outermost function name, looking through negation; operators name
    /// themselves.
    pub fn head_symbol(&self) -> String {
        match self {
            Expr::Num(_) => "literal".into(),
            Expr::Var(v) => v.name().into(),
            Expr::Neg(e) => e.head_symbol(),
            Expr::Binary { op, .. } => match op {
                BinOp::Add => "add".into(),
                BinOp::Sub => "sub".into(),
                BinOp::Mul => "mul".into(),
                BinOp::Div => "div".into(),
            },
            Expr::Call { func, .. } => func.name().into(),
        }
    }

    fn fmt_prec(&self, f: &mut fmt::Formatter<'_>, parent: u8, right: bool) -> fmt::Result {
        match self {
            Expr::Num(x) => fmt_number(*x, f),
            Expr::Var(v) => f.write_str(v.name()),
            Expr::Neg(e) => {
                f.write_str("-")?;
                e.fmt_prec(f, NEG_PRECEDENCE, false)
            }
            Expr::Binary { op, lhs, rhs } => {
                let p = op.precedence();
                let parens = p < parent || (p == parent && right);
                if parens {
                    f.write_str("(")?;
                }
                lhs.fmt_prec(f, p, false)?;
                write!(f, " {} ", op.symbol())?;
                rhs.fmt_prec(f, p, true)?;
                if parens {
                    f.write_str(")")?;
                }
                Ok(())
            }
            Expr::Call { func, args } => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    a.fmt_prec(f, 0, false)?;
                }
                f.write_str(")")
            }
        }
    }
}

fn fmt_number(x: f64, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    if x == f64::INFINITY {
        f.write_str("inf")
    } else if x == f64::NEG_INFINITY {
        f.write_str("-inf")
    } else {
        write!(f, "{x}")
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.fmt_prec(f, 0, false)
    }
}
