//! Math expressions for answer checking.
//!
//! A small LaTeX subset is parsed into [`Expr`], reduced to a deterministic
//! normal form by [`canonicalize`], and compared by [`expr_equivalent`]:
//! structural equality of normal forms first, seeded numeric probing second.
//!
//! Supported input covers integer and decimal literals, `\pi` and `e`,
//! single-letter and Greek variables (with subscripts and `\vec{}`-style
//! decorations), `+ - \cdot \times \div / ^`, `\frac`, `\sqrt`, `|x|`, and
//! `\sin \cos \tan \log \ln \exp`. Trailing unit suffixes such as
//! `\,\mathrm{m/s}` or `\text{N}` are dropped before parsing.

mod canon;
mod parse;
mod probe;

use std::cmp::Ordering;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, Zero};

pub use canon::canonicalize;
pub use parse::{parse_expression, strip_unit_suffix};
pub use probe::{evaluate, expr_equivalent, EquivalenceVerdict, ProbeConfig, Verdict, VerdictMethod};

/// Errors raised while reading an expression.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExprError {
    #[error("parse error at byte {offset}: expected one of [{}], found {found}", expected.join(", "))]
    Parse {
        offset: usize,
        expected: Vec<String>,
        found: String,
    },
    #[error("unsupported command \\{command} at byte {offset}")]
    UnsupportedCommand { offset: usize, command: String },
    #[error("empty expression")]
    Empty,
}

/// Exact decimal literal: `mantissa * 10^(-scale)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Decimal {
    pub mantissa: BigInt,
    pub scale: u32,
}

impl Decimal {
    pub fn to_rational(&self) -> BigRational {
        BigRational::new(self.mantissa.clone(), num_traits::pow(BigInt::from(10), self.scale as usize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Constant {
    Pi,
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Log,
    Ln,
    Exp,
    Sqrt,
    Abs,
}

impl Func {
    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Log => "log",
            Func::Ln => "ln",
            Func::Exp => "exp",
            Func::Sqrt => "sqrt",
            Func::Abs => "abs",
        }
    }

    /// Functions whose argument must be positive for a real result.
    pub(crate) fn needs_positive_arg(self) -> bool {
        matches!(self, Func::Log | Func::Ln | Func::Sqrt)
    }
}

/// Expression tree. Parenthesized groups collapse at parse time.
///
/// `Rational` never comes out of the parser; [`canonicalize`] uses it for
/// folded non-integer constants.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Expr {
    Int(BigInt),
    Decimal(Decimal),
    Rational(BigRational),
    Const(Constant),
    Var(String),
    Neg(Box<Expr>),
    Binary(BinOp, Box<Expr>, Box<Expr>),
    Func(Func, Box<Expr>),
}

impl Expr {
    pub fn int(v: i64) -> Expr {
        Expr::Int(BigInt::from(v))
    }

    pub fn var(name: &str) -> Expr {
        Expr::Var(name.to_string())
    }

    pub fn neg(e: Expr) -> Expr {
        Expr::Neg(Box::new(e))
    }

    pub fn binary(op: BinOp, a: Expr, b: Expr) -> Expr {
        Expr::Binary(op, Box::new(a), Box::new(b))
    }

    pub fn add(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Add, a, b)
    }

    pub fn sub(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Sub, a, b)
    }

    pub fn mul(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Mul, a, b)
    }

    pub fn div(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Div, a, b)
    }

    pub fn pow(a: Expr, b: Expr) -> Expr {
        Expr::binary(BinOp::Pow, a, b)
    }

    pub fn func(f: Func, a: Expr) -> Expr {
        Expr::Func(f, Box::new(a))
    }

    pub fn rational(r: BigRational) -> Expr {
        if r.is_integer() {
            Expr::Int(r.to_integer())
        } else {
            Expr::Rational(r)
        }
    }

    /// Exact value for literal nodes.
    pub fn as_rational(&self) -> Option<BigRational> {
        match self {
            Expr::Int(i) => Some(BigRational::from_integer(i.clone())),
            Expr::Decimal(d) => Some(d.to_rational()),
            Expr::Rational(r) => Some(r.clone()),
            _ => None,
        }
    }

    /// Free variable names, sorted and deduplicated.
    pub fn variables(&self) -> std::collections::BTreeSet<String> {
        let mut out = std::collections::BTreeSet::new();
        self.walk(&mut |e| {
            if let Expr::Var(v) = e {
                out.insert(v.clone());
            }
        });
        out
    }

    /// True when the tree contains a constant, function or non-integer power
    /// that keeps it from reducing to an exact rational.
    pub fn is_transcendental(&self) -> bool {
        let mut found = false;
        self.walk(&mut |e| match e {
            Expr::Const(_) | Expr::Func(..) => found = true,
            Expr::Binary(BinOp::Pow, _, exp) => {
                if !matches!(exp.as_rational(), Some(r) if r.is_integer()) {
                    found = true;
                }
            }
            _ => {}
        });
        found
    }

    pub(crate) fn walk(&self, f: &mut impl FnMut(&Expr)) {
        f(self);
        match self {
            Expr::Neg(a) | Expr::Func(_, a) => a.walk(f),
            Expr::Binary(_, a, b) => {
                a.walk(f);
                b.walk(f);
            }
            _ => {}
        }
    }

    fn kind_rank(&self) -> u8 {
        match self {
            Expr::Int(_) | Expr::Decimal(_) | Expr::Rational(_) => 0,
            Expr::Const(_) => 1,
            Expr::Var(_) => 2,
            Expr::Func(..) => 3,
            Expr::Binary(BinOp::Pow, ..) => 4,
            Expr::Binary(BinOp::Mul, ..) => 5,
            Expr::Binary(BinOp::Add, ..) => 6,
            Expr::Neg(_) => 7,
            Expr::Binary(BinOp::Sub, ..) => 8,
            Expr::Binary(BinOp::Div, ..) => 9,
        }
    }

    /// Total order used to sort the operands of sums and products:
    /// node-kind rank, then children left to right, then literal content.
    pub fn canonical_cmp(&self, other: &Expr) -> Ordering {
        let rank = self.kind_rank().cmp(&other.kind_rank());
        if rank != Ordering::Equal {
            return rank;
        }
        match (self, other) {
            (Expr::Binary(_, a1, b1), Expr::Binary(_, a2, b2)) => {
                a1.canonical_cmp(a2).then_with(|| b1.canonical_cmp(b2))
            }
            (Expr::Neg(a), Expr::Neg(b)) => a.canonical_cmp(b),
            (Expr::Func(f1, a1), Expr::Func(f2, a2)) => {
                a1.canonical_cmp(a2).then_with(|| f1.cmp(f2))
            }
            (Expr::Var(a), Expr::Var(b)) => a.cmp(b),
            (Expr::Const(a), Expr::Const(b)) => a.cmp(b),
            _ => {
                let (a, b) = (self.as_rational(), other.as_rational());
                match (a, b) {
                    (Some(a), Some(b)) => a.cmp(&b).then_with(|| literal_tag(self).cmp(&literal_tag(other))),
                    _ => Ordering::Equal,
                }
            }
        }
    }
}

fn literal_tag(e: &Expr) -> u8 {
    match e {
        Expr::Int(_) => 0,
        Expr::Rational(_) => 1,
        _ => 2,
    }
}

fn write_int(f: &mut fmt::Formatter<'_>, i: &BigInt) -> fmt::Result {
    if i.is_negative() {
        write!(f, "(-{})", i.abs())
    } else {
        write!(f, "{i}")
    }
}

/// Prints in the accepted grammar with explicit grouping, so that parsing the
/// output of a parsed tree gives back the same tree.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Int(i) => write_int(f, i),
            Expr::Decimal(d) => {
                let digits = d.mantissa.abs().to_string();
                let scale = d.scale as usize;
                let body = if scale == 0 {
                    digits
                } else {
                    let padded = format!("{:0>width$}", digits, width = scale + 1);
                    let (int_part, frac) = padded.split_at(padded.len() - scale);
                    format!("{int_part}.{frac}")
                };
                if d.mantissa.is_negative() {
                    write!(f, "(-{body})")
                } else {
                    write!(f, "{body}")
                }
            }
            Expr::Rational(r) => {
                f.write_str("\\frac{")?;
                write_int(f, r.numer())?;
                f.write_str("}{")?;
                write_int(f, r.denom())?;
                f.write_str("}")
            }
            Expr::Const(Constant::Pi) => f.write_str("\\pi"),
            Expr::Const(Constant::E) => f.write_str("e"),
            Expr::Var(v) => f.write_str(v),
            Expr::Neg(a) => write!(f, "-({a})"),
            Expr::Binary(op, a, b) => match op {
                BinOp::Add => write!(f, "({a})+({b})"),
                BinOp::Sub => write!(f, "({a})-({b})"),
                BinOp::Mul => write!(f, "({a})\\cdot({b})"),
                BinOp::Div => write!(f, "\\frac{{{a}}}{{{b}}}"),
                BinOp::Pow => write!(f, "{{{a}}}^{{{b}}}"),
            },
            Expr::Func(Func::Sqrt, a) => write!(f, "\\sqrt{{{a}}}"),
            Expr::Func(Func::Abs, a) => write!(f, "\\left|{a}\\right|"),
            Expr::Func(func, a) => write!(f, "\\{}({a})", func.name()),
        }
    }
}

pub(crate) fn rational_is_zero(r: &BigRational) -> bool {
    r.is_zero()
}

pub(crate) fn rational_is_one(r: &BigRational) -> bool {
    r.is_one()
}
