use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::{rational_is_one, rational_is_zero, BinOp, Constant, Expr, Func};

/// Largest bit count an exact power may produce before it is left symbolic.
const MAX_POW_BITS: u64 = 4096;

/// Deterministic normal form.
///
/// Constants fold over exact rationals, sums and products are flattened with
/// like terms / like bases merged and operands sorted by
/// [`Expr::canonical_cmp`], `a - b` becomes `a + (-1)b`, `a / b` becomes
/// `a b^(-1)`, and negation becomes multiplication by `-1`. The result is
/// rebuilt as left-nested binary nodes.
pub fn canonicalize(e: &Expr) -> Expr {
    match e {
        Expr::Int(_) | Expr::Decimal(_) | Expr::Rational(_) => Expr::rational(e.as_rational().unwrap()),
        Expr::Const(_) | Expr::Var(_) => e.clone(),
        Expr::Neg(a) => mul_all(vec![Expr::int(-1), canonicalize(a)]),
        Expr::Binary(op, a, b) => {
            let (a, b) = (canonicalize(a), canonicalize(b));
            match op {
                BinOp::Add => add_all(vec![a, b]),
                BinOp::Sub => add_all(vec![a, mul_all(vec![Expr::int(-1), b])]),
                BinOp::Mul => mul_all(vec![a, b]),
                BinOp::Div => mul_all(vec![a, pow(b, Expr::int(-1))]),
                BinOp::Pow => pow(a, b),
            }
        }
        Expr::Func(f, a) => func(*f, canonicalize(a)),
    }
}

fn flatten(op: BinOp, e: Expr, out: &mut Vec<Expr>) {
    match e {
        Expr::Binary(o, a, b) if o == op => {
            flatten(op, *a, out);
            flatten(op, *b, out);
        }
        other => out.push(other),
    }
}

fn chain(op: BinOp, mut items: Vec<Expr>) -> Expr {
    items.sort_by(|a, b| a.canonical_cmp(b));
    let mut iter = items.into_iter();
    let first = iter.next().expect("chain of at least one operand");
    iter.fold(first, |acc, x| Expr::binary(op, acc, x))
}

/// Splits a canonical term into its numeric coefficient and remaining factors.
fn split_coefficient(term: Expr) -> (BigRational, Vec<Expr>) {
    if let Some(r) = term.as_rational() {
        return (r, Vec::new());
    }
    let mut factors = Vec::new();
    flatten(BinOp::Mul, term, &mut factors);
    let mut coef = BigRational::one();
    let mut rest = Vec::with_capacity(factors.len());
    for f in factors {
        match f.as_rational() {
            Some(r) => coef *= r,
            None => rest.push(f),
        }
    }
    (coef, rest)
}

fn add_all(items: Vec<Expr>) -> Expr {
    let mut terms = Vec::new();
    for item in items {
        flatten(BinOp::Add, item, &mut terms);
    }
    let mut groups: Vec<(Vec<Expr>, BigRational)> = Vec::new();
    for term in terms {
        let (coef, rest) = split_coefficient(term);
        match groups.iter_mut().find(|(r, _)| *r == rest) {
            Some((_, c)) => *c += coef,
            None => groups.push((rest, coef)),
        }
    }
    let rebuilt: Vec<Expr> = groups
        .into_iter()
        .filter(|(_, c)| !rational_is_zero(c))
        .map(|(rest, coef)| {
            if rest.is_empty() {
                Expr::rational(coef)
            } else if rational_is_one(&coef) {
                chain(BinOp::Mul, rest)
            } else {
                let mut factors = rest;
                factors.push(Expr::rational(coef));
                chain(BinOp::Mul, factors)
            }
        })
        .collect();
    if rebuilt.is_empty() {
        Expr::int(0)
    } else {
        chain(BinOp::Add, rebuilt)
    }
}

fn mul_all(items: Vec<Expr>) -> Expr {
    let mut factors = Vec::new();
    for item in items {
        flatten(BinOp::Mul, item, &mut factors);
    }
    let mut coef = BigRational::one();
    let mut bases: Vec<(Expr, BigRational)> = Vec::new();
    for f in factors {
        if let Some(r) = f.as_rational() {
            coef *= r;
            continue;
        }
        let (base, exp) = match f {
            Expr::Binary(BinOp::Pow, b, e) if e.as_rational().is_some() => (*b, e.as_rational().unwrap()),
            other => (other, BigRational::one()),
        };
        match bases.iter_mut().find(|(b, _)| *b == base) {
            Some((_, e)) => *e += exp,
            None => bases.push((base, exp)),
        }
    }
    if coef.is_zero() {
        return Expr::int(0);
    }
    let mut rest = Vec::new();
    for (base, exp) in bases {
        match pow(base, Expr::rational(exp)) {
            folded if folded.as_rational().is_some() => coef *= folded.as_rational().unwrap(),
            // a merged power may itself be a product, e.g. (xy)^2
            Expr::Binary(BinOp::Mul, a, b) => {
                let mut inner = Vec::new();
                flatten(BinOp::Mul, Expr::Binary(BinOp::Mul, a, b), &mut inner);
                for f in inner {
                    match f.as_rational() {
                        Some(r) => coef *= r,
                        None => rest.push(f),
                    }
                }
            }
            other => rest.push(other),
        }
    }
    if coef.is_zero() {
        return Expr::int(0);
    }
    if rest.is_empty() {
        return Expr::rational(coef);
    }
    if !rational_is_one(&coef) {
        rest.push(Expr::rational(coef));
    }
    if rest.len() == 1 {
        return rest.pop().unwrap();
    }
    chain(BinOp::Mul, rest)
}

fn pow(base: Expr, exp: Expr) -> Expr {
    let Some(r) = exp.as_rational() else {
        return Expr::pow(base, exp);
    };
    if r.is_zero() {
        return Expr::int(1);
    }
    if r.is_one() {
        return base;
    }
    if let Some(b) = base.as_rational() {
        if let Some(v) = rational_pow(&b, &r) {
            return Expr::rational(v);
        }
        return Expr::pow(Expr::rational(b), Expr::rational(r));
    }
    if r.is_integer() {
        match base {
            Expr::Binary(BinOp::Pow, inner, e) if e.as_rational().is_some() => {
                let combined = e.as_rational().unwrap() * &r;
                return pow(*inner, Expr::rational(combined));
            }
            Expr::Binary(BinOp::Mul, a, b) => {
                let mut factors = Vec::new();
                flatten(BinOp::Mul, Expr::Binary(BinOp::Mul, a, b), &mut factors);
                let raised = factors.into_iter().map(|f| pow(f, Expr::rational(r.clone()))).collect();
                return mul_all(raised);
            }
            _ => {}
        }
    }
    Expr::pow(base, Expr::rational(r))
}

/// Exact `b^r` when it is rational and not too large.
fn rational_pow(b: &BigRational, r: &BigRational) -> Option<BigRational> {
    let n = r.numer().to_i64()?;
    let d = r.denom().to_u32()?;
    if b.is_zero() {
        return if n > 0 { Some(BigRational::zero()) } else { None };
    }
    let bits = b.numer().bits().max(b.denom().bits());
    if bits.saturating_mul(n.unsigned_abs()) > MAX_POW_BITS || d > 64 {
        return None;
    }
    let root = if d == 1 {
        b.clone()
    } else {
        if b.is_negative() {
            return None;
        }
        let num = exact_root(b.numer(), d)?;
        let den = exact_root(b.denom(), d)?;
        BigRational::new(num, den)
    };
    let powered = num_traits::pow(root, n.unsigned_abs() as usize);
    Some(if n < 0 { powered.recip() } else { powered })
}

fn exact_root(v: &BigInt, d: u32) -> Option<BigInt> {
    let root = v.nth_root(d);
    (num_traits::pow(root.clone(), d as usize) == *v).then_some(root)
}

fn func(f: Func, arg: Expr) -> Expr {
    if let Some(r) = arg.as_rational() {
        let folded = match f {
            Func::Abs => Some(r.abs()),
            Func::Sqrt => rational_pow(&r, &BigRational::new(1.into(), 2.into())),
            Func::Exp | Func::Cos if r.is_zero() => Some(BigRational::one()),
            Func::Sin | Func::Tan if r.is_zero() => Some(BigRational::zero()),
            Func::Ln | Func::Log if r.is_one() => Some(BigRational::zero()),
            _ => None,
        };
        if let Some(v) = folded {
            return Expr::rational(v);
        }
    }
    if matches!(f, Func::Ln) && arg == Expr::Const(Constant::E) {
        return Expr::int(1);
    }
    Expr::func(f, arg)
}
