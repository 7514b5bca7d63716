use std::collections::{BTreeMap, BTreeSet};

use num_traits::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{canonicalize, BinOp, Constant, Expr, Func};

/// Numeric probing settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// Number of random assignments to try.
    pub probes: usize,
    /// Minimum number of finite evaluations needed for a positive verdict.
    pub min_valid: usize,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { probes: 32, min_valid: 8, rel_tol: 1e-6, abs_tol: 1e-9, seed: 0x5eed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Equivalent,
    NotEquivalent,
    Indeterminate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictMethod {
    /// Both sides reduce to exact rationals.
    ExactRational,
    /// Identical normal forms that still contain variables or transcendental nodes.
    Structural,
    NumericProbe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EquivalenceVerdict {
    pub verdict: Verdict,
    pub method: VerdictMethod,
    pub probe_count: usize,
}

/// Evaluates `e` with the given variable assignment. Returns `None` for
/// unbound variables and non-finite results.
pub fn evaluate(e: &Expr, vars: &BTreeMap<String, f64>) -> Option<f64> {
    let v = eval(e, vars)?;
    v.is_finite().then_some(v)
}

fn eval(e: &Expr, vars: &BTreeMap<String, f64>) -> Option<f64> {
    Some(match e {
        Expr::Int(_) | Expr::Decimal(_) | Expr::Rational(_) => e.as_rational()?.to_f64()?,
        Expr::Const(Constant::Pi) => std::f64::consts::PI,
        Expr::Const(Constant::E) => std::f64::consts::E,
        Expr::Var(name) => *vars.get(name)?,
        Expr::Neg(a) => -eval(a, vars)?,
        Expr::Binary(op, a, b) => {
            let (x, y) = (eval(a, vars)?, eval(b, vars)?);
            match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
                BinOp::Pow => x.powf(y),
            }
        }
        Expr::Func(f, a) => {
            let x = eval(a, vars)?;
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Tan => x.tan(),
                Func::Log | Func::Ln => x.ln(),
                Func::Exp => x.exp(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
            }
        }
    })
}

/// Variables that appear under a log, a square root or a fractional power;
/// these are sampled from the positive interval only.
fn positive_domain_vars(e: &Expr, out: &mut BTreeSet<String>) {
    e.walk(&mut |node| match node {
        Expr::Func(f, arg) if f.needs_positive_arg() => out.extend(arg.variables()),
        Expr::Binary(BinOp::Pow, base, exp) => {
            if !matches!(exp.as_rational(), Some(r) if r.is_integer()) {
                out.extend(base.variables());
            }
        }
        _ => {}
    });
}

fn within_tolerance(a: f64, b: f64, cfg: &ProbeConfig) -> bool {
    (a - b).abs() <= cfg.abs_tol + cfg.rel_tol * a.abs().max(b.abs())
}

/// Decides whether two expressions denote the same value.
///
/// Identical normal forms are equivalent outright. Two distinct exact
/// rationals are not. Otherwise each free variable is drawn uniformly from
/// `[-2, -0.1] ∪ [0.1, 2]` (positive half only under logs and roots), both
/// sides are evaluated, and non-finite probes are skipped.
pub fn expr_equivalent(a: &Expr, b: &Expr, cfg: &ProbeConfig) -> EquivalenceVerdict {
    let (ca, cb) = (canonicalize(a), canonicalize(b));
    let exact = |e: &Expr| e.variables().is_empty() && !e.is_transcendental();
    if ca == cb {
        let method = if exact(&ca) { VerdictMethod::ExactRational } else { VerdictMethod::Structural };
        return EquivalenceVerdict { verdict: Verdict::Equivalent, method, probe_count: 0 };
    }
    if ca.as_rational().is_some() && cb.as_rational().is_some() {
        return EquivalenceVerdict {
            verdict: Verdict::NotEquivalent,
            method: VerdictMethod::ExactRational,
            probe_count: 0,
        };
    }

    let mut names = a.variables();
    names.extend(b.variables());
    let mut positive = BTreeSet::new();
    positive_domain_vars(a, &mut positive);
    positive_domain_vars(b, &mut positive);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut assignment = BTreeMap::new();
    let mut valid = 0;
    for _ in 0..cfg.probes {
        for name in &names {
            let magnitude = 0.1 + 1.9 * rng.random::<f64>();
            let negative = rng.random::<bool>();
            let value = if negative && !positive.contains(name) { -magnitude } else { magnitude };
            assignment.insert(name.clone(), value);
        }
        let (Some(va), Some(vb)) = (evaluate(a, &assignment), evaluate(b, &assignment)) else {
            continue;
        };
        valid += 1;
        if !within_tolerance(va, vb, cfg) {
            return EquivalenceVerdict {
                verdict: Verdict::NotEquivalent,
                method: VerdictMethod::NumericProbe,
                probe_count: valid,
            };
        }
    }
    let verdict = if valid >= cfg.min_valid { Verdict::Equivalent } else { Verdict::Indeterminate };
    EquivalenceVerdict { verdict, method: VerdictMethod::NumericProbe, probe_count: valid }
}
