//! Reference evaluator over 128-bit integers and booleans.
//!
//! Every intermediate integer is computed exactly in `i128`; a result outside
//! the `i64` range is reported as overflow, which is what a checked 64-bit
//! evaluator must do.

use std::collections::{BTreeMap, BTreeSet};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use skillflow_core::model::{evaluate, parse_expr, BinaryOp, Expr, ExprError, UnaryOp};
use skillflow_core::{Value, Variables};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefValue {
    Int(i128),
    Bool(bool),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefError {
    UnknownVariable,
    Type,
    DivisionByZero,
    Overflow,
}

pub type Env = BTreeMap<&'static str, RefValue>;

fn in_range(v: i128) -> Result<RefValue, RefError> {
    if v < i64::MIN as i128 || v > i64::MAX as i128 {
        Err(RefError::Overflow)
    } else {
        Ok(RefValue::Int(v))
    }
}

/// Left operand first, both operands always evaluated.
pub fn reference_eval(e: &Expr, env: &Env) -> Result<RefValue, RefError> {
    use RefValue::*;
    match e {
        Expr::Literal(Value::Integer(i)) => Ok(Int(*i as i128)),
        Expr::Literal(Value::Boolean(b)) => Ok(Bool(*b)),
        Expr::Literal(_) => Err(RefError::Type),
        Expr::Var(n) => env.get(n.as_str()).copied().ok_or(RefError::UnknownVariable),
        Expr::Unary(op, x) => match (op, reference_eval(x, env)?) {
            (UnaryOp::Neg, Int(a)) => in_range(-a),
            (UnaryOp::Not, Bool(b)) => Ok(Bool(!b)),
            _ => Err(RefError::Type),
        },
        Expr::Binary(op, l, r) => {
            let a = reference_eval(l, env)?;
            let b = reference_eval(r, env)?;
            match (op, a, b) {
                (BinaryOp::Add, Int(a), Int(b)) => in_range(a + b),
                (BinaryOp::Sub, Int(a), Int(b)) => in_range(a - b),
                (BinaryOp::Mul, Int(a), Int(b)) => in_range(a * b),
                (BinaryOp::Div, Int(_), Int(0)) => Err(RefError::DivisionByZero),
                // i128 division truncates toward zero like i64 division.
                (BinaryOp::Div, Int(a), Int(b)) => in_range(a / b),
                (BinaryOp::Lt, Int(a), Int(b)) => Ok(Bool(a < b)),
                (BinaryOp::Le, Int(a), Int(b)) => Ok(Bool(a <= b)),
                (BinaryOp::Gt, Int(a), Int(b)) => Ok(Bool(a > b)),
                (BinaryOp::Ge, Int(a), Int(b)) => Ok(Bool(a >= b)),
                (BinaryOp::Eq, Int(a), Int(b)) => Ok(Bool(a == b)),
                (BinaryOp::Ne, Int(a), Int(b)) => Ok(Bool(a != b)),
                (BinaryOp::Eq, Bool(a), Bool(b)) => Ok(Bool(a == b)),
                (BinaryOp::Ne, Bool(a), Bool(b)) => Ok(Bool(a != b)),
                (BinaryOp::And, Bool(a), Bool(b)) => Ok(Bool(a && b)),
                (BinaryOp::Or, Bool(a), Bool(b)) => Ok(Bool(a || b)),
                _ => Err(RefError::Type),
            }
        }
    }
}

const BINARY: [BinaryOp; 12] = [
    BinaryOp::Or,
    BinaryOp::And,
    BinaryOp::Eq,
    BinaryOp::Ne,
    BinaryOp::Lt,
    BinaryOp::Le,
    BinaryOp::Gt,
    BinaryOp::Ge,
    BinaryOp::Add,
    BinaryOp::Sub,
    BinaryOp::Mul,
    BinaryOp::Div,
];

/// Variables visible to generated expressions, plus `u`, which is never bound.
pub fn default_env() -> Env {
    Env::from([
        ("x", RefValue::Int(3)),
        ("y", RefValue::Int(-4)),
        ("z", RefValue::Int(0)),
        ("p", RefValue::Bool(true)),
        ("q", RefValue::Bool(false)),
    ])
}

/// Random tree of depth at most `depth` (a leaf has depth 1), integer
/// literals drawn from [-5, 5]. Arithmetic is favoured so that deep integer
/// results are common.
pub fn random_expr(rng: &mut impl Rng, depth: u32) -> Expr {
    if depth <= 1 || rng.gen_bool(0.2) {
        return match rng.gen_range(0..10) {
            0..=5 => Expr::Literal(Value::Integer(rng.gen_range(-5..=5))),
            6 => Expr::Literal(Value::Boolean(rng.gen())),
            7 | 8 => Expr::Var(["x", "y", "z", "p", "q"][rng.gen_range(0..5)].to_owned()),
            _ => Expr::Var(if rng.gen_bool(0.2) { "u" } else { "x" }.to_owned()),
        };
    }
    match rng.gen_range(0..10) {
        0 => Expr::Unary(UnaryOp::Neg, Box::new(random_expr(rng, depth - 1))),
        1 => Expr::Unary(UnaryOp::Not, Box::new(random_expr(rng, depth - 1))),
        k => {
            let op = if k < 6 {
                [BinaryOp::Add, BinaryOp::Sub, BinaryOp::Mul, BinaryOp::Div][rng.gen_range(0..4)]
            } else {
                BINARY[rng.gen_range(0..BINARY.len())]
            };
            Expr::Binary(
                op,
                Box::new(random_expr(rng, depth - 1)),
                Box::new(random_expr(rng, depth - 1)),
            )
        }
    }
}

pub fn depth(e: &Expr) -> u32 {
    match e {
        Expr::Literal(_) | Expr::Var(_) => 1,
        Expr::Unary(_, x) => 1 + depth(x),
        Expr::Binary(_, l, r) => 1 + depth(l).max(depth(r)),
    }
}

fn to_variables(env: &Env) -> Variables {
    env.iter()
        .map(|(k, v)| {
            let v = match v {
                RefValue::Int(i) => Value::Integer(i64::try_from(*i).expect("env fits i64")),
                RefValue::Bool(b) => Value::Boolean(*b),
            };
            ((*k).to_owned(), v)
        })
        .collect()
}

fn classify(r: Result<Value, ExprError>) -> Result<RefValue, Result<RefError, String>> {
    match r {
        Ok(Value::Integer(i)) => Ok(RefValue::Int(i as i128)),
        Ok(Value::Boolean(b)) => Ok(RefValue::Bool(b)),
        Ok(other) => Err(Err(format!("unexpected value {other:?}"))),
        Err(ExprError::UnknownVariable(_)) => Err(Ok(RefError::UnknownVariable)),
        Err(ExprError::TypeError { .. }) => Err(Ok(RefError::Type)),
        Err(ExprError::DivisionByZero) => Err(Ok(RefError::DivisionByZero)),
        Err(ExprError::Overflow(_)) => Err(Ok(RefError::Overflow)),
        Err(e @ ExprError::Parse { .. }) => Err(Err(e.to_string())),
    }
}

#[derive(Debug, Default)]
pub struct ExprReport {
    pub cases: usize,
    pub distinct: usize,
    /// Cases whose reference result was a value rather than an error.
    pub valued: usize,
    pub max_depth: u32,
    pub mismatches: Vec<String>,
}

/// Compares the evaluator with the reference on `cases` random trees, both
/// directly and after printing and re-parsing each tree.
pub fn run_expression_oracle(seed: u64, cases: usize, max_depth: u32) -> ExprReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let env = default_env();
    let vars = to_variables(&env);
    let mut report = ExprReport::default();
    let mut seen = BTreeSet::new();
    for _ in 0..cases {
        let e = random_expr(&mut rng, max_depth);
        report.cases += 1;
        report.max_depth = report.max_depth.max(depth(&e));
        let text = e.to_string();
        seen.insert(text.clone());
        let expected = reference_eval(&e, &env).map_err(Ok);
        if expected.is_ok() {
            report.valued += 1;
        }
        let direct = classify(evaluate(&e, &vars));
        if direct != expected {
            report
                .mismatches
                .push(format!("{text}: evaluator {direct:?}, reference {expected:?}"));
            continue;
        }
        match parse_expr(&text) {
            Ok(reparsed) => {
                let again = classify(evaluate(&reparsed, &vars));
                if again != expected {
                    report
                        .mismatches
                        .push(format!("{text}: reparsed {again:?}, reference {expected:?}"));
                }
            }
            Err(err) => report.mismatches.push(format!("{text}: does not reparse: {err}")),
        }
    }
    report.distinct = seen.len();
    report
}
