//! Expression language used in capability input assignments, gateway
//! conditions and notification templates.
//!
//! ```text
//! expr    := or
//! or      := and ("or" and)*
//! and     := cmp ("and" cmp)*
//! cmp     := add (("==" | "!=" | "<" | "<=" | ">" | ">=") add)*
//! add     := mul (("+" | "-") mul)*
//! mul     := unary (("*" | "/") unary)*
//! unary   := ("-" | "not") unary | primary
//! primary := integer | real | string | "true" | "false" | ident | "(" expr ")"
//! ```
//!
//! Inside a process definition an expression is always wrapped as `${...}`.
//! Any other value string is a constant.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::value::{Value, Variables};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnaryOp {
    Neg,
    Not,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BinaryOp {
    Or,
    And,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinaryOp::Or => "or",
            BinaryOp::And => "and",
            BinaryOp::Eq => "==",
            BinaryOp::Ne => "!=",
            BinaryOp::Lt => "<",
            BinaryOp::Le => "<=",
            BinaryOp::Gt => ">",
            BinaryOp::Ge => ">=",
            BinaryOp::Add => "+",
            BinaryOp::Sub => "-",
            BinaryOp::Mul => "*",
            BinaryOp::Div => "/",
        }
    }

    /// Binding strength; higher binds tighter. Unary operators sit above all.
    pub fn precedence(self) -> u8 {
        match self {
            BinaryOp::Or => 1,
            BinaryOp::And => 2,
            BinaryOp::Eq | BinaryOp::Ne | BinaryOp::Lt | BinaryOp::Le | BinaryOp::Gt | BinaryOp::Ge => 3,
            BinaryOp::Add | BinaryOp::Sub => 4,
            BinaryOp::Mul | BinaryOp::Div => 5,
        }
    }
}

const UNARY_PRECEDENCE: u8 = 6;

/// Serializes as its source text.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Literal(Value),
    Var(String),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
}

impl Expr {
    pub fn var(name: impl Into<String>) -> Expr {
        Expr::Var(name.into())
    }

    pub fn lit(v: impl Into<Value>) -> Expr {
        Expr::Literal(v.into())
    }

    pub fn unary(op: UnaryOp, e: Expr) -> Expr {
        Expr::Unary(op, Box::new(e))
    }

    pub fn binary(op: BinaryOp, l: Expr, r: Expr) -> Expr {
        Expr::Binary(op, Box::new(l), Box::new(r))
    }

    /// Names of all variables referenced by the expression.
    pub fn variables(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }

    fn collect_vars<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Literal(_) => {}
            Expr::Var(n) => out.push(n),
            Expr::Unary(_, e) => e.collect_vars(out),
            Expr::Binary(_, l, r) => {
                l.collect_vars(out);
                r.collect_vars(out);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExprError {
    #[error("parse error at {position}: expected {expected}")]
    Parse { position: usize, expected: String },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("operator {operator} cannot be applied to {operands}")]
    TypeError { operator: String, operands: String },
    #[error("division by zero")]
    DivisionByZero,
    #[error("integer overflow in {0}")]
    Overflow(String),
}

// ---------------------------------------------------------------------------
// Lexer

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Int(i64),
    /// 2^63, only valid directly after a minus sign.
    IntMinMagnitude,
    Real(f64),
    Str(String),
    Ident(String),
    True,
    False,
    And,
    Or,
    Not,
    Op(&'static str),
    LParen,
    RParen,
}

struct Lexed {
    tok: Tok,
    pos: usize,
}

fn parse_err(position: usize, expected: impl Into<String>) -> ExprError {
    ExprError::Parse {
        position,
        expected: expected.into(),
    }
}

fn lex(src: &str) -> Result<Vec<Lexed>, ExprError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                i += 1;
                out.push(Lexed { tok: Tok::LParen, pos: start });
            }
            b')' => {
                i += 1;
                out.push(Lexed { tok: Tok::RParen, pos: start });
            }
            b'+' | b'-' | b'*' | b'/' => {
                i += 1;
                let op = match c {
                    b'+' => "+",
                    b'-' => "-",
                    b'*' => "*",
                    _ => "/",
                };
                out.push(Lexed { tok: Tok::Op(op), pos: start });
            }
            b'=' | b'!' | b'<' | b'>' => {
                let two = bytes.get(i + 1) == Some(&b'=');
                let op = match (c, two) {
                    (b'=', true) => "==",
                    (b'!', true) => "!=",
                    (b'<', true) => "<=",
                    (b'>', true) => ">=",
                    (b'<', false) => "<",
                    (b'>', false) => ">",
                    _ => return Err(parse_err(start, "operator")),
                };
                i += if two { 2 } else { 1 };
                out.push(Lexed { tok: Tok::Op(op), pos: start });
            }
            b'"' => {
                i += 1;
                let mut s = String::new();
                loop {
                    let Some(ch) = src[i..].chars().next() else {
                        return Err(parse_err(src.len(), "closing quote"));
                    };
                    i += ch.len_utf8();
                    match ch {
                        '"' => break,
                        '\\' => {
                            let Some(esc) = src[i..].chars().next() else {
                                return Err(parse_err(src.len(), "escape character"));
                            };
                            i += esc.len_utf8();
                            s.push(match esc {
                                'n' => '\n',
                                't' => '\t',
                                '"' => '"',
                                '\\' => '\\',
                                _ => return Err(parse_err(i - 1, "escape character")),
                            });
                        }
                        other => s.push(other),
                    }
                }
                out.push(Lexed { tok: Tok::Str(s), pos: start });
            }
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                let mut real = false;
                if i + 1 < bytes.len() && bytes[i] == b'.' && bytes[i + 1].is_ascii_digit() {
                    real = true;
                    i += 1;
                    while i < bytes.len() && bytes[i].is_ascii_digit() {
                        i += 1;
                    }
                }
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut j = i + 1;
                    if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                        j += 1;
                    }
                    if j < bytes.len() && bytes[j].is_ascii_digit() {
                        real = true;
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let text = &src[start..i];
                let tok = if real {
                    Tok::Real(text.parse().map_err(|_| parse_err(start, "number"))?)
                } else {
                    // Out-of-range literals may still be valid once negated.
                    match text.parse::<i64>() {
                        Ok(v) => Tok::Int(v),
                        Err(_) if text == "9223372036854775808" => Tok::IntMinMagnitude,
                        Err(_) => return Err(parse_err(start, "integer within 64-bit range")),
                    }
                };
                out.push(Lexed { tok, pos: start });
            }
            c if c == b'_' || c.is_ascii_alphabetic() => {
                while i < bytes.len() && (bytes[i] == b'_' || bytes[i].is_ascii_alphanumeric()) {
                    i += 1;
                }
                let word = &src[start..i];
                let tok = match word {
                    "true" => Tok::True,
                    "false" => Tok::False,
                    "and" => Tok::And,
                    "or" => Tok::Or,
                    "not" => Tok::Not,
                    _ => Tok::Ident(word.to_owned()),
                };
                out.push(Lexed { tok, pos: start });
            }
            _ => return Err(parse_err(start, "expression")),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parser

struct Parser {
    toks: Vec<Lexed>,
    idx: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.idx).map(|l| &l.tok)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.idx).map_or(self.end, |l| l.pos)
    }

    fn binary_op(&self) -> Option<BinaryOp> {
        Some(match self.peek()? {
            Tok::Or => BinaryOp::Or,
            Tok::And => BinaryOp::And,
            Tok::Op("==") => BinaryOp::Eq,
            Tok::Op("!=") => BinaryOp::Ne,
            Tok::Op("<") => BinaryOp::Lt,
            Tok::Op("<=") => BinaryOp::Le,
            Tok::Op(">") => BinaryOp::Gt,
            Tok::Op(">=") => BinaryOp::Ge,
            Tok::Op("+") => BinaryOp::Add,
            Tok::Op("-") => BinaryOp::Sub,
            Tok::Op("*") => BinaryOp::Mul,
            Tok::Op("/") => BinaryOp::Div,
            _ => return None,
        })
    }

    /// Precedence climbing; all binary operators are left associative.
    fn expr(&mut self, min_prec: u8) -> Result<Expr, ExprError> {
        let mut lhs = self.unary()?;
        while let Some(op) = self.binary_op() {
            let prec = op.precedence();
            if prec < min_prec {
                break;
            }
            self.idx += 1;
            let rhs = self.expr(prec + 1)?;
            lhs = Expr::binary(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, ExprError> {
        match self.peek() {
            Some(Tok::Not) => {
                self.idx += 1;
                Ok(Expr::unary(UnaryOp::Not, self.unary()?))
            }
            Some(Tok::Op("-")) => {
                self.idx += 1;
                // A minus directly in front of a number literal is part of the literal.
                match self.peek() {
                    Some(Tok::Int(v)) => {
                        let v = *v;
                        self.idx += 1;
                        Ok(Expr::Literal(Value::Integer(-v)))
                    }
                    Some(Tok::IntMinMagnitude) => {
                        self.idx += 1;
                        Ok(Expr::Literal(Value::Integer(i64::MIN)))
                    }
                    Some(Tok::Real(v)) => {
                        let v = *v;
                        self.idx += 1;
                        Ok(Expr::Literal(Value::Real(-v)))
                    }
                    _ => Ok(Expr::unary(UnaryOp::Neg, self.unary()?)),
                }
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, ExprError> {
        let pos = self.pos();
        let Some(tok) = self.peek().cloned() else {
            return Err(parse_err(pos, "operand"));
        };
        self.idx += 1;
        match tok {
            Tok::Int(v) => Ok(Expr::Literal(Value::Integer(v))),
            Tok::IntMinMagnitude => Err(parse_err(pos, "integer within 64-bit range")),
            Tok::Real(v) => Ok(Expr::Literal(Value::Real(v))),
            Tok::Str(s) => Ok(Expr::Literal(Value::String(s))),
            Tok::True => Ok(Expr::Literal(Value::Boolean(true))),
            Tok::False => Ok(Expr::Literal(Value::Boolean(false))),
            Tok::Ident(n) => Ok(Expr::Var(n)),
            Tok::LParen => {
                let inner = self.expr(0)?;
                if self.peek() != Some(&Tok::RParen) {
                    return Err(parse_err(self.pos(), "')'"));
                }
                self.idx += 1;
                Ok(inner)
            }
            _ => Err(parse_err(pos, "operand")),
        }
    }
}

/// Parses a bare expression (without the `${}` wrapper).
pub fn parse_expr(src: &str) -> Result<Expr, ExprError> {
    let toks = lex(src)?;
    let mut p = Parser {
        toks,
        idx: 0,
        end: src.len(),
    };
    let e = p.expr(0)?;
    if p.idx != p.toks.len() {
        return Err(parse_err(p.pos(), "end of expression"));
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Printer

fn write_expr(e: &Expr, out: &mut String) {
    match e {
        Expr::Literal(Value::String(s)) => {
            out.push('"');
            for ch in s.chars() {
                match ch {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    c => out.push(c),
                }
            }
            out.push('"');
        }
        Expr::Literal(v) => out.push_str(&v.to_literal()),
        Expr::Var(n) => out.push_str(n),
        Expr::Unary(op, inner) => {
            out.push_str(match op {
                UnaryOp::Neg => "-",
                UnaryOp::Not => "not ",
            });
            // Parenthesise anything that is not a plain operand so that a
            // negated literal is never folded into a negative literal.
            let bare = matches!(**inner, Expr::Var(_))
                || matches!(**inner, Expr::Literal(Value::Boolean(_)))
                || (*op == UnaryOp::Not && matches!(**inner, Expr::Unary(UnaryOp::Not, _)));
            if bare {
                write_expr(inner, out);
            } else {
                out.push('(');
                write_expr(inner, out);
                out.push(')');
            }
        }
        Expr::Binary(op, l, r) => {
            let prec = op.precedence();
            write_operand(l, prec, false, out);
            out.push(' ');
            out.push_str(op.symbol());
            out.push(' ');
            write_operand(r, prec, true, out);
        }
    }
}

fn write_operand(e: &Expr, parent: u8, right: bool, out: &mut String) {
    let prec = match e {
        Expr::Binary(op, ..) => op.precedence(),
        Expr::Literal(Value::Integer(i)) if *i < 0 => UNARY_PRECEDENCE,
        Expr::Literal(Value::Real(r)) if r.is_sign_negative() => UNARY_PRECEDENCE,
        _ => UNARY_PRECEDENCE + 1,
    };
    // Left associativity: a right operand of equal precedence needs parens.
    let parens = prec < parent || (right && prec == parent);
    if parens {
        out.push('(');
    }
    write_expr(e, out);
    if parens {
        out.push(')');
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        write_expr(self, &mut s);
        f.write_str(&s)
    }
}

// ---------------------------------------------------------------------------
// Evaluation

fn type_error(op: &str, l: &Value, r: Option<&Value>) -> ExprError {
    let operands = match r {
        Some(r) => format!("{} and {}", l.datatype(), r.datatype()),
        None => l.datatype().to_string(),
    };
    ExprError::TypeError {
        operator: op.to_owned(),
        operands,
    }
}

fn arith(op: BinaryOp, l: Value, r: Value) -> Result<Value, ExprError> {
    let sym = op.symbol();
    match (&l, &r) {
        (Value::Integer(a), Value::Integer(b)) => {
            let (a, b) = (*a, *b);
            let res = match op {
                BinaryOp::Add => a.checked_add(b),
                BinaryOp::Sub => a.checked_sub(b),
                BinaryOp::Mul => a.checked_mul(b),
                BinaryOp::Div => {
                    if b == 0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    a.checked_div(b)
                }
                _ => unreachable!("arith called with {sym}"),
            };
            res.map(Value::Integer)
                .ok_or_else(|| ExprError::Overflow(sym.to_owned()))
        }
        (Value::String(a), Value::String(b)) if op == BinaryOp::Add => {
            Ok(Value::String(format!("{a}{b}")))
        }
        _ => {
            let (Some(a), Some(b)) = (l.as_f64(), r.as_f64()) else {
                return Err(type_error(sym, &l, Some(&r)));
            };
            Ok(Value::Real(match op {
                BinaryOp::Add => a + b,
                BinaryOp::Sub => a - b,
                BinaryOp::Mul => a * b,
                BinaryOp::Div => {
                    if b == 0.0 {
                        return Err(ExprError::DivisionByZero);
                    }
                    a / b
                }
                _ => unreachable!("arith called with {sym}"),
            }))
        }
    }
}

fn compare(op: BinaryOp, l: &Value, r: &Value) -> Result<Value, ExprError> {
    use std::cmp::Ordering;
    let ord: Option<Ordering> = match (l, r) {
        (Value::Integer(a), Value::Integer(b)) => Some(a.cmp(b)),
        (Value::String(a), Value::String(b)) => Some(a.cmp(b)),
        (Value::Boolean(a), Value::Boolean(b)) => {
            if matches!(op, BinaryOp::Eq | BinaryOp::Ne) {
                Some(a.cmp(b))
            } else {
                return Err(type_error(op.symbol(), l, Some(r)));
            }
        }
        _ => match (l.as_f64(), r.as_f64()) {
            (Some(a), Some(b)) => a.partial_cmp(&b),
            _ => return Err(type_error(op.symbol(), l, Some(r))),
        },
    };
    let res = match op {
        BinaryOp::Eq => ord == Some(Ordering::Equal),
        BinaryOp::Ne => ord != Some(Ordering::Equal),
        BinaryOp::Lt => ord == Some(Ordering::Less),
        BinaryOp::Le => matches!(ord, Some(Ordering::Less | Ordering::Equal)),
        BinaryOp::Gt => ord == Some(Ordering::Greater),
        BinaryOp::Ge => matches!(ord, Some(Ordering::Greater | Ordering::Equal)),
        _ => unreachable!(),
    };
    Ok(Value::Boolean(res))
}

/// Strict evaluation: every operand is evaluated, and-/or-operands included.
pub fn evaluate(expr: &Expr, vars: &Variables) -> Result<Value, ExprError> {
    match expr {
        Expr::Literal(v) => Ok(v.clone()),
        Expr::Var(n) => vars
            .get(n)
            .cloned()
            .ok_or_else(|| ExprError::UnknownVariable(n.clone())),
        Expr::Unary(op, inner) => {
            let v = evaluate(inner, vars)?;
            match (op, v) {
                (UnaryOp::Not, Value::Boolean(b)) => Ok(Value::Boolean(!b)),
                (UnaryOp::Neg, Value::Integer(i)) => i
                    .checked_neg()
                    .map(Value::Integer)
                    .ok_or_else(|| ExprError::Overflow("-".into())),
                (UnaryOp::Neg, Value::Real(r)) => Ok(Value::Real(-r)),
                (op, v) => Err(type_error(
                    match op {
                        UnaryOp::Not => "not",
                        UnaryOp::Neg => "-",
                    },
                    &v,
                    None,
                )),
            }
        }
        Expr::Binary(op, l, r) => {
            let l = evaluate(l, vars)?;
            let r = evaluate(r, vars)?;
            match op {
                BinaryOp::And | BinaryOp::Or => match (&l, &r) {
                    (Value::Boolean(a), Value::Boolean(b)) => Ok(Value::Boolean(if *op == BinaryOp::And {
                        *a && *b
                    } else {
                        *a || *b
                    })),
                    _ => Err(type_error(op.symbol(), &l, Some(&r))),
                },
                BinaryOp::Add | BinaryOp::Sub | BinaryOp::Mul | BinaryOp::Div => arith(*op, l, r),
                _ => compare(*op, &l, &r),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Value expressions

/// Value of a capability input: either fixed in the definition or computed at
/// run time from process variables.
/// Serializes as a JSON scalar for constants and as a `"${...}"` string for
/// expressions.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueExpr {
    Constant(Value),
    Expression(Expr),
}

impl ValueExpr {
    /// Text form used inside process definitions and plans.
    pub fn to_text(&self) -> String {
        match self {
            ValueExpr::Constant(v) => v.to_literal(),
            ValueExpr::Expression(e) => format!("${{{e}}}"),
        }
    }

    pub fn evaluate(&self, vars: &Variables) -> Result<Value, ExprError> {
        match self {
            ValueExpr::Constant(v) => Ok(v.clone()),
            ValueExpr::Expression(e) => evaluate(e, vars),
        }
    }

    pub fn as_constant(&self) -> Option<&Value> {
        match self {
            ValueExpr::Constant(v) => Some(v),
            ValueExpr::Expression(_) => None,
        }
    }
}

impl fmt::Display for ValueExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

impl Serialize for Expr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Expr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        parse_expr(&text).map_err(serde::de::Error::custom)
    }
}

impl Serialize for ValueExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ValueExpr::Constant(v) => v.serialize(s),
            ValueExpr::Expression(_) => s.serialize_str(&self.to_text()),
        }
    }
}

impl<'de> Deserialize<'de> for ValueExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::String(text) if text.starts_with("${") => {
                parse_value_expr(&text).map_err(serde::de::Error::custom)
            }
            v => Ok(ValueExpr::Constant(v)),
        }
    }
}

fn infer_constant(text: &str) -> Value {
    let digits = text.strip_prefix('-').unwrap_or(text);
    if !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit()) {
        if let Ok(i) = text.parse::<i64>() {
            return Value::Integer(i);
        }
    }
    if let Some((int, frac)) = digits.split_once('.') {
        let all_digits = |s: &str| !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit());
        if all_digits(int) && all_digits(frac) {
            if let Ok(r) = text.parse::<f64>() {
                return Value::Real(r);
            }
        }
    }
    match text {
        "true" => Value::Boolean(true),
        "false" => Value::Boolean(false),
        _ => Value::String(text.to_owned()),
    }
}

/// Parses a value string: `${...}` is an expression, anything else a constant.
pub fn parse_value_expr(text: &str) -> Result<ValueExpr, ExprError> {
    match text.strip_prefix("${") {
        Some(rest) => {
            let inner = rest.strip_suffix('}').ok_or_else(|| parse_err(text.len(), "'}'"))?;
            let expr = parse_expr(inner).map_err(|e| match e {
                ExprError::Parse { position, expected } => ExprError::Parse {
                    position: position + 2,
                    expected,
                },
                other => other,
            })?;
            Ok(ValueExpr::Expression(expr))
        }
        None => Ok(ValueExpr::Constant(infer_constant(text))),
    }
}

/// Parses a condition written as `${...}`.
pub fn parse_condition(text: &str) -> Result<Expr, ExprError> {
    match parse_value_expr(text.trim())? {
        ValueExpr::Expression(e) => Ok(e),
        ValueExpr::Constant(_) => Err(parse_err(0, "'${'")),
    }
}

/// Template text with `${expr}` placeholders.
#[derive(Debug, Clone, PartialEq)]
pub enum TemplatePart {
    Text(String),
    Expr(Expr),
}

fn placeholder_end(src: &str) -> Option<usize> {
    let mut in_str = false;
    let mut escaped = false;
    for (i, ch) in src.char_indices() {
        match (in_str, ch) {
            (true, _) if escaped => escaped = false,
            (true, '\\') => escaped = true,
            (true, '"') => in_str = false,
            (false, '"') => in_str = true,
            (false, '}') => return Some(i),
            _ => {}
        }
    }
    None
}

pub fn parse_template(src: &str) -> Result<Vec<TemplatePart>, ExprError> {
    let mut parts = Vec::new();
    let mut rest = src;
    let mut offset = 0;
    while let Some(start) = rest.find("${") {
        if start > 0 {
            parts.push(TemplatePart::Text(rest[..start].to_owned()));
        }
        let body = &rest[start + 2..];
        let end = placeholder_end(body).ok_or_else(|| parse_err(src.len(), "'}'"))?;
        let expr = parse_expr(&body[..end]).map_err(|e| match e {
            ExprError::Parse { position, expected } => ExprError::Parse {
                position: offset + start + 2 + position,
                expected,
            },
            other => other,
        })?;
        parts.push(TemplatePart::Expr(expr));
        let consumed = start + 2 + end + 1;
        offset += consumed;
        rest = &rest[consumed..];
    }
    if !rest.is_empty() {
        parts.push(TemplatePart::Text(rest.to_owned()));
    }
    Ok(parts)
}

pub fn render_template(src: &str, vars: &Variables) -> Result<String, ExprError> {
    let mut out = String::new();
    for part in parse_template(src)? {
        match part {
            TemplatePart::Text(t) => out.push_str(&t),
            TemplatePart::Expr(e) => out.push_str(&evaluate(&e, vars)?.to_string()),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(pairs: &[(&str, Value)]) -> Variables {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    fn eval(src: &str) -> Result<Value, ExprError> {
        evaluate(&parse_expr(src)?, &Variables::new())
    }

    #[test]
    fn value_strings() {
        assert_eq!(parse_value_expr("3").unwrap(), ValueExpr::Constant(Value::Integer(3)));
        assert_eq!(parse_value_expr("2.5").unwrap(), ValueExpr::Constant(Value::Real(2.5)));
        assert_eq!(parse_value_expr("true").unwrap(), ValueExpr::Constant(Value::Boolean(true)));
        assert_eq!(parse_value_expr("red").unwrap(), ValueExpr::Constant("red".into()));
        assert_eq!(parse_value_expr("1.").unwrap(), ValueExpr::Constant("1.".into()));
        assert_eq!(
            parse_value_expr("${Activity_6k239cs_NoOfHoles}").unwrap(),
            ValueExpr::Expression(Expr::var("Activity_6k239cs_NoOfHoles"))
        );
        assert_eq!(
            parse_value_expr("${noOfHoles >").unwrap_err(),
            ExprError::Parse {
                position: 13,
                expected: "'}'".into()
            }
        );
        assert_eq!(
            parse_value_expr("${noOfHoles >}").unwrap_err(),
            ExprError::Parse {
                position: 13,
                expected: "operand".into()
            }
        );
    }

    #[test]
    fn evaluation_examples() {
        assert_eq!(eval("2+3"), Ok(Value::Integer(5)));
        let v = vars(&[("NoOfHoles", Value::Integer(3))]);
        assert_eq!(
            evaluate(&parse_expr("NoOfHoles <= 4").unwrap(), &v),
            Ok(Value::Boolean(true))
        );
        assert_eq!(eval("x"), Err(ExprError::UnknownVariable("x".into())));
        assert_eq!(eval("1 / 0"), Err(ExprError::DivisionByZero));
        assert_eq!(eval("1.0 / 0"), Err(ExprError::DivisionByZero));
        assert_eq!(eval("7 / 2"), Ok(Value::Integer(3)));
        assert_eq!(eval("-7 / 2"), Ok(Value::Integer(-3)));
        assert_eq!(eval("1 + 0.5"), Ok(Value::Real(1.5)));
        assert_eq!(eval("3 / 10.0"), Ok(Value::Real(0.3)));
        assert_eq!(eval("\"a\" + \"b\""), Ok(Value::String("ab".into())));
        assert_eq!(eval("1 == 1.0"), Ok(Value::Boolean(true)));
        assert!(matches!(eval("1 + true"), Err(ExprError::TypeError { .. })));
        assert!(matches!(eval("1 and true"), Err(ExprError::TypeError { .. })));
        assert!(matches!(eval("\"a\" < 1"), Err(ExprError::TypeError { .. })));
        assert_eq!(eval("9223372036854775807 + 1"), Err(ExprError::Overflow("+".into())));
        assert_eq!(eval("-9223372036854775808"), Ok(Value::Integer(i64::MIN)));
    }

    #[test]
    fn strictness() {
        // Both sides of a connective are evaluated.
        assert_eq!(eval("false and x"), Err(ExprError::UnknownVariable("x".into())));
        assert_eq!(eval("true or 1 / 0 == 1"), Err(ExprError::DivisionByZero));
    }

    // Pairwise precedence vectors: each row lists a source and its fully
    // parenthesised reading.
    #[test]
    fn precedence_pairs() {
        let rows = [
            ("a or b and c", "a or (b and c)"),
            ("a and b or c", "(a and b) or c"),
            ("a and b == c", "a and (b == c)"),
            ("a == b and c", "(a == b) and c"),
            ("a == b + c", "a == (b + c)"),
            ("a + b == c", "(a + b) == c"),
            ("a + b * c", "a + (b * c)"),
            ("a * b + c", "(a * b) + c"),
            ("-a * b", "(-a) * b"),
            ("not a and b", "(not a) and b"),
            ("a - b - c", "(a - b) - c"),
            ("a / b / c", "(a / b) / c"),
            ("a < b == c", "(a < b) == c"),
            ("a or b or c", "(a or b) or c"),
        ];
        for (src, parenthesised) in rows {
            assert_eq!(parse_expr(src).unwrap(), parse_expr(parenthesised).unwrap(), "{src}");
        }
    }

    #[test]
    fn printer_round_trips() {
        for src in [
            "a - (b - c)",
            "-(3)",
            "-(-3)",
            "- -3",
            "not not a",
            "\"q\\\"uote\" + \"x\"",
            "(a or b) and c",
            "1.5e-7 * x",
            "-a * -(b + 1)",
        ] {
            let e = parse_expr(src).unwrap();
            let printed = e.to_string();
            assert_eq!(parse_expr(&printed).unwrap(), e, "{src} -> {printed}");
        }
    }

    #[test]
    fn templates() {
        let v = vars(&[("holes", Value::Integer(3)), ("task", "Drill".into())]);
        assert_eq!(
            render_template("Task ${task} failed with ${holes + 1} holes", &v).unwrap(),
            "Task Drill failed with 4 holes"
        );
        assert_eq!(render_template("plain", &v).unwrap(), "plain");
        assert_eq!(render_template("${\"}\"}", &v).unwrap(), "}");
        assert!(render_template("${missing}", &v).is_err());
        assert!(render_template("${open", &v).is_err());
    }
}
