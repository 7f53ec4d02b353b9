//! Arithmetic expressions for config-supplied coefficient functions.
//!
//! Grammar:
//! ```text
//! expr   := term (('+'|'-') term)*
//! term   := factor (('*'|'/') factor)*
//! factor := number | ident | ident '(' expr (',' expr)* ')' | '(' expr ')' | '-' factor
//! ```
//! Built-in functions: `sin`, `cos`, `tanh`, `exp`, `min`, `max`, `abs`.
//! Identifiers must come from the variable list declared at parse time.
//! Numbers are decimals with an optional exponent.

use serde::de::Error as DeError;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExprError {
    #[error("syntax error at offset {offset}: expected {expected}")]
    Syntax { offset: usize, expected: String },
    #[error("unknown identifier `{name}` at offset {offset}")]
    UnknownIdentifier { name: String, offset: usize },
    #[error("function `{name}` takes {expected} argument(s), got {got} (offset {offset})")]
    Arity {
        name: String,
        expected: usize,
        got: usize,
        offset: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tanh,
    Exp,
    Min,
    Max,
    Abs,
}

impl Func {
    fn lookup(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tanh" => Func::Tanh,
            "exp" => Func::Exp,
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            _ => return None,
        })
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tanh => "tanh",
            Func::Exp => "exp",
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ast {
    Num(f64),
    Var(usize),
    Neg(Box<Ast>),
    Bin(BinOp, Box<Ast>, Box<Ast>),
    Call(Func, Vec<Ast>),
}

impl Ast {
    pub fn eval(&self, vars: &[f64]) -> f64 {
        match self {
            Ast::Num(v) => *v,
            Ast::Var(i) => vars[*i],
            Ast::Neg(e) => -e.eval(vars),
            Ast::Bin(op, a, b) => {
                let (x, y) = (a.eval(vars), b.eval(vars));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            }
            Ast::Call(f, args) => match f {
                Func::Sin => args[0].eval(vars).sin(),
                Func::Cos => args[0].eval(vars).cos(),
                Func::Tanh => args[0].eval(vars).tanh(),
                Func::Exp => args[0].eval(vars).exp(),
                Func::Abs => args[0].eval(vars).abs(),
                Func::Min => args[0].eval(vars).min(args[1].eval(vars)),
                Func::Max => args[0].eval(vars).max(args[1].eval(vars)),
            },
        }
    }

    fn uses_var(&self, idx: usize) -> bool {
        match self {
            Ast::Num(_) => false,
            Ast::Var(i) => *i == idx,
            Ast::Neg(e) => e.uses_var(idx),
            Ast::Bin(_, a, b) => a.uses_var(idx) || b.uses_var(idx),
            Ast::Call(_, args) => args.iter().any(|a| a.uses_var(idx)),
        }
    }

    fn pretty(&self, vars: &[String], out: &mut String) {
        match self {
            Ast::Num(v) => out.push_str(&format!("{v}")),
            Ast::Var(i) => out.push_str(&vars[*i]),
            Ast::Neg(e) => {
                out.push_str("(-");
                e.pretty(vars, out);
                out.push(')');
            }
            Ast::Bin(op, a, b) => {
                out.push('(');
                a.pretty(vars, out);
                out.push_str(match op {
                    BinOp::Add => " + ",
                    BinOp::Sub => " - ",
                    BinOp::Mul => " * ",
                    BinOp::Div => " / ",
                });
                b.pretty(vars, out);
                out.push(')');
            }
            Ast::Call(f, args) => {
                out.push_str(f.name());
                out.push('(');
                for (k, a) in args.iter().enumerate() {
                    if k > 0 {
                        out.push_str(", ");
                    }
                    a.pretty(vars, out);
                }
                out.push(')');
            }
        }
    }
}

/// A parsed expression together with its declared variable list.
///
/// Serialization keeps the original source text so configs round-trip.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledExpr {
    text: String,
    vars: Vec<String>,
    ast: Ast,
}

impl CompiledExpr {
    /// Build directly from an AST; the stored source is the canonical form.
    pub fn from_ast(ast: Ast, vars: Vec<String>) -> Self {
        let mut text = String::new();
        ast.pretty(&vars, &mut text);
        CompiledExpr { text, vars, ast }
    }

    pub fn eval(&self, vars: &[f64]) -> f64 {
        debug_assert_eq!(vars.len(), self.vars.len());
        self.ast.eval(vars)
    }

    pub fn uses_var(&self, idx: usize) -> bool {
        self.ast.uses_var(idx)
    }

    pub fn var_names(&self) -> &[String] {
        &self.vars
    }

    pub fn source(&self) -> &str {
        &self.text
    }

    /// Canonical fully parenthesized form; reparses to an identical AST.
    pub fn pretty(&self) -> String {
        let mut out = String::new();
        self.ast.pretty(&self.vars, &mut out);
        out
    }
}

impl Serialize for CompiledExpr {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Repr<'a> {
            text: &'a str,
            vars: &'a [String],
        }
        Repr {
            text: &self.text,
            vars: &self.vars,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CompiledExpr {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            text: String,
            vars: Vec<String>,
        }
        let r = Repr::deserialize(d)?;
        parse_coefficient_expr(&r.text, &r.vars).map_err(D::Error::custom)
    }
}

/// Parse `text` into an evaluable function of the declared variables.
pub fn parse_coefficient_expr<S: AsRef<str>>(
    text: &str,
    vars: &[S],
) -> Result<CompiledExpr, ExprError> {
    let vars: Vec<String> = vars.iter().map(|s| s.as_ref().to_string()).collect();
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        vars: &vars,
        end: text.len(),
    };
    let ast = p.expr()?;
    if p.pos < p.tokens.len() {
        return Err(ExprError::Syntax {
            offset: p.tokens[p.pos].1,
            expected: "end of input".into(),
        });
    }
    Ok(CompiledExpr {
        text: text.to_string(),
        vars,
        ast,
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    LParen,
    RParen,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<(Tok, usize)>, ExprError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            ' ' | '\t' | '\n' | '\r' => i += 1,
            '+' => {
                out.push((Tok::Plus, i));
                i += 1;
            }
            '-' => {
                out.push((Tok::Minus, i));
                i += 1;
            }
            '*' => {
                out.push((Tok::Star, i));
                i += 1;
            }
            '/' => {
                out.push((Tok::Slash, i));
                i += 1;
            }
            '(' => {
                out.push((Tok::LParen, i));
                i += 1;
            }
            ')' => {
                out.push((Tok::RParen, i));
                i += 1;
            }
            ',' => {
                out.push((Tok::Comma, i));
                i += 1;
            }
            '0'..='9' | '.' => {
                let start = i;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                if i < bytes.len() && bytes[i] == b'.' {
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
                        i = j;
                        while i < bytes.len() && bytes[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s = &text[start..i];
                let v: f64 = s.parse().map_err(|_| ExprError::Syntax {
                    offset: start,
                    expected: "number".into(),
                })?;
                out.push((Tok::Num(v), start));
            }
            'a'..='z' | 'A'..='Z' | '_' => {
                let start = i;
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                out.push((Tok::Ident(text[start..i].to_string()), start));
            }
            _ => {
                return Err(ExprError::Syntax {
                    offset: i,
                    expected: "token".into(),
                })
            }
        }
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: Vec<(Tok, usize)>,
    pos: usize,
    vars: &'a [String],
    end: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(t, _)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(_, o)| *o)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.tokens.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), ExprError> {
        match self.bump() {
            Some((t, _)) if t == tok => Ok(()),
            Some((_, o)) => Err(ExprError::Syntax {
                offset: o,
                expected: what.into(),
            }),
            None => Err(ExprError::Syntax {
                offset: self.end,
                expected: what.into(),
            }),
        }
    }

    fn expr(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.term()?;
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Ast::Bin(BinOp::Add, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Minus) => {
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Ast::Bin(BinOp::Sub, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Ast, ExprError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some(Tok::Star) => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Ast::Bin(BinOp::Mul, Box::new(lhs), Box::new(rhs));
                }
                Some(Tok::Slash) => {
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Ast::Bin(BinOp::Div, Box::new(lhs), Box::new(rhs));
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Ast, ExprError> {
        match self.bump() {
            Some((Tok::Num(v), _)) => Ok(Ast::Num(v)),
            Some((Tok::Minus, _)) => Ok(Ast::Neg(Box::new(self.factor()?))),
            Some((Tok::LParen, _)) => {
                let e = self.expr()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some((Tok::Ident(name), off)) => {
                if self.peek() == Some(&Tok::LParen) {
                    self.bump();
                    let mut args = vec![self.expr()?];
                    while self.peek() == Some(&Tok::Comma) {
                        self.bump();
                        args.push(self.expr()?);
                    }
                    self.expect(Tok::RParen, "`)`")?;
                    let f = Func::lookup(&name).ok_or(ExprError::UnknownIdentifier {
                        name: name.clone(),
                        offset: off,
                    })?;
                    if args.len() != f.arity() {
                        return Err(ExprError::Arity {
                            name,
                            expected: f.arity(),
                            got: args.len(),
                            offset: off,
                        });
                    }
                    Ok(Ast::Call(f, args))
                } else {
                    match self.vars.iter().position(|v| v == &name) {
                        Some(i) => Ok(Ast::Var(i)),
                        None => Err(ExprError::UnknownIdentifier { name, offset: off }),
                    }
                }
            }
            Some((_, o)) => Err(ExprError::Syntax {
                offset: o,
                expected: "expression".into(),
            }),
            None => Err(ExprError::Syntax {
                offset: self.offset(),
                expected: "expression".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, StreamTag};

    fn p(text: &str) -> CompiledExpr {
        parse_coefficient_expr(text, &["x", "y"]).unwrap()
    }

    #[test]
    fn arithmetic_identities() {
        assert_eq!(p("x + y").eval(&[1.0, 2.0]), 3.0);
        assert_eq!(p("sin(x - y)").eval(&[0.0, 0.0]), 0.0);
        assert_eq!(p("2 * x - y / 4").eval(&[3.0, 8.0]), 4.0);
        assert_eq!(p("min(x, y) + max(x, y)").eval(&[5.0, -2.0]), 3.0);
        assert_eq!(p("-x").eval(&[1.5, 0.0]), -1.5);
        assert_eq!(p("abs(-3) * exp(0)").eval(&[0.0, 0.0]), 3.0);
        assert_eq!(p("1.5e2 + 0.5").eval(&[0.0, 0.0]), 150.5);
    }

    #[test]
    fn unbalanced_paren_reports_offset() {
        let err = parse_coefficient_expr("sin(", &["x"]).unwrap_err();
        match err {
            ExprError::Syntax { offset, .. } => assert_eq!(offset, 4),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_identifier_and_arity() {
        let err = parse_coefficient_expr("x + z", &["x"]).unwrap_err();
        assert!(matches!(
            err,
            ExprError::UnknownIdentifier { ref name, offset: 4 } if name == "z"
        ));
        let err = parse_coefficient_expr("sin(x, x)", &["x"]).unwrap_err();
        assert!(matches!(err, ExprError::Arity { expected: 1, got: 2, .. }));
        let err = parse_coefficient_expr("foo(x)", &["x"]).unwrap_err();
        assert!(matches!(err, ExprError::UnknownIdentifier { .. }));
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let err = parse_coefficient_expr("x 3", &["x"]).unwrap_err();
        assert!(matches!(err, ExprError::Syntax { offset: 2, .. }));
    }

    #[test]
    fn uses_var_detection() {
        assert!(p("sin(y)").uses_var(1));
        assert!(!p("sin(y)").uses_var(0));
        assert!(p("x * y").uses_var(0));
    }

    #[test]
    fn division_by_zero_is_ieee() {
        assert!(p("x / y").eval(&[1.0, 0.0]).is_infinite());
    }

    // Parser round-trip: the pretty-printed form reparses to a function that
    // agrees exactly (same AST, hence identical operation order).
    #[test]
    fn pretty_roundtrip_on_random_points() {
        let exprs = [
            "x + y * 2 - 0.5",
            "sin(x - y) / (1 + abs(x))",
            "max(tanh(x), cos(y)) * exp(-x * x)",
            "-x - -y",
            "1e-3 * x + 2.25",
            "min(x, max(y, 0.1)) - tanh(x * y)",
        ];
        let mut rng = CounterRng::from_seed(5).substream(StreamTag::Probe, 9);
        for text in exprs {
            let a = p(text);
            let b = parse_coefficient_expr(&a.pretty(), &["x", "y"]).unwrap();
            for _ in 0..100 {
                let x = rng.uniform_range(-5.0, 5.0);
                let y = rng.uniform_range(-5.0, 5.0);
                let va = a.eval(&[x, y]);
                let vb = b.eval(&[x, y]);
                assert!(
                    va == vb || (va.is_nan() && vb.is_nan()),
                    "{text}: {va} vs {vb}"
                );
            }
        }
    }
}
