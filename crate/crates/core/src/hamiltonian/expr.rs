//! A small expression language over `x1..xn` and `P11..PNn`.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := '-' factor | base ('^' integer)?
//! base   := number | 'pi' | 'x'index | 'P'index index
//!         | func '(' expr (',' expr)* ')' | '(' expr ')'
//! func   := abs | sqrt | exp | sin | cos | min | max | norm
//! ```
//!
//! `norm(P)` is the Frobenius norm of the whole matrix variable; `norm(a, b, …)`
//! is the Euclidean norm of its arguments. Evaluation is total: a square root
//! of a negative number, a division by zero or any non-finite intermediate is
//! reported as an error rather than propagated as NaN.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{frobenius, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Abs,
    Sqrt,
    Exp,
    Sin,
    Cos,
    Min,
    Max,
    Norm,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "abs" => Func::Abs,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "min" => Func::Min,
            "max" => Func::Max,
            "norm" => Func::Norm,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            Func::Abs => "abs",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Min => "min",
            Func::Max => "max",
            Func::Norm => "norm",
        }
    }
}

/// Parse tree. Variable and entry indices are zero-based.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    Num(f64),
    Var(usize),
    Entry(usize, usize),
    /// The bare matrix variable `P`; only valid as the argument of `norm`.
    Matrix,
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Vec<Expr>),
}

impl Expr {
    /// Parses `text` for a Hamiltonian on `ℝ^{components×dim}` over `ℝ^dim`.
    pub fn parse(text: &str, components: usize, dim: usize) -> Result<Expr> {
        let tokens = tokenize(text)?;
        let mut p = Parser { tokens, pos: 0, components, dim, text_end: end_position(text) };
        let e = p.expr()?;
        if let Some(t) = p.peek() {
            return Err(syntax(t.line, t.column, format!("unexpected `{}`", t.kind)));
        }
        Ok(e)
    }

    pub fn eval(&self, x: &[f64], p: &Mat) -> Result<f64> {
        let v = match self {
            Expr::Num(v) => *v,
            Expr::Var(i) => x[*i],
            Expr::Entry(a, i) => p[(*a, *i)],
            Expr::Matrix => {
                return Err(Error::HamiltonianContract("bare `P` outside norm(P)".into()));
            }
            Expr::Neg(e) => -e.eval(x, p)?,
            Expr::Bin(op, l, r) => {
                let (a, b) = (l.eval(x, p)?, r.eval(x, p)?);
                match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b == 0.0 {
                            return Err(Error::HamiltonianContract(format!("division by zero in `{self}`")));
                        }
                        a / b
                    }
                }
            }
            Expr::Pow(b, k) => {
                let base = b.eval(x, p)?;
                if base == 0.0 && *k < 0 {
                    return Err(Error::HamiltonianContract(format!("zero to a negative power in `{self}`")));
                }
                base.powi(*k)
            }
            Expr::Call(f, args) => {
                if *f == Func::Norm && matches!(args.as_slice(), [Expr::Matrix]) {
                    frobenius(p)
                } else {
                    let vals = args.iter().map(|a| a.eval(x, p)).collect::<Result<Vec<f64>>>()?;
                    match f {
                        Func::Abs => vals[0].abs(),
                        Func::Sqrt => {
                            if vals[0] < 0.0 {
                                return Err(Error::HamiltonianContract(format!(
                                    "sqrt of negative value {} in `{self}`",
                                    vals[0]
                                )));
                            }
                            vals[0].sqrt()
                        }
                        Func::Exp => vals[0].exp(),
                        Func::Sin => vals[0].sin(),
                        Func::Cos => vals[0].cos(),
                        Func::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
                        Func::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        Func::Norm => vals.iter().map(|v| v * v).sum::<f64>().sqrt(),
                    }
                }
            }
        };
        if !v.is_finite() {
            return Err(Error::HamiltonianContract(format!("non-finite value in `{self}`")));
        }
        Ok(v)
    }

    /// Whether the tree mentions any `x` variable.
    pub fn depends_on_x(&self) -> bool {
        match self {
            Expr::Var(_) => true,
            Expr::Num(_) | Expr::Entry(..) | Expr::Matrix => false,
            Expr::Neg(e) | Expr::Pow(e, _) => e.depends_on_x(),
            Expr::Bin(_, l, r) => l.depends_on_x() || r.depends_on_x(),
            Expr::Call(_, args) => args.iter().any(Expr::depends_on_x),
        }
    }

    /// Whether the tree mentions the matrix variable.
    pub fn depends_on_p(&self) -> bool {
        match self {
            Expr::Entry(..) | Expr::Matrix => true,
            Expr::Num(_) | Expr::Var(_) => false,
            Expr::Neg(e) | Expr::Pow(e, _) => e.depends_on_p(),
            Expr::Bin(_, l, r) => l.depends_on_p() || r.depends_on_p(),
            Expr::Call(_, args) => args.iter().any(Expr::depends_on_p),
        }
    }

    fn level(&self) -> u8 {
        match self {
            Expr::Bin(BinOp::Add | BinOp::Sub, ..) => 1,
            Expr::Bin(BinOp::Mul | BinOp::Div, ..) => 2,
            Expr::Neg(_) => 3,
            Expr::Pow(..) => 4,
            Expr::Num(v) if *v < 0.0 || v.is_sign_negative() => 0,
            _ => 5,
        }
    }

    fn write_at(&self, f: &mut fmt::Formatter<'_>, min_level: u8) -> fmt::Result {
        if self.level() < min_level {
            write!(f, "(")?;
            self.write_at(f, 0)?;
            return write!(f, ")");
        }
        match self {
            Expr::Num(v) => write!(f, "{v:?}"),
            Expr::Var(i) => write!(f, "x{}", i + 1),
            Expr::Entry(a, i) => write!(f, "P{}{}", a + 1, i + 1),
            Expr::Matrix => write!(f, "P"),
            Expr::Neg(e) => {
                write!(f, "-")?;
                e.write_at(f, 3)
            }
            Expr::Bin(op, l, r) => {
                let (sym, lhs, rhs) = match op {
                    BinOp::Add => ("+", 1, 2),
                    BinOp::Sub => ("-", 1, 2),
                    BinOp::Mul => ("*", 2, 3),
                    BinOp::Div => ("/", 2, 3),
                };
                l.write_at(f, lhs)?;
                write!(f, " {sym} ")?;
                r.write_at(f, rhs)
            }
            Expr::Pow(b, k) => {
                b.write_at(f, 5)?;
                write!(f, "^{k}")
            }
            Expr::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    a.write_at(f, 0)?;
                }
                write!(f, ")")
            }
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.write_at(f, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum TokenKind {
    Num(f64),
    Ident(String),
    Op(char),
}

impl fmt::Display for TokenKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenKind::Num(v) => write!(f, "{v}"),
            TokenKind::Ident(s) => write!(f, "{s}"),
            TokenKind::Op(c) => write!(f, "{c}"),
        }
    }
}

#[derive(Clone, Debug)]
struct Token {
    kind: TokenKind,
    line: usize,
    column: usize,
}

fn syntax(line: usize, column: usize, message: impl Into<String>) -> Error {
    Error::Syntax { line, column, message: message.into() }
}

fn end_position(text: &str) -> (usize, usize) {
    let mut line = 1;
    let mut column = 1;
    for c in text.chars() {
        if c == '\n' {
            line += 1;
            column = 1;
        } else {
            column += 1;
        }
    }
    (line, column)
}

fn tokenize(text: &str) -> Result<Vec<Token>> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let (mut i, mut line, mut column) = (0, 1, 1);
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            i += 1;
            line += 1;
            column = 1;
            continue;
        }
        if c.is_whitespace() {
            i += 1;
            column += 1;
            continue;
        }
        let start_col = column;
        if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                i += 1;
            }
            if i < chars.len() && (chars[i] == 'e' || chars[i] == 'E') {
                let mut j = i + 1;
                if j < chars.len() && (chars[j] == '+' || chars[j] == '-') {
                    j += 1;
                }
                if j < chars.len() && chars[j].is_ascii_digit() {
                    while j < chars.len() && chars[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let s: String = chars[start..i].iter().collect();
            let v = s
                .parse::<f64>()
                .map_err(|_| syntax(line, start_col, format!("malformed number `{s}`")))?;
            column += i - start;
            tokens.push(Token { kind: TokenKind::Num(v), line, column: start_col });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            column += i - start;
            tokens.push(Token {
                kind: TokenKind::Ident(chars[start..i].iter().collect()),
                line,
                column: start_col,
            });
        } else if "+-*/^(),".contains(c) {
            i += 1;
            column += 1;
            tokens.push(Token { kind: TokenKind::Op(c), line, column: start_col });
        } else {
            return Err(syntax(line, start_col, format!("unexpected character `{c}`")));
        }
    }
    Ok(tokens)
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
    components: usize,
    dim: usize,
    text_end: (usize, usize),
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn peek_op(&self) -> Option<char> {
        match self.peek() {
            Some(Token { kind: TokenKind::Op(c), .. }) => Some(*c),
            _ => None,
        }
    }

    fn eof_error(&self, what: &str) -> Error {
        syntax(self.text_end.0, self.text_end.1, format!("unexpected end of input, expected {what}"))
    }

    fn expect_op(&mut self, op: char) -> Result<()> {
        match self.peek() {
            Some(Token { kind: TokenKind::Op(c), .. }) if *c == op => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(syntax(t.line, t.column, format!("expected `{op}`, found `{}`", t.kind))),
            None => Err(self.eof_error(&format!("`{op}`"))),
        }
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(c @ ('*' | '/')) = self.peek_op() {
            self.pos += 1;
            let rhs = self.factor()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        if self.peek_op() == Some('-') {
            self.pos += 1;
            return Ok(Expr::Neg(Box::new(self.factor()?)));
        }
        let base = self.base()?;
        if self.peek_op() == Some('^') {
            self.pos += 1;
            let negative = if self.peek_op() == Some('-') {
                self.pos += 1;
                true
            } else {
                false
            };
            let tok = self.peek().cloned().ok_or_else(|| self.eof_error("an integer exponent"))?;
            let TokenKind::Num(v) = tok.kind else {
                return Err(syntax(tok.line, tok.column, "exponent must be an integer literal"));
            };
            if v.fract() != 0.0 || v > i32::MAX as f64 {
                return Err(syntax(tok.line, tok.column, format!("exponent `{v}` is not an integer")));
            }
            self.pos += 1;
            let k = if negative { -(v as i32) } else { v as i32 };
            return Ok(Expr::Pow(Box::new(base), k));
        }
        Ok(base)
    }

    fn base(&mut self) -> Result<Expr> {
        let tok = self.peek().cloned().ok_or_else(|| self.eof_error("an operand"))?;
        self.pos += 1;
        match tok.kind {
            TokenKind::Num(v) => Ok(Expr::Num(v)),
            TokenKind::Op('(') => {
                let e = self.expr()?;
                self.expect_op(')')?;
                Ok(e)
            }
            TokenKind::Op(c) => Err(syntax(tok.line, tok.column, format!("unexpected `{c}`"))),
            TokenKind::Ident(name) => self.identifier(name, tok.line, tok.column),
        }
    }

    fn identifier(&mut self, name: String, line: usize, column: usize) -> Result<Expr> {
        let unknown = || Error::UnknownIdentifier { name: name.clone(), line, column };
        if let Some(func) = Func::from_name(&name) {
            self.expect_op('(')?;
            let mut args = vec![self.argument(func)?];
            while self.peek_op() == Some(',') {
                self.pos += 1;
                args.push(self.argument(func)?);
            }
            self.expect_op(')')?;
            let (ok, expected) = match func {
                Func::Min | Func::Max => (args.len() >= 2, "at least 2"),
                Func::Norm => (!args.is_empty(), "at least 1"),
                _ => (args.len() == 1, "exactly 1"),
            };
            if !ok {
                return Err(Error::Arity {
                    func: name,
                    expected: expected.into(),
                    got: args.len(),
                    line,
                    column,
                });
            }
            if args.len() > 1 && args.contains(&Expr::Matrix) {
                return Err(syntax(line, column, "`P` must be the only argument of norm"));
            }
            return Ok(Expr::Call(func, args));
        }
        if name == "pi" {
            return Ok(Expr::Num(std::f64::consts::PI));
        }
        if name == "P" {
            return Err(syntax(line, column, "bare `P` is only allowed as norm(P)"));
        }
        let digits = |s: &str| !s.is_empty() && s.chars().all(|c| c.is_ascii_digit());
        if let Some(rest) = name.strip_prefix('x') {
            if digits(rest) {
                let i: usize = rest.parse().map_err(|_| unknown())?;
                if i >= 1 && i <= self.dim {
                    return Ok(Expr::Var(i - 1));
                }
            }
            return Err(unknown());
        }
        if let Some(rest) = name.strip_prefix('P') {
            if rest.len() == 2 && digits(rest) {
                let a = rest[..1].parse::<usize>().map_err(|_| unknown())?;
                let i = rest[1..].parse::<usize>().map_err(|_| unknown())?;
                if a >= 1 && a <= self.components && i >= 1 && i <= self.dim {
                    return Ok(Expr::Entry(a - 1, i - 1));
                }
            }
            return Err(unknown());
        }
        Err(unknown())
    }

    fn argument(&mut self, func: Func) -> Result<Expr> {
        if func == Func::Norm {
            if let Some(Token { kind: TokenKind::Ident(s), .. }) = self.peek() {
                if s == "P" {
                    let next = self.tokens.get(self.pos + 1).map(|t| &t.kind);
                    if matches!(next, Some(TokenKind::Op(')' | ',')) | None) {
                        self.pos += 1;
                        return Ok(Expr::Matrix);
                    }
                }
            }
        }
        self.expr()
    }
}
