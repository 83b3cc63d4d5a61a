//! Tiny arithmetic language for the coefficients `f`, `h`, `g` and `xi`.
//!
//! Variables: `t`, `b` (current Brownian value), `y`, `ybar` (the mean-field
//! argument `E[Y_t]`) and `z`. Operators `+ - * / ^` with the usual
//! precedence, `^` right-associative and binding tighter than unary minus.
//! Functions: `min`, `max`, `abs`, `exp`, `sin`, `cos`, `sqrt`, `pos`
//! (positive part) and `neg` (negative part). The literal `inf` denotes
//! `+infinity` and is used for barrier sentinels.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("parse error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("square root of negative number {0}")]
    SqrtOfNegative(f64),
    #[error("{0} is undefined")]
    Undefined(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    T,
    B,
    Y,
    YBar,
    Z,
}

impl Var {
    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::B => "b",
            Var::Y => "y",
            Var::YBar => "ybar",
            Var::Z => "z",
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "t" => Var::T,
            "b" => Var::B,
            "y" => Var::Y,
            "ybar" => Var::YBar,
            "z" => Var::Z,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

impl BinOp {
    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
            BinOp::Pow => '^',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Min,
    Max,
    Abs,
    Exp,
    Sin,
    Cos,
    Sqrt,
    Pos,
    Neg,
}

impl Func {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "min" => Func::Min,
            "max" => Func::Max,
            "abs" => Func::Abs,
            "exp" => Func::Exp,
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "sqrt" => Func::Sqrt,
            "pos" => Func::Pos,
            "neg" => Func::Neg,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Func::Min => "min",
            Func::Max => "max",
            Func::Abs => "abs",
            Func::Exp => "exp",
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Sqrt => "sqrt",
            Func::Pos => "pos",
            Func::Neg => "neg",
        }
    }

    fn arity(self) -> usize {
        match self {
            Func::Min | Func::Max => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Const(f64),
    Var(Var),
    Minus(Box<Node>),
    Bin(BinOp, Box<Node>, Box<Node>),
    Call(Func, Vec<Node>),
}

/// Values bound to the expression variables.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Vars {
    pub t: f64,
    pub b: f64,
    pub y: f64,
    pub ybar: f64,
    pub z: f64,
}

impl Vars {
    pub fn at(t: f64, b: f64) -> Self {
        Self {
            t,
            b,
            ..Self::default()
        }
    }

    pub fn with_y(self, y: f64, ybar: f64) -> Self {
        Self { y, ybar, ..self }
    }

    pub fn with_z(self, z: f64) -> Self {
        Self { z, ..self }
    }

    fn get(&self, v: Var) -> f64 {
        match v {
            Var::T => self.t,
            Var::B => self.b,
            Var::Y => self.y,
            Var::YBar => self.ybar,
            Var::Z => self.z,
        }
    }
}

/// A parsed expression together with its source text.
#[derive(Debug, Clone)]
pub struct Expression {
    source: String,
    root: Node,
    vars: BTreeSet<Var>,
}

impl PartialEq for Expression {
    fn eq(&self, other: &Self) -> bool {
        self.root == other.root
    }
}

impl Expression {
    pub fn parse(src: &str) -> Result<Self, ParseError> {
        let tokens = tokenize(src)?;
        let mut p = Parser {
            tokens: &tokens,
            pos: 0,
            end: src.len(),
        };
        let root = p.expr()?;
        if let Some(tok) = p.peek() {
            return Err(ParseError {
                offset: tok.offset,
                message: format!("unexpected {}", tok.kind.describe()),
            });
        }
        let mut vars = BTreeSet::new();
        collect_vars(&root, &mut vars);
        Ok(Self {
            source: src.to_string(),
            root,
            vars,
        })
    }

    pub fn constant(c: f64) -> Self {
        let root = Node::Const(c);
        Self {
            source: format_const(c),
            root,
            vars: BTreeSet::new(),
        }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn variables(&self) -> &BTreeSet<Var> {
        &self.vars
    }

    pub fn uses(&self, v: Var) -> bool {
        self.vars.contains(&v)
    }

    /// Byte offset of the first occurrence of `v` in the source, if any.
    pub fn offset_of(&self, v: Var) -> Option<usize> {
        tokenize(&self.source).ok()?.into_iter().find_map(|t| match t.kind {
            TokKind::Ident(ref s) if s == v.name() => Some(t.offset),
            _ => None,
        })
    }

    pub fn eval(&self, vars: &Vars) -> Result<f64, EvalError> {
        eval_node(&self.root, vars)
    }

    /// Constant value if the expression has no variables and evaluates.
    pub fn as_constant(&self) -> Option<f64> {
        if self.vars.is_empty() {
            self.eval(&Vars::default()).ok()
        } else {
            None
        }
    }
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write_node(&self.root, f)
    }
}

fn format_const(c: f64) -> String {
    if c == f64::INFINITY {
        "inf".into()
    } else if c == f64::NEG_INFINITY {
        "(-inf)".into()
    } else if c < 0.0 || (c == 0.0 && c.is_sign_negative()) {
        format!("(-{:?})", -c)
    } else {
        format!("{c:?}")
    }
}

fn write_node(n: &Node, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match n {
        Node::Const(c) => f.write_str(&format_const(*c)),
        Node::Var(v) => f.write_str(v.name()),
        Node::Minus(a) => {
            f.write_str("(-")?;
            write_node(a, f)?;
            f.write_str(")")
        }
        Node::Bin(op, a, b) => {
            f.write_str("(")?;
            write_node(a, f)?;
            write!(f, " {} ", op.symbol())?;
            write_node(b, f)?;
            f.write_str(")")
        }
        Node::Call(func, args) => {
            write!(f, "{}(", func.name())?;
            for (i, a) in args.iter().enumerate() {
                if i > 0 {
                    f.write_str(", ")?;
                }
                write_node(a, f)?;
            }
            f.write_str(")")
        }
    }
}

fn collect_vars(n: &Node, out: &mut BTreeSet<Var>) {
    match n {
        Node::Const(_) => {}
        Node::Var(v) => {
            out.insert(*v);
        }
        Node::Minus(a) => collect_vars(a, out),
        Node::Bin(_, a, b) => {
            collect_vars(a, out);
            collect_vars(b, out);
        }
        Node::Call(_, args) => args.iter().for_each(|a| collect_vars(a, out)),
    }
}

fn eval_node(n: &Node, vars: &Vars) -> Result<f64, EvalError> {
    Ok(match n {
        Node::Const(c) => *c,
        Node::Var(v) => vars.get(*v),
        Node::Minus(a) => -eval_node(a, vars)?,
        Node::Bin(op, a, b) => {
            let x = eval_node(a, vars)?;
            let y = eval_node(b, vars)?;
            let r = match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => {
                    if y == 0.0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    x / y
                }
                BinOp::Pow => x.powf(y),
            };
            if r.is_nan() && !x.is_nan() && !y.is_nan() {
                return Err(EvalError::Undefined(format!(
                    "{} {} {}",
                    format_const(x),
                    op.symbol(),
                    format_const(y)
                )));
            }
            r
        }
        Node::Call(func, args) => {
            let x = eval_node(&args[0], vars)?;
            match func {
                Func::Min => x.min(eval_node(&args[1], vars)?),
                Func::Max => x.max(eval_node(&args[1], vars)?),
                Func::Abs => x.abs(),
                Func::Exp => x.exp(),
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Sqrt => {
                    if x < 0.0 {
                        return Err(EvalError::SqrtOfNegative(x));
                    }
                    x.sqrt()
                }
                Func::Pos => x.max(0.0),
                Func::Neg => (-x).max(0.0),
            }
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
enum TokKind {
    Num(f64),
    Ident(String),
    Op(char),
    LParen,
    RParen,
    Comma,
}

impl TokKind {
    fn describe(&self) -> String {
        match self {
            TokKind::Num(x) => format!("number {x}"),
            TokKind::Ident(s) => format!("identifier '{s}'"),
            TokKind::Op(c) => format!("operator '{c}'"),
            TokKind::LParen => "'('".into(),
            TokKind::RParen => "')'".into(),
            TokKind::Comma => "','".into(),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    kind: TokKind,
    offset: usize,
}

fn tokenize(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        let kind = match c {
            '+' | '-' | '*' | '/' | '^' => {
                i += 1;
                TokKind::Op(c)
            }
            '(' => {
                i += 1;
                TokKind::LParen
            }
            ')' => {
                i += 1;
                TokKind::RParen
            }
            ',' => {
                i += 1;
                TokKind::Comma
            }
            '0'..='9' | '.' => {
                while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                    i += 1;
                }
                // Exponent only if followed by digits (optionally signed).
                if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                    let mut k = i + 1;
                    if k < bytes.len() && (bytes[k] == b'+' || bytes[k] == b'-') {
                        k += 1;
                    }
                    if k < bytes.len() && bytes[k].is_ascii_digit() {
                        while k < bytes.len() && bytes[k].is_ascii_digit() {
                            k += 1;
                        }
                        i = k;
                    }
                }
                let text = &src[start..i];
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start,
                    message: format!("malformed number '{text}'"),
                })?;
                TokKind::Num(v)
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                    i += 1;
                }
                TokKind::Ident(src[start..i].to_string())
            }
            other => {
                return Err(ParseError {
                    offset: start,
                    message: format!("unexpected character '{other}'"),
                })
            }
        };
        out.push(Token {
            kind,
            offset: start,
        });
    }
    Ok(out)
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    end: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos)
    }

    fn next(&mut self) -> Option<&Token> {
        let t = self.tokens.get(self.pos);
        self.pos += 1;
        t
    }

    fn err_here(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.peek().map_or(self.end, |t| t.offset),
            message: message.into(),
        }
    }

    fn eat_op(&mut self, ops: &[char]) -> Option<char> {
        match self.peek() {
            Some(Token {
                kind: TokKind::Op(c),
                ..
            }) if ops.contains(c) => {
                let c = *c;
                self.pos += 1;
                Some(c)
            }
            _ => None,
        }
    }

    fn expect(&mut self, kind: TokKind) -> Result<(), ParseError> {
        match self.peek() {
            Some(t) if t.kind == kind => {
                self.pos += 1;
                Ok(())
            }
            Some(t) => Err(ParseError {
                offset: t.offset,
                message: format!("expected {}, found {}", kind.describe(), t.kind.describe()),
            }),
            None => Err(self.err_here(format!("expected {}, found end of input", kind.describe()))),
        }
    }

    fn expr(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.term()?;
        while let Some(c) = self.eat_op(&['+', '-']) {
            let rhs = self.term()?;
            let op = if c == '+' { BinOp::Add } else { BinOp::Sub };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Node, ParseError> {
        let mut lhs = self.unary()?;
        while let Some(c) = self.eat_op(&['*', '/']) {
            let rhs = self.unary()?;
            let op = if c == '*' { BinOp::Mul } else { BinOp::Div };
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Node, ParseError> {
        match self.eat_op(&['-', '+']) {
            Some('-') => Ok(Node::Minus(Box::new(self.unary()?))),
            Some(_) => self.unary(),
            None => self.power(),
        }
    }

    fn power(&mut self) -> Result<Node, ParseError> {
        let base = self.primary()?;
        if self.eat_op(&['^']).is_some() {
            let exp = self.unary()?;
            return Ok(Node::Bin(BinOp::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn primary(&mut self) -> Result<Node, ParseError> {
        let Some(tok) = self.next().cloned() else {
            return Err(ParseError {
                offset: self.end,
                message: "unexpected end of input".into(),
            });
        };
        match tok.kind {
            TokKind::Num(v) => Ok(Node::Const(v)),
            TokKind::LParen => {
                let inner = self.expr()?;
                self.expect(TokKind::RParen)?;
                Ok(inner)
            }
            TokKind::Ident(name) => {
                if name == "inf" {
                    return Ok(Node::Const(f64::INFINITY));
                }
                if let Some(v) = Var::from_name(&name) {
                    return Ok(Node::Var(v));
                }
                let Some(func) = Func::from_name(&name) else {
                    return Err(ParseError {
                        offset: tok.offset,
                        message: format!("unknown identifier '{name}'"),
                    });
                };
                self.expect(TokKind::LParen)?;
                let mut args = vec![self.expr()?];
                while matches!(self.peek(), Some(Token { kind: TokKind::Comma, .. })) {
                    self.pos += 1;
                    args.push(self.expr()?);
                }
                self.expect(TokKind::RParen)?;
                if args.len() != func.arity() {
                    return Err(ParseError {
                        offset: tok.offset,
                        message: format!(
                            "{} takes {} argument(s), got {}",
                            func.name(),
                            func.arity(),
                            args.len()
                        ),
                    });
                }
                Ok(Node::Call(func, args))
            }
            other => Err(ParseError {
                offset: tok.offset,
                message: format!("unexpected {}", other.describe()),
            }),
        }
    }
}
