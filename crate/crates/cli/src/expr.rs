//! Arithmetic expressions for coefficient functions.
//!
//! Identifiers: `t x y z r f regime`. Operators `+ - * / ^` with the usual
//! precedence, `^` binding right and tighter than unary minus. Functions
//! `sin cos exp abs`. `regime` evaluates to the 1-based label.

use std::fmt;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Var {
    T,
    X,
    Y,
    Z,
    R,
    F,
    Regime,
}

impl Var {
    fn from_name(s: &str) -> Option<Self> {
        Some(match s {
            "t" => Var::T,
            "x" => Var::X,
            "y" => Var::Y,
            "z" => Var::Z,
            "r" => Var::R,
            "f" => Var::F,
            "regime" => Var::Regime,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Var::T => "t",
            Var::X => "x",
            Var::Y => "y",
            Var::Z => "z",
            Var::R => "r",
            Var::F => "f",
            Var::Regime => "regime",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Pow,
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Num(f64),
    Var(Var, usize),
    Neg(Box<Node>),
    Bin(Op, Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// Values bound to the identifiers. `regime` is 0-based here.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Env {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub r: f64,
    pub f: f64,
    pub regime: usize,
}

impl Env {
    pub fn at(t: f64, regime: usize) -> Self {
        Self { t, regime, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExprError {
    pub source: String,
    /// Byte offset of the offending token.
    pub pos: usize,
    pub message: String,
}

impl fmt::Display for ExprError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let col = self.source[..self.pos.min(self.source.len())].chars().count();
        write!(f, "{} at column {}\n  {}\n  {}^", self.message, col + 1, self.source, " ".repeat(col))
    }
}

impl std::error::Error for ExprError {}

#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    source: String,
    root: Node,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self, ExprError> {
        let tokens = lex(src)?;
        let mut p = Parser { src, tokens, i: 0 };
        let root = p.sum()?;
        if let Some(tok) = p.peek() {
            return Err(p.error(tok.pos, format!("unexpected `{}`", tok.text(src))));
        }
        Ok(Self { source: src.to_string(), root })
    }

    pub fn constant(v: f64) -> Self {
        Self { source: format!("{v}"), root: Node::Num(v) }
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn eval(&self, env: &Env) -> f64 {
        eval(&self.root, env)
    }

    /// First identifier not in `allowed`, as an annotated error.
    pub fn restrict(&self, allowed: &[Var]) -> Result<(), ExprError> {
        let mut bad = None;
        visit(&self.root, &mut |v, pos| {
            if bad.is_none() && !allowed.contains(&v) {
                bad = Some((v, pos));
            }
        });
        match bad {
            None => Ok(()),
            Some((v, pos)) => Err(ExprError {
                source: self.source.clone(),
                pos,
                message: format!(
                    "`{}` is not available here (allowed: {})",
                    v.name(),
                    allowed.iter().map(|a| a.name()).collect::<Vec<_>>().join(", ")
                ),
            }),
        }
    }
}

fn visit(n: &Node, f: &mut impl FnMut(Var, usize)) {
    match n {
        Node::Num(_) => {}
        Node::Var(v, pos) => f(*v, *pos),
        Node::Neg(a) | Node::Call(_, a) => visit(a, f),
        Node::Bin(_, a, b) => {
            visit(a, f);
            visit(b, f);
        }
    }
}

fn eval(n: &Node, env: &Env) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::Var(v, _) => match v {
            Var::T => env.t,
            Var::X => env.x,
            Var::Y => env.y,
            Var::Z => env.z,
            Var::R => env.r,
            Var::F => env.f,
            Var::Regime => (env.regime + 1) as f64,
        },
        Node::Neg(a) => -eval(a, env),
        Node::Bin(op, a, b) => {
            let (a, b) = (eval(a, env), eval(b, env));
            match op {
                Op::Add => a + b,
                Op::Sub => a - b,
                Op::Mul => a * b,
                Op::Div => a / b,
                Op::Pow => a.powf(b),
            }
        }
        Node::Call(func, a) => {
            let a = eval(a, env);
            match func {
                Func::Sin => a.sin(),
                Func::Cos => a.cos(),
                Func::Exp => a.exp(),
                Func::Abs => a.abs(),
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Kind {
    Num(f64),
    Ident(String),
    Sym(char),
}

#[derive(Clone, Debug)]
struct Token {
    kind: Kind,
    pos: usize,
    len: usize,
}

impl Token {
    fn text<'a>(&self, src: &'a str) -> &'a str {
        &src[self.pos..self.pos + self.len]
    }
}

fn lex(src: &str) -> Result<Vec<Token>, ExprError> {
    let err = |pos, message: String| ExprError { source: src.to_string(), pos, message };
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if c.is_ascii_whitespace() {
            i += 1;
        } else if c.is_ascii_digit() || c == '.' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_digit() || bytes[i] == b'.') {
                i += 1;
            }
            if i < bytes.len() && (bytes[i] == b'e' || bytes[i] == b'E') {
                let mut j = i + 1;
                if j < bytes.len() && (bytes[j] == b'+' || bytes[j] == b'-') {
                    j += 1;
                }
                if j < bytes.len() && bytes[j].is_ascii_digit() {
                    while j < bytes.len() && bytes[j].is_ascii_digit() {
                        j += 1;
                    }
                    i = j;
                }
            }
            let text = &src[start..i];
            let v: f64 = text.parse().map_err(|_| err(start, format!("malformed number `{text}`")))?;
            out.push(Token { kind: Kind::Num(v), pos: start, len: i - start });
        } else if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            out.push(Token { kind: Kind::Ident(src[start..i].to_string()), pos: start, len: i - start });
        } else if "+-*/^()".contains(c) {
            out.push(Token { kind: Kind::Sym(c), pos: i, len: 1 });
            i += 1;
        } else {
            let ch = src[i..].chars().next().unwrap();
            return Err(err(i, format!("unexpected character `{ch}`")));
        }
    }
    Ok(out)
}

struct Parser<'a> {
    src: &'a str,
    tokens: Vec<Token>,
    i: usize,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.i)
    }

    fn error(&self, pos: usize, message: String) -> ExprError {
        ExprError { source: self.src.to_string(), pos, message }
    }

    fn eat(&mut self, c: char) -> bool {
        if matches!(self.peek(), Some(Token { kind: Kind::Sym(s), .. }) if *s == c) {
            self.i += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.product()?;
        loop {
            let op = if self.eat('+') {
                Op::Add
            } else if self.eat('-') {
                Op::Sub
            } else {
                return Ok(lhs);
            };
            let rhs = self.product()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn product(&mut self) -> Result<Node, ExprError> {
        let mut lhs = self.unary()?;
        loop {
            let op = if self.eat('*') {
                Op::Mul
            } else if self.eat('/') {
                Op::Div
            } else {
                return Ok(lhs);
            };
            let rhs = self.unary()?;
            lhs = Node::Bin(op, Box::new(lhs), Box::new(rhs));
        }
    }

    fn unary(&mut self) -> Result<Node, ExprError> {
        if self.eat('-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat('+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node, ExprError> {
        let base = self.atom()?;
        if self.eat('^') {
            let exp = self.unary()?;
            return Ok(Node::Bin(Op::Pow, Box::new(base), Box::new(exp)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node, ExprError> {
        let Some(tok) = self.peek().cloned() else {
            return Err(self.error(self.src.len(), "unexpected end of expression".into()));
        };
        self.i += 1;
        match &tok.kind {
            Kind::Num(v) => Ok(Node::Num(*v)),
            Kind::Sym('(') => {
                let inner = self.sum()?;
                if !self.eat(')') {
                    let pos = self.peek().map_or(self.src.len(), |t| t.pos);
                    return Err(self.error(pos, "expected `)`".into()));
                }
                Ok(inner)
            }
            Kind::Sym(c) => Err(self.error(tok.pos, format!("unexpected `{c}`"))),
            Kind::Ident(name) => {
                let func = match name.as_str() {
                    "sin" => Some(Func::Sin),
                    "cos" => Some(Func::Cos),
                    "exp" => Some(Func::Exp),
                    "abs" => Some(Func::Abs),
                    _ => None,
                };
                if let Some(func) = func {
                    if !self.eat('(') {
                        let pos = self.peek().map_or(self.src.len(), |t| t.pos);
                        return Err(self.error(pos, format!("expected `(` after `{name}`")));
                    }
                    let arg = self.sum()?;
                    if !self.eat(')') {
                        let pos = self.peek().map_or(self.src.len(), |t| t.pos);
                        return Err(self.error(pos, "expected `)`".into()));
                    }
                    return Ok(Node::Call(func, Box::new(arg)));
                }
                match Var::from_name(name) {
                    Some(v) => Ok(Node::Var(v, tok.pos)),
                    None => Err(self.error(tok.pos, format!("unknown identifier `{name}`"))),
                }
            }
        }
    }
}
