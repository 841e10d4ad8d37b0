//! Expression DSL for system component functions.
//!
//! Grammar (documented in `docs/expression-grammar.md`):
//!
//! ```text
//! expr     := ['-'] term { ('+' | '-') term }
//! term     := factor { ('*' | '/') factor }
//! factor   := atom [ '^' exponent ]
//! exponent := ['-'] integer [ '^' exponent ]      (folded right-associatively)
//! atom     := number | ident | ident '(' expr ')' | '(' expr ')'
//! ```
//!
//! A leading minus binds the whole multiplicative term (`-a*b` parses as
//! `neg(a*b)`), exponents are integer literals, and there is no implicit
//! multiplication. Offsets in errors are 1-based byte positions.

use crate::jet::{Jet, JetError};
use std::fmt;

/// Functions callable from expressions; the set mirrors the jet operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Cot,
    Sec,
    Csc,
    Sqrt,
    Exp,
    Log,
    Arctan,
}

impl Func {
    fn from_name(name: &str) -> Option<Func> {
        Some(match name {
            "sin" => Func::Sin,
            "cos" => Func::Cos,
            "tan" => Func::Tan,
            "cot" => Func::Cot,
            "sec" => Func::Sec,
            "csc" => Func::Csc,
            "sqrt" => Func::Sqrt,
            "exp" => Func::Exp,
            "log" => Func::Log,
            "arctan" => Func::Arctan,
            _ => return None,
        })
    }

    fn name(&self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Cot => "cot",
            Func::Sec => "sec",
            Func::Csc => "csc",
            Func::Sqrt => "sqrt",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Arctan => "arctan",
        }
    }

    fn apply(&self, j: &Jet) -> Result<Jet, JetError> {
        match self {
            Func::Sin => Ok(j.sin()),
            Func::Cos => Ok(j.cos()),
            Func::Tan => j.tan(),
            Func::Cot => j.cot(),
            Func::Sec => j.sec(),
            Func::Csc => j.csc(),
            Func::Sqrt => j.sqrt(),
            Func::Exp => Ok(j.exp()),
            Func::Log => j.ln(),
            Func::Arctan => Ok(j.atan()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Num(f64),
    Var(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Call(Func, Box<Expr>),
}

/// Parsed expression node with its 1-based source offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub node: Node,
    pub offset: usize,
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("syntax error at offset {offset}: {message}")]
pub struct ParseError {
    pub offset: usize,
    pub message: String,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum EvalError {
    #[error("unbound variable `{name}` at offset {offset}")]
    Unbound { name: String, offset: usize },
    #[error("{source} (at offset {offset})")]
    Domain {
        #[source]
        source: JetError,
        offset: usize,
    },
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Slash,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    /// Next token with its 1-based start offset; `None` at end of input.
    fn next(&mut self) -> Result<Option<(Tok, usize)>, ParseError> {
        self.skip_ws();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        let tok = match c {
            b'+' => Tok::Plus,
            b'-' => Tok::Minus,
            b'*' => Tok::Star,
            b'/' => Tok::Slash,
            b'^' => Tok::Caret,
            b'(' => Tok::LParen,
            b')' => Tok::RParen,
            b'0'..=b'9' | b'.' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_digit() || self.src[self.pos] == b'.')
                {
                    self.pos += 1;
                }
                if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                    let mark = self.pos;
                    self.pos += 1;
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                        self.pos += 1;
                    }
                    if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                            self.pos += 1;
                        }
                    } else {
                        self.pos = mark;
                    }
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                let v: f64 = text.parse().map_err(|_| ParseError {
                    offset: start + 1,
                    message: format!("invalid number `{text}`"),
                })?;
                return Ok(Some((Tok::Num(v), start + 1)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while self.pos < self.src.len()
                    && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
                {
                    self.pos += 1;
                }
                let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                return Ok(Some((Tok::Ident(text.to_string()), start + 1)));
            }
            other => {
                return Err(ParseError {
                    offset: start + 1,
                    message: format!("unexpected character `{}`", other as char),
                })
            }
        };
        self.pos += 1;
        Ok(Some((tok, start + 1)))
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

struct Parser {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    end_offset: usize,
}

impl Parser {
    fn peek(&self) -> Option<&(Tok, usize)> {
        self.toks.get(self.pos)
    }

    fn bump(&mut self) -> Option<(Tok, usize)> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn here(&self) -> usize {
        self.peek().map(|(_, o)| *o).unwrap_or(self.end_offset)
    }

    fn err(&self, message: impl Into<String>) -> ParseError {
        ParseError {
            offset: self.here(),
            message: message.into(),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let offset = self.here();
        let negate = matches!(self.peek(), Some((Tok::Minus, _)));
        if negate {
            self.bump();
        }
        let mut lhs = self.term()?;
        if negate {
            lhs = Expr {
                node: Node::Neg(Box::new(lhs)),
                offset,
            };
        }
        loop {
            match self.peek() {
                Some((Tok::Plus, o)) => {
                    let o = *o;
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr {
                        node: Node::Add(Box::new(lhs), Box::new(rhs)),
                        offset: o,
                    };
                }
                Some((Tok::Minus, o)) => {
                    let o = *o;
                    self.bump();
                    let rhs = self.term()?;
                    lhs = Expr {
                        node: Node::Sub(Box::new(lhs), Box::new(rhs)),
                        offset: o,
                    };
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            match self.peek() {
                Some((Tok::Star, o)) => {
                    let o = *o;
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr {
                        node: Node::Mul(Box::new(lhs), Box::new(rhs)),
                        offset: o,
                    };
                }
                Some((Tok::Slash, o)) => {
                    let o = *o;
                    self.bump();
                    let rhs = self.factor()?;
                    lhs = Expr {
                        node: Node::Div(Box::new(lhs), Box::new(rhs)),
                        offset: o,
                    };
                }
                _ => return Ok(lhs),
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        let base = self.atom()?;
        if matches!(self.peek(), Some((Tok::Caret, _))) {
            let (_, o) = self.bump().unwrap();
            let exp = self.exponent()?;
            return Ok(Expr {
                node: Node::Pow(Box::new(base), exp),
                offset: o,
            });
        }
        Ok(base)
    }

    /// Signed integer exponent; chains fold right-associatively at parse time.
    fn exponent(&mut self) -> Result<i32, ParseError> {
        let neg = matches!(self.peek(), Some((Tok::Minus, _)));
        if neg {
            self.bump();
        }
        let base = match self.bump() {
            Some((Tok::Num(v), o)) => {
                if v.fract() != 0.0 || v.abs() > i32::MAX as f64 {
                    return Err(ParseError {
                        offset: o,
                        message: "exponent must be an integer literal".into(),
                    });
                }
                v as i32
            }
            Some((_, o)) => {
                return Err(ParseError {
                    offset: o,
                    message: "expected integer exponent after `^`".into(),
                })
            }
            None => return Err(self.err("expected integer exponent after `^`")),
        };
        let mut value = base;
        if matches!(self.peek(), Some((Tok::Caret, _))) {
            self.bump();
            let upper = self.exponent()?;
            if upper < 0 {
                return Err(self.err("negative exponent in a power tower"));
            }
            value = base.pow(upper as u32);
        }
        Ok(if neg { -value } else { value })
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.bump() {
            Some((Tok::Num(v), o)) => Ok(Expr {
                node: Node::Num(v),
                offset: o,
            }),
            Some((Tok::Ident(name), o)) => {
                if matches!(self.peek(), Some((Tok::LParen, _))) {
                    let func = Func::from_name(&name).ok_or(ParseError {
                        offset: o,
                        message: format!("unknown function `{name}`"),
                    })?;
                    self.bump();
                    let arg = self.expr()?;
                    match self.bump() {
                        Some((Tok::RParen, _)) => Ok(Expr {
                            node: Node::Call(func, Box::new(arg)),
                            offset: o,
                        }),
                        Some((_, bad)) => Err(ParseError {
                            offset: bad,
                            message: "expected `)`".into(),
                        }),
                        None => Err(ParseError {
                            offset: self.end_offset,
                            message: "expected `)` before end of input".into(),
                        }),
                    }
                } else {
                    Ok(Expr {
                        node: Node::Var(name),
                        offset: o,
                    })
                }
            }
            Some((Tok::LParen, _)) => {
                let inner = self.expr()?;
                match self.bump() {
                    Some((Tok::RParen, _)) => Ok(inner),
                    Some((_, bad)) => Err(ParseError {
                        offset: bad,
                        message: "expected `)`".into(),
                    }),
                    None => Err(ParseError {
                        offset: self.end_offset,
                        message: "expected `)` before end of input".into(),
                    }),
                }
            }
            Some((tok, o)) => Err(ParseError {
                offset: o,
                message: format!("unexpected token {tok:?}"),
            }),
            None => Err(ParseError {
                offset: self.end_offset,
                message: "unexpected end of input".into(),
            }),
        }
    }
}

/// Parse a source string into an expression tree.
pub fn parse(source: &str) -> Result<Expr, ParseError> {
    let mut lexer = Lexer::new(source);
    let mut toks = Vec::new();
    while let Some(t) = lexer.next()? {
        toks.push(t);
    }
    let mut parser = Parser {
        toks,
        pos: 0,
        end_offset: source.len() + 1,
    };
    let e = parser.expr()?;
    if let Some((tok, o)) = parser.peek() {
        return Err(ParseError {
            offset: *o,
            message: format!("trailing input {tok:?}"),
        });
    }
    Ok(e)
}

// ---------------------------------------------------------------------------
// Evaluation and binding
// ---------------------------------------------------------------------------

impl Expr {
    /// Check that every variable is one of `names`; returns the offending
    /// name and offset otherwise.
    pub fn check_bound(&self, names: &[String]) -> Result<(), EvalError> {
        match &self.node {
            Node::Num(_) => Ok(()),
            Node::Var(name) => {
                if names.iter().any(|n| n == name) {
                    Ok(())
                } else {
                    Err(EvalError::Unbound {
                        name: name.clone(),
                        offset: self.offset,
                    })
                }
            }
            Node::Neg(a) | Node::Pow(a, _) | Node::Call(_, a) => a.check_bound(names),
            Node::Add(a, b) | Node::Sub(a, b) | Node::Mul(a, b) | Node::Div(a, b) => {
                a.check_bound(names)?;
                b.check_bound(names)
            }
        }
    }

    /// Evaluate over a jet environment. All bound jets must share shape.
    pub fn eval(&self, env: &JetEnv) -> Result<Jet, EvalError> {
        match &self.node {
            Node::Num(v) => Ok(Jet::constant(*v, env.nvars(), env.order())),
            Node::Var(name) => env.get(name).cloned().ok_or_else(|| EvalError::Unbound {
                name: name.clone(),
                offset: self.offset,
            }),
            Node::Neg(a) => Ok(a.eval(env)?.neg()),
            Node::Add(a, b) => Ok(a.eval(env)?.add(&b.eval(env)?)),
            Node::Sub(a, b) => Ok(a.eval(env)?.sub(&b.eval(env)?)),
            Node::Mul(a, b) => Ok(a.eval(env)?.mul(&b.eval(env)?)),
            Node::Div(a, b) => a.eval(env)?.div(&b.eval(env)?).map_err(|e| EvalError::Domain {
                source: e,
                offset: self.offset,
            }),
            Node::Pow(a, k) => a.eval(env)?.powi(*k).map_err(|e| EvalError::Domain {
                source: e,
                offset: self.offset,
            }),
            Node::Call(f, a) => f.apply(&a.eval(env)?).map_err(|e| EvalError::Domain {
                source: e,
                offset: self.offset,
            }),
        }
    }

    /// Plain scalar evaluation (order-0 shortcut used by samplers).
    pub fn eval_scalar(&self, env: &JetEnv) -> Result<f64, EvalError> {
        Ok(self.eval(env)?.value())
    }

    fn precedence(&self) -> u8 {
        match self.node {
            Node::Add(..) | Node::Sub(..) | Node::Neg(..) => 1,
            Node::Mul(..) | Node::Div(..) => 2,
            Node::Pow(..) => 3,
            Node::Num(_) | Node::Var(_) | Node::Call(..) => 4,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn child(f: &mut fmt::Formatter<'_>, e: &Expr, min_prec: u8) -> fmt::Result {
            if e.precedence() < min_prec {
                write!(f, "(")?;
                write!(f, "{e}")?;
                write!(f, ")")
            } else {
                write!(f, "{e}")
            }
        }
        match &self.node {
            Node::Num(v) => {
                if *v < 0.0 {
                    write!(f, "({v})")
                } else {
                    write!(f, "{v}")
                }
            }
            Node::Var(name) => write!(f, "{name}"),
            // a leading minus re-binds a whole term chain, so the operand
            // must keep at least multiplicative precedence
            Node::Neg(a) => {
                write!(f, "-")?;
                child(f, a, 2)
            }
            Node::Add(a, b) => {
                child(f, a, 1)?;
                write!(f, " + ")?;
                child(f, b, 2)
            }
            Node::Sub(a, b) => {
                child(f, a, 1)?;
                write!(f, " - ")?;
                child(f, b, 2)
            }
            Node::Mul(a, b) => {
                child(f, a, 2)?;
                write!(f, "*")?;
                child(f, b, 3)
            }
            Node::Div(a, b) => {
                child(f, a, 2)?;
                write!(f, "/")?;
                child(f, b, 3)
            }
            Node::Pow(a, k) => {
                child(f, a, 4)?;
                if *k < 0 {
                    write!(f, "^-{}", -(*k as i64))
                } else {
                    write!(f, "^{k}")
                }
            }
            Node::Call(func, a) => write!(f, "{}({a})", func.name()),
        }
    }
}

/// Name-to-jet binding used by [`Expr::eval`].
pub struct JetEnv {
    names: Vec<String>,
    jets: Vec<Jet>,
}

impl JetEnv {
    pub fn new(names: Vec<String>, jets: Vec<Jet>) -> JetEnv {
        assert_eq!(names.len(), jets.len());
        if let Some(first) = jets.first() {
            for j in &jets {
                assert_eq!(j.nvars(), first.nvars(), "environment jets must share nvars");
                assert_eq!(j.order(), first.order(), "environment jets must share order");
            }
        }
        JetEnv { names, jets }
    }

    fn get(&self, name: &str) -> Option<&Jet> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.jets[i])
    }

    pub fn nvars(&self) -> usize {
        self.jets.first().map(|j| j.nvars()).unwrap_or(0)
    }

    pub fn order(&self) -> usize {
        self.jets.first().map(|j| j.order()).unwrap_or(0)
    }
}

/// Structural equality ignoring source offsets, used by the round-trip
/// invariant.
pub fn same_structure(a: &Expr, b: &Expr) -> bool {
    match (&a.node, &b.node) {
        (Node::Num(x), Node::Num(y)) => x == y,
        (Node::Var(x), Node::Var(y)) => x == y,
        (Node::Neg(x), Node::Neg(y)) => same_structure(x, y),
        (Node::Add(x1, x2), Node::Add(y1, y2))
        | (Node::Sub(x1, x2), Node::Sub(y1, y2))
        | (Node::Mul(x1, x2), Node::Mul(y1, y2))
        | (Node::Div(x1, x2), Node::Div(y1, y2)) => {
            same_structure(x1, y1) && same_structure(x2, y2)
        }
        (Node::Pow(x, i), Node::Pow(y, j)) => i == j && same_structure(x, y),
        (Node::Call(f, x), Node::Call(g, y)) => f == g && same_structure(x, y),
        _ => false,
    }
}
