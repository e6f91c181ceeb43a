//! Arithmetic expressions over state variables `x1..xd`.
//!
//! Grammar (whitespace-insensitive, left-associative):
//!
//! ```text
//! expr    := term (('+' | '-') term)*
//! term    := unary (('*' | '/') unary)*
//! unary   := '-' unary | primary
//! primary := number | var | '(' expr ')'
//! var     := 'x' digits | 'x_' digits
//! ```

use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub enum ExprAst {
    Const(f64),
    /// 1-based variable index.
    Var(usize),
    Neg(Box<ExprAst>),
    Add(Box<ExprAst>, Box<ExprAst>),
    Sub(Box<ExprAst>, Box<ExprAst>),
    Mul(Box<ExprAst>, Box<ExprAst>),
    Div(Box<ExprAst>, Box<ExprAst>),
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("syntax error at column {column}: {message}")]
pub struct SyntaxError {
    /// 1-based column of the offending character (one past the end for EOF).
    pub column: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("variable x{index} out of range for a point of dimension {dim}")]
    UnknownVariable { index: usize, dim: usize },
}

pub fn parse_expr(src: &str) -> Result<ExprAst, SyntaxError> {
    let mut p = Parser {
        src: src.as_bytes(),
        pos: 0,
    };
    let ast = p.expr()?;
    p.skip_ws();
    if p.pos < p.src.len() {
        return Err(p.error(format!("unexpected character {:?}", p.src[p.pos] as char)));
    }
    Ok(ast)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: impl Into<String>) -> SyntaxError {
        SyntaxError {
            column: self.pos + 1,
            message: message.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<ExprAst, SyntaxError> {
        let mut lhs = self.term()?;
        while let Some(op @ (b'+' | b'-')) = self.peek() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = if op == b'+' {
                ExprAst::Add(Box::new(lhs), Box::new(rhs))
            } else {
                ExprAst::Sub(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<ExprAst, SyntaxError> {
        let mut lhs = self.unary()?;
        while let Some(op @ (b'*' | b'/')) = self.peek() {
            self.pos += 1;
            let rhs = self.unary()?;
            lhs = if op == b'*' {
                ExprAst::Mul(Box::new(lhs), Box::new(rhs))
            } else {
                ExprAst::Div(Box::new(lhs), Box::new(rhs))
            };
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<ExprAst, SyntaxError> {
        if self.peek() == Some(b'-') {
            self.pos += 1;
            let inner = self.unary()?;
            return Ok(ExprAst::Neg(Box::new(inner)));
        }
        self.primary()
    }

    fn primary(&mut self) -> Result<ExprAst, SyntaxError> {
        match self.peek() {
            None => Err(self.error("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(b')') {
                    return Err(self.error("expected ')'"));
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(b'x') => self.variable(),
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) => Err(self.error(format!("unexpected character {:?}", c as char))),
        }
    }

    fn variable(&mut self) -> Result<ExprAst, SyntaxError> {
        let start = self.pos;
        self.pos += 1;
        if self.src.get(self.pos) == Some(&b'_') {
            self.pos += 1;
        }
        let digits_start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == digits_start {
            return Err(SyntaxError {
                column: start + 1,
                message: "expected variable index after 'x'".into(),
            });
        }
        let text = std::str::from_utf8(&self.src[digits_start..self.pos]).unwrap();
        match text.parse::<usize>() {
            Ok(0) | Err(_) => Err(SyntaxError {
                column: start + 1,
                message: format!("invalid variable index {text:?} (indices start at 1)"),
            }),
            Ok(i) => Ok(ExprAst::Var(i)),
        }
    }

    fn number(&mut self) -> Result<ExprAst, SyntaxError> {
        let start = self.pos;
        let s = self.src;
        let digits = |p: &mut usize| {
            while *p < s.len() && s[*p].is_ascii_digit() {
                *p += 1;
            }
        };
        digits(&mut self.pos);
        if self.pos < s.len() && s[self.pos] == b'.' {
            self.pos += 1;
            digits(&mut self.pos);
        }
        if self.pos < s.len() && (s[self.pos] == b'e' || s[self.pos] == b'E') {
            let mark = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            let exp_start = self.pos;
            digits(&mut self.pos);
            if self.pos == exp_start {
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap();
        text.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(ExprAst::Const)
            .ok_or(SyntaxError {
                column: start + 1,
                message: format!("invalid number {text:?}"),
            })
    }
}

impl ExprAst {
    pub fn eval(&self, x: &[f64]) -> Result<f64, EvalError> {
        Ok(match self {
            ExprAst::Const(c) => *c,
            ExprAst::Var(i) => *x.get(i - 1).ok_or(EvalError::UnknownVariable {
                index: *i,
                dim: x.len(),
            })?,
            ExprAst::Neg(e) => -e.eval(x)?,
            ExprAst::Add(a, b) => a.eval(x)? + b.eval(x)?,
            ExprAst::Sub(a, b) => a.eval(x)? - b.eval(x)?,
            ExprAst::Mul(a, b) => a.eval(x)? * b.eval(x)?,
            ExprAst::Div(a, b) => {
                let den = b.eval(x)?;
                if den == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                a.eval(x)? / den
            }
        })
    }

    /// Largest variable index used, 0 for constant expressions.
    pub fn max_var(&self) -> usize {
        match self {
            ExprAst::Const(_) => 0,
            ExprAst::Var(i) => *i,
            ExprAst::Neg(e) => e.max_var(),
            ExprAst::Add(a, b) | ExprAst::Sub(a, b) | ExprAst::Mul(a, b) | ExprAst::Div(a, b) => {
                a.max_var().max(b.max_var())
            }
        }
    }

    fn is_additive(&self) -> bool {
        matches!(self, ExprAst::Add(..) | ExprAst::Sub(..))
    }

    fn is_multiplicative(&self) -> bool {
        matches!(self, ExprAst::Mul(..) | ExprAst::Div(..))
    }
}

fn wrap(f: &mut fmt::Formatter<'_>, e: &ExprAst, parens: bool) -> fmt::Result {
    if parens {
        write!(f, "({e})")
    } else {
        write!(f, "{e}")
    }
}

impl fmt::Display for ExprAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            // `{:?}` keeps the shortest round-trip representation. Negative
            // constants never come out of the parser; they print as a negation.
            ExprAst::Const(c) if c.is_sign_negative() => write!(f, "(-{:?})", -c),
            ExprAst::Const(c) => write!(f, "{c:?}"),
            ExprAst::Var(i) => write!(f, "x{i}"),
            ExprAst::Neg(e) => {
                f.write_str("-")?;
                wrap(f, e, e.is_additive() || e.is_multiplicative())
            }
            ExprAst::Add(a, b) | ExprAst::Sub(a, b) => {
                let op = if matches!(self, ExprAst::Add(..)) { "+" } else { "-" };
                wrap(f, a, false)?;
                write!(f, " {op} ")?;
                wrap(f, b, b.is_additive())
            }
            ExprAst::Mul(a, b) | ExprAst::Div(a, b) => {
                let op = if matches!(self, ExprAst::Mul(..)) { "*" } else { "/" };
                wrap(f, a, a.is_additive())?;
                write!(f, " {op} ")?;
                wrap(f, b, b.is_additive() || b.is_multiplicative())
            }
        }
    }
}
