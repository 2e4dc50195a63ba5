//! Scalar expression trees with exact symbolic differentiation.
//!
//! Expressions are parsed from a small grammar (see [`parse_expr`]), evaluated
//! in IEEE double precision, and differentiated symbolically. Powers are
//! restricted to integer exponents so that differentiation stays exact on the
//! polynomial problems this crate targets; the elementary functions are kept
//! for generality.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (("+"|"-") term)* ;
//! term   := factor (("*"|"/") factor)* ;
//! factor := ("-" factor) | atom ("^" integer)? ;
//! atom   := number | identifier | "(" expr ")" | func "(" expr ")" ;
//! func   := "sin"|"cos"|"exp"|"log"|"sqrt" ;
//! ```

use thiserror::Error;

/// Unary operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
}

/// Binary operators. Integer powers are a separate node ([`Expr::Pow`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// Immutable expression tree over an ordered variable table.
///
/// Variables are stored by index into the owning problem's variable list.
/// Expressions are safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Var(usize),
    Unary(UnaryOp, Box<Expr>),
    Binary(BinaryOp, Box<Expr>, Box<Expr>),
    /// Integer power `base^exp`. `exp` may be negative; `x^0` folds to `1`.
    Pow(Box<Expr>, i32),
}

/// Parse-time failures, carrying the byte offset into the source text.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ParseError {
    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },
    #[error("unknown identifier `{name}` at byte {offset}")]
    UnknownIdentifier { offset: usize, name: String },
    #[error("non-integer exponent at byte {offset}: `{text}`")]
    NonIntegerExponent { offset: usize, text: String },
}

impl ParseError {
    /// Byte offset of the failure in the parsed text.
    pub fn offset(&self) -> usize {
        match self {
            ParseError::Syntax { offset, .. }
            | ParseError::UnknownIdentifier { offset, .. }
            | ParseError::NonIntegerExponent { offset, .. } => *offset,
        }
    }
}

/// Domain failures during evaluation. Never silently produces NaN for the
/// listed domain violations.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),
    #[error("sqrt of negative value {0}")]
    SqrtNegative(f64),
    #[error("division by zero")]
    DivisionByZero,
    #[error("variable index {index} out of range for point of length {len}")]
    VarOutOfRange { index: usize, len: usize },
}

impl Expr {
    /// Largest variable index referenced, if any.
    pub fn max_var(&self) -> Option<usize> {
        match self {
            Expr::Const(_) => None,
            Expr::Var(i) => Some(*i),
            Expr::Unary(_, a) => a.max_var(),
            Expr::Binary(_, a, b) => match (a.max_var(), b.max_var()) {
                (Some(x), Some(y)) => Some(x.max(y)),
                (x, y) => x.or(y),
            },
            Expr::Pow(a, _) => a.max_var(),
        }
    }

    /// IEEE double evaluation at the point `w`.
    pub fn eval(&self, w: &[f64]) -> Result<f64, EvalError> {
        match self {
            Expr::Const(c) => Ok(*c),
            Expr::Var(i) => w
                .get(*i)
                .copied()
                .ok_or(EvalError::VarOutOfRange { index: *i, len: w.len() }),
            Expr::Unary(op, a) => {
                let x = a.eval(w)?;
                match op {
                    UnaryOp::Neg => Ok(-x),
                    UnaryOp::Sin => Ok(x.sin()),
                    UnaryOp::Cos => Ok(x.cos()),
                    UnaryOp::Exp => Ok(x.exp()),
                    UnaryOp::Log => {
                        if x <= 0.0 {
                            Err(EvalError::LogNonPositive(x))
                        } else {
                            Ok(x.ln())
                        }
                    }
                    UnaryOp::Sqrt => {
                        if x < 0.0 {
                            Err(EvalError::SqrtNegative(x))
                        } else {
                            Ok(x.sqrt())
                        }
                    }
                }
            }
            Expr::Binary(op, a, b) => {
                let x = a.eval(w)?;
                let y = b.eval(w)?;
                match op {
                    BinaryOp::Add => Ok(x + y),
                    BinaryOp::Sub => Ok(x - y),
                    BinaryOp::Mul => Ok(x * y),
                    BinaryOp::Div => {
                        if y == 0.0 {
                            Err(EvalError::DivisionByZero)
                        } else {
                            Ok(x / y)
                        }
                    }
                }
            }
            Expr::Pow(a, n) => {
                let x = a.eval(w)?;
                if *n < 0 && x == 0.0 {
                    return Err(EvalError::DivisionByZero);
                }
                Ok(x.powi(*n))
            }
        }
    }

    /// Exact symbolic partial derivative with respect to variable `var`.
    ///
    /// Simplification is best-effort (constant folding, zero/one elimination);
    /// correctness is defined by evaluation equivalence, not canonical form.
    pub fn diff(&self, var: usize) -> Expr {
        match self {
            Expr::Const(_) => Expr::Const(0.0),
            Expr::Var(i) => Expr::Const(if *i == var { 1.0 } else { 0.0 }),
            Expr::Unary(op, a) => {
                let da = a.diff(var);
                match op {
                    UnaryOp::Neg => neg(da),
                    UnaryOp::Sin => mul(Expr::Unary(UnaryOp::Cos, a.clone()), da),
                    UnaryOp::Cos => neg(mul(Expr::Unary(UnaryOp::Sin, a.clone()), da)),
                    UnaryOp::Exp => mul(Expr::Unary(UnaryOp::Exp, a.clone()), da),
                    UnaryOp::Log => div(da, a.as_ref().clone()),
                    UnaryOp::Sqrt => div(
                        da,
                        mul(Expr::Const(2.0), Expr::Unary(UnaryOp::Sqrt, a.clone())),
                    ),
                }
            }
            Expr::Binary(op, a, b) => {
                let da = a.diff(var);
                let db = b.diff(var);
                match op {
                    BinaryOp::Add => add(da, db),
                    BinaryOp::Sub => sub(da, db),
                    BinaryOp::Mul => add(
                        mul(da, b.as_ref().clone()),
                        mul(a.as_ref().clone(), db),
                    ),
                    BinaryOp::Div => div(
                        sub(
                            mul(da, b.as_ref().clone()),
                            mul(a.as_ref().clone(), db),
                        ),
                        powi(b.as_ref().clone(), 2),
                    ),
                }
            }
            Expr::Pow(a, n) => {
                // d(u^n) = n * u^(n-1) * u'
                let da = a.diff(var);
                mul(
                    mul(Expr::Const(f64::from(*n)), powi(a.as_ref().clone(), n - 1)),
                    da,
                )
            }
        }
    }

    fn as_const(&self) -> Option<f64> {
        match self {
            Expr::Const(c) => Some(*c),
            _ => None,
        }
    }
}

/// `a + b` with constant folding and zero elimination.
pub fn add(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x + y),
        (Some(0.0), None) => b,
        (None, Some(0.0)) => a,
        _ => Expr::Binary(BinaryOp::Add, Box::new(a), Box::new(b)),
    }
}

/// `a - b` with constant folding and zero elimination.
pub fn sub(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x - y),
        (None, Some(0.0)) => a,
        (Some(0.0), None) => neg(b),
        _ => Expr::Binary(BinaryOp::Sub, Box::new(a), Box::new(b)),
    }
}

/// `a * b` with constant folding, zero and one elimination.
pub fn mul(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) => Expr::Const(x * y),
        (Some(0.0), None) | (None, Some(0.0)) => Expr::Const(0.0),
        (Some(1.0), None) => b,
        (None, Some(1.0)) => a,
        _ => Expr::Binary(BinaryOp::Mul, Box::new(a), Box::new(b)),
    }
}

/// `a / b` with constant folding; division by a constant zero is left in the
/// tree and reported at evaluation time.
pub fn div(a: Expr, b: Expr) -> Expr {
    match (a.as_const(), b.as_const()) {
        (Some(x), Some(y)) if y != 0.0 => Expr::Const(x / y),
        (Some(0.0), None) => Expr::Const(0.0),
        (None, Some(1.0)) => a,
        _ => Expr::Binary(BinaryOp::Div, Box::new(a), Box::new(b)),
    }
}

/// `-a` with constant folding and double-negation elimination.
pub fn neg(a: Expr) -> Expr {
    match a {
        Expr::Const(c) => Expr::Const(-c),
        Expr::Unary(UnaryOp::Neg, inner) => *inner,
        _ => Expr::Unary(UnaryOp::Neg, Box::new(a)),
    }
}

/// `a^n` with the conventions `a^0 = 1`, `a^1 = a`.
pub fn powi(a: Expr, n: i32) -> Expr {
    if n == 0 {
        return Expr::Const(1.0);
    }
    if n == 1 {
        return a;
    }
    if let Some(c) = a.as_const() {
        return Expr::Const(c.powi(n));
    }
    Expr::Pow(Box::new(a), n)
}

/// Parse `text` against the grammar in the module docs. Every identifier must
/// appear in `vars`; the resulting tree indexes into that table.
pub fn parse_expr(text: &str, vars: &[String]) -> Result<Expr, ParseError> {
    let mut p = Parser { src: text.as_bytes(), pos: 0, vars };
    p.skip_ws();
    let e = p.expr()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(ParseError::Syntax {
            offset: p.pos,
            message: format!("unexpected `{}`", p.peek_char()),
        });
    }
    Ok(e)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
    vars: &'a [String],
}

impl<'a> Parser<'a> {
    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek_char(&self) -> String {
        match self.peek() {
            Some(c) => (c as char).to_string(),
            None => "end of input".to_string(),
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.term()?;
        loop {
            self.skip_ws();
            if self.eat(b'+') {
                let rhs = self.term()?;
                lhs = Expr::Binary(BinaryOp::Add, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'-') {
                let rhs = self.term()?;
                lhs = Expr::Binary(BinaryOp::Sub, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut lhs = self.factor()?;
        loop {
            self.skip_ws();
            if self.eat(b'*') {
                let rhs = self.factor()?;
                lhs = Expr::Binary(BinaryOp::Mul, Box::new(lhs), Box::new(rhs));
            } else if self.eat(b'/') {
                let rhs = self.factor()?;
                lhs = Expr::Binary(BinaryOp::Div, Box::new(lhs), Box::new(rhs));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn factor(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        if self.eat(b'-') {
            let inner = self.factor()?;
            return Ok(Expr::Unary(UnaryOp::Neg, Box::new(inner)));
        }
        let base = self.atom()?;
        self.skip_ws();
        if self.eat(b'^') {
            let n = self.integer_exponent()?;
            return Ok(Expr::Pow(Box::new(base), n));
        }
        Ok(base)
    }

    fn integer_exponent(&mut self) -> Result<i32, ParseError> {
        self.skip_ws();
        let start = self.pos;
        if self.peek() == Some(b'-') || self.peek() == Some(b'+') {
            self.pos += 1;
        }
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start || (self.pos == start + 1 && !self.src[start].is_ascii_digit()) {
            return Err(ParseError::Syntax {
                offset: start,
                message: "expected integer exponent".to_string(),
            });
        }
        // A fractional or exponent-form literal here is a rejected non-integer power.
        if matches!(self.peek(), Some(b'.') | Some(b'e') | Some(b'E')) {
            let mut end = self.pos + 1;
            while end < self.src.len()
                && (self.src[end].is_ascii_digit() || matches!(self.src[end], b'.' | b'e' | b'E' | b'+' | b'-'))
            {
                end += 1;
            }
            let text = String::from_utf8_lossy(&self.src[start..end]).into_owned();
            return Err(ParseError::NonIntegerExponent { offset: start, text });
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<i32>().map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("exponent `{text}` out of range"),
        })
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some(b'(') => {
                self.pos += 1;
                let e = self.expr()?;
                self.skip_ws();
                if !self.eat(b')') {
                    return Err(ParseError::Syntax {
                        offset: self.pos,
                        message: "expected `)`".to_string(),
                    });
                }
                Ok(e)
            }
            Some(c) if c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => self.identifier(),
            _ => Err(ParseError::Syntax {
                offset: self.pos,
                message: format!("expected number, identifier or `(`, found `{}`", self.peek_char()),
            }),
        }
    }

    fn number(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.peek() == Some(b'.') {
            self.pos += 1;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
        }
        if matches!(self.peek(), Some(b'e') | Some(b'E')) {
            let mark = self.pos;
            self.pos += 1;
            if matches!(self.peek(), Some(b'+') | Some(b'-')) {
                self.pos += 1;
            }
            let digits_start = self.pos;
            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if self.pos == digits_start {
                // Not an exponent after all; back off (e.g. `2*e` would be a
                // syntax error later, but `2e` alone must not eat the `e`).
                self.pos = mark;
            }
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
        text.parse::<f64>().map(Expr::Const).map_err(|_| ParseError::Syntax {
            offset: start,
            message: format!("invalid number `{text}`"),
        })
    }

    fn identifier(&mut self) -> Result<Expr, ParseError> {
        let start = self.pos;
        while self.pos < self.src.len()
            && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_')
        {
            self.pos += 1;
        }
        let name = std::str::from_utf8(&self.src[start..self.pos]).unwrap().to_string();
        let func = match name.as_str() {
            "sin" => Some(UnaryOp::Sin),
            "cos" => Some(UnaryOp::Cos),
            "exp" => Some(UnaryOp::Exp),
            "log" => Some(UnaryOp::Log),
            "sqrt" => Some(UnaryOp::Sqrt),
            _ => None,
        };
        self.skip_ws();
        if let Some(op) = func {
            if self.eat(b'(') {
                let arg = self.expr()?;
                self.skip_ws();
                if !self.eat(b')') {
                    return Err(ParseError::Syntax {
                        offset: self.pos,
                        message: "expected `)` after function argument".to_string(),
                    });
                }
                return Ok(Expr::Unary(op, Box::new(arg)));
            }
        }
        match self.vars.iter().position(|v| v == &name) {
            Some(i) => Ok(Expr::Var(i)),
            None => Err(ParseError::UnknownIdentifier { offset: start, name }),
        }
    }
}

impl std::fmt::Display for Expr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        fn prec(e: &Expr) -> u8 {
            match e {
                Expr::Const(c) if *c < 0.0 => 2,
                Expr::Const(_) | Expr::Var(_) => 4,
                Expr::Pow(..) => 3,
                Expr::Unary(UnaryOp::Neg, _) => 2,
                Expr::Unary(..) => 4,
                Expr::Binary(BinaryOp::Mul | BinaryOp::Div, ..) => 1,
                Expr::Binary(..) => 0,
            }
        }
        fn write_child(
            f: &mut std::fmt::Formatter<'_>,
            child: &Expr,
            min_prec: u8,
        ) -> std::fmt::Result {
            if prec(child) < min_prec {
                write!(f, "({child})")
            } else {
                write!(f, "{child}")
            }
        }
        match self {
            Expr::Const(c) => write!(f, "{c}"),
            Expr::Var(i) => write!(f, "x{i}"),
            Expr::Unary(UnaryOp::Neg, a) => {
                write!(f, "-")?;
                write_child(f, a, 3)
            }
            Expr::Unary(op, a) => {
                let name = match op {
                    UnaryOp::Sin => "sin",
                    UnaryOp::Cos => "cos",
                    UnaryOp::Exp => "exp",
                    UnaryOp::Log => "log",
                    UnaryOp::Sqrt => "sqrt",
                    UnaryOp::Neg => unreachable!(),
                };
                write!(f, "{name}({a})")
            }
            Expr::Binary(op, a, b) => {
                let (sym, p, rp) = match op {
                    BinaryOp::Add => ("+", 0, 0),
                    BinaryOp::Sub => ("-", 0, 1),
                    BinaryOp::Mul => ("*", 1, 1),
                    BinaryOp::Div => ("/", 1, 2),
                };
                write_child(f, a, p)?;
                write!(f, " {sym} ")?;
                write_child(f, b, rp)
            }
            Expr::Pow(a, n) => {
                write_child(f, a, 4)?;
                write!(f, "^{n}")
            }
        }
    }
}

/// Central finite difference of `e` in variable `var` with step `h`.
///
/// Reference check for the symbolic derivative; used by the benchmark suite
/// and tests, never by the solvers themselves.
pub fn central_fd(e: &Expr, w: &[f64], var: usize, h: f64) -> Result<f64, EvalError> {
    let mut wp = w.to_vec();
    let mut wm = w.to_vec();
    wp[var] += h;
    wm[var] -= h;
    Ok((e.eval(&wp)? - e.eval(&wm)?) / (2.0 * h))
}
