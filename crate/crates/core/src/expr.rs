//! Small arithmetic expressions over `t` used in scenario files.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := unary (('*' | '/') unary)*
//! unary  := '-' unary | power
//! power  := atom ('^' unary)?
//! atom   := number | 't' | 'pi' | 'e' | ident '(' expr ')' | '(' expr ')'
//! ident  := sin | cos | exp | ln | sqrt | abs | mu | dmu
//! ```
//!
//! `mu` and `dmu` evaluate the scenario's growth rate and its derivative.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::growth_rate::GrowthRate;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Func {
    Sin,
    Cos,
    Exp,
    Ln,
    Sqrt,
    Abs,
    Mu,
    DMu,
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Num(f64),
    T,
    Neg(Box<Node>),
    Add(Box<Node>, Box<Node>),
    Sub(Box<Node>, Box<Node>),
    Mul(Box<Node>, Box<Node>),
    Div(Box<Node>, Box<Node>),
    Pow(Box<Node>, Box<Node>),
    Call(Func, Box<Node>),
}

/// A parsed expression in the single variable `t`.
#[derive(Debug, Clone)]
pub struct Expr {
    source: String,
    root: Node,
    uses_mu: bool,
}

impl Expr {
    pub fn parse(src: &str) -> Result<Self> {
        let mut p = Parser { s: src.as_bytes(), pos: 0, uses_mu: false };
        let root = p.expr()?;
        p.skip_ws();
        if p.pos != p.s.len() {
            return Err(p.err("unexpected trailing input"));
        }
        Ok(Self { source: src.to_string(), root: fold(root), uses_mu: p.uses_mu })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn uses_growth_rate(&self) -> bool {
        self.uses_mu
    }

    /// Evaluates at `t`. `mu`/`dmu` calls need `g`; without it they yield NaN.
    pub fn eval(&self, t: f64, g: Option<&GrowthRate>) -> f64 {
        eval(&self.root, t, g)
    }

    /// Returns `Some(c)` when the expression does not depend on `t`.
    pub fn as_constant(&self) -> Option<f64> {
        match self.root {
            Node::Num(v) => Some(v),
            _ => None,
        }
    }

    /// Binds the growth rate and returns a shareable closure `t -> value`.
    pub fn bind(&self, g: &GrowthRate) -> Arc<dyn Fn(f64) -> f64 + Send + Sync> {
        let root = self.root.clone();
        let g = g.clone();
        Arc::new(move |t| eval(&root, t, Some(&g)))
    }
}

fn eval(n: &Node, t: f64, g: Option<&GrowthRate>) -> f64 {
    match n {
        Node::Num(v) => *v,
        Node::T => t,
        Node::Neg(a) => -eval(a, t, g),
        Node::Add(a, b) => eval(a, t, g) + eval(b, t, g),
        Node::Sub(a, b) => eval(a, t, g) - eval(b, t, g),
        Node::Mul(a, b) => eval(a, t, g) * eval(b, t, g),
        Node::Div(a, b) => eval(a, t, g) / eval(b, t, g),
        Node::Pow(a, b) => {
            let base = eval(a, t, g);
            match **b {
                Node::Num(e) if e == e.trunc() && e.abs() <= 16.0 => base.powi(e as i32),
                _ => base.powf(eval(b, t, g)),
            }
        }
        Node::Call(f, a) => {
            let x = eval(a, t, g);
            match f {
                Func::Sin => x.sin(),
                Func::Cos => x.cos(),
                Func::Exp => x.exp(),
                Func::Ln => x.ln(),
                Func::Sqrt => x.sqrt(),
                Func::Abs => x.abs(),
                Func::Mu => g.map_or(f64::NAN, |g| g.eval(x)),
                Func::DMu => g.map_or(f64::NAN, |g| g.deriv(x)),
            }
        }
    }
}

// constant folding; keeps evaluation cheap inside the integrators
fn fold(n: Node) -> Node {
    use Node::*;
    match n {
        Neg(a) => match fold(*a) {
            Num(v) => Num(-v),
            a => Neg(Box::new(a)),
        },
        Add(a, b) => bin(fold(*a), fold(*b), Add, |x, y| x + y),
        Sub(a, b) => bin(fold(*a), fold(*b), Sub, |x, y| x - y),
        Mul(a, b) => bin(fold(*a), fold(*b), Mul, |x, y| x * y),
        Div(a, b) => bin(fold(*a), fold(*b), Div, |x, y| x / y),
        Pow(a, b) => bin(fold(*a), fold(*b), Pow, f64::powf),
        Call(f, a) => {
            let a = fold(*a);
            match (f, &a) {
                (Func::Mu | Func::DMu, _) => Call(f, Box::new(a)),
                (_, Num(_)) => Num(eval(&Call(f, Box::new(a)), 0.0, None)),
                _ => Call(f, Box::new(a)),
            }
        }
        other => other,
    }
}

fn bin(
    a: Node,
    b: Node,
    make: fn(Box<Node>, Box<Node>) -> Node,
    op: fn(f64, f64) -> f64,
) -> Node {
    match (&a, &b) {
        (Node::Num(x), Node::Num(y)) => Node::Num(op(*x, *y)),
        _ => make(Box::new(a), Box::new(b)),
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    uses_mu: bool,
}

impl Parser<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Expression(format!("{msg} at byte {}", self.pos))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.s.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expr(&mut self) -> Result<Node> {
        let mut lhs = self.term()?;
        loop {
            if self.eat(b'+') {
                lhs = Node::Add(Box::new(lhs), Box::new(self.term()?));
            } else if self.eat(b'-') {
                lhs = Node::Sub(Box::new(lhs), Box::new(self.term()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn term(&mut self) -> Result<Node> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat(b'*') {
                lhs = Node::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat(b'/') {
                lhs = Node::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Node> {
        if self.eat(b'-') {
            return Ok(Node::Neg(Box::new(self.unary()?)));
        }
        if self.eat(b'+') {
            return self.unary();
        }
        self.power()
    }

    fn power(&mut self) -> Result<Node> {
        let base = self.atom()?;
        if self.eat(b'^') {
            // right associative, binds tighter than unary minus on the left
            return Ok(Node::Pow(Box::new(base), Box::new(self.unary()?)));
        }
        Ok(base)
    }

    fn atom(&mut self) -> Result<Node> {
        match self.peek() {
            None => Err(self.err("unexpected end of input")),
            Some(b'(') => {
                self.pos += 1;
                let inner = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(inner)
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.pos < self.s.len() && self.s[self.pos].is_ascii_alphanumeric() {
                    self.pos += 1;
                }
                let ident = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
                let func = match ident {
                    "t" => return Ok(Node::T),
                    "pi" => return Ok(Node::Num(std::f64::consts::PI)),
                    "e" => return Ok(Node::Num(std::f64::consts::E)),
                    "sin" => Func::Sin,
                    "cos" => Func::Cos,
                    "exp" => Func::Exp,
                    "ln" => Func::Ln,
                    "sqrt" => Func::Sqrt,
                    "abs" => Func::Abs,
                    "mu" => Func::Mu,
                    "dmu" => Func::DMu,
                    _ => {
                        self.pos = start;
                        return Err(self.err(&format!("unknown identifier '{ident}'")));
                    }
                };
                if matches!(func, Func::Mu | Func::DMu) {
                    self.uses_mu = true;
                }
                if !self.eat(b'(') {
                    return Err(self.err(&format!("expected '(' after '{ident}'")));
                }
                let arg = self.expr()?;
                if !self.eat(b')') {
                    return Err(self.err("expected ')'"));
                }
                Ok(Node::Call(func, Box::new(arg)))
            }
            Some(c) => Err(self.err(&format!("unexpected character '{}'", c as char))),
        }
    }

    fn number(&mut self) -> Result<Node> {
        let start = self.pos;
        let s = self.s;
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
            let save = self.pos;
            self.pos += 1;
            if self.pos < s.len() && (s[self.pos] == b'+' || s[self.pos] == b'-') {
                self.pos += 1;
            }
            if self.pos < s.len() && s[self.pos].is_ascii_digit() {
                digits(&mut self.pos);
            } else {
                self.pos = save;
            }
        }
        let text = std::str::from_utf8(&s[start..self.pos]).unwrap_or("");
        text.parse::<f64>()
            .map(Node::Num)
            .map_err(|_| Error::Expression(format!("bad number '{text}' at byte {start}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ev(s: &str, t: f64) -> f64 {
        Expr::parse(s).unwrap().eval(t, None)
    }

    #[test]
    fn precedence() {
        assert_eq!(ev("1 + 2 * 3", 0.0), 7.0);
        assert_eq!(ev("(1 + 2) * 3", 0.0), 9.0);
        assert_eq!(ev("2 ^ 3 ^ 2", 0.0), 512.0);
        assert_eq!(ev("-2 ^ 2", 0.0), -4.0);
        assert_eq!(ev("2 ^ -1", 0.0), 0.5);
        assert_eq!(ev("8 / 4 / 2", 0.0), 1.0);
        assert_eq!(ev("1 - 2 - 3", 0.0), -4.0);
    }

    #[test]
    fn variable_and_functions() {
        assert_relative_eq!(ev("-0.8 - 0.1*(t*sin(t))", 2.0), -0.8 - 0.2 * 2f64.sin());
        assert_relative_eq!(ev("exp(-t) + ln(e) + sqrt(4) + abs(-3)", 1.0), (-1f64).exp() + 6.0);
        assert_relative_eq!(ev("cos(pi)", 0.0), -1.0);
        assert_eq!(ev("1.5e-3", 0.0), 1.5e-3);
        assert_eq!(ev("2*e", 0.0), 2.0 * std::f64::consts::E);
    }

    #[test]
    fn growth_rate_calls() {
        let g = GrowthRate::exponential();
        let e = Expr::parse("0.6*dmu(t)/mu(t)").unwrap();
        assert!(e.uses_growth_rate());
        assert_relative_eq!(e.eval(1.3, Some(&g)), 0.6);
        assert!(e.eval(1.3, None).is_nan());
        let f = e.bind(&g);
        assert_relative_eq!(f(-4.0), 0.6);
    }

    #[test]
    fn constants_fold() {
        assert_eq!(Expr::parse("-(0.5 + 0.3)").unwrap().as_constant(), Some(-0.8));
        assert_eq!(Expr::parse("t").unwrap().as_constant(), None);
        assert_eq!(Expr::parse("exp(0)").unwrap().as_constant(), Some(1.0));
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "1 +", "foo(t)", "sin t", "(1", "1 2", "t $ 2", "x", "2e"] {
            assert!(Expr::parse(bad).is_err(), "{bad}");
        }
    }
}
