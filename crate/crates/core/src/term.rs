//! Propensity-model terms: covariate columns and simple transformations of them.
//!
//! A term is a small arithmetic expression over covariate names, e.g. `X1`,
//! `X1^2`, `X2*X4`, `exp(0.1*X1)`, `X2*(1+X1)+10`, `(0.04*X3+0.6)^2`.
//! Supported syntax: numbers, identifiers, `+ - * /`, integer powers `^k`,
//! `exp(..)` and parentheses.

use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Const(f64),
    Col(String),
    Neg(Box<Expr>),
    Add(Box<Expr>, Box<Expr>),
    Sub(Box<Expr>, Box<Expr>),
    Mul(Box<Expr>, Box<Expr>),
    Div(Box<Expr>, Box<Expr>),
    Pow(Box<Expr>, i32),
    Exp(Box<Expr>),
}

impl Expr {
    /// Evaluates the expression for every row of `data`.
    pub fn eval(&self, data: &Dataset) -> Result<Vec<f64>> {
        let n = data.n();
        Ok(match self {
            Expr::Const(c) => vec![*c; n],
            Expr::Col(name) => data
                .column(name)
                .ok_or_else(|| Error::UnknownColumn(name.clone()))?
                .to_vec(),
            Expr::Neg(a) => a.eval(data)?.into_iter().map(|v| -v).collect(),
            Expr::Add(a, b) => zip_with(a.eval(data)?, b.eval(data)?, |u, v| u + v),
            Expr::Sub(a, b) => zip_with(a.eval(data)?, b.eval(data)?, |u, v| u - v),
            Expr::Mul(a, b) => zip_with(a.eval(data)?, b.eval(data)?, |u, v| u * v),
            Expr::Div(a, b) => zip_with(a.eval(data)?, b.eval(data)?, |u, v| u / v),
            Expr::Pow(a, k) => a.eval(data)?.into_iter().map(|v| v.powi(*k)).collect(),
            Expr::Exp(a) => a.eval(data)?.into_iter().map(f64::exp).collect(),
        })
    }

    /// Column names referenced by the expression, in first-seen order.
    pub fn columns(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_columns(&mut out);
        out
    }

    fn collect_columns<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Expr::Const(_) => {}
            Expr::Col(name) => {
                if !out.contains(&name.as_str()) {
                    out.push(name);
                }
            }
            Expr::Neg(a) | Expr::Pow(a, _) | Expr::Exp(a) => a.collect_columns(out),
            Expr::Add(a, b) | Expr::Sub(a, b) | Expr::Mul(a, b) | Expr::Div(a, b) => {
                a.collect_columns(out);
                b.collect_columns(out);
            }
        }
    }
}

fn zip_with(a: Vec<f64>, b: Vec<f64>, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.into_iter().zip(b).map(|(u, v)| f(u, v)).collect()
}

/// A labelled design term.
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub label: String,
    pub expr: Expr,
}

impl Term {
    /// The identity term for a single covariate.
    pub fn column(name: &str) -> Self {
        Self { label: name.to_string(), expr: Expr::Col(name.to_string()) }
    }

    pub fn parse(input: &str) -> Result<Self> {
        let expr = Parser::new(input).parse_all()?;
        let label: String = input.chars().filter(|c| !c.is_whitespace()).collect();
        Ok(Self { label, expr })
    }

    /// Parses a comma-separated list of terms. Commas inside parentheses do
    /// not split.
    pub fn parse_list(input: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut depth = 0i32;
        let mut start = 0;
        for (i, c) in input.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => depth -= 1,
                ',' if depth == 0 => {
                    out.push(Self::parse(&input[start..i])?);
                    start = i + 1;
                }
                _ => {}
            }
        }
        if !input[start..].trim().is_empty() {
            out.push(Self::parse(&input[start..])?);
        }
        Ok(out)
    }

    pub fn eval(&self, data: &Dataset) -> Result<Vec<f64>> {
        let v = self.expr.eval(data)?;
        if let Some(row) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteTerm { term: self.label.clone(), row });
        }
        Ok(v)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Op(char),
}

struct Parser<'a> {
    input: &'a str,
    toks: Vec<Tok>,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str) -> Self {
        Self { input, toks: Vec::new(), pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::TermSyntax { input: self.input.trim().to_string(), reason: reason.into() }
    }

    fn tokenize(&mut self) -> Result<()> {
        let chars: Vec<char> = self.input.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if c.is_whitespace() {
                i += 1;
            } else if c.is_ascii_digit() || c == '.' {
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
                        i = j;
                        while i < chars.len() && chars[i].is_ascii_digit() {
                            i += 1;
                        }
                    }
                }
                let s: String = chars[start..i].iter().collect();
                let v = s.parse::<f64>().map_err(|_| self.err(format!("bad number `{s}`")))?;
                self.toks.push(Tok::Num(v));
            } else if c.is_alphabetic() || c == '_' {
                let start = i;
                while i < chars.len() && (chars[i].is_alphanumeric() || chars[i] == '_' || chars[i] == '.') {
                    i += 1;
                }
                self.toks.push(Tok::Ident(chars[start..i].iter().collect()));
            } else if "+-*/^()".contains(c) {
                self.toks.push(Tok::Op(c));
                i += 1;
            } else {
                return Err(self.err(format!("unexpected character `{c}`")));
            }
        }
        Ok(())
    }

    fn parse_all(mut self) -> Result<Expr> {
        self.tokenize()?;
        if self.toks.is_empty() {
            return Err(self.err("empty term"));
        }
        let e = self.sum()?;
        if self.pos != self.toks.len() {
            return Err(self.err("trailing input"));
        }
        Ok(e)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn eat(&mut self, op: char) -> bool {
        if self.peek() == Some(&Tok::Op(op)) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn sum(&mut self) -> Result<Expr> {
        let mut lhs = self.product()?;
        loop {
            if self.eat('+') {
                lhs = Expr::Add(Box::new(lhs), Box::new(self.product()?));
            } else if self.eat('-') {
                lhs = Expr::Sub(Box::new(lhs), Box::new(self.product()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn product(&mut self) -> Result<Expr> {
        let mut lhs = self.unary()?;
        loop {
            if self.eat('*') {
                lhs = Expr::Mul(Box::new(lhs), Box::new(self.unary()?));
            } else if self.eat('/') {
                lhs = Expr::Div(Box::new(lhs), Box::new(self.unary()?));
            } else {
                return Ok(lhs);
            }
        }
    }

    fn unary(&mut self) -> Result<Expr> {
        if self.eat('-') {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        self.power()
    }

    fn power(&mut self) -> Result<Expr> {
        let base = self.primary()?;
        if self.eat('^') {
            let neg = self.eat('-');
            match self.toks.get(self.pos).cloned() {
                Some(Tok::Num(k)) if k.fract() == 0.0 && k.abs() <= 16.0 => {
                    self.pos += 1;
                    let k = if neg { -(k as i32) } else { k as i32 };
                    Ok(Expr::Pow(Box::new(base), k))
                }
                _ => Err(self.err("exponent must be a small integer")),
            }
        } else {
            Ok(base)
        }
    }

    fn primary(&mut self) -> Result<Expr> {
        match self.toks.get(self.pos).cloned() {
            Some(Tok::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Const(v))
            }
            Some(Tok::Ident(name)) => {
                self.pos += 1;
                if self.eat('(') {
                    let arg = self.sum()?;
                    if !self.eat(')') {
                        return Err(self.err("missing `)`"));
                    }
                    match name.as_str() {
                        "exp" => Ok(Expr::Exp(Box::new(arg))),
                        _ => Err(self.err(format!("unknown function `{name}`"))),
                    }
                } else {
                    Ok(Expr::Col(name))
                }
            }
            Some(Tok::Op('(')) => {
                self.pos += 1;
                let e = self.sum()?;
                if !self.eat(')') {
                    return Err(self.err("missing `)`"));
                }
                Ok(e)
            }
            _ => Err(self.err("expected a number, name or `(`")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Dataset {
        Dataset::new(
            vec![0.0; 3],
            vec![1.0, 0.0, 1.0],
            vec![vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 4.0]],
            vec!["X1".into(), "X2".into()],
        )
        .unwrap()
    }

    #[test]
    fn evaluates_transformations() {
        let d = data();
        let t = Term::parse("X2*(1+X1)+10").unwrap();
        assert_eq!(t.eval(&d).unwrap(), vec![11.0, 7.0, 26.0]);
        let t = Term::parse("(0.5*X1 - 1)^2").unwrap();
        assert_eq!(t.eval(&d).unwrap(), vec![0.25, 0.0, 0.25]);
        let t = Term::parse("exp(0.1*X1)").unwrap();
        assert!((t.eval(&d).unwrap()[0] - 0.1f64.exp()).abs() < 1e-15);
        let t = Term::parse("-X1^2").unwrap();
        assert_eq!(t.eval(&d).unwrap(), vec![-1.0, -4.0, -9.0]);
        let t = Term::parse("1e-1*X1").unwrap();
        assert_eq!(t.eval(&d).unwrap()[1], 0.2);
    }

    #[test]
    fn unknown_column() {
        let t = Term::parse("X9 + 1").unwrap();
        assert_eq!(t.eval(&data()), Err(Error::UnknownColumn("X9".into())));
    }

    #[test]
    fn non_finite_is_an_error() {
        let t = Term::parse("X1/(X1-2)").unwrap();
        assert!(matches!(t.eval(&data()), Err(Error::NonFiniteTerm { row: 1, .. })));
    }

    #[test]
    fn list_splits_on_top_level_commas() {
        let ts = Term::parse_list("X1, exp(0.1*X1), (X1+X2)^2").unwrap();
        let labels: Vec<_> = ts.iter().map(|t| t.label.as_str()).collect();
        assert_eq!(labels, ["X1", "exp(0.1*X1)", "(X1+X2)^2"]);
        assert_eq!(ts[2].expr.columns(), ["X1", "X2"]);
    }

    #[test]
    fn syntax_errors() {
        for bad in ["", "X1 +", "(X1", "X1^0.5", "log(X1)", "X1 $ 2"] {
            assert!(Term::parse(bad).is_err(), "{bad:?} should fail");
        }
    }
}
