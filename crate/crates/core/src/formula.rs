//! Model formulas and the design matrices they induce.
//!
//! ```text
//! formula  := response "~" ("1" | term ("+" term)*)
//! response := name | "I(" name cmp number ")"
//! term     := factor (":" factor)*
//! factor   := name | fn "(" name ")" | "I(" name cmp number ")"
//! fn       := "sq" | "sqrt" | "ssqrt" | "log"
//! cmp      := ">" | ">=" | "<" | "<="
//! ```
//!
//! An intercept column is always prepended to the design.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    Identity,
    Square,
    Sqrt,
    /// sign(v)·√|v|, defined for every real.
    SignedSqrt,
    Log,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparison {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparison {
    pub fn holds(self, a: f64, b: f64) -> bool {
        match self {
            Comparison::Gt => a > b,
            Comparison::Ge => a >= b,
            Comparison::Lt => a < b,
            Comparison::Le => a <= b,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
            Comparison::Lt => "<",
            Comparison::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Factor {
    Column { name: String, transform: Transform },
    Indicator { name: String, cmp: Comparison, threshold: f64 },
}

impl Factor {
    pub fn column(name: &str) -> Self {
        Factor::Column {
            name: name.to_string(),
            transform: Transform::Identity,
        }
    }

    pub fn transformed(name: &str, transform: Transform) -> Self {
        Factor::Column {
            name: name.to_string(),
            transform,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Factor::Column { name, .. } | Factor::Indicator { name, .. } => name,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        match self {
            Factor::Column { transform, .. } => match transform {
                Transform::Identity => v,
                Transform::Square => v * v,
                Transform::Sqrt => v.sqrt(),
                Transform::SignedSqrt => v.signum() * v.abs().sqrt(),
                Transform::Log => v.ln(),
            },
            Factor::Indicator { cmp, threshold, .. } => {
                if cmp.holds(v, *threshold) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn check(&self, v: f64) -> Result<()> {
        match self {
            Factor::Column {
                name,
                transform: Transform::Log,
            } if !(v > 0.0) => Err(Error::InvalidTransformInput {
                transform: "log",
                requirement: "positive",
                column: name.clone(),
            }),
            Factor::Column {
                name,
                transform: Transform::Sqrt,
            } if !(v >= 0.0) => Err(Error::InvalidTransformInput {
                transform: "sqrt",
                requirement: "non-negative",
                column: name.clone(),
            }),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Column { name, transform } => match transform {
                Transform::Identity => write!(f, "{name}"),
                Transform::Square => write!(f, "sq({name})"),
                Transform::Sqrt => write!(f, "sqrt({name})"),
                Transform::SignedSqrt => write!(f, "ssqrt({name})"),
                Transform::Log => write!(f, "log({name})"),
            },
            Factor::Indicator {
                name,
                cmp,
                threshold,
            } => write!(f, "I({name}{}{threshold})", cmp.symbol()),
        }
    }
}

/// Product of one or more factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn single(factor: Factor) -> Self {
        Self {
            factors: vec![factor],
        }
    }

    pub fn product(names: &[&str]) -> Self {
        Self {
            factors: names.iter().map(|n| Factor::column(n)).collect(),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, factor) in self.factors.iter().enumerate() {
            if k > 0 {
                write!(f, ":")?;
            }
            write!(f, "{factor}")?;
        }
        Ok(())
    }
}

/// Left-hand side of a formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Response {
    Column(String),
    Indicator {
        name: String,
        cmp: Comparison,
        threshold: f64,
    },
}

impl Response {
    pub fn name(&self) -> &str {
        match self {
            Response::Column(n) | Response::Indicator { name: n, .. } => n,
        }
    }

    /// Value of the response for an observed outcome.
    pub fn apply(&self, v: f64) -> f64 {
        match self {
            Response::Column(_) => v,
            Response::Indicator { cmp, threshold, .. } => {
                if cmp.holds(v, *threshold) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn is_indicator(&self) -> bool {
        matches!(self, Response::Indicator { .. })
    }
}

impl fmt::Display for Response {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Response::Column(n) => write!(f, "{n}"),
            Response::Indicator {
                name,
                cmp,
                threshold,
            } => write!(f, "I({name}{}{threshold})", cmp.symbol()),
        }
    }
}

/// Right-hand side: an intercept plus the listed terms.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureMap {
    pub terms: Vec<Term>,
}

impl FeatureMap {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn intercept_only() -> Self {
        Self { terms: Vec::new() }
    }

    /// Main effects of the named columns.
    pub fn linear(names: &[&str]) -> Self {
        Self::new(names.iter().map(|n| Term::single(Factor::column(n))).collect())
    }

    /// The named columns, each under `transform`.
    pub fn transformed(names: &[&str], transform: Transform) -> Self {
        Self::new(
            names
                .iter()
                .map(|n| Term::single(Factor::transformed(n, transform)))
                .collect(),
        )
    }

    /// Every product of distinct columns with order in `orders`.
    pub fn interactions(names: &[&str], orders: std::ops::RangeInclusive<usize>) -> Self {
        Self::transformed_interactions(names, orders, Transform::Identity)
    }

    /// As [`FeatureMap::interactions`], with every factor under `transform`.
    pub fn transformed_interactions(
        names: &[&str],
        orders: std::ops::RangeInclusive<usize>,
        transform: Transform,
    ) -> Self {
        let k = names.len();
        let mut terms = Vec::new();
        for order in orders {
            for mask in 1u32..(1 << k) {
                if mask.count_ones() as usize != order {
                    continue;
                }
                terms.push(Term {
                    factors: (0..k)
                        .filter(|b| mask & (1 << b) != 0)
                        .map(|b| Factor::transformed(names[b], transform))
                        .collect(),
                });
            }
        }
        Self::new(terms)
    }

    /// Number of design columns, intercept included.
    pub fn width(&self) -> usize {
        self.terms.len() + 1
    }

    pub fn labels(&self) -> Vec<String> {
        std::iter::once("(intercept)".to_string())
            .chain(self.terms.iter().map(Term::to_string))
            .collect()
    }

    /// Column names referenced anywhere in the map.
    pub fn referenced_columns(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for t in &self.terms {
            for f in &t.factors {
                if !out.contains(&f.name()) {
                    out.push(f.name());
                }
            }
        }
        out
    }

    /// Design matrix with a leading intercept column.
    pub fn design(&self, x: &Matrix, column_names: &[String]) -> Result<Matrix> {
        let bound: Vec<Vec<(usize, &Factor)>> = self
            .terms
            .iter()
            .map(|t| {
                t.factors
                    .iter()
                    .map(|f| {
                        column_names
                            .iter()
                            .position(|c| c == f.name())
                            .map(|j| (j, f))
                            .ok_or_else(|| Error::UnknownColumn(f.name().to_string()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<_>>()?;
        let width = self.width();
        let mut data = Vec::with_capacity(x.rows() * width);
        for row in x.row_iter() {
            data.push(1.0);
            for term in &bound {
                let mut v = 1.0;
                for &(j, factor) in term {
                    factor.check(row[j])?;
                    v *= factor.apply(row[j]);
                }
                data.push(v);
            }
        }
        Matrix::new(x.rows(), width, data)
    }
}

impl fmt::Display for FeatureMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "1");
        }
        for (k, t) in self.terms.iter().enumerate() {
            if k > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// A parsed `response ~ terms` formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormulaSpec {
    pub response: Response,
    pub features: FeatureMap,
}

impl FormulaSpec {
    pub fn new(response: Response, features: FeatureMap) -> Self {
        Self { response, features }
    }

    /// Checks that every referenced covariate exists.
    pub fn bind(&self, column_names: &[String]) -> Result<()> {
        for name in self.features.referenced_columns() {
            if !column_names.iter().any(|c| c == name) {
                return Err(Error::UnknownColumn(name.to_string()));
            }
        }
        Ok(())
    }
}

impl fmt::Display for FormulaSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ~ {}", self.response, self.features)
    }
}

impl FromStr for FormulaSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_formula(s)
    }
}

pub fn parse_formula(text: &str) -> Result<FormulaSpec> {
    let tokens = lex(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let response = p.response()?;
    p.expect(&Tok::Tilde, &["~"])?;
    if p.peek() == Some(&Tok::Number(1.0)) {
        p.pos += 1;
        if p.peek().is_some() {
            return Err(p.error(&["end of input"]));
        }
        return Ok(FormulaSpec {
            response,
            features: FeatureMap::intercept_only(),
        });
    }
    let mut terms = vec![p.term()?];
    loop {
        match p.peek() {
            Some(Tok::Plus) => {
                p.pos += 1;
                terms.push(p.term()?);
            }
            None => break,
            Some(_) => return Err(p.error(&["+", ":", "end of input"])),
        }
    }
    Ok(FormulaSpec {
        response,
        features: FeatureMap::new(terms),
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Number(f64),
    Tilde,
    Plus,
    Colon,
    LParen,
    RParen,
    Cmp(Comparison),
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let bytes = text.as_bytes();
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
            b'~' => out.push((start, Tok::Tilde)),
            b'+' => out.push((start, Tok::Plus)),
            b':' => out.push((start, Tok::Colon)),
            b'(' => out.push((start, Tok::LParen)),
            b')' => out.push((start, Tok::RParen)),
            b'>' | b'<' => {
                let eq = bytes.get(i + 1) == Some(&b'=');
                let cmp = match (c, eq) {
                    (b'>', false) => Comparison::Gt,
                    (b'>', true) => Comparison::Ge,
                    (_, false) => Comparison::Lt,
                    (_, true) => Comparison::Le,
                };
                if eq {
                    i += 1;
                }
                out.push((start, Tok::Cmp(cmp)));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
                continue;
            }
            c if c.is_ascii_digit() || c == b'-' || c == b'.' => {
                i += 1;
                while i < bytes.len() {
                    let d = bytes[i];
                    let exp_sign =
                        (d == b'-' || d == b'+') && matches!(bytes[i - 1], b'e' | b'E');
                    if d.is_ascii_digit() || d == b'.' || d == b'e' || d == b'E' || exp_sign {
                        i += 1;
                    } else {
                        break;
                    }
                }
                match text[start..i].parse::<f64>() {
                    Ok(v) if v.is_finite() => out.push((start, Tok::Number(v))),
                    _ => {
                        return Err(Error::Syntax {
                            offset: start,
                            expected: vec!["number".into()],
                        })
                    }
                }
                continue;
            }
            _ => {
                return Err(Error::Syntax {
                    offset: start,
                    expected: vec![
                        "name".into(),
                        "number".into(),
                        "one of ~ + : ( ) > >= < <=".into(),
                    ],
                })
            }
        }
        i += 1;
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

const FACTOR_START: &[&str] = &["name", "sq(", "sqrt(", "log(", "I("];

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map_or(self.end, |(o, _)| *o)
    }

    fn error(&self, expected: &[&str]) -> Error {
        Error::Syntax {
            offset: self.offset(),
            expected: expected.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn expect(&mut self, tok: &Tok, expected: &[&str]) -> Result<()> {
        if self.peek() == Some(tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(expected))
        }
    }

    fn name(&mut self) -> Result<String> {
        match self.peek() {
            Some(Tok::Ident(n)) => {
                let n = n.clone();
                self.pos += 1;
                Ok(n)
            }
            _ => Err(self.error(&["name"])),
        }
    }

    /// Parses `name cmp number )` after `I(`.
    fn indicator_body(&mut self) -> Result<(String, Comparison, f64)> {
        let name = self.name()?;
        let cmp = match self.peek() {
            Some(Tok::Cmp(c)) => *c,
            _ => return Err(self.error(&[">", ">=", "<", "<="])),
        };
        self.pos += 1;
        let threshold = match self.peek() {
            Some(Tok::Number(v)) => *v,
            _ => return Err(self.error(&["number"])),
        };
        self.pos += 1;
        self.expect(&Tok::RParen, &[")"])?;
        Ok((name, cmp, threshold))
    }

    fn is_call(&self) -> bool {
        matches!(self.tokens.get(self.pos + 1), Some((_, Tok::LParen)))
    }

    fn response(&mut self) -> Result<Response> {
        match self.peek() {
            Some(Tok::Ident(n)) if n == "I" && self.is_call() => {
                self.pos += 2;
                let (name, cmp, threshold) = self.indicator_body()?;
                Ok(Response::Indicator {
                    name,
                    cmp,
                    threshold,
                })
            }
            Some(Tok::Ident(_)) if !self.is_call() => Ok(Response::Column(self.name()?)),
            _ => Err(self.error(&["name", "I("])),
        }
    }

    fn factor(&mut self) -> Result<Factor> {
        let Some(Tok::Ident(head)) = self.peek().cloned() else {
            return Err(self.error(FACTOR_START));
        };
        if !self.is_call() {
            self.pos += 1;
            return Ok(Factor::column(&head));
        }
        let transform = match head.as_str() {
            "I" => {
                self.pos += 2;
                let (name, cmp, threshold) = self.indicator_body()?;
                return Ok(Factor::Indicator {
                    name,
                    cmp,
                    threshold,
                });
            }
            "sq" => Transform::Square,
            "sqrt" => Transform::Sqrt,
            "ssqrt" => Transform::SignedSqrt,
            "log" => Transform::Log,
            _ => return Err(self.error(FACTOR_START)),
        };
        self.pos += 2;
        let name = self.name()?;
        self.expect(&Tok::RParen, &[")"])?;
        Ok(Factor::transformed(&name, transform))
    }

    fn term(&mut self) -> Result<Term> {
        let mut factors = vec![self.factor()?];
        while self.peek() == Some(&Tok::Colon) {
            self.pos += 1;
            factors.push(self.factor()?);
        }
        Ok(Term { factors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interaction_term() {
        let f = parse_formula("y ~ z1 + z2 + z1:z2").unwrap();
        assert_eq!(f.response, Response::Column("y".into()));
        assert_eq!(f.features.terms.len(), 3);
        assert_eq!(f.features.terms[2], Term::product(&["z1", "z2"]));
    }

    #[test]
    fn indicator_response_and_sqrt() {
        let f = parse_formula("I(y>240) ~ x1 + sqrt(x2)").unwrap();
        assert_eq!(
            f.response,
            Response::Indicator {
                name: "y".into(),
                cmp: Comparison::Gt,
                threshold: 240.0
            }
        );
        assert_eq!(
            f.features.terms[1].factors[0],
            Factor::transformed("x2", Transform::Sqrt)
        );
    }

    #[test]
    fn malformed_offset() {
        match parse_formula("y ~ + z1") {
            Err(Error::Syntax { offset, expected }) => {
                assert_eq!(offset, 4);
                assert!(expected.contains(&"name".to_string()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn other_errors() {
        for (text, offset) in [
            ("y z1", 2),
            ("y ~", 3),
            ("y ~ z1 z2", 7),
            ("y ~ foo(z1)", 4),
            ("y ~ sqrt(z1", 11),
            ("y ~ I(z1 3)", 9),
            ("~ z1", 0),
            ("y ~ z1 + $", 9),
        ] {
            match parse_formula(text) {
                Err(Error::Syntax { offset: o, .. }) => assert_eq!(o, offset, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn indicator_factor_and_display_round_trip() {
        let text = "r ~ x1 + x1:I(x1>=3) + log(x2) + sq(x3) + I(x4<-1.5)";
        let f = parse_formula(text).unwrap();
        assert_eq!(f.to_string(), text);
        assert_eq!(parse_formula(&f.to_string()).unwrap(), f);
    }

    #[test]
    fn intercept_only_formula() {
        let f = parse_formula("r ~ 1").unwrap();
        assert_eq!(f.features, FeatureMap::intercept_only());
        assert_eq!(f.to_string(), "r ~ 1");
        assert!(matches!(parse_formula("r ~ 1 + x"), Err(Error::Syntax { offset: 6, .. })));
    }

    #[test]
    fn design_matrix_columns() {
        let x = Matrix::from_rows(&[[1.0, 4.0], [2.0, 9.0], [3.0, 16.0]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let f = parse_formula("y ~ a + sqrt(b) + a:b + I(a>=2) + sq(a)").unwrap();
        let d = f.features.design(&x, &names).unwrap();
        assert_eq!(d.row(0), &[1.0, 1.0, 2.0, 4.0, 0.0, 1.0]);
        assert_eq!(d.row(2), &[1.0, 3.0, 4.0, 48.0, 1.0, 9.0]);
        let bad = parse_formula("y ~ log(c)").unwrap();
        assert!(matches!(bad.features.design(&x, &names), Err(Error::UnknownColumn(_))));
    }

    #[test]
    fn transform_domain_checked() {
        let x = Matrix::from_rows(&[[1.0], [0.0], [-1.0]]).unwrap();
        let names = vec!["a".to_string()];
        let log = FeatureMap::transformed(&["a"], Transform::Log);
        assert!(matches!(
            log.design(&x, &names),
            Err(Error::InvalidTransformInput { transform: "log", .. })
        ));
        let sqrt = FeatureMap::transformed(&["a"], Transform::Sqrt);
        assert!(sqrt.design(&x, &names).is_err());
        let ssqrt = FeatureMap::transformed(&["a"], Transform::SignedSqrt);
        assert_eq!(ssqrt.design(&x, &names).unwrap().column(1), vec![1.0, 0.0, -1.0]);
        assert_eq!(parse_formula("y ~ ssqrt(a)").unwrap().features, ssqrt);
    }

    #[test]
    fn all_interactions_count() {
        let m = FeatureMap::interactions(&["z1", "z2", "z3", "z4"], 1..=4);
        assert_eq!(m.terms.len(), 15);
        let m2 = FeatureMap::interactions(&["z1", "z2", "z3", "z4"], 2..=4);
        assert_eq!(m2.terms.len(), 11);
        let s = FeatureMap::transformed_interactions(&["x1", "x2"], 1..=2, Transform::SignedSqrt);
        assert_eq!(s.to_string(), "ssqrt(x1) + ssqrt(x2) + ssqrt(x1):ssqrt(x2)");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn never_panics_on_ascii(s in "[ -~]{0,40}") {
            match parse_formula(&s) {
                Ok(f) => {
                    let again = parse_formula(&f.to_string()).unwrap();
                    prop_assert_eq!(again, f);
                }
                Err(Error::Syntax { offset, .. }) => prop_assert!(offset <= s.len()),
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }

        #[test]
        fn never_panics_on_formula_alphabet(s in "[yzI()~+:<>=0-9. sqrtlog_-]{0,30}") {
            let _ = parse_formula(&s);
        }
    }
}
