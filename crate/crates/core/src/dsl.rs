//! Density expressions `f(N0, M0) -> [0, 1]` for initial type-♥ densities.
//!
//! Grammar:
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor (('*' | '/') factor)*
//! factor := literal | ident | '(' expr ')'
//! ident  := N0 | M0 | K0          (K0 = N0 / M0)
//! ```
//!
//! Literals are nonnegative decimals and are kept as exact rationals, so
//! evaluation is exact.

use std::fmt;
use std::str::FromStr;

use num_traits::{Signed, Zero};

use crate::env::ColonySize;
use crate::error::{Error, Result};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Var {
    N0,
    M0,
    K0,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    fn precedence(self) -> u8 {
        match self {
            BinOp::Add | BinOp::Sub => 1,
            BinOp::Mul | BinOp::Div => 2,
        }
    }

    fn symbol(self) -> char {
        match self {
            BinOp::Add => '+',
            BinOp::Sub => '-',
            BinOp::Mul => '*',
            BinOp::Div => '/',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    /// Nonnegative literal with a terminating decimal expansion.
    Literal(Rational),
    Var(Var),
    Binary(BinOp, Box<Expr>, Box<Expr>),
}

/// A parsed density specification.
#[derive(Debug, Clone, PartialEq)]
pub struct DensitySpec {
    expr: Expr,
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Num(Rational),
    Ident(Var),
    Op(BinOp),
    Open,
    Close,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Token)>> {
    let mut out = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some(&(pos, c)) = chars.peek() {
        match c {
            c if c.is_whitespace() => {
                chars.next();
            }
            '+' => {
                chars.next();
                out.push((pos, Token::Op(BinOp::Add)));
            }
            '-' | '\u{2212}' => {
                chars.next();
                out.push((pos, Token::Op(BinOp::Sub)));
            }
            '*' => {
                chars.next();
                out.push((pos, Token::Op(BinOp::Mul)));
            }
            '/' => {
                chars.next();
                out.push((pos, Token::Op(BinOp::Div)));
            }
            '(' => {
                chars.next();
                out.push((pos, Token::Open));
            }
            ')' => {
                chars.next();
                out.push((pos, Token::Close));
            }
            c if c.is_ascii_digit() || c == '.' => {
                let mut end = pos;
                while let Some(&(p, d)) = chars.peek() {
                    if d.is_ascii_digit() || d == '.' {
                        end = p + d.len_utf8();
                        chars.next();
                    } else {
                        break;
                    }
                }
                let lit = &text[pos..end];
                let value = rational::parse_unsigned_decimal(lit).ok_or_else(|| Error::Syntax {
                    offset: pos,
                    message: format!("malformed number {lit:?}"),
                })?;
                out.push((pos, Token::Num(value)));
            }
            c if c.is_alphabetic() || c == '_' => {
                let mut end = pos;
                while let Some(&(p, d)) = chars.peek() {
                    if d.is_alphanumeric() || d == '_' {
                        end = p + d.len_utf8();
                        chars.next();
                    } else {
                        break;
                    }
                }
                let name = &text[pos..end];
                let var = match name {
                    "N0" => Var::N0,
                    "M0" => Var::M0,
                    "K0" => Var::K0,
                    _ => {
                        return Err(Error::UnknownIdentifier {
                            name: name.to_string(),
                            offset: pos,
                        })
                    }
                };
                out.push((pos, Token::Ident(var)));
            }
            other => {
                return Err(Error::Syntax {
                    offset: pos,
                    message: format!("unexpected character {other:?}"),
                })
            }
        }
    }
    Ok(out)
}

struct Parser {
    tokens: Vec<(usize, Token)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.tokens.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.tokens.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn expr(&mut self) -> Result<Expr> {
        let mut lhs = self.term()?;
        while let Some(Token::Op(op @ (BinOp::Add | BinOp::Sub))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.term()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn term(&mut self) -> Result<Expr> {
        let mut lhs = self.factor()?;
        while let Some(Token::Op(op @ (BinOp::Mul | BinOp::Div))) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.factor()?;
            lhs = Expr::Binary(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn factor(&mut self) -> Result<Expr> {
        let offset = self.offset();
        match self.peek().cloned() {
            Some(Token::Num(v)) => {
                self.pos += 1;
                Ok(Expr::Literal(v))
            }
            Some(Token::Ident(v)) => {
                self.pos += 1;
                Ok(Expr::Var(v))
            }
            Some(Token::Open) => {
                self.pos += 1;
                let inner = self.expr()?;
                match self.peek() {
                    Some(Token::Close) => {
                        self.pos += 1;
                        Ok(inner)
                    }
                    _ => Err(Error::Syntax {
                        offset: self.offset(),
                        message: "expected ')'".into(),
                    }),
                }
            }
            Some(tok) => Err(Error::Syntax {
                offset,
                message: format!("unexpected token {tok:?}"),
            }),
            None => Err(Error::Syntax {
                offset,
                message: "unexpected end of input".into(),
            }),
        }
    }
}

pub fn parse_density(text: &str) -> Result<DensitySpec> {
    let tokens = tokenize(text)?;
    let mut p = Parser {
        tokens,
        pos: 0,
        end: text.len(),
    };
    let expr = p.expr()?;
    if p.pos != p.tokens.len() {
        return Err(Error::Syntax {
            offset: p.offset(),
            message: "trailing input".into(),
        });
    }
    Ok(DensitySpec { expr })
}

impl FromStr for DensitySpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_density(s)
    }
}

impl Expr {
    /// Exact value, without the `[0, 1]` range check.
    pub fn eval(&self, size: ColonySize) -> Result<Rational> {
        match self {
            Expr::Literal(v) => Ok(v.clone()),
            Expr::Var(Var::N0) => Ok(rational::int(size.n as i64)),
            Expr::Var(Var::M0) => Ok(rational::int(size.m as i64)),
            Expr::Var(Var::K0) => {
                if size.m == 0 {
                    return Err(Error::DivisionByZero);
                }
                Ok(size.k_ratio())
            }
            Expr::Binary(op, a, b) => {
                let a = a.eval(size)?;
                let b = b.eval(size)?;
                Ok(match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div => {
                        if b.is_zero() {
                            return Err(Error::DivisionByZero);
                        }
                        a / b
                    }
                })
            }
        }
    }

    fn precedence(&self) -> u8 {
        match self {
            Expr::Binary(op, _, _) => op.precedence(),
            _ => 3,
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Literal(v) => match rational::to_exact_decimal(v) {
                Some(s) => f.write_str(&s),
                None => write!(f, "({}/{})", v.numer(), v.denom()),
            },
            Expr::Var(Var::N0) => f.write_str("N0"),
            Expr::Var(Var::M0) => f.write_str("M0"),
            Expr::Var(Var::K0) => f.write_str("K0"),
            Expr::Binary(op, a, b) => {
                let p = op.precedence();
                if a.precedence() < p {
                    write!(f, "({a})")?;
                } else {
                    write!(f, "{a}")?;
                }
                write!(f, " {} ", op.symbol())?;
                // Left associativity: equal-precedence right operands need parens.
                if b.precedence() <= p {
                    write!(f, "({b})")
                } else {
                    write!(f, "{b}")
                }
            }
        }
    }
}

impl fmt::Display for DensitySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.expr.fmt(f)
    }
}

impl DensitySpec {
    pub fn constant(value: Rational) -> Self {
        Self {
            expr: Expr::Literal(value),
        }
    }

    pub fn from_expr(expr: Expr) -> Self {
        Self { expr }
    }

    pub fn expr(&self) -> &Expr {
        &self.expr
    }

    /// Exact density at a colony of sizes `(N, M)`; errors outside `[0, 1]`.
    pub fn eval(&self, size: ColonySize) -> Result<Rational> {
        let v = self.expr.eval(size)?;
        if v.is_negative() || v > rational::int(1) {
            return Err(Error::DensityOutOfRange {
                value: rational::to_f64(&v),
                n: size.n,
                m: size.m,
            });
        }
        Ok(v)
    }

    pub fn eval_f64(&self, size: ColonySize) -> Result<f64> {
        self.eval(size).map(|v| rational::to_f64(&v))
    }

    /// Densities over the elliptic box `{2..=k}^2`, indexed by
    /// [`DensityTable::get`].
    pub fn table(&self, k: u32) -> Result<DensityTable> {
        let side = (k + 1) as usize;
        let mut values = vec![f64::NAN; side * side];
        for n in 2..=k {
            for m in 2..=k {
                values[n as usize * side + m as usize] = self.eval_f64(ColonySize::new(n, m))?;
            }
        }
        Ok(DensityTable { side, values })
    }
}

/// `eval_density(spec, N, M)`.
pub fn eval_density(spec: &DensitySpec, n: u32, m: u32) -> Result<Rational> {
    spec.eval(ColonySize::new(n, m))
}

/// Precomputed `f64` densities for Monte Carlo inner loops.
#[derive(Debug, Clone)]
pub struct DensityTable {
    side: usize,
    values: Vec<f64>,
}

impl DensityTable {
    #[inline]
    pub fn get(&self, size: ColonySize) -> f64 {
        self.values[size.n as usize * self.side + size.m as usize]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::frac;
    use proptest::prelude::*;

    fn at(text: &str, n: u32, m: u32) -> Result<Rational> {
        eval_density(&parse_density(text)?, n, m)
    }

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_density("0.5").unwrap().expr(),
            &Expr::Literal(frac(1, 2))
        );
        assert_eq!(
            parse_density("1/N0").unwrap().expr(),
            &Expr::Binary(
                BinOp::Div,
                Box::new(Expr::Literal(frac(1, 1))),
                Box::new(Expr::Var(Var::N0))
            )
        );
        let nested = parse_density("0.25*(1+K0)").unwrap();
        assert_eq!(
            nested.expr(),
            &Expr::Binary(
                BinOp::Mul,
                Box::new(Expr::Literal(frac(1, 4))),
                Box::new(Expr::Binary(
                    BinOp::Add,
                    Box::new(Expr::Literal(frac(1, 1))),
                    Box::new(Expr::Var(Var::K0))
                ))
            )
        );
    }

    #[test]
    fn precedence_and_associativity() {
        assert_eq!(at("1 - 0.25 - 0.25", 2, 2).unwrap(), frac(1, 2));
        assert_eq!(at("1/2/2", 2, 2).unwrap(), frac(1, 4));
        assert_eq!(at("0.5 + 0.25 * 2 / 4", 2, 2).unwrap(), frac(5, 8));
        assert_eq!(at("1 \u{2212} 0.5", 2, 2).unwrap(), frac(1, 2));
    }

    #[test]
    fn eval_examples() {
        for (n, m) in [(2, 2), (3, 2), (5, 7)] {
            assert_eq!(at("0.5", n, m).unwrap(), frac(1, 2));
        }
        assert_eq!(at("1/N0", 2, 2).unwrap(), frac(1, 2));
        assert_eq!(at("1/N0", 3, 2).unwrap(), frac(1, 3));
        assert!(matches!(at("K0", 3, 2), Err(Error::DensityOutOfRange { .. })));
        assert_eq!(at("K0", 2, 3).unwrap(), frac(2, 3));
        assert!(matches!(at("1 - K0", 3, 2), Err(Error::DensityOutOfRange { .. })));
        assert_eq!(at("0.5/(N0-2)", 2, 2), Err(Error::DivisionByZero));
    }

    #[test]
    fn syntax_errors_carry_offsets() {
        assert!(matches!(parse_density("1 +"), Err(Error::Syntax { offset: 3, .. })));
        assert!(matches!(parse_density("(1"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(parse_density("1 2"), Err(Error::Syntax { offset: 2, .. })));
        assert!(matches!(parse_density("1.2.3"), Err(Error::Syntax { offset: 0, .. })));
        assert!(matches!(parse_density("0.5 $"), Err(Error::Syntax { offset: 4, .. })));
        assert!(matches!(parse_density(""), Err(Error::Syntax { offset: 0, .. })));
        assert_eq!(
            parse_density("1/X0"),
            Err(Error::UnknownIdentifier {
                name: "X0".into(),
                offset: 2
            })
        );
    }

    #[test]
    fn printing() {
        assert_eq!(parse_density("0.25*(1+K0)").unwrap().to_string(), "0.25 * (1 + K0)");
        assert_eq!(parse_density("1-(0.5-0.25)").unwrap().to_string(), "1 - (0.5 - 0.25)");
        assert_eq!(parse_density("(1-0.5)-0.25").unwrap().to_string(), "1 - 0.5 - 0.25");
        assert_eq!(parse_density("1/(N0*M0)").unwrap().to_string(), "1 / (N0 * M0)");
    }

    #[test]
    fn density_table_matches_exact() {
        let spec = parse_density("1/N0").unwrap();
        let t = spec.table(3).unwrap();
        assert_eq!(t.get(ColonySize::new(3, 2)), 1.0 / 3.0);
        assert!(parse_density("K0").unwrap().table(3).is_err());
    }

    fn arb_expr() -> impl Strategy<Value = Expr> {
        let leaf = prop_oneof![
            (0u32..2000, 0u32..4).prop_map(|(d, p)| Expr::Literal(
                frac(d as i64, 10i64.pow(p))
            )),
            Just(Expr::Var(Var::N0)),
            Just(Expr::Var(Var::M0)),
            Just(Expr::Var(Var::K0)),
        ];
        leaf.prop_recursive(5, 40, 2, |inner| {
            (
                prop_oneof![Just(BinOp::Add), Just(BinOp::Sub), Just(BinOp::Mul), Just(BinOp::Div)],
                inner.clone(),
                inner,
            )
                .prop_map(|(op, a, b)| Expr::Binary(op, Box::new(a), Box::new(b)))
        })
    }

    proptest! {
        #[test]
        fn print_parse_round_trip(expr in arb_expr(), n in 2u32..6, m in 2u32..6) {
            let printed = expr.to_string();
            let reparsed = parse_density(&printed).unwrap();
            let size = ColonySize::new(n, m);
            prop_assert_eq!(reparsed.expr().eval(size), expr.eval(size));
            prop_assert_eq!(reparsed.to_string(), printed);
        }

        #[test]
        fn eval_is_total_or_declared_error(expr in arb_expr(), n in 2u32..6, m in 2u32..6) {
            let spec = DensitySpec::from_expr(expr);
            match spec.eval(ColonySize::new(n, m)) {
                Ok(v) => prop_assert!(!v.is_negative() && v <= rational::int(1)),
                Err(Error::DivisionByZero) | Err(Error::DensityOutOfRange { .. }) => {}
                Err(e) => prop_assert!(false, "unexpected error {e}"),
            }
        }
    }
}
