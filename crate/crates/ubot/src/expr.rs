//! Density expressions: sums of scaled Gaussians and constants.
//!
//! ```text
//! expr   := term (('+' | '-') term)*
//! term   := factor ('*' factor)*          at most one gauss per term
//! factor := number | gauss '(' center ',' width ')'
//! center := number | '[' number (',' number)* ']'
//! ```
//!
//! `gauss(c, w)` is `exp(-|x - c|^2 / (2 w^2))`, unnormalized.

use ubot_core::mesh::Point;

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub weight: f64,
    pub center: Vec<f64>,
    pub width: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensityExpr {
    pub constant: f64,
    pub gaussians: Vec<Gaussian>,
}

impl DensityExpr {
    pub fn parse(src: &str) -> Result<Self, String> {
        Parser { s: src.as_bytes(), pos: 0 }.expr()
    }

    pub fn eval(&self, x: &Point) -> f64 {
        self.constant
            + self
                .gaussians
                .iter()
                .map(|g| {
                    let r2: f64 = g.center.iter().zip(x).map(|(c, xi)| (xi - c) * (xi - c)).sum();
                    g.weight * (-r2 / (2.0 * g.width * g.width)).exp()
                })
                .sum::<f64>()
    }

    /// Largest center dimension used; constants alone give 0.
    pub fn dim(&self) -> usize {
        self.gaussians.iter().map(|g| g.center.len()).max().unwrap_or(0)
    }
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: &str) -> Result<T, String> {
        Err(format!("{msg} at column {}", self.pos + 1))
    }

    fn ws(&mut self) {
        while self.pos < self.s.len() && self.s[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn eat(&mut self, c: u8) -> bool {
        self.ws();
        if self.s.get(self.pos) == Some(&c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<(), String> {
        if self.eat(c) {
            Ok(())
        } else {
            self.err(&format!("expected `{}`", c as char))
        }
    }

    fn number(&mut self) -> Result<f64, String> {
        self.ws();
        let start = self.pos;
        let mut prev = b' ';
        while let Some(&c) = self.s.get(self.pos) {
            let sign_ok = (c == b'-' || c == b'+') && (self.pos == start || prev == b'e' || prev == b'E');
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || sign_ok {
                prev = c;
                self.pos += 1;
            } else {
                break;
            }
        }
        let text = std::str::from_utf8(&self.s[start..self.pos]).unwrap_or("");
        match text.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => {
                self.pos = start;
                self.err("expected a number")
            }
        }
    }

    fn expr(&mut self) -> Result<DensityExpr, String> {
        let mut out = DensityExpr { constant: 0.0, gaussians: Vec::new() };
        let mut sign = 1.0;
        loop {
            self.term(sign, &mut out)?;
            if self.eat(b'+') {
                sign = 1.0;
            } else if self.eat(b'-') {
                sign = -1.0;
            } else {
                break;
            }
        }
        self.ws();
        if self.pos != self.s.len() {
            return self.err("unexpected input");
        }
        Ok(out)
    }

    fn term(&mut self, sign: f64, out: &mut DensityExpr) -> Result<(), String> {
        let mut coef = sign;
        let mut gauss: Option<(Vec<f64>, f64)> = None;
        loop {
            self.ws();
            if self.s[self.pos..].starts_with(b"gauss") {
                if gauss.is_some() {
                    return self.err("at most one gauss per term");
                }
                self.pos += 5;
                self.expect(b'(')?;
                let center = if self.eat(b'[') {
                    let mut c = vec![self.number()?];
                    while self.eat(b',') {
                        c.push(self.number()?);
                    }
                    self.expect(b']')?;
                    c
                } else {
                    vec![self.number()?]
                };
                self.expect(b',')?;
                let w = self.number()?;
                if w <= 0.0 {
                    return self.err("gauss width must be positive");
                }
                self.expect(b')')?;
                gauss = Some((center, w));
            } else {
                coef *= self.number()?;
            }
            if !self.eat(b'*') {
                break;
            }
        }
        match gauss {
            Some((center, width)) => out.gaussians.push(Gaussian { weight: coef, center, width }),
            None => out.constant += coef,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_and_gaussians() {
        let e = DensityExpr::parse("0.5 + 2*gauss([0.25, 0.5], 0.1) - gauss(0.3,1)*3").unwrap();
        assert_eq!(e.constant, 0.5);
        assert_eq!(e.gaussians.len(), 2);
        assert_eq!(e.gaussians[1].weight, -3.0);
        assert!((e.eval(&[0.25, 0.5, 0.0]) - (2.5 - 3.0 * (-0.0025f64 / 2.0).exp())).abs() < 1e-15);
        assert_eq!(DensityExpr::parse("1e-2").unwrap().constant, 0.01);
    }

    #[test]
    fn rejects_garbage() {
        for bad in ["", "x + 1", "gauss(0, 0)", "gauss(0,1)*gauss(1,1)", "1 +", "gauss([0,1) ,1)"] {
            assert!(DensityExpr::parse(bad).is_err(), "{bad}");
        }
    }
}
