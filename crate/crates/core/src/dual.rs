//! Forward-mode dual numbers with a vector of partials, nestable for exact
//! second derivatives.
//!
//! A [`Dual<f64>`] carries a value and one partial per seeded direction; a
//! [`Dual<Dual<f64>>`] carries exact mixed second partials. All arithmetic
//! follows the Leibniz and chain rules, so derivatives are exact to rounding.

/// Scalar arithmetic shared by `f64` and nested [`Dual`] types.
///
/// Generic numerical kernels (expression evaluation, Gram-Schmidt, small
/// linear solves) are written against this trait so the same code path
/// produces values, gradients and Hessians.
pub trait Scalar: Clone + std::fmt::Debug {
    /// Innermost real part.
    fn value(&self) -> f64;
    /// Constant with the same dual shape as `self` (all partials zero).
    fn lift(&self, v: f64) -> Self;

    fn add(&self, rhs: &Self) -> Self;
    fn sub(&self, rhs: &Self) -> Self;
    fn mul(&self, rhs: &Self) -> Self;
    fn div(&self, rhs: &Self) -> Self;
    fn neg(&self) -> Self;

    fn sin(&self) -> Self;
    fn cos(&self) -> Self;
    fn tan(&self) -> Self;
    fn exp(&self) -> Self;
    fn ln(&self) -> Self;
    fn sqrt(&self) -> Self;
    fn abs(&self) -> Self;

    /// Integer power by repeated multiplication; exact for negative bases.
    fn powi(&self, n: i64) -> Self {
        if n < 0 {
            return self.lift(1.0).div(&self.powi(-n));
        }
        let mut acc = self.lift(1.0);
        let mut base = self.clone();
        let mut k = n;
        while k > 0 {
            if k & 1 == 1 {
                acc = acc.mul(&base);
            }
            base = base.mul(&base);
            k >>= 1;
        }
        acc
    }

    /// General power via `exp(e * ln b)`; caller checks the domain.
    fn powf(&self, e: &Self) -> Self {
        e.mul(&self.ln()).exp()
    }
}

impl Scalar for f64 {
    fn value(&self) -> f64 {
        *self
    }
    fn lift(&self, v: f64) -> Self {
        v
    }
    fn add(&self, rhs: &Self) -> Self {
        self + rhs
    }
    fn sub(&self, rhs: &Self) -> Self {
        self - rhs
    }
    fn mul(&self, rhs: &Self) -> Self {
        self * rhs
    }
    fn div(&self, rhs: &Self) -> Self {
        self / rhs
    }
    fn neg(&self) -> Self {
        -self
    }
    fn sin(&self) -> Self {
        f64::sin(*self)
    }
    fn cos(&self) -> Self {
        f64::cos(*self)
    }
    fn tan(&self) -> Self {
        f64::tan(*self)
    }
    fn exp(&self) -> Self {
        f64::exp(*self)
    }
    fn ln(&self) -> Self {
        f64::ln(*self)
    }
    fn sqrt(&self) -> Self {
        f64::sqrt(*self)
    }
    fn abs(&self) -> Self {
        f64::abs(*self)
    }
}

/// Dual number: value plus one partial derivative per seeded direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dual<T> {
    pub re: T,
    pub eps: Vec<T>,
}

impl<T: Scalar> Dual<T> {
    pub fn constant(proto: &T, v: f64, ndirs: usize) -> Self {
        Dual {
            re: proto.lift(v),
            eps: vec![proto.lift(0.0); ndirs],
        }
    }

    /// Variable seeded in direction `dir` out of `ndirs`.
    pub fn variable(proto: &T, v: f64, dir: usize, ndirs: usize) -> Self {
        let mut eps = vec![proto.lift(0.0); ndirs];
        eps[dir] = proto.lift(1.0);
        Dual {
            re: proto.lift(v),
            eps,
        }
    }

    fn unary(&self, re: T, slope: T) -> Self {
        Dual {
            re,
            eps: self.eps.iter().map(|e| slope.mul(e)).collect(),
        }
    }
}

impl<T: Scalar> Scalar for Dual<T> {
    fn value(&self) -> f64 {
        self.re.value()
    }

    fn lift(&self, v: f64) -> Self {
        Dual {
            re: self.re.lift(v),
            eps: vec![self.re.lift(0.0); self.eps.len()],
        }
    }

    fn add(&self, rhs: &Self) -> Self {
        debug_assert_eq!(self.eps.len(), rhs.eps.len());
        Dual {
            re: self.re.add(&rhs.re),
            eps: self
                .eps
                .iter()
                .zip(&rhs.eps)
                .map(|(a, b)| a.add(b))
                .collect(),
        }
    }

    fn sub(&self, rhs: &Self) -> Self {
        Dual {
            re: self.re.sub(&rhs.re),
            eps: self
                .eps
                .iter()
                .zip(&rhs.eps)
                .map(|(a, b)| a.sub(b))
                .collect(),
        }
    }

    fn mul(&self, rhs: &Self) -> Self {
        // Leibniz: d(fg) = f dg + g df
        Dual {
            re: self.re.mul(&rhs.re),
            eps: self
                .eps
                .iter()
                .zip(&rhs.eps)
                .map(|(df, dg)| self.re.mul(dg).add(&rhs.re.mul(df)))
                .collect(),
        }
    }

    fn div(&self, rhs: &Self) -> Self {
        let q = self.re.div(&rhs.re);
        Dual {
            re: q.clone(),
            eps: self
                .eps
                .iter()
                .zip(&rhs.eps)
                .map(|(df, dg)| df.sub(&q.mul(dg)).div(&rhs.re))
                .collect(),
        }
    }

    fn neg(&self) -> Self {
        Dual {
            re: self.re.neg(),
            eps: self.eps.iter().map(|e| e.neg()).collect(),
        }
    }

    fn sin(&self) -> Self {
        self.unary(self.re.sin(), self.re.cos())
    }

    fn cos(&self) -> Self {
        self.unary(self.re.cos(), self.re.sin().neg())
    }

    fn tan(&self) -> Self {
        let t = self.re.tan();
        let slope = t.mul(&t).add(&self.re.lift(1.0));
        self.unary(t, slope)
    }

    fn exp(&self) -> Self {
        let e = self.re.exp();
        self.unary(e.clone(), e)
    }

    fn ln(&self) -> Self {
        let slope = self.re.lift(1.0).div(&self.re);
        self.unary(self.re.ln(), slope)
    }

    fn sqrt(&self) -> Self {
        let s = self.re.sqrt();
        let slope = self.re.lift(1.0).div(&s.add(&s));
        self.unary(s, slope)
    }

    fn abs(&self) -> Self {
        // Piecewise slope from the innermost value; 0 at the kink.
        let sign = match self.re.value() {
            v if v > 0.0 => 1.0,
            v if v < 0.0 => -1.0,
            _ => 0.0,
        };
        self.unary(self.re.abs(), self.re.lift(sign))
    }
}

/// First-order dual over `f64` seeded along `n` coordinate directions.
pub type Dual1 = Dual<f64>;
/// Second-order nested dual; `eps[i].eps[j]` holds the mixed partial.
pub type Dual2 = Dual<Dual<f64>>;

/// Seed first-order variables for a gradient pass.
pub fn seed_grad(q: &[f64]) -> Vec<Dual1> {
    let n = q.len();
    q.iter()
        .enumerate()
        .map(|(i, &v)| Dual::variable(&0.0, v, i, n))
        .collect()
}

/// Seed nested variables for a Hessian pass: outer and inner levels are both
/// seeded so `eps[i].eps[j]` is exactly the mixed second partial.
pub fn seed_hess(q: &[f64]) -> Vec<Dual2> {
    let n = q.len();
    let proto_inner = 0.0f64;
    q.iter()
        .enumerate()
        .map(|(i, &v)| {
            let re = Dual::variable(&proto_inner, v, i, n);
            let mut eps = vec![Dual::constant(&proto_inner, 0.0, n); n];
            eps[i] = Dual::constant(&proto_inner, 1.0, n);
            Dual { re, eps }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn poly<T: Scalar>(x: &[T]) -> T {
        // f(x, y) = x^2 y + sin(x y) + exp(y) / (1 + x^2)
        let x0 = &x[0];
        let x1 = &x[1];
        let a = x0.mul(x0).mul(x1);
        let b = x0.mul(x1).sin();
        let c = x1.exp().div(&x0.mul(x0).add(&x0.lift(1.0)));
        a.add(&b).add(&c)
    }

    #[test]
    fn gradient_matches_hand_derivative() {
        let q = [0.7, -0.3];
        let vars = seed_grad(&q);
        let r = poly(&vars);
        let (x, y) = (q[0], q[1]);
        let dfdx = 2.0 * x * y + y * (x * y).cos() - 2.0 * x * y.exp() / (1.0 + x * x).powi(2);
        let dfdy = x * x + x * (x * y).cos() + y.exp() / (1.0 + x * x);
        assert!((r.eps[0] - dfdx).abs() < 1e-14);
        assert!((r.eps[1] - dfdy).abs() < 1e-14);
    }

    #[test]
    fn product_rule_is_exact() {
        let q = [1.3, 2.1];
        let vars = seed_grad(&q);
        let f = vars[0].sin().mul(&vars[1]);
        let g = vars[1].exp().add(&vars[0]);
        let prod = f.mul(&g);
        for i in 0..2 {
            let expected = f.re * g.eps[i] + g.re * f.eps[i];
            assert_eq!(prod.eps[i], expected);
        }
    }

    #[test]
    fn nested_mixed_partials_symmetric() {
        let q = [0.4, 1.9];
        let vars = seed_hess(&q);
        let r = poly(&vars);
        for i in 0..2 {
            for j in 0..2 {
                let hij = r.eps[i].eps[j];
                let hji = r.eps[j].eps[i];
                let scale = hij.abs().max(hji.abs()).max(1.0);
                assert!((hij - hji).abs() / scale < 1e-12);
            }
        }
    }

    #[test]
    fn integer_power_handles_negative_base() {
        let vars = seed_grad(&[-2.0]);
        let r = vars[0].powi(3);
        assert_eq!(r.re, -8.0);
        assert_eq!(r.eps[0], 12.0);
        let r = vars[0].powi(-2);
        assert!((r.re - 0.25).abs() < 1e-15);
        assert!((r.eps[0] - 0.25).abs() < 1e-15);
    }
}
