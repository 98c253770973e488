//! Second-order dual numbers and the lane abstraction shared with the tape.
//!
//! A [`DualScalar`] carries a truncated Taylor expansion `(v, d1, d2)` with
//! respect to one seed variable (the generator's time input). Arithmetic
//! follows the usual truncated-Taylor rules, e.g. for a product
//! `(a*b).d2 = a.d2*b.v + 2*a.d1*b.d1 + a.v*b.d2`.
//!
//! The [`Lane`] trait is what the tape stores per lane: `f64` for plain
//! value/gradient work and [`DualScalar`] when first and second time
//! derivatives must flow through the same graph. Besides forward arithmetic a
//! lane knows how to push adjoints back through each primitive, which is what
//! turns the forward Taylor computation into exact reverse-mode gradients of
//! any function of `(x, x', x'')`.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Unary primitives available on the tape and on dual scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryKind {
    Neg,
    Tanh,
    Sigmoid,
    Sin,
    Cos,
    Sqrt,
    Recip,
    Powi(i32),
    /// max(0, x) with derivative 0 at x = 0 (hinge subgradient convention).
    Relu,
}

/// f(u), f'(u), f''(u), f'''(u) for a unary primitive.
///
/// `sqrt` uses the same subgradient convention as `relu` at u = 0 so that a
/// zero embedding distance stays differentiable instead of producing NaN.
fn derivs(kind: UnaryKind, u: f64) -> (f64, f64, f64, f64) {
    match kind {
        UnaryKind::Neg => (-u, -1.0, 0.0, 0.0),
        UnaryKind::Tanh => {
            let y = u.tanh();
            let g = 1.0 - y * y;
            (y, g, -2.0 * y * g, -2.0 * g * (1.0 - 3.0 * y * y))
        }
        UnaryKind::Sigmoid => {
            let s = 1.0 / (1.0 + (-u).exp());
            let g = s * (1.0 - s);
            (s, g, g * (1.0 - 2.0 * s), g * (1.0 - 6.0 * s + 6.0 * s * s))
        }
        UnaryKind::Sin => (u.sin(), u.cos(), -u.sin(), -u.cos()),
        UnaryKind::Cos => (u.cos(), -u.sin(), -u.cos(), u.sin()),
        UnaryKind::Sqrt => {
            if u <= 0.0 {
                (0.0, 0.0, 0.0, 0.0)
            } else {
                let r = u.sqrt();
                (r, 0.5 / r, -0.25 / (u * r), 0.375 / (u * u * r))
            }
        }
        UnaryKind::Recip => {
            let r = 1.0 / u;
            (r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
        }
        UnaryKind::Powi(n) => {
            let n_f = f64::from(n);
            (
                u.powi(n),
                n_f * u.powi(n - 1),
                n_f * (n_f - 1.0) * u.powi(n - 2),
                n_f * (n_f - 1.0) * (n_f - 2.0) * u.powi(n - 3),
            )
        }
        UnaryKind::Relu => {
            if u > 0.0 {
                (u, 1.0, 0.0, 0.0)
            } else {
                (0.0, 0.0, 0.0, 0.0)
            }
        }
    }
}

/// Value plus first and second derivative with respect to the seed variable.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualScalar {
    pub v: f64,
    pub d1: f64,
    pub d2: f64,
}

impl DualScalar {
    pub fn constant(v: f64) -> Self {
        DualScalar { v, d1: 0.0, d2: 0.0 }
    }

    /// Seed for the differentiation variable: (t, 1, 0).
    pub fn seed(v: f64) -> Self {
        DualScalar { v, d1: 1.0, d2: 0.0 }
    }

    fn apply(self, kind: UnaryKind) -> Self {
        let (f, f1, f2, _) = derivs(kind, self.v);
        DualScalar {
            v: f,
            d1: f1 * self.d1,
            d2: f2 * self.d1 * self.d1 + f1 * self.d2,
        }
    }
}

impl Add for DualScalar {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        DualScalar { v: self.v + o.v, d1: self.d1 + o.d1, d2: self.d2 + o.d2 }
    }
}

impl Sub for DualScalar {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        DualScalar { v: self.v - o.v, d1: self.d1 - o.d1, d2: self.d2 - o.d2 }
    }
}

impl Mul for DualScalar {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        DualScalar {
            v: self.v * o.v,
            d1: self.d1 * o.v + self.v * o.d1,
            d2: self.d2 * o.v + 2.0 * self.d1 * o.d1 + self.v * o.d2,
        }
    }
}

impl Div for DualScalar {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.apply(UnaryKind::Recip)
    }
}

impl Neg for DualScalar {
    type Output = Self;
    fn neg(self) -> Self {
        DualScalar { v: -self.v, d1: -self.d1, d2: -self.d2 }
    }
}

/// Arithmetic interface shared by `f64` and [`DualScalar`], used to write
/// model forward passes once and evaluate them with or without time
/// derivatives.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn from_f64(c: f64) -> Self;
    fn value(self) -> f64;
    fn tanh(self) -> Self;
    fn sigmoid(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn relu(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(c: f64) -> Self {
        c
    }
    fn value(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sigmoid(self) -> Self {
        1.0 / (1.0 + (-self).exp())
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn sqrt(self) -> Self {
        if self <= 0.0 {
            0.0
        } else {
            f64::sqrt(self)
        }
    }
    fn powi(self, n: i32) -> Self {
        f64::powi(self, n)
    }
    fn relu(self) -> Self {
        self.max(0.0)
    }
}

impl Scalar for DualScalar {
    fn from_f64(c: f64) -> Self {
        DualScalar::constant(c)
    }
    fn value(self) -> f64 {
        self.v
    }
    fn tanh(self) -> Self {
        self.apply(UnaryKind::Tanh)
    }
    fn sigmoid(self) -> Self {
        self.apply(UnaryKind::Sigmoid)
    }
    fn sin(self) -> Self {
        self.apply(UnaryKind::Sin)
    }
    fn cos(self) -> Self {
        self.apply(UnaryKind::Cos)
    }
    fn sqrt(self) -> Self {
        self.apply(UnaryKind::Sqrt)
    }
    fn powi(self, n: i32) -> Self {
        self.apply(UnaryKind::Powi(n))
    }
    fn relu(self) -> Self {
        self.apply(UnaryKind::Relu)
    }
}

/// Per-lane storage of the tape: forward rules plus the adjoint rules the
/// reverse sweep needs. Adjoints have the same shape as values; for dual
/// lanes the three adjoint channels are the sensitivities of the loss to the
/// lane's `(v, d1, d2)` components.
pub trait Lane: Scalar + PartialEq + Send + Sync + 'static {
    /// a*x with a plain scalar coefficient.
    fn scale(self, a: f64) -> Self;
    /// self + c on the value channel only.
    fn shift(self, c: f64) -> Self;
    /// Apply a unary primitive.
    fn unary(self, kind: UnaryKind) -> Self;
    /// Adjoint contribution to the input of `y = unary(kind, u)`.
    fn unary_adjoint(kind: UnaryKind, u: Self, ybar: Self) -> Self;
    /// Adjoint contributions `(abar, bbar)` of `c = a * b`.
    fn mul_adjoint(a: Self, b: Self, cbar: Self) -> (Self, Self);
    /// Scalar-parameter gradient: full inner product of adjoint and input
    /// channels, i.e. d(loss)/d(w) for `out = w * x`.
    fn grad_dot(cbar: Self, x: Self) -> f64;
    /// Value-channel component of an adjoint (bias gradients, leaf reads).
    fn adj_value(self) -> f64;
    /// Taylor component 1 or 2 of a value.
    fn component(self, comp: u8) -> f64;
    /// Adjoint lane with `g` in the given Taylor channel (0 = value).
    fn inject(comp: u8, g: f64) -> Self;
    fn is_finite_lane(self) -> bool;
}

impl Lane for f64 {
    fn scale(self, a: f64) -> Self {
        a * self
    }
    fn shift(self, c: f64) -> Self {
        self + c
    }
    fn unary(self, kind: UnaryKind) -> Self {
        derivs(kind, self).0
    }
    fn unary_adjoint(kind: UnaryKind, u: Self, ybar: Self) -> Self {
        ybar * derivs(kind, u).1
    }
    fn mul_adjoint(a: Self, b: Self, cbar: Self) -> (Self, Self) {
        (cbar * b, cbar * a)
    }
    fn grad_dot(cbar: Self, x: Self) -> f64 {
        cbar * x
    }
    fn adj_value(self) -> f64 {
        self
    }
    fn component(self, _comp: u8) -> f64 {
        0.0
    }
    fn inject(comp: u8, g: f64) -> Self {
        if comp == 0 {
            g
        } else {
            0.0
        }
    }
    fn is_finite_lane(self) -> bool {
        self.is_finite()
    }
}

impl Lane for DualScalar {
    fn scale(self, a: f64) -> Self {
        DualScalar { v: a * self.v, d1: a * self.d1, d2: a * self.d2 }
    }
    fn shift(self, c: f64) -> Self {
        DualScalar { v: self.v + c, ..self }
    }
    fn unary(self, kind: UnaryKind) -> Self {
        self.apply(kind)
    }
    fn unary_adjoint(kind: UnaryKind, u: Self, ybar: Self) -> Self {
        // Forward: y.v = f, y.d1 = f1*u1, y.d2 = f2*u1^2 + f1*u2.
        // Differentiating those three outputs w.r.t. (u.v, u.d1, u.d2)
        // requires f''' because f2 itself depends on u.v.
        let (_, f1, f2, f3) = derivs(kind, u.v);
        DualScalar {
            v: ybar.v * f1
                + ybar.d1 * f2 * u.d1
                + ybar.d2 * (f3 * u.d1 * u.d1 + f2 * u.d2),
            d1: ybar.d1 * f1 + ybar.d2 * 2.0 * f2 * u.d1,
            d2: ybar.d2 * f1,
        }
    }
    fn mul_adjoint(a: Self, b: Self, cbar: Self) -> (Self, Self) {
        // c.v = av*bv; c.d1 = a1*bv + av*b1; c.d2 = a2*bv + 2*a1*b1 + av*b2.
        let abar = DualScalar {
            v: cbar.v * b.v + cbar.d1 * b.d1 + cbar.d2 * b.d2,
            d1: cbar.d1 * b.v + 2.0 * cbar.d2 * b.d1,
            d2: cbar.d2 * b.v,
        };
        let bbar = DualScalar {
            v: cbar.v * a.v + cbar.d1 * a.d1 + cbar.d2 * a.d2,
            d1: cbar.d1 * a.v + 2.0 * cbar.d2 * a.d1,
            d2: cbar.d2 * a.v,
        };
        (abar, bbar)
    }
    fn grad_dot(cbar: Self, x: Self) -> f64 {
        cbar.v * x.v + cbar.d1 * x.d1 + cbar.d2 * x.d2
    }
    fn adj_value(self) -> f64 {
        self.v
    }
    fn component(self, comp: u8) -> f64 {
        match comp {
            1 => self.d1,
            2 => self.d2,
            _ => self.v,
        }
    }
    fn inject(comp: u8, g: f64) -> Self {
        match comp {
            1 => DualScalar { v: 0.0, d1: g, d2: 0.0 },
            2 => DualScalar { v: 0.0, d1: 0.0, d2: g },
            _ => DualScalar { v: g, d1: 0.0, d2: 0.0 },
        }
    }
    fn is_finite_lane(self) -> bool {
        self.v.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Forward-mode d1/d2 against analytic derivatives on the primitive
    /// library, evaluated through a nontrivial inner function u(t) = 0.3t + 0.1t^2
    /// so the chain rule is actually exercised.
    #[test]
    fn taylor_rules_match_analytic_derivatives() {
        let t0 = 0.7;
        let u = |t: DualScalar| {
            t.scale(0.3) + (t * t).scale(0.1)
        };
        let u0 = 0.3 * t0 + 0.1 * t0 * t0;
        let u1 = 0.3 + 0.2 * t0;
        let u2 = 0.2;

        struct Case {
            kind: UnaryKind,
            f: fn(f64) -> f64,
            f1: fn(f64) -> f64,
            f2: fn(f64) -> f64,
        }
        let cases = [
            Case { kind: UnaryKind::Tanh, f: f64::tanh, f1: |x| 1.0 - x.tanh().powi(2), f2: |x| {
                let y = x.tanh();
                -2.0 * y * (1.0 - y * y)
            } },
            Case { kind: UnaryKind::Sigmoid, f: |x| 1.0 / (1.0 + (-x).exp()), f1: |x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s)
            }, f2: |x| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 - s) * (1.0 - 2.0 * s)
            } },
            Case { kind: UnaryKind::Sin, f: f64::sin, f1: f64::cos, f2: |x| -x.sin() },
            Case { kind: UnaryKind::Cos, f: f64::cos, f1: |x| -x.sin(), f2: |x| -x.cos() },
            Case { kind: UnaryKind::Powi(3), f: |x| x.powi(3), f1: |x| 3.0 * x * x, f2: |x| 6.0 * x },
        ];
        for c in cases {
            let y = u(DualScalar::seed(t0)).unary(c.kind);
            let want_v = (c.f)(u0);
            let want_d1 = (c.f1)(u0) * u1;
            let want_d2 = (c.f2)(u0) * u1 * u1 + (c.f1)(u0) * u2;
            assert!((y.v - want_v).abs() <= 1e-12 * want_v.abs().max(1.0), "{:?} v", c.kind);
            assert!((y.d1 - want_d1).abs() <= 1e-12 * want_d1.abs().max(1.0), "{:?} d1", c.kind);
            assert!((y.d2 - want_d2).abs() <= 1e-12 * want_d2.abs().max(1.0), "{:?} d2", c.kind);
        }
    }

    #[test]
    fn seed_and_constant_conventions() {
        assert_eq!(DualScalar::seed(2.5), DualScalar { v: 2.5, d1: 1.0, d2: 0.0 });
        assert_eq!(DualScalar::constant(2.5), DualScalar { v: 2.5, d1: 0.0, d2: 0.0 });
    }

    #[test]
    fn product_and_quotient_second_derivatives() {
        // f(t) = sin(t) * t^2 -> f'' = -sin(t) t^2 + 4 t cos(t) + 2 sin(t)
        let t0 = 1.3;
        let t = DualScalar::seed(t0);
        let y = t.sin() * (t * t);
        let want = -t0.sin() * t0 * t0 + 4.0 * t0 * t0.cos() + 2.0 * t0.sin();
        assert!((y.d2 - want).abs() < 1e-12);

        // g(t) = sin(t) / t -> g'' = -sin/t - 2cos/t^2 + 2sin/t^3
        let g = t.sin() / t;
        let want = -t0.sin() / t0 - 2.0 * t0.cos() / (t0 * t0) + 2.0 * t0.sin() / t0.powi(3);
        assert!((g.d2 - want).abs() < 1e-12);
    }

    #[test]
    fn relu_and_sqrt_subgradients_at_zero() {
        let z = DualScalar::seed(0.0);
        assert_eq!(z.relu(), DualScalar::constant(0.0));
        assert_eq!(z.sqrt(), DualScalar::constant(0.0));
        let pos = DualScalar::seed(4.0);
        let r = pos.sqrt();
        assert!((r.v - 2.0).abs() < 1e-15);
        assert!((r.d1 - 0.25).abs() < 1e-15);
    }

    /// A dual-lane unary adjoint must agree with finite differences of the
    /// forward map (v,d1,d2) -> (v,d1,d2).
    #[test]
    fn unary_adjoint_matches_forward_jacobian() {
        for kind in [UnaryKind::Tanh, UnaryKind::Sigmoid, UnaryKind::Sin, UnaryKind::Powi(3), UnaryKind::Recip] {
            let u = DualScalar { v: 0.83, d1: -0.4, d2: 0.25 };
            let ybar = DualScalar { v: 0.7, d1: -1.1, d2: 0.5 };
            let ubar = DualScalar::unary_adjoint(kind, u, ybar);

            // scalar objective: <ybar, unary(u)>
            let phi = |u: DualScalar| {
                let y = u.unary(kind);
                ybar.v * y.v + ybar.d1 * y.d1 + ybar.d2 * y.d2
            };
            let h = 1e-6;
            let fd = |du: DualScalar| {
                (phi(DualScalar { v: u.v + h * du.v, d1: u.d1 + h * du.d1, d2: u.d2 + h * du.d2 })
                    - phi(DualScalar { v: u.v - h * du.v, d1: u.d1 - h * du.d1, d2: u.d2 - h * du.d2 }))
                    / (2.0 * h)
            };
            let ev = fd(DualScalar { v: 1.0, d1: 0.0, d2: 0.0 });
            let e1 = fd(DualScalar { v: 0.0, d1: 1.0, d2: 0.0 });
            let e2 = fd(DualScalar { v: 0.0, d1: 0.0, d2: 1.0 });
            assert!((ubar.v - ev).abs() < 1e-6, "{kind:?} v: {} vs {}", ubar.v, ev);
            assert!((ubar.d1 - e1).abs() < 1e-6, "{kind:?} d1: {} vs {}", ubar.d1, e1);
            assert!((ubar.d2 - e2).abs() < 1e-6, "{kind:?} d2: {} vs {}", ubar.d2, e2);
        }
    }

    #[test]
    fn mul_adjoint_matches_forward_jacobian() {
        let a = DualScalar { v: 0.9, d1: 0.3, d2: -0.2 };
        let b = DualScalar { v: -0.5, d1: 0.8, d2: 0.1 };
        let cbar = DualScalar { v: 0.6, d1: -0.9, d2: 0.4 };
        let (abar, bbar) = DualScalar::mul_adjoint(a, b, cbar);
        let phi = |a: DualScalar, b: DualScalar| {
            let c = a * b;
            cbar.v * c.v + cbar.d1 * c.d1 + cbar.d2 * c.d2
        };
        let h = 1e-6;
        for (i, want) in [abar.v, abar.d1, abar.d2].iter().enumerate() {
            let mut ap = a;
            let mut am = a;
            match i {
                0 => { ap.v += h; am.v -= h; }
                1 => { ap.d1 += h; am.d1 -= h; }
                _ => { ap.d2 += h; am.d2 -= h; }
            }
            let fd = (phi(ap, b) - phi(am, b)) / (2.0 * h);
            assert!((want - fd).abs() < 1e-6, "abar[{i}]");
        }
        for (i, want) in [bbar.v, bbar.d1, bbar.d2].iter().enumerate() {
            let mut bp = b;
            let mut bm = b;
            match i {
                0 => { bp.v += h; bm.v -= h; }
                1 => { bp.d1 += h; bm.d1 -= h; }
                _ => { bp.d2 += h; bm.d2 -= h; }
            }
            let fd = (phi(a, bp) - phi(a, bm)) / (2.0 * h);
            assert!((want - fd).abs() < 1e-6, "bbar[{i}]");
        }
    }
}
