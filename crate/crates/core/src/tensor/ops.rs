//! Elementwise arithmetic, activations and reductions.

use super::Tensor;
use crate::error::{Error, Result};

/// Divisors smaller than this in magnitude are rejected by [`Tensor::div`].
pub const MIN_DIVISOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right-hand operand lines up with the left-hand one.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// `rhs` is a vector over `lhs` axis with the given stride layout.
    Axis {
        len: usize,
        inner: usize,
    },
}

impl Broadcast {
    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Axis { len, inner } => (i / inner) % len,
        }
    }

    fn resolve(op: &str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
        if a.shape() == b.shape() {
            Ok(Broadcast::Same)
        } else if b.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if b.ndim() == 1 && a.ndim() >= 2 && b.numel() == a.shape()[1] {
            Broadcast::along(op, a, b, 1)
        } else {
            Err(Error::shape(format!(
                "{op}: cannot broadcast {:?} onto {:?} (only equal shapes, scalars and per-channel vectors)",
                b.shape(),
                a.shape()
            )))
        }
    }

    fn along(op: &str, a: &Tensor, b: &Tensor, axis: usize) -> Result<Broadcast> {
        if axis >= a.ndim() || b.ndim() != 1 || b.numel() != a.shape()[axis] {
            return Err(Error::shape(format!(
                "{op}: vector of shape {:?} does not match axis {axis} of {:?}",
                b.shape(),
                a.shape()
            )));
        }
        Ok(Broadcast::Axis {
            len: b.numel(),
            inner: a.shape()[axis + 1..].iter().product(),
        })
    }
}

fn binary(a: &Tensor, b: &Tensor, op: BinOp, bc: Broadcast) -> Result<Tensor> {
    let ad = a.data();
    let bd = b.data();
    if op == BinOp::Div {
        if let Some((index, &value)) = bd.iter().enumerate().find(|(_, v)| v.abs() < MIN_DIVISOR) {
            return Err(Error::DivisionByZero { index, value });
        }
    }
    let out: Vec<f64> = match (op, bc) {
        (BinOp::Add, Broadcast::Same) => ad.iter().zip(bd).map(|(x, y)| x + y).collect(),
        (BinOp::Sub, Broadcast::Same) => ad.iter().zip(bd).map(|(x, y)| x - y).collect(),
        (BinOp::Mul, Broadcast::Same) => ad.iter().zip(bd).map(|(x, y)| x * y).collect(),
        (BinOp::Div, Broadcast::Same) => ad.iter().zip(bd).map(|(x, y)| x / y).collect(),
        _ => ad
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bd[bc.index(i)];
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                }
            })
            .collect(),
    };

    let a_saved = a.clone();
    let b_saved = b.clone();
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        move |g, needs| {
            let ad = a_saved.data();
            let bd = b_saved.data();
            let ga = needs[0].then(|| match op {
                BinOp::Add | BinOp::Sub => g.to_vec(),
                BinOp::Mul => g.iter().enumerate().map(|(i, gi)| gi * bd[bc.index(i)]).collect(),
                BinOp::Div => g.iter().enumerate().map(|(i, gi)| gi / bd[bc.index(i)]).collect(),
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; bd.len()];
                for (i, gi) in g.iter().enumerate() {
                    let j = bc.index(i);
                    gb[j] += match op {
                        BinOp::Add => *gi,
                        BinOp::Sub => -gi,
                        BinOp::Mul => gi * ad[i],
                        BinOp::Div => -gi * ad[i] / (bd[j] * bd[j]),
                    };
                }
                gb
            });
            vec![ga, gb]
        },
    ))
}

fn unary<F, D>(x: &Tensor, f: F, df: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
{
    let out: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let x_saved = x.clone();
    let y_saved = out.clone();
    Tensor::from_op(x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
        let xs = x_saved.data();
        vec![Some(
            g.iter()
                .zip(xs.iter().zip(&y_saved))
                .map(|(gi, (&xv, &yv))| gi * df(xv, yv))
                .collect(),
        )]
    })
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus_value(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus_value`] for positive targets.
pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0, "softplus only reaches positive values");
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Elementwise sum. `other` may be the same shape, a single value, or a
    /// vector over axis 1.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Add, Broadcast::resolve("add", self, other)?)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Sub, Broadcast::resolve("sub", self, other)?)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Mul, Broadcast::resolve("mul", self, other)?)
    }

    /// Elementwise quotient; fails if any divisor is smaller than
    /// [`MIN_DIVISOR`] in magnitude.
    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        binary(self, other, BinOp::Div, Broadcast::resolve("div", self, other)?)
    }

    /// Adds a vector laid along `axis`.
    pub fn add_along(&self, v: &Tensor, axis: usize) -> Result<Tensor> {
        binary(self, v, BinOp::Add, Broadcast::along("add_along", self, v, axis)?)
    }

    /// Multiplies by a vector laid along `axis`.
    pub fn mul_along(&self, v: &Tensor, axis: usize) -> Result<Tensor> {
        binary(self, v, BinOp::Mul, Broadcast::along("mul_along", self, v, axis)?)
    }

    pub fn scale(&self, k: f64) -> Tensor {
        unary(self, |v| v * k, move |_, _| k)
    }

    /// Divides by a constant. Dividing (rather than multiplying by the
    /// reciprocal) keeps results exact where the quotient is representable.
    pub fn div_scalar(&self, k: f64) -> Tensor {
        assert!(k.abs() >= MIN_DIVISOR, "div_scalar by {k}");
        unary(self, |v| v / k, move |_, _| 1.0 / k)
    }

    pub fn add_scalar(&self, k: f64) -> Tensor {
        unary(self, |v| v + k, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&self) -> Tensor {
        unary(self, softplus_value, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Tensor {
        unary(self, f64::exp, |_, y| y)
    }

    pub fn square(&self) -> Tensor {
        unary(self, |v| v * v, |x, _| 2.0 * x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
        unary(
            self,
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let inner = C * (x + 0.044715 * x * x * x);
                let t = inner.tanh();
                let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            },
        )
    }

    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![1], vec![total], vec![self.clone()], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        self.sum().div_scalar(n as f64)
    }

    /// Largest absolute value, untracked.
    pub fn max_abs(&self) -> f64 {
        self.data().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_definition() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(x.relu().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let x = Tensor::from_vec(&[2, 2], vec![1.5, -2.0, 3.25, 0.0]).unwrap();
        let y = x.mul(&Tensor::ones(&[2, 2])).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn div_with_zero_regulariser() {
        let eps = Tensor::scalar(0.0);
        let den = Tensor::from_vec(&[1], vec![2.0]).unwrap().add(&eps).unwrap();
        let q = Tensor::from_vec(&[1], vec![4.0]).unwrap().div(&den).unwrap();
        assert_eq!(q.data(), &[2.0]);
    }

    #[test]
    fn div_rejects_tiny_divisors() {
        let a = Tensor::ones(&[3]);
        let b = Tensor::from_vec(&[3], vec![1.0, 1e-31, 2.0]).unwrap();
        match a.div(&b) {
            Err(Error::DivisionByZero { index, .. }) => assert_eq!(index, 1),
            other => panic!("expected division error, got {other:?}"),
        }
    }

    #[test]
    fn channel_broadcast() {
        let x = Tensor::ones(&[1, 2, 1, 2]);
        let v = Tensor::from_vec(&[2], vec![3.0, 5.0]).unwrap();
        assert_eq!(x.mul(&v).unwrap().data(), &[3.0, 3.0, 5.0, 5.0]);
        let t = Tensor::ones(&[2, 3]);
        let w = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.add_along(&w, 1).unwrap().data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        assert!(x.add(&Tensor::ones(&[3])).is_err());
    }

    #[test]
    fn softplus_inverse() {
        for y in [1e-2, 0.5, 3.0, 40.0, 1e9] {
            let x = inverse_softplus(y);
            assert!((softplus_value(x) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
    }
}
