//! Matrix products and softmax.

use super::Tensor;
use crate::error::{Error, Result};

/// `c (m×n) = op(a) · op(b) (+ c if accumulate)` on row-major slices.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`); `b` is stored `k×n`
/// (or `n×k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tensor {
    /// Batched product of `…×M×K` and `…×K×N`. The right operand may also be
    /// a plain `K×N` matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.ndim() < 2 || other.ndim() < 2 {
            return Err(Error::shape(format!(
                "matmul needs rank >= 2, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let ra = self.ndim();
        let rb = other.ndim();
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let batch_a = &self.shape()[..ra - 2];
        let shared_b = rb == 2;
        if !shared_b && batch_a != &other.shape()[..rb - 2] {
            return Err(Error::shape(format!(
                "matmul batch dimensions differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let batch: usize = batch_a.iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(), other.data());
        for i in 0..batch {
            let b_off = if shared_b { 0 } else { i * k * n };
            gemm(
                m,
                k,
                n,
                &ad[i * m * k..],
                false,
                &bd[b_off..],
                false,
                &mut out[i * m * n..],
                false,
            );
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);

        let a_saved = self.clone();
        let b_saved = other.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), other.clone()],
            move |g, needs| {
                let (ad, bd) = (a_saved.data(), b_saved.data());
                let ga = needs[0].then(|| {
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        let b_off = if shared_b { 0 } else { i * k * n };
                        // dA = G · Bᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..],
                            false,
                            &bd[b_off..],
                            true,
                            &mut ga[i * m * k..],
                            false,
                        );
                    }
                    ga
                });
                let gb = needs[1].then(|| {
                    let mut gb = vec![0.0; bd.len()];
                    for i in 0..batch {
                        let b_off = if shared_b { 0 } else { i * k * n };
                        // dB = Aᵀ · G
                        gemm(
                            k,
                            m,
                            n,
                            &ad[i * m * k..],
                            true,
                            &g[i * m * n..],
                            false,
                            &mut gb[b_off..],
                            shared_b,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            },
        ))
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.ndim() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for {:?}",
                self.shape()
            )));
        }
        let len = self.shape()[axis];
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let outer: usize = self.shape()[..axis].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                let max = (0..len).map(|i| x[base + i * inner]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (x[base + i * inner] - max).exp();
                    y[base + i * inner] = e;
                    total += e;
                }
                for i in 0..len {
                    y[base + i * inner] /= total;
                }
            }
        }
        let y_saved = y.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g, _| {
                let y = &y_saved;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * len * inner + j;
                        let dot: f64 = (0..len).map(|i| g[base + i * inner] * y[base + i * inner]).sum();
                        for i in 0..len {
                            let idx = base + i * inner;
                            gx[idx] = y[idx] * (g[idx] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_product() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.5, -2.0, 0.25, 7.0]);
        assert_eq!(eye.matmul(&m).unwrap().data(), m.data());
    }

    #[test]
    fn hand_product() {
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1], &[1.0, 1.0]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_row_annihilates() {
        let a = Tensor::zeros(&[1, 3]);
        let b = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn inner_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        assert!(matches!(a.matmul(&b), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        let u = t(&[3], &[0.0, 0.0, 0.0]).softmax(0).unwrap();
        for v in u.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = t(&[2], &[1000.0, 0.0]).softmax(0).unwrap();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-15 && s.data()[1] < 1e-300);
        let l = t(&[3], &[1f64.ln(), 2f64.ln(), 3f64.ln()]).softmax(0).unwrap();
        for (v, want) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((v - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let x = t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).softmax(1).unwrap();
        assert_eq!(x.data(), &[0.5, 0.5, 0.5, 0.5]);
    }
}
