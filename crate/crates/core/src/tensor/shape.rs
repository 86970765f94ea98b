//! Layout operations: reshape, permute, gather, concatenation and slicing.

use std::sync::Arc;

use super::{expect_rank, Tensor};
use crate::error::{Error, Result};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            |g, _| vec![Some(g.to_vec())],
        ))
    }

    /// `out[i] = self[indices[i]]`. Repeated indices accumulate in backward.
    pub fn gather(&self, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != indices.len() {
            return Err(Error::shape(format!(
                "gather: {} indices for output shape {:?}",
                indices.len(),
                shape
            )));
        }
        let src = self.data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape(format!(
                "gather: index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = indices.iter().map(|&i| src[i]).collect();
        let n = src.len();
        Ok(Tensor::from_op(shape.to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for (gi, &i) in g.iter().zip(indices.iter()) {
                gx[i] += gi;
            }
            vec![Some(gx)]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let in_strides = strides(self.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let numel = self.numel();
        let mut indices = Vec::with_capacity(numel);
        let mut counter = vec![0usize; rank];
        for _ in 0..numel {
            indices.push(counter.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for d in (0..rank).rev() {
                counter[d] += 1;
                if counter[d] < out_shape[d] {
                    break;
                }
                counter[d] = 0;
            }
        }
        self.gather(Arc::new(indices), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        if axis >= first.ndim() {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        for t in tensors {
            let same_rank = t.ndim() == first.ndim();
            let same_other = same_rank
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !same_other {
                return Err(Error::shape(format!(
                    "concat: {:?} incompatible with {:?} along axis {axis}",
                    t.shape(),
                    first.shape()
                )));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = tensors.iter().map(|t| t.shape()[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (t, &w) in tensors.iter().zip(&widths) {
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = tensors.iter().map(|t| t.shape()[axis]).sum();
        Ok(Tensor::from_op(shape, out, tensors.to_vec(), move |g, needs| {
            let mut grads: Vec<Option<Vec<f64>>> = widths
                .iter()
                .zip(needs)
                .map(|(&w, &n)| n.then(|| Vec::with_capacity(outer * w)))
                .collect();
            for o in 0..outer {
                let mut offset = o * total;
                for (slot, &w) in grads.iter_mut().zip(&widths) {
                    if let Some(buf) = slot {
                        buf.extend_from_slice(&g[offset..offset + w]);
                    }
                    offset += w;
                }
            }
            grads
        }))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(Error::shape(format!(
                "narrow axis {axis} [{start}, {}) out of range for {:?}",
                start + len,
                self.shape()
            )));
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let full = self.shape()[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        let n = self.numel();
        Ok(Tensor::from_op(shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                let base = o * full + start * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Reflect-pads the two spatial axes of a BCHW tensor by `pad` pixels
    /// (edge pixel not repeated).
    pub fn pad_reflect(&self, pad: usize) -> Result<Tensor> {
        expect_rank("pad_reflect", self, 4)?;
        if pad == 0 {
            return Ok(self.clone());
        }
        let (b, c, h, w) = dims4(self);
        if pad >= h || pad >= w {
            return Err(Error::shape(format!(
                "pad_reflect: pad {pad} needs spatial dims > pad, got {h}x{w}"
            )));
        }
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let r = if i < 0 {
                -i
            } else if i >= n {
                2 * (n - 1) - i
            } else {
                i
            };
            r as usize
        };
        let (ho, wo) = (h + 2 * pad, w + 2 * pad);
        let mut indices = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            for y in 0..ho {
                let sy = reflect(y as isize - pad as isize, h);
                for x in 0..wo {
                    let sx = reflect(x as isize - pad as isize, w);
                    indices.push(plane * h * w + sy * w + sx);
                }
            }
        }
        self.gather(Arc::new(indices), &[b, c, ho, wo])
    }
}

pub(crate) fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}
