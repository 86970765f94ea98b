//! Network-specific kernels: upsampling, chunk normalisation and the
//! per-pixel cross-entropy loss.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::shape::dims4;
use super::{expect_rank, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Nearest,
    /// Corner-aligned: output corners sample input corners exactly.
    Bilinear,
    /// Pixel-centre aligned: output centre `o` samples input position
    /// `(o + ½)/factor − ½`, clamped at the edges.
    BilinearCentered,
}

/// Per-output-index `(lo, hi, weight_of_hi)` for either bilinear alignment.
fn bilinear_taps(n_in: usize, n_out: usize, centered: bool) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = if centered {
                ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
            } else {
                (o * (n_in - 1)) as f64 / (n_out - 1) as f64
            };
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

impl Tensor {
    /// Enlarges both spatial axes of a BCHW tensor by an integer factor.
    pub fn upsample(&self, factor: usize, mode: UpsampleMode) -> Result<Tensor> {
        expect_rank("upsample", self, 4)?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be >= 1"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (b, c, h, w) = dims4(self);
        let (ho, wo) = (h * factor, w * factor);
        match mode {
            UpsampleMode::Nearest => {
                let mut idx = Vec::with_capacity(b * c * ho * wo);
                for plane in 0..b * c {
                    for y in 0..ho {
                        for x in 0..wo {
                            idx.push(plane * h * w + (y / factor) * w + x / factor);
                        }
                    }
                }
                self.gather(Arc::new(idx), &[b, c, ho, wo])
            }
            UpsampleMode::Bilinear | UpsampleMode::BilinearCentered => {
                let centered = mode == UpsampleMode::BilinearCentered;
                let ty = bilinear_taps(h, ho, centered);
                let tx = bilinear_taps(w, wo, centered);
                let x = self.data();
                let mut out = vec![0.0; b * c * ho * wo];
                for plane in 0..b * c {
                    let src = &x[plane * h * w..(plane + 1) * h * w];
                    let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                            dst[oy * wo + ox] = top * (1.0 - fy) + bot * fy;
                        }
                    }
                }
                let n = x.len();
                Ok(Tensor::from_op(
                    vec![b, c, ho, wo],
                    out,
                    vec![self.clone()],
                    move |g, _| {
                        let mut gx = vec![0.0; n];
                        for plane in 0..b * c {
                            let gsrc = &g[plane * ho * wo..(plane + 1) * ho * wo];
                            let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                    let gv = gsrc[oy * wo + ox];
                                    dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                                    dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                                    dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                                    dst[y1 * w + x1] += gv * fy * fx;
                                }
                            }
                        }
                        vec![Some(gx)]
                    },
                ))
            }
        }
    }

    /// Normalises each contiguous run of `chunk` elements to zero mean and
    /// unit (biased) variance. Group norm over BCHW and layer norm over the
    /// last axis are both special cases.
    pub fn normalize_chunks(&self, chunk: usize, eps: f64) -> Result<Tensor> {
        if chunk == 0 || !self.numel().is_multiple_of(chunk) {
            return Err(Error::shape(format!(
                "normalize_chunks: {} elements not divisible into chunks of {chunk}",
                self.numel()
            )));
        }
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / chunk);
        for (xs, ys) in x.chunks(chunk).zip(y.chunks_mut(chunk)) {
            let mean = xs.iter().sum::<f64>() / chunk as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / chunk as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (yv, xv) in ys.iter_mut().zip(xs) {
                *yv = (xv - mean) * inv;
            }
            inv_std.push(inv);
        }
        let y_saved = y.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![0.0; g.len()];
                for (((gs, ys), gxs), &inv) in g
                    .chunks(chunk)
                    .zip(y_saved.chunks(chunk))
                    .zip(gx.chunks_mut(chunk))
                    .zip(&inv_std)
                {
                    let n = chunk as f64;
                    let mean_g = gs.iter().sum::<f64>() / n;
                    let mean_gy = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / n;
                    for ((o, gv), yv) in gxs.iter_mut().zip(gs).zip(ys) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean per-pixel cross-entropy of `B×K×H×W` logits against labels laid
    /// out `B×H×W`.
    pub fn cross_entropy(&self, labels: &[u8]) -> Result<Tensor> {
        expect_rank("cross_entropy", self, 4)?;
        let (b, k, h, w) = dims4(self);
        let hw = h * w;
        if labels.len() != b * hw {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for logits {:?}",
                labels.len(),
                self.shape()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= k) {
            return Err(Error::LabelOutOfRange {
                label,
                index,
                num_categories: k,
            });
        }
        let x = self.data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for bi in 0..b {
            let base = bi * k * hw;
            for p in 0..hw {
                let max = (0..k).map(|c| x[base + c * hw + p]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for c in 0..k {
                    let e = (x[base + c * hw + p] - max).exp();
                    probs[base + c * hw + p] = e;
                    z += e;
                }
                for c in 0..k {
                    probs[base + c * hw + p] /= z;
                }
                let t = labels[bi * hw + p] as usize;
                total += z.ln() + max - x[base + t * hw + p];
            }
        }
        let count = (b * hw) as f64;
        let labels: Vec<u8> = labels.to_vec();
        Ok(Tensor::from_op(
            vec![1],
            vec![total / count],
            vec![self.clone()],
            move |g, _| {
                let scale = g[0] / count;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for bi in 0..b {
                    for p in 0..hw {
                        let t = labels[bi * hw + p] as usize;
                        gx[bi * k * hw + t * hw + p] -= scale;
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

    #[test]
    fn upsample_identity_and_nearest() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
            assert_eq!(x.upsample(1, mode).unwrap().data(), x.data());
        }
        let c = Tensor::full(&[1, 1, 1, 1], 3.5)
            .upsample(2, UpsampleMode::Nearest)
            .unwrap();
        assert_eq!(c.data(), &[3.5; 4]);
        let y = x.upsample(2, UpsampleMode::Nearest).unwrap();
        assert_eq!(
            y.data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 4.0, 4.0, 6.0, 6.0, 4.0, 4.0, 6.0, 6.0]
        );
    }

    #[test]
    fn bilinear_is_corner_aligned() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 3.0, 6.0, 9.0]).unwrap();
        let y = x.upsample(2, UpsampleMode::Bilinear).unwrap();
        // Corner samples reproduce the input corners; the first row is a
        // linear ramp 0, 1, 2, 3.
        assert_eq!(&y.data()[0..4], &[0.0, 1.0, 2.0, 3.0]);
        assert_eq!(y.data()[15], 9.0);
        assert_eq!(y.data()[12], 6.0);
    }

    #[test]
    fn centered_bilinear_matches_pixel_centres() {
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![0.0, 4.0]).unwrap();
        let y = x.upsample(2, UpsampleMode::BilinearCentered).unwrap();
        // Output centres sit at input positions −¼, ¼, ¾, 1¼; the ends clamp.
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(&y.data()[0..4], &[0.0, 1.0, 3.0, 4.0]);
        assert_eq!(&y.data()[4..8], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let logits = Tensor::zeros(&[1, 5, 2, 2]);
        let loss = logits.cross_entropy(&[0, 1, 2, 4]).unwrap();
        assert!((loss.item() - 5f64.ln()).abs() < 1e-14);

        let mut v = vec![0.0; 5 * 4];
        let labels = [3u8, 0, 4, 2];
        for (p, &l) in labels.iter().enumerate() {
            v[l as usize * 4 + p] = 30.0;
        }
        let loss = Tensor::from_vec(&[1, 5, 2, 2], v)
            .unwrap()
            .cross_entropy(&labels)
            .unwrap();
        assert!(loss.item() < 1e-9 && loss.item() >= 0.0);
        assert!(matches!(
            Tensor::zeros(&[1, 5, 1, 1]).cross_entropy(&[5]),
            Err(Error::LabelOutOfRange { label: 5, .. })
        ));
    }

    #[test]
    fn normalized_chunks_have_zero_mean_unit_variance() {
        let x = Tensor::from_vec(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -5.0, 0.0, 5.0, 10.0]).unwrap();
        let y = x.normalize_chunks(4, 0.0).unwrap();
        for chunk in y.data().chunks(4) {
            let m: f64 = chunk.iter().sum::<f64>() / 4.0;
            let v: f64 = chunk.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-15 && (v - 1.0).abs() < 1e-12);
        }
        assert_eq!(Tensor::zeros(&[8]).normalize_chunks(4, 1e-5).unwrap().data(), &[0.0; 8]);
    }
}
