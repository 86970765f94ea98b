//! Single-level unnormalised 2×2 Haar decomposition of feature maps.
//!
//! For every disjoint 2×2 block with `a` top-left, `b` top-right,
//! `c` bottom-left and `d` bottom-right:
//!
//! ```text
//! LL =  a + b + c + d
//! LH = -a - b + c + d
//! HL = -a + b - c + d
//! HH =  a - b - c + d
//! ```
//!
//! No ½ scaling is applied, so a constant block of value `v` has `LL = 4v`.
//! The rows of this 4×4 map are orthogonal with norm 2, hence the band
//! energy is exactly four times the input energy.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The four sub-bands of one feature map, each `B×C×(H/2)×(W/2)`.
#[derive(Clone, Debug)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
}

/// Sign patterns over `(a, b, c, d)`.
const LL: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
const LH: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];
const HL: [f64; 4] = [-1.0, 1.0, -1.0, 1.0];
const HH: [f64; 4] = [1.0, -1.0, -1.0, 1.0];

fn block_combination(x: &Tensor, signs: [f64; 4]) -> Tensor {
    let s = x.shape();
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let top = &plane[2 * i * w..(2 * i + 1) * w];
            let bottom = &plane[(2 * i + 1) * w..(2 * i + 2) * w];
            for j in 0..wo {
                let (a, b) = (top[2 * j], top[2 * j + 1]);
                let (c, d) = (bottom[2 * j], bottom[2 * j + 1]);
                out.push(signs[0] * a + signs[1] * b + signs[2] * c + signs[3] * d);
            }
        }
    }
    let n = src.len();
    Tensor::from_op(vec![s[0], s[1], ho, wo], out, vec![x.clone()], move |g, _| {
        let mut gx = vec![0.0; n];
        for p in 0..planes {
            let plane = &mut gx[p * h * w..(p + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    let gv = g[(p * ho + i) * wo + j];
                    plane[2 * i * w + 2 * j] += signs[0] * gv;
                    plane[2 * i * w + 2 * j + 1] += signs[1] * gv;
                    plane[(2 * i + 1) * w + 2 * j] += signs[2] * gv;
                    plane[(2 * i + 1) * w + 2 * j + 1] += signs[3] * gv;
                }
            }
        }
        vec![Some(gx)]
    })
}

/// Forward Haar transform of a `B×C×H×W` map. Odd spatial sizes are
/// rejected; pad before calling.
pub fn haar_dwt(x: &Tensor) -> Result<WaveletBands> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("haar_dwt expects B×C×H×W, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(format!(
            "haar_dwt needs even non-zero spatial dims, got {h}x{w}"
        )));
    }
    Ok(WaveletBands {
        ll: block_combination(x, LL),
        lh: block_combination(x, LH),
        hl: block_combination(x, HL),
        hh: block_combination(x, HH),
    })
}

/// Exact inverse of [`haar_dwt`]. Only used for verification; the network
/// never reconstructs.
pub fn inverse_haar_dwt(bands: &WaveletBands) -> Result<Tensor> {
    let shape = bands.ll.shape();
    for (name, t) in [("lh", &bands.lh), ("hl", &bands.hl), ("hh", &bands.hh)] {
        if t.shape() != shape {
            return Err(Error::shape(format!(
                "inverse_haar_dwt: band {name} has shape {:?}, ll has {:?}",
                t.shape(),
                shape
            )));
        }
    }
    if shape.len() != 4 {
        return Err(Error::shape(format!(
            "inverse_haar_dwt expects rank-4 bands, got {shape:?}"
        )));
    }
    let (planes, ho, wo) = (shape[0] * shape[1], shape[2], shape[3]);
    let (h, w) = (2 * ho, 2 * wo);
    let (ll, lh, hl, hh) = (bands.ll.data(), bands.lh.data(), bands.hl.data(), bands.hh.data());
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let plane = &mut out[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let k = (p * ho + i) * wo + j;
                plane[2 * i * w + 2 * j] = (ll[k] - lh[k] - hl[k] + hh[k]) / 4.0;
                plane[2 * i * w + 2 * j + 1] = (ll[k] - lh[k] + hl[k] - hh[k]) / 4.0;
                plane[(2 * i + 1) * w + 2 * j] = (ll[k] + lh[k] - hl[k] - hh[k]) / 4.0;
                plane[(2 * i + 1) * w + 2 * j + 1] = (ll[k] + lh[k] + hl[k] + hh[k]) / 4.0;
            }
        }
    }
    let parents = vec![bands.ll.clone(), bands.lh.clone(), bands.hl.clone(), bands.hh.clone()];
    let band_len = ll.len();
    Ok(Tensor::from_op(
        vec![shape[0], shape[1], h, w],
        out,
        parents,
        move |g, needs| {
            // Each output pixel is a quarter-weighted signed sum of the four
            // bands; the adjoint reuses the forward sign patterns.
            let mut grads = Vec::with_capacity(4);
            for (band, signs) in [LL, LH, HL, HH].into_iter().enumerate() {
                if !needs[band] {
                    grads.push(None);
                    continue;
                }
                let mut gb = Vec::with_capacity(band_len);
                for p in 0..planes {
                    let plane = &g[p * h * w..(p + 1) * h * w];
                    for i in 0..ho {
                        for j in 0..wo {
                            let a = plane[2 * i * w + 2 * j];
                            let b = plane[2 * i * w + 2 * j + 1];
                            let c = plane[(2 * i + 1) * w + 2 * j];
                            let d = plane[(2 * i + 1) * w + 2 * j + 1];
                            gb.push((signs[0] * a + signs[1] * b + signs[2] * c + signs[3] * d) / 4.0);
                        }
                    }
                }
                grads.push(Some(gb));
            }
            grads
        },
    ))
}

impl WaveletBands {
    pub fn shape(&self) -> &[usize] {
        self.ll.shape()
    }

    /// Concatenates `[LL, LH, HL, HH]` along channels: `B×4C×h×w`.
    pub fn stacked(&self) -> Result<Tensor> {
        Tensor::concat(&[self.ll.clone(), self.lh.clone(), self.hl.clone(), self.hh.clone()], 1)
    }

    /// Sum of squared values over all four bands.
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum()
    }
}
