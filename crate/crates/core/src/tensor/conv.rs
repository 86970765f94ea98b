//! 2-D cross-correlation (no kernel flip) via im2col and GEMM.

use super::linalg::gemm;
use super::shape::dims4;
use super::{expect_rank, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Conv2dOptions {
            stride: 1,
            padding: 0,
            groups: 1,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds channels `[c0, c0 + cg)` of one image into a
    /// `(cg·kh·kw) × (ho·wo)` matrix.
    fn im2col(&self, image: &[f64], c0: usize, cg: usize, col: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        for c in 0..cg {
            let plane = &image[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`]: scatters column gradients back.
    fn col2im(&self, col: &[f64], c0: usize, cg: usize, image: &mut [f64]) {
        let hw_out = self.ho * self.wo;
        for c in 0..cg {
            let plane = &mut image[(c0 + c) * self.h * self.w..(c0 + c + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &col[row * hw_out..(row + 1) * hw_out];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let line = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                line[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Cross-correlates a `B×C×H×W` input with an `O×(C/groups)×KH×KW` weight.
    ///
    /// Output spatial size is `floor((H + 2·padding − K) / stride) + 1`.
    /// Padding is zero-filled; use [`Tensor::pad_reflect`] first for other
    /// boundary rules.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, opts: Conv2dOptions) -> Result<Tensor> {
        expect_rank("conv2d input", self, 4)?;
        expect_rank("conv2d weight", weight, 4)?;
        let (batch, c_in, h, w) = dims4(self);
        let (c_out, cg_in, kh, kw) = dims4(weight);
        let groups = opts.groups;
        if opts.stride == 0 || groups == 0 {
            return Err(Error::invalid("conv2d stride and groups must be positive"));
        }
        if c_in % groups != 0 || c_out % groups != 0 || cg_in * groups != c_in {
            return Err(Error::shape(format!(
                "conv2d: input has {c_in} channels but weight {:?} with {groups} group(s) expects {}",
                weight.shape(),
                cg_in * groups
            )));
        }
        if h + 2 * opts.padding < kh || w + 2 * opts.padding < kw {
            return Err(Error::shape(format!(
                "conv2d: padded input {}x{} smaller than kernel {kh}x{kw}",
                h + 2 * opts.padding,
                w + 2 * opts.padding
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{c_out}]",
                    b.shape()
                )));
            }
        }
        let geo = Geometry {
            c_in,
            h,
            w,
            kh,
            kw,
            stride: opts.stride,
            pad: opts.padding,
            ho: (h + 2 * opts.padding - kh) / opts.stride + 1,
            wo: (w + 2 * opts.padding - kw) / opts.stride + 1,
        };
        let cg_out = c_out / groups;
        let hw_out = geo.ho * geo.wo;
        let col_rows = cg_in * kh * kw;
        let x = self.data();
        let wd = weight.data();
        let mut out = vec![0.0; batch * c_out * hw_out];
        let mut col = if geo.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; col_rows * hw_out]
        };
        for b in 0..batch {
            let image = &x[b * c_in * h * w..(b + 1) * c_in * h * w];
            for g in 0..groups {
                let cols: &[f64] = if geo.is_pointwise() {
                    &image[g * cg_in * hw_out..(g + 1) * cg_in * hw_out]
                } else {
                    geo.im2col(image, g * cg_in, cg_in, &mut col);
                    &col
                };
                let dst = &mut out[(b * c_out + g * cg_out) * hw_out..];
                gemm(
                    cg_out,
                    col_rows,
                    hw_out,
                    &wd[g * cg_out * col_rows..],
                    false,
                    cols,
                    false,
                    dst,
                    false,
                );
            }
        }
        if let Some(bias) = bias {
            for (i, v) in out.iter_mut().enumerate() {
                *v += bias.data()[(i / hw_out) % c_out];
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let x_saved = self.clone();
        let w_saved = weight.clone();
        let has_bias = bias.is_some();
        Ok(Tensor::from_op(
            vec![batch, c_out, geo.ho, geo.wo],
            out,
            parents,
            move |gout, needs| {
                let x = x_saved.data();
                let wd = w_saved.data();
                let mut gx = needs[0].then(|| vec![0.0; x.len()]);
                let mut gw = needs[1].then(|| vec![0.0; wd.len()]);
                let mut col = vec![0.0; col_rows * hw_out];
                let mut dcol = vec![0.0; col_rows * hw_out];
                for b in 0..batch {
                    let image = &x[b * geo.c_in * geo.h * geo.w..(b + 1) * geo.c_in * geo.h * geo.w];
                    for g in 0..groups {
                        let go = &gout[(b * c_out + g * cg_out) * hw_out..(b * c_out + (g + 1) * cg_out) * hw_out];
                        if let Some(gw) = gw.as_mut() {
                            let cols: &[f64] = if geo.is_pointwise() {
                                &image[g * cg_in * hw_out..(g + 1) * cg_in * hw_out]
                            } else {
                                geo.im2col(image, g * cg_in, cg_in, &mut col);
                                &col
                            };
                            // dW += G · colᵀ
                            gemm(
                                cg_out,
                                hw_out,
                                col_rows,
                                go,
                                false,
                                cols,
                                true,
                                &mut gw[g * cg_out * col_rows..],
                                true,
                            );
                        }
                        if let Some(gx) = gx.as_mut() {
                            let img_grad = &mut gx[b * geo.c_in * geo.h * geo.w..];
                            if geo.is_pointwise() {
                                // dX = Wᵀ · G, written straight into the image planes.
                                gemm(
                                    col_rows,
                                    cg_out,
                                    hw_out,
                                    &wd[g * cg_out * col_rows..],
                                    true,
                                    go,
                                    false,
                                    &mut img_grad[g * cg_in * hw_out..],
                                    true,
                                );
                            } else {
                                gemm(
                                    col_rows,
                                    cg_out,
                                    hw_out,
                                    &wd[g * cg_out * col_rows..],
                                    true,
                                    go,
                                    false,
                                    &mut dcol,
                                    false,
                                );
                                geo.col2im(&dcol, g * cg_in, cg_in, img_grad);
                            }
                        }
                    }
                }
                let mut grads = vec![gx, gw];
                if has_bias {
                    grads.push(needs[2].then(|| {
                        let mut gb = vec![0.0; c_out];
                        for (i, v) in gout.iter().enumerate() {
                            gb[(i / hw_out) % c_out] += v;
                        }
                        gb
                    }));
                }
                grads
            },
        ))
    }
}
