//! Global-local feature fusion block for the decoder.
//!
//! The global path runs windowed multi-head self-attention and a small
//! feed-forward net over non-overlapping `window×window` token groups. The
//! local path is a depthwise 3×3 plus pointwise 1×1 convolution. A softmax
//! over two learned logits mixes them, and the input is added back:
//!
//! ```text
//! out = x + w₀·global(x) + w₁·local(x)
//! ```

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, Init, LayerNorm, Linear};
use crate::tensor::{Module, Parameter, Tensor};

/// Granularity of the learned fusion weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// One weight pair shared by every channel.
    #[default]
    Scalar,
    PerChannel,
}

/// Token layout produced by [`patch_embed`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
}

impl WindowLayout {
    pub fn groups(&self) -> usize {
        self.batch * (self.height / self.window) * (self.width / self.window)
    }

    pub fn tokens_per_group(&self) -> usize {
        self.window * self.window
    }

    /// For every token slot `(group, token, channel)`, its flat BCHW index.
    fn source_indices(&self) -> Vec<usize> {
        let (b, c, h, w, win) = (self.batch, self.channels, self.height, self.width, self.window);
        let mut idx = Vec::with_capacity(b * c * h * w);
        for bi in 0..b {
            for wy in 0..h / win {
                for wx in 0..w / win {
                    for iy in 0..win {
                        for ix in 0..win {
                            let (y, x) = (wy * win + iy, wx * win + ix);
                            for ci in 0..c {
                                idx.push(((bi * c + ci) * h + y) * w + x);
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Splits a BCHW map into `[groups, window², C]` token groups. A window larger
/// than the map is clamped to the map's height.
pub fn patch_embed(x: &Tensor, window: usize) -> Result<(Tensor, WindowLayout)> {
    if x.ndim() != 4 {
        return Err(Error::shape(format!("patch_embed: expected BCHW, got {:?}", x.shape())));
    }
    let s = x.shape();
    let window = window.min(s[2]).min(s[3]);
    if window == 0 || !s[2].is_multiple_of(window) || !s[3].is_multiple_of(window) {
        return Err(Error::shape(format!(
            "patch_embed: {}×{} map is not divisible into {window}×{window} windows",
            s[2], s[3]
        )));
    }
    let layout = WindowLayout {
        batch: s[0],
        channels: s[1],
        height: s[2],
        width: s[3],
        window,
    };
    let shape = [layout.groups(), layout.tokens_per_group(), layout.channels];
    let tokens = x.gather(Arc::new(layout.source_indices()), &shape)?;
    Ok((tokens, layout))
}

/// Inverse of [`patch_embed`].
pub fn patch_unembed(tokens: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let expect = [layout.groups(), layout.tokens_per_group(), layout.channels];
    if tokens.shape() != expect {
        return Err(Error::shape(format!(
            "patch_unembed: tokens {:?} do not match layout {expect:?}",
            tokens.shape()
        )));
    }
    let src = layout.source_indices();
    let mut inverse = vec![0; src.len()];
    for (slot, &pixel) in src.iter().enumerate() {
        inverse[pixel] = slot;
    }
    tokens.gather(
        Arc::new(inverse),
        &[layout.batch, layout.channels, layout.height, layout.width],
    )
}

/// Windowed self-attention followed by the feed-forward net.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub norm_attn: LayerNorm,
    pub qkv: Linear,
    pub out_proj: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub heads: usize,
    pub window: usize,
}

pub const FFN_EXPANSION: usize = 2;

impl AttentionBlock {
    pub fn new(name: &str, dim: usize, heads: usize, window: usize, init: &mut Init) -> Result<AttentionBlock> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::invalid(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        if window == 0 {
            return Err(Error::invalid("window must be positive"));
        }
        let hidden = FFN_EXPANSION * dim;
        Ok(AttentionBlock {
            norm_attn: LayerNorm::new(&format!("{name}.norm_attn"), dim)?,
            qkv: Linear::new(&format!("{name}.qkv"), dim, 3 * dim, init)?,
            out_proj: Linear::new(&format!("{name}.out_proj"), dim, dim, init)?,
            norm_ffn: LayerNorm::new(&format!("{name}.norm_ffn"), dim)?,
            ffn_in: Linear::new(&format!("{name}.ffn_in"), dim, hidden, init)?,
            ffn_out: Linear::new(&format!("{name}.ffn_out"), hidden, dim, init)?,
            heads,
            window,
        })
    }

    pub fn dim(&self) -> usize {
        self.out_proj.weight.shape()[0]
    }

    /// Global features of a BCHW map, same shape as the input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[1] != self.dim() {
            return Err(Error::shape(format!(
                "attention block: expected B×{}×H×W, got {:?}",
                self.dim(),
                x.shape()
            )));
        }
        let (tokens, layout) = patch_embed(x, self.window)?;
        let (attended, _) = multi_head_attention(&self.norm_attn.forward(&tokens)?, self)?;
        let hidden = self.ffn_in.forward(&self.norm_ffn.forward(&attended)?)?.gelu();
        patch_unembed(&self.ffn_out.forward(&hidden)?, &layout)
    }
}

impl Module for AttentionBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm_attn.visit_params(f);
        self.qkv.visit_params(f);
        self.out_proj.visit_params(f);
        self.norm_ffn.visit_params(f);
        self.ffn_in.visit_params(f);
        self.ffn_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.norm_attn.visit_params_mut(f);
        self.qkv.visit_params_mut(f);
        self.out_proj.visit_params_mut(f);
        self.norm_ffn.visit_params_mut(f);
        self.ffn_in.visit_params_mut(f);
        self.ffn_out.visit_params_mut(f);
    }
}

/// Scaled dot-product attention within each token group. Returns the
/// output-projected tokens and each head's `[groups, n, n]` weights.
pub fn multi_head_attention(tokens: &Tensor, block: &AttentionBlock) -> Result<(Tensor, Vec<Tensor>)> {
    let dim = block.dim();
    if tokens.ndim() != 3 || tokens.shape()[2] != dim {
        return Err(Error::shape(format!(
            "attention: expected [groups, tokens, {dim}], got {:?}",
            tokens.shape()
        )));
    }
    let d_head = dim / block.heads;
    let scale = 1.0 / (d_head as f64).sqrt();
    let qkv = block.qkv.forward(tokens)?;
    let mut outputs = Vec::with_capacity(block.heads);
    let mut weights = Vec::with_capacity(block.heads);
    for h in 0..block.heads {
        let q = qkv.narrow(2, h * d_head, d_head)?;
        let k = qkv.narrow(2, dim + h * d_head, d_head)?;
        let v = qkv.narrow(2, 2 * dim + h * d_head, d_head)?;
        let attn = q.matmul(&k.transpose_last()?)?.scale(scale).softmax(2)?;
        outputs.push(attn.matmul(&v)?);
        weights.push(attn);
    }
    let merged = if outputs.len() == 1 {
        outputs.pop().expect("one head")
    } else {
        Tensor::concat(&outputs, 2)?
    };
    Ok((block.out_proj.forward(&merged)?, weights))
}

#[derive(Clone, Debug)]
pub struct GlffParams {
    pub global: AttentionBlock,
    pub local_depthwise: Conv2d,
    pub local_pointwise: Conv2d,
    /// `[2]` for scalar fusion, `[2, C]` per channel.
    pub fusion_logits: Parameter,
}

impl GlffParams {
    pub fn new(
        name: &str,
        dim: usize,
        heads: usize,
        window: usize,
        fusion: FusionMode,
        init: &mut Init,
    ) -> Result<GlffParams> {
        let logits_shape: Vec<usize> = match fusion {
            FusionMode::Scalar => vec![2],
            FusionMode::PerChannel => vec![2, dim],
        };
        let n = logits_shape.iter().product();
        Ok(GlffParams {
            global: AttentionBlock::new(&format!("{name}.global"), dim, heads, window, init)?,
            local_depthwise: Conv2d::new(
                &format!("{name}.local_dw"),
                ConvSpec::new(dim, dim, 3).depthwise().reflect(),
                init,
            )?,
            local_pointwise: Conv2d::new(&format!("{name}.local_pw"), ConvSpec::new(dim, dim, 1), init)?,
            fusion_logits: Parameter::new(format!("{name}.fusion"), &logits_shape, vec![0.0; n])?,
        })
    }

    pub fn fusion_mode(&self) -> FusionMode {
        if self.fusion_logits.shape().len() == 1 {
            FusionMode::Scalar
        } else {
            FusionMode::PerChannel
        }
    }

    /// Softmax of the logits along the branch axis.
    pub fn fusion_weights(&self) -> Result<Tensor> {
        self.fusion_logits.tensor().softmax(0)
    }
}

impl Module for GlffParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.global.visit_params(f);
        self.local_depthwise.visit_params(f);
        self.local_pointwise.visit_params(f);
        f(&self.fusion_logits);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.global.visit_params_mut(f);
        self.local_depthwise.visit_params_mut(f);
        self.local_pointwise.visit_params_mut(f);
        f(&mut self.fusion_logits);
    }
}

pub fn local_branch(x: &Tensor, params: &GlffParams) -> Result<Tensor> {
    let h = params.local_depthwise.forward(x)?.relu();
    params.local_pointwise.forward(&h)
}

pub fn fuse(global_feat: &Tensor, local_feat: &Tensor, params: &GlffParams) -> Result<Tensor> {
    if global_feat.shape() != local_feat.shape() {
        return Err(Error::shape(format!(
            "fuse: global {:?} and local {:?} differ",
            global_feat.shape(),
            local_feat.shape()
        )));
    }
    let w = params.fusion_weights()?;
    match params.fusion_mode() {
        FusionMode::Scalar => global_feat
            .mul(&w.narrow(0, 0, 1)?)?
            .add(&local_feat.mul(&w.narrow(0, 1, 1)?)?),
        FusionMode::PerChannel => {
            let c = params.fusion_logits.shape()[1];
            let w0 = w.narrow(0, 0, 1)?.reshape(&[c])?;
            let w1 = w.narrow(0, 1, 1)?.reshape(&[c])?;
            global_feat.mul_along(&w0, 1)?.add(&local_feat.mul_along(&w1, 1)?)
        }
    }
}

pub fn glff_forward(x: &Tensor, params: &GlffParams) -> Result<Tensor> {
    let global_feat = params.global.forward(x)?;
    let local_feat = local_branch(x, params)?;
    x.add(&fuse(&global_feat, &local_feat, params)?)
}

/// Decoder block without the local branch: `x + global(x)`.
pub fn plain_forward(x: &Tensor, block: &AttentionBlock) -> Result<Tensor> {
    x.add(&block.forward(x)?)
}
