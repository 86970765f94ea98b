//! The full segmentation network: a small residual encoder, a decoder of
//! global-local fusion blocks joined to the encoder skips by detail-guided
//! fusion, and a per-pixel category head.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glff::{glff_forward, plain_forward, AttentionBlock, FusionMode, GlffParams};
use crate::guided_filter::{dgd_forward, DgdParams, GuideSource, OffsetForm};
use crate::layers::{Conv2d, ConvSpec, GroupNorm, Init};
use crate::tensor::{Module, NoGradGuard, Parameter, Tensor, UpsampleMode};

pub const NUM_CATEGORIES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Sea = 0,
    ThinIce = 1,
    ThickIce = 2,
    Land = 3,
    PoolIce = 4,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Sea,
        Category::ThinIce,
        Category::ThickIce,
        Category::Land,
        Category::PoolIce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Sea => "Sea",
            Category::ThinIce => "Thin-Ice",
            Category::ThickIce => "Thick-Ice",
            Category::Land => "Land",
            Category::PoolIce => "Pool-Ice",
        }
    }

    pub fn from_index(i: u8) -> Option<Category> {
        Category::ALL.get(i as usize).copied()
    }
}

/// How decoder features are joined to the encoder skip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgdMode {
    /// Bilinear upsampling plus plain skip addition.
    Off,
    /// Guided fusion with a guide taken straight from the skip.
    NoDwt,
    /// Guided fusion with a Haar-band guide.
    #[default]
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_glff: bool,
    pub dgd_mode: DgdMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig::FULL
    }
}

impl AblationConfig {
    pub const BASELINE: AblationConfig = AblationConfig {
        use_glff: false,
        dgd_mode: DgdMode::Off,
    };
    pub const GLFF: AblationConfig = AblationConfig {
        use_glff: true,
        dgd_mode: DgdMode::Off,
    };
    pub const GLFF_DGD_NO_DWT: AblationConfig = AblationConfig {
        use_glff: true,
        dgd_mode: DgdMode::NoDwt,
    };
    pub const FULL: AblationConfig = AblationConfig {
        use_glff: true,
        dgd_mode: DgdMode::Full,
    };

    /// The ablation ladder from the plain baseline to the full network.
    pub const LADDER: [AblationConfig; 4] = [
        AblationConfig::BASELINE,
        AblationConfig::GLFF,
        AblationConfig::GLFF_DGD_NO_DWT,
        AblationConfig::FULL,
    ];

    pub fn tag(&self) -> &'static str {
        match (self.use_glff, self.dgd_mode) {
            (false, DgdMode::Off) => "Transformer",
            (true, DgdMode::Off) => "+GLFF",
            (true, DgdMode::NoDwt) => "+GLFF+DGD(no-dwt)",
            (true, DgdMode::Full) => "GDGT",
            (false, DgdMode::NoDwt) => "Transformer+DGD(no-dwt)",
            (false, DgdMode::Full) => "Transformer+DGD",
        }
    }
}

impl fmt::Display for AblationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GdgtConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub num_categories: usize,
    pub window: usize,
    pub heads: usize,
    pub fusion: FusionMode,
    pub dgd_offset: OffsetForm,
    pub ablation: AblationConfig,
}

impl Default for GdgtConfig {
    fn default() -> Self {
        GdgtConfig::desk()
    }
}

impl GdgtConfig {
    /// 64×64 input, four narrow stages.
    pub fn desk() -> GdgtConfig {
        GdgtConfig {
            input_size: 64,
            stage_channels: vec![16, 32, 64, 128],
            num_categories: NUM_CATEGORIES,
            window: 4,
            heads: 2,
            fusion: FusionMode::Scalar,
            dgd_offset: OffsetForm::GuideMean,
            ablation: AblationConfig::FULL,
        }
    }

    /// 512×512 input with wider stages.
    pub fn full_scale() -> GdgtConfig {
        GdgtConfig {
            input_size: 512,
            stage_channels: vec![64, 128, 256, 512],
            window: 8,
            heads: 8,
            ..GdgtConfig::desk()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial side of encoder stage `i`.
    pub fn stage_size(&self, i: usize) -> usize {
        self.input_size >> (i + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_stages();
        if n == 0 {
            return Err(Error::Config("at least one stage is required".into()));
        }
        if n >= usize::BITS as usize || self.input_size == 0 || !self.input_size.is_multiple_of(1 << n) {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 2^{n}",
                self.input_size
            )));
        }
        if self.num_categories < 2 || self.num_categories > u8::MAX as usize {
            return Err(Error::Config(format!(
                "num_categories {} out of range",
                self.num_categories
            )));
        }
        if self.window == 0 || self.heads == 0 {
            return Err(Error::Config("window and heads must be positive".into()));
        }
        for (i, &c) in self.stage_channels.iter().enumerate() {
            if c == 0 || c % self.heads != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {c} channels not divisible by {} heads",
                    self.heads
                )));
            }
            let side = self.stage_size(i);
            let win = self.window.min(side);
            if !side.is_multiple_of(win) {
                return Err(Error::Config(format!(
                    "stage {i}: {side}×{side} map is not divisible into {win}×{win} windows"
                )));
            }
        }
        Ok(())
    }
}

/// Per-pixel category labels of one image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<LabelMask> {
        if labels.len() != height * width {
            return Err(Error::shape(format!(
                "{height}×{width} mask needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= NUM_CATEGORIES) {
            return Err(Error::LabelOutOfRange {
                label,
                index,
                num_categories: NUM_CATEGORIES,
            });
        }
        Ok(LabelMask { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, category: Category) -> LabelMask {
        LabelMask {
            height,
            width,
            labels: vec![category as u8; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }
}

/// Argmax over the category axis of `B×K×H×W` logits; the lowest index wins ties.
pub fn argmax_masks(logits: &Tensor) -> Result<Vec<LabelMask>> {
    if logits.ndim() != 4 {
        return Err(Error::shape(format!(
            "argmax: expected B×K×H×W, got {:?}",
            logits.shape()
        )));
    }
    let s = logits.shape();
    let (b, k, h, w) = (s[0], s[1], s[2], s[3]);
    if k > u8::MAX as usize + 1 {
        return Err(Error::shape(format!("argmax: {k} categories do not fit in u8")));
    }
    let plane = h * w;
    let data = logits.data();
    (0..b)
        .map(|bi| {
            let base = bi * k * plane;
            let labels = (0..plane)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if data[base + c * plane + p] > data[base + best * plane + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, labels)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
}

impl ResidualBlock {
    fn new(name: &str, channels: usize, init: &mut Init) -> Result<ResidualBlock> {
        let spec = ConvSpec::new(channels, channels, 3).no_bias();
        Ok(ResidualBlock {
            conv1: Conv2d::new(&format!("{name}.conv1"), spec, init)?,
            norm1: GroupNorm::new(&format!("{name}.norm1"), channels)?,
            conv2: Conv2d::new(&format!("{name}.conv2"), spec, init)?,
            norm2: GroupNorm::new(&format!("{name}.norm2"), channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(&self.conv1.forward(x)?)?.relu();
        let h = self.norm2.forward(&self.conv2.forward(&h)?)?;
        Ok(h.add(x)?.relu())
    }
}

impl Module for ResidualBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.conv1.visit_params(f);
        self.norm1.visit_params(f);
        self.conv2.visit_params(f);
        self.norm2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.conv1.visit_params_mut(f);
        self.norm1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.norm2.visit_params_mut(f);
    }
}

/// Stride-2 downsampling followed by two residual blocks.
#[derive(Clone, Debug)]
pub struct EncoderStage {
    pub down: Conv2d,
    pub down_norm: GroupNorm,
    pub blocks: [ResidualBlock; 2],
}

impl EncoderStage {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.down_norm.forward(&self.down.forward(x)?)?.relu();
        for block in &self.blocks {
            h = block.forward(&h)?;
        }
        Ok(h)
    }
}

impl Module for EncoderStage {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.down.visit_params(f);
        self.down_norm.visit_params(f);
        self.blocks.iter().for_each(|b| b.visit_params(f));
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.down.visit_params_mut(f);
        self.down_norm.visit_params_mut(f);
        self.blocks.iter_mut().for_each(|b| b.visit_params_mut(f));
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum DecoderBlock {
    Glff(GlffParams),
    Plain(AttentionBlock),
}

impl DecoderBlock {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            DecoderBlock::Glff(p) => glff_forward(x, p),
            DecoderBlock::Plain(p) => plain_forward(x, p),
        }
    }
}

impl Module for DecoderBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        match self {
            DecoderBlock::Glff(p) => p.visit_params(f),
            DecoderBlock::Plain(p) => p.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        match self {
            DecoderBlock::Glff(p) => p.visit_params_mut(f),
            DecoderBlock::Plain(p) => p.visit_params_mut(f),
        }
    }
}

/// Link from decoder stage `j` to the skip of stage `j − 1`.
#[derive(Clone, Debug)]
pub struct SkipLink {
    /// 1×1 channel projection `C_j → C_{j−1}`.
    pub proj: Conv2d,
    pub dgd: Option<DgdParams>,
}

impl SkipLink {
    pub fn forward(&self, d: &Tensor, skip: &Tensor) -> Result<Tensor> {
        let d = self.proj.forward(d)?;
        match &self.dgd {
            Some(p) => dgd_forward(&d, skip, p),
            None => d.upsample(2, UpsampleMode::BilinearCentered)?.add(skip),
        }
    }
}

impl Module for SkipLink {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.proj.visit_params(f);
        if let Some(p) = &self.dgd {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.proj.visit_params_mut(f);
        if let Some(p) = &mut self.dgd {
            p.visit_params_mut(f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct Gdgt {
    config: GdgtConfig,
    pub encoder: Vec<EncoderStage>,
    /// Indexed by stage, deepest last.
    pub decoder: Vec<DecoderBlock>,
    /// `links[j − 1]` joins decoder stage `j` to skip `j − 1`.
    pub links: Vec<SkipLink>,
    pub head: Conv2d,
}

impl Gdgt {
    pub fn new(config: GdgtConfig, seed: u64) -> Result<Gdgt> {
        config.validate()?;
        let mut init = Init::new(seed);
        let ch = &config.stage_channels;

        let mut encoder = Vec::with_capacity(ch.len());
        let mut c_prev = 3;
        for (i, &c) in ch.iter().enumerate() {
            let name = format!("enc{i}");
            encoder.push(EncoderStage {
                down: Conv2d::new(
                    &format!("{name}.down"),
                    ConvSpec::new(c_prev, c, 3).stride(2).no_bias(),
                    &mut init,
                )?,
                down_norm: GroupNorm::new(&format!("{name}.down_norm"), c)?,
                blocks: [
                    ResidualBlock::new(&format!("{name}.res0"), c, &mut init)?,
                    ResidualBlock::new(&format!("{name}.res1"), c, &mut init)?,
                ],
            });
            c_prev = c;
        }

        let mut decoder = Vec::with_capacity(ch.len());
        for (j, &c) in ch.iter().enumerate() {
            let name = format!("dec{j}");
            decoder.push(if config.ablation.use_glff {
                DecoderBlock::Glff(GlffParams::new(
                    &format!("{name}.glff"),
                    c,
                    config.heads,
                    config.window,
                    config.fusion,
                    &mut init,
                )?)
            } else {
                DecoderBlock::Plain(AttentionBlock::new(
                    &format!("{name}.attn"),
                    c,
                    config.heads,
                    config.window,
                    &mut init,
                )?)
            });
        }

        let mut links = Vec::with_capacity(ch.len().saturating_sub(1));
        for j in 1..ch.len() {
            let name = format!("link{j}");
            let proj = Conv2d::new(&format!("{name}.proj"), ConvSpec::new(ch[j], ch[j - 1], 1), &mut init)?;
            let source = match config.ablation.dgd_mode {
                DgdMode::Off => None,
                DgdMode::NoDwt => Some(GuideSource::Direct),
                DgdMode::Full => Some(GuideSource::Wavelet),
            };
            let dgd = match source {
                Some(source) => {
                    let mut p = DgdParams::new(&format!("{name}.dgd"), ch[j - 1], source, &mut init)?;
                    p.offset = config.dgd_offset;
                    Some(p)
                }
                None => None,
            };
            links.push(SkipLink { proj, dgd });
        }

        let head = Conv2d::new("head", ConvSpec::new(ch[0], config.num_categories, 1), &mut init)?;
        Ok(Gdgt {
            config,
            encoder,
            decoder,
            links,
            head,
        })
    }

    pub fn config(&self) -> &GdgtConfig {
        &self.config
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        let s = self.config.input_size;
        let ok = image.ndim() == 4 && image.shape()[1] == 3 && image.shape()[2] == s && image.shape()[3] == s;
        if !ok {
            return Err(Error::shape(format!(
                "model expects B×3×{s}×{s} images, got {:?}",
                image.shape()
            )));
        }
        Ok(())
    }

    /// Stage features, shallowest first.
    pub fn encoder_forward(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(image)?;
        let mut features = Vec::with_capacity(self.encoder.len());
        let mut h = image.clone();
        for stage in &self.encoder {
            h = stage.forward(&h)?;
            features.push(h.clone());
        }
        Ok(features)
    }

    pub fn decoder_forward(&self, features: &[Tensor]) -> Result<Tensor> {
        let n = self.config.num_stages();
        if features.len() != n {
            return Err(Error::shape(format!(
                "decoder needs {n} stage features, got {}",
                features.len()
            )));
        }
        for (i, f) in features.iter().enumerate() {
            let side = self.config.stage_size(i);
            let c = self.config.stage_channels[i];
            if f.ndim() != 4 || f.shape()[1..] != [c, side, side] {
                return Err(Error::shape(format!(
                    "stage {i} feature must be B×{c}×{side}×{side}, got {:?}",
                    f.shape()
                )));
            }
        }
        let mut d = features[n - 1].clone();
        for j in (0..n).rev() {
            d = self.decoder[j].forward(&d)?;
            if j > 0 {
                d = self.links[j - 1].forward(&d, &features[j - 1])?;
            }
        }
        self.head.forward(&d)?.upsample(2, UpsampleMode::BilinearCentered)
    }

    /// Category logits, `B×K×S×S`.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        self.decoder_forward(&self.encoder_forward(image)?)
    }

    pub fn predict(&self, image: &Tensor) -> Result<Vec<LabelMask>> {
        let _guard = NoGradGuard::new();
        argmax_masks(&self.forward(image)?)
    }

    /// Guide the ablated fusion at `link` would build from `x_res`.
    pub fn build_no_dwt_guide(&self, link: usize, x_res: &Tensor) -> Result<Tensor> {
        build_no_dwt_guide(x_res, self.dgd(link)?)
    }

    pub fn dgd(&self, link: usize) -> Result<&DgdParams> {
        self.links
            .get(link)
            .and_then(|l| l.dgd.as_ref())
            .ok_or_else(|| Error::invalid(format!("link {link} has no guided fusion")))
    }
}

impl Module for Gdgt {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.encoder.iter().for_each(|s| s.visit_params(f));
        self.decoder.iter().for_each(|b| b.visit_params(f));
        self.links.iter().for_each(|l| l.visit_params(f));
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.encoder.iter_mut().for_each(|s| s.visit_params_mut(f));
        self.decoder.iter_mut().for_each(|b| b.visit_params_mut(f));
        self.links.iter_mut().for_each(|l| l.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

/// Guide computed straight from the skip with a stride-2 1×1 convolution.
pub fn build_no_dwt_guide(x_res: &Tensor, params: &DgdParams) -> Result<Tensor> {
    if params.source != GuideSource::Direct {
        return Err(Error::invalid("no-dwt guide needs direct-guide parameters"));
    }
    params.guide_conv.forward(x_res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guided_filter::{build_guide, dgd_trace};
    use crate::tensor::grad_check_sampled;
    use crate::wavelet::haar_dwt;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn tiny(ablation: AblationConfig) -> GdgtConfig {
        GdgtConfig {
            input_size: 16,
            stage_channels: vec![4, 8],
            ablation,
            ..GdgtConfig::desk()
        }
    }

    #[test]
    fn desk_stage_shapes() {
        let m = Gdgt::new(GdgtConfig::desk(), 0).unwrap();
        let f = m.encoder_forward(&random(1, &[1, 3, 64, 64])).unwrap();
        let shapes: Vec<&[usize]> = f.iter().map(Tensor::shape).collect();
        assert_eq!(
            shapes,
            vec![&[1, 16, 32, 32][..], &[1, 32, 16, 16], &[1, 64, 8, 8], &[1, 128, 4, 4]]
        );
        assert_eq!(m.decoder_forward(&f).unwrap().shape(), &[1, 5, 64, 64]);
        assert_eq!(m.decoder.len(), 4);
        assert_eq!(m.links.iter().filter(|l| l.dgd.is_some()).count(), 3);
    }

    #[test]
    fn parameter_counts_are_frozen() {
        let counts: Vec<usize> = AblationConfig::LADDER
            .iter()
            .map(|&a| {
                Gdgt::new(
                    GdgtConfig {
                        ablation: a,
                        ..GdgtConfig::desk()
                    },
                    0,
                )
                .unwrap()
                .num_parameters()
            })
            .collect();
        assert_eq!(counts, FROZEN_DESK_COUNTS);
        let again = Gdgt::new(GdgtConfig::desk(), 99).unwrap().num_parameters();
        assert_eq!(again, FROZEN_DESK_COUNTS[3]);
    }

    // Row differences match closed forms: the local branch and logits add
    // Σ(C² + 11C) + 8 = 24408; the direct guide adds Σ(C² + 11C + 2) = 6614
    // over the three links; the Haar guide adds Σ3C² = 16128.
    const FROZEN_DESK_COUNTS: [usize; 4] = [1_070_629, 1_095_037, 1_101_651, 1_117_779];

    #[test]
    fn config_validation() {
        let mut c = GdgtConfig::desk();
        c.input_size = 72;
        assert!(Gdgt::new(c, 0).is_err());
        let mut c = GdgtConfig::desk();
        c.heads = 3;
        assert!(c.validate().is_err());
        assert!(GdgtConfig::full_scale().validate().is_ok());
        let m = Gdgt::new(GdgtConfig::desk(), 0).unwrap();
        assert!(m.forward(&Tensor::zeros(&[1, 3, 32, 32])).is_err());
    }

    #[test]
    fn zero_final_conv_makes_residual_block_identity() {
        let mut m = Gdgt::new(tiny(AblationConfig::FULL), 3).unwrap();
        let block = &mut m.encoder[0].blocks[0];
        let n = block.conv2.weight.numel();
        block.conv2.weight.set_data(vec![0.0; n]).unwrap();
        let x = random(4, &[2, 4, 8, 8]);
        assert_eq!(block.forward(&x).unwrap().data(), x.data());
    }

    #[test]
    fn ablation_off_matches_hand_wired_reference() {
        let m = Gdgt::new(tiny(AblationConfig::GLFF), 5).unwrap();
        let image = random(6, &[1, 3, 16, 16]);
        let f = m.encoder_forward(&image).unwrap();
        let d1 = m.decoder[1].forward(&f[1]).unwrap();
        let up = m.links[0]
            .proj
            .forward(&d1)
            .unwrap()
            .upsample(2, UpsampleMode::BilinearCentered)
            .unwrap();
        let d0 = m.decoder[0].forward(&up.add(&f[0]).unwrap()).unwrap();
        let want = m
            .head
            .forward(&d0)
            .unwrap()
            .upsample(2, UpsampleMode::BilinearCentered)
            .unwrap();
        assert_eq!(m.forward(&image).unwrap().data(), want.data());
    }

    #[test]
    fn every_ablation_runs_forward_and_backward() {
        for a in AblationConfig::LADDER {
            let m = Gdgt::new(tiny(a), 7).unwrap();
            let logits = m.forward(&random(8, &[2, 3, 16, 16])).unwrap();
            assert_eq!(logits.shape(), &[2, 5, 16, 16]);
            let labels: Vec<u8> = (0..512).map(|i| (i % 5) as u8).collect();
            logits.cross_entropy(&labels).unwrap().backward().unwrap();
            let mut with_grad = 0;
            m.visit_params(&mut |p| with_grad += p.grad().is_some() as usize);
            assert!(with_grad > 0, "{a}");
        }
    }

    #[test]
    fn ablation_tags() {
        let tags: Vec<&str> = AblationConfig::LADDER.iter().map(AblationConfig::tag).collect();
        assert_eq!(tags, ["Transformer", "+GLFF", "+GLFF+DGD(no-dwt)", "GDGT"]);
    }

    #[test]
    fn forward_is_deterministic_and_batch_equivariant() {
        let m = Gdgt::new(tiny(AblationConfig::FULL), 9).unwrap();
        let a = random(10, &[1, 3, 16, 16]);
        let b = random(11, &[1, 3, 16, 16]);
        let both = Tensor::concat(&[a.clone(), b.clone()], 0).unwrap();
        let y = m.forward(&both).unwrap();
        assert_eq!(y.data(), m.forward(&both).unwrap().data());
        let n = y.numel() / 2;
        assert_eq!(&y.data()[..n], m.forward(&a).unwrap().data());
        assert_eq!(&y.data()[n..], m.forward(&b).unwrap().data());
        let again = Gdgt::new(tiny(AblationConfig::FULL), 9).unwrap();
        assert_eq!(again.forward(&a).unwrap().data(), m.forward(&a).unwrap().data());
    }

    #[test]
    fn argmax_cases() {
        let mut v = vec![0.0; 5 * 4];
        v[3 * 4..4 * 4].fill(2.0);
        let masks = argmax_masks(&Tensor::from_vec(&[1, 5, 2, 2], v).unwrap()).unwrap();
        assert!(masks[0].labels().iter().all(|&l| l == 3));

        let tie = Tensor::from_vec(&[1, 5, 1, 1], vec![0.0, 1.0, 1.0, 0.5, 1.0]).unwrap();
        assert_eq!(argmax_masks(&tie).unwrap()[0].labels(), &[1]);
    }

    #[test]
    fn predict_matches_argmax_of_logits() {
        let m = Gdgt::new(tiny(AblationConfig::FULL), 12).unwrap();
        let image = random(13, &[2, 3, 16, 16]);
        let logits = m.forward(&image).unwrap();
        let pred = m.predict(&image).unwrap();
        let (k, plane) = (5, 256);
        for (bi, mask) in pred.iter().enumerate() {
            for p in 0..plane {
                let vals: Vec<f64> = (0..k).map(|c| logits.data()[(bi * k + c) * plane + p]).collect();
                let best = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let want = vals.iter().position(|&v| v == best).unwrap() as u8;
                assert_eq!(mask.labels()[p], want);
            }
        }
    }

    #[test]
    fn label_mask_rejects_out_of_range() {
        assert!(matches!(
            LabelMask::new(1, 2, vec![0, 5]),
            Err(Error::LabelOutOfRange { label: 5, index: 1, .. })
        ));
        assert!(LabelMask::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn no_dwt_guide_matches_dwt_guide_shape() {
        let full = Gdgt::new(tiny(AblationConfig::FULL), 14).unwrap();
        let ablated = Gdgt::new(tiny(AblationConfig::GLFF_DGD_NO_DWT), 14).unwrap();
        let x_res = random(15, &[1, 4, 8, 8]);
        let dwt_guide = build_guide(&haar_dwt(&x_res).unwrap(), full.dgd(0).unwrap()).unwrap();
        let direct = ablated.build_no_dwt_guide(0, &x_res).unwrap();
        assert_eq!(direct.shape(), dwt_guide.shape());
        assert!(build_no_dwt_guide(&x_res, full.dgd(0).unwrap()).is_err());
    }

    #[test]
    fn zero_no_dwt_guide_collapses_to_scaled_skip() {
        let mut m = Gdgt::new(tiny(AblationConfig::GLFF_DGD_NO_DWT), 16).unwrap();
        let p = m.links[0].dgd.as_mut().unwrap();
        let n = p.guide_conv.weight.numel();
        p.guide_conv.weight.set_data(vec![0.0; n]).unwrap();
        p.set_weights(1.0, 0.5).unwrap();
        let x_dec = random(17, &[1, 4, 4, 4]);
        let x_res = random(18, &[1, 4, 8, 8]);
        let t = dgd_trace(&x_dec, &x_res, m.dgd(0).unwrap()).unwrap();
        assert!(t.guide.data().iter().all(|&v| v == 0.0));
        assert!(t.a.data().iter().all(|&v| v == 0.0));
        for (z, r) in t.output.data().iter().zip(x_res.data()) {
            assert_eq!(*z, 0.5 * r);
        }
    }

    #[test]
    fn two_stage_model_gradients() {
        let base = Gdgt::new(tiny(AblationConfig::FULL), 21).unwrap();
        let image = random(22, &[1, 3, 16, 16]);
        let labels: Vec<u8> = (0..256).map(|i| ((i * 7 + i / 16) % 5) as u8).collect();
        let mut inputs = vec![image];
        base.visit_params(&mut |p| inputs.push(p.tensor().detach()));
        let r = grad_check_sampled(
            |t| {
                let mut m = base.clone();
                let mut k = 1;
                m.visit_params_mut(&mut |p| {
                    p.set_tensor(t[k].clone()).unwrap();
                    k += 1;
                });
                m.forward(&t[0])?.cross_entropy(&labels)
            },
            &inputs,
            1e-4,
            Some(6),
            23,
        )
        .unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
