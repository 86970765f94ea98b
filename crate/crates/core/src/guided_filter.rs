//! Detail-guided decoding: a learnable guided filter whose guide is built
//! from the Haar bands of a high-resolution encoder skip.
//!
//! With decoder features `X` (`B×C×H×W`) and the encoder skip `X_res`
//! (`B×C×2H×2W`):
//!
//! ```text
//! Y     = conv1x1([LL, LH, HL, HH])          guide at the decoder resolution
//! μ_X   = f(X),  μ_Y = f(Y)                  learnable depthwise mean filter f
//! σ_XY  = f(X·Y) − μ_X·μ_Y
//! σ_Y   = f(Y·Y) − μ_Y·μ_Y
//! A     = σ_XY / (σ_Y + ε)
//! b     = μ_Y − A·μ_X
//! Z     = α·up(A)·up(X) + up(b) + β·X_res
//! ```
//!
//! `ε` is per channel and kept positive through a softplus. The classical
//! guided-filter offset `b = μ_X − A·μ_Y` is available through
//! [`OffsetForm::Classical`] for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, Init};
use crate::tensor::{inverse_softplus, Conv2dOptions, Module, Parameter, Tensor, UpsampleMode};
use crate::wavelet::{haar_dwt, WaveletBands};

pub const MEAN_KERNEL: usize = 3;
pub const EPSILON_INIT: f64 = 1e-2;

/// Which offset formula the coefficient step uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetForm {
    /// `b = μ_Y − A·μ_X`
    #[default]
    GuideMean,
    /// `b = μ_X − A·μ_Y`
    Classical,
}

/// Where the guide map comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuideSource {
    /// 1×1 convolution over the four stacked Haar bands (`4C → C`).
    Wavelet,
    /// Stride-2 1×1 convolution applied to the skip directly (`C → C`).
    Direct,
}

/// Depthwise `k×k` filter with reflect padding whose kernel is
/// `exp(logits) / Σ exp(logits)` per channel. Logits start at 0, so the
/// initial filter is the exact box mean (weights 1, sum 9) and a constant map
/// comes back unchanged. Every kernel stays a convex combination, which keeps
/// `f(Y²) − f(Y)²` non-negative.
#[derive(Clone, Debug)]
pub struct MeanFilter {
    pub logits: Parameter,
    pub kernel: usize,
}

impl MeanFilter {
    pub fn new(name: &str, channels: usize, kernel: usize) -> Result<MeanFilter> {
        if kernel.is_multiple_of(2) {
            return Err(Error::invalid(format!("mean filter kernel {kernel} must be odd")));
        }
        let n = channels * kernel * kernel;
        Ok(MeanFilter {
            logits: Parameter::new(format!("{name}.logits"), &[channels, 1, kernel, kernel], vec![0.0; n])?,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let channels = self.logits.shape()[0];
        let opts = Conv2dOptions {
            groups: channels,
            ..Default::default()
        };
        let weight = self.logits.tensor().exp();
        // Per-channel kernel sums, accumulated in the same order as the filter.
        let ones = Tensor::full(&[1, channels, self.kernel, self.kernel], 1.0);
        let norm = ones.conv2d(&weight, None, opts)?.reshape(&[channels])?;
        x.pad_reflect(self.kernel / 2)?.conv2d(&weight, None, opts)?.div(&norm)
    }
}

#[derive(Clone, Debug)]
pub struct DgdParams {
    pub channels: usize,
    pub source: GuideSource,
    pub guide_conv: Conv2d,
    pub mean_filter: MeanFilter,
    /// Pre-softplus regulariser, one per channel.
    pub epsilon_raw: Parameter,
    pub alpha: Parameter,
    pub beta: Parameter,
    pub offset: OffsetForm,
    pub upsample: UpsampleMode,
}

impl DgdParams {
    pub fn new(name: &str, channels: usize, source: GuideSource, init: &mut Init) -> Result<DgdParams> {
        let guide_spec = match source {
            GuideSource::Wavelet => ConvSpec::new(4 * channels, channels, 1),
            GuideSource::Direct => ConvSpec::new(channels, channels, 1).stride(2),
        };
        Ok(DgdParams {
            channels,
            source,
            guide_conv: Conv2d::new(&format!("{name}.guide"), guide_spec, init)?,
            mean_filter: MeanFilter::new(&format!("{name}.mean"), channels, MEAN_KERNEL)?,
            epsilon_raw: Parameter::new(
                format!("{name}.epsilon"),
                &[channels],
                vec![inverse_softplus(EPSILON_INIT); channels],
            )?,
            alpha: Parameter::new(format!("{name}.alpha"), &[1], vec![1.0])?,
            beta: Parameter::new(format!("{name}.beta"), &[1], vec![1.0])?,
            offset: OffsetForm::GuideMean,
            upsample: UpsampleMode::BilinearCentered,
        })
    }

    /// Positive per-channel regulariser `ε = softplus(raw)`.
    pub fn epsilon(&self) -> Tensor {
        self.epsilon_raw.tensor().softplus()
    }

    /// Sets every channel's `ε` (must be positive).
    pub fn set_epsilon(&mut self, eps: f64) -> Result<()> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
        }
        self.epsilon_raw.set_data(vec![inverse_softplus(eps); self.channels])
    }

    pub fn set_weights(&mut self, alpha: f64, beta: f64) -> Result<()> {
        self.alpha.set_data(vec![alpha])?;
        self.beta.set_data(vec![beta])
    }
}

impl Module for DgdParams {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.guide_conv.visit_params(f);
        f(&self.mean_filter.logits);
        f(&self.epsilon_raw);
        f(&self.alpha);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        self.guide_conv.visit_params_mut(f);
        f(&mut self.mean_filter.logits);
        f(&mut self.epsilon_raw);
        f(&mut self.alpha);
        f(&mut self.beta);
    }
}

/// Guide map `Y` from the stacked Haar bands.
pub fn build_guide(bands: &WaveletBands, params: &DgdParams) -> Result<Tensor> {
    if params.source != GuideSource::Wavelet {
        return Err(Error::invalid("build_guide needs wavelet-guided parameters"));
    }
    let c = bands.shape()[1];
    if 4 * c != params.guide_conv.weight.shape()[1] {
        return Err(Error::shape(format!(
            "build_guide: {} band channels but guide conv expects {}",
            4 * c,
            params.guide_conv.weight.shape()[1]
        )));
    }
    params.guide_conv.forward(&bands.stacked()?)
}

pub fn learnable_mean(x: &Tensor, params: &DgdParams) -> Result<Tensor> {
    params.mean_filter.forward(x)
}

/// Windowed first and second moments of a feature/guide pair.
#[derive(Clone, Debug)]
pub struct LocalStatistics {
    pub mean_x: Tensor,
    pub mean_y: Tensor,
    pub cov_xy: Tensor,
    pub var_y: Tensor,
}

pub fn local_statistics(x: &Tensor, y: &Tensor, params: &DgdParams) -> Result<LocalStatistics> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!(
            "local_statistics: feature {:?} and guide {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    let mean_x = learnable_mean(x, params)?;
    let mean_y = learnable_mean(y, params)?;
    let cov_xy = learnable_mean(&x.mul(y)?, params)?.sub(&mean_x.mul(&mean_y)?)?;
    let var_y = learnable_mean(&y.mul(y)?, params)?.sub(&mean_y.mul(&mean_y)?)?;
    Ok(LocalStatistics {
        mean_x,
        mean_y,
        cov_xy,
        var_y,
    })
}

/// Linear coefficients `(A, b)` of the local model.
pub fn guided_coefficients(stats: &LocalStatistics, params: &DgdParams) -> Result<(Tensor, Tensor)> {
    let a = stats.cov_xy.div(&stats.var_y.add(&params.epsilon())?)?;
    let b = match params.offset {
        OffsetForm::GuideMean => stats.mean_y.sub(&a.mul(&stats.mean_x)?)?,
        OffsetForm::Classical => stats.mean_x.sub(&a.mul(&stats.mean_y)?)?,
    };
    Ok((a, b))
}

/// Every intermediate of one detail-guided fusion.
#[derive(Clone, Debug)]
pub struct DgdTrace {
    pub guide: Tensor,
    pub stats: LocalStatistics,
    pub a: Tensor,
    pub b: Tensor,
    pub output: Tensor,
}

fn check_pair(x_dec: &Tensor, x_res: &Tensor, params: &DgdParams) -> Result<()> {
    let (d, r) = (x_dec.shape(), x_res.shape());
    let ok = d.len() == 4
        && r.len() == 4
        && d[0] == r[0]
        && d[1] == r[1]
        && d[1] == params.channels
        && r[2] == 2 * d[2]
        && r[3] == 2 * d[3];
    if !ok {
        return Err(Error::shape(format!(
            "dgd: skip {r:?} must be the decoder feature {d:?} at twice the resolution with {} channels",
            params.channels
        )));
    }
    Ok(())
}

/// Runs the filter chain and the final fusion with a caller-supplied guide.
pub fn dgd_with_guide(x_dec: &Tensor, x_res: &Tensor, guide: Tensor, params: &DgdParams) -> Result<DgdTrace> {
    check_pair(x_dec, x_res, params)?;
    if guide.shape() != x_dec.shape() {
        return Err(Error::shape(format!(
            "dgd: guide {:?} must match decoder feature {:?}",
            guide.shape(),
            x_dec.shape()
        )));
    }
    let stats = local_statistics(x_dec, &guide, params)?;
    let (a, b) = guided_coefficients(&stats, params)?;
    let up = |t: &Tensor| t.upsample(2, params.upsample);
    let detail = up(&a)?.mul(&up(x_dec)?)?.mul(params.alpha.tensor())?;
    let output = detail.add(&up(&b)?)?.add(&x_res.mul(params.beta.tensor())?)?;
    Ok(DgdTrace {
        guide,
        stats,
        a,
        b,
        output,
    })
}

pub fn dgd_trace(x_dec: &Tensor, x_res: &Tensor, params: &DgdParams) -> Result<DgdTrace> {
    check_pair(x_dec, x_res, params)?;
    let guide = match params.source {
        GuideSource::Wavelet => build_guide(&haar_dwt(x_res)?, params)?,
        GuideSource::Direct => params.guide_conv.forward(x_res)?,
    };
    dgd_with_guide(x_dec, x_res, guide, params)
}

/// Fuses decoder features with the encoder skip; output has the skip's shape.
pub fn dgd_forward(x_dec: &Tensor, x_res: &Tensor, params: &DgdParams) -> Result<Tensor> {
    Ok(dgd_trace(x_dec, x_res, params)?.output)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckReport};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn params(c: usize) -> DgdParams {
        DgdParams::new("dgd", c, GuideSource::Wavelet, &mut Init::new(7)).unwrap()
    }

    fn zero_guide(p: &mut DgdParams) {
        let n = p.guide_conv.weight.numel();
        p.guide_conv.weight.set_data(vec![0.0; n]).unwrap();
    }

    #[test]
    fn zero_guide_conv_gives_zero_guide() {
        let mut p = params(2);
        zero_guide(&mut p);
        let bands = haar_dwt(&random(1, &[1, 2, 4, 4])).unwrap();
        assert!(build_guide(&bands, &p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ll_quarter_selector_is_block_mean() {
        let mut p = params(1);
        p.guide_conv.weight.set_data(vec![0.25, 0.0, 0.0, 0.0]).unwrap();
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0, 3.0, 0.0, 4.0, 5.0, 7.0, 8.0, 0.0]).unwrap();
        let y = build_guide(&haar_dwt(&x).unwrap(), &p).unwrap();
        assert_eq!(y.data(), &[4.0, 3.0]);
    }

    #[test]
    fn selector_on_first_channels_returns_ll() {
        let c = 3;
        let mut p = params(c);
        let mut w = vec![0.0; c * 4 * c];
        for i in 0..c {
            w[i * 4 * c + i] = 1.0;
        }
        p.guide_conv.weight.set_data(w).unwrap();
        let bands = haar_dwt(&random(2, &[2, c, 6, 4])).unwrap();
        assert_eq!(build_guide(&bands, &p).unwrap().data(), bands.ll.data());
    }

    #[test]
    fn mean_filter_behaviour_at_init() {
        let p = params(1);
        let c = learnable_mean(&Tensor::full(&[1, 1, 5, 4], 0.75), &p).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.75));
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        assert_eq!(learnable_mean(&x, &p).unwrap().data()[4], 5.0);
        let mut z = params(1);
        z.mean_filter
            .logits
            .set_data((0..9).map(|i| i as f64 - 4.0).collect())
            .unwrap();
        let shifted = learnable_mean(&x, &z).unwrap().data()[4];
        assert!(shifted > 5.0 && shifted < 9.0, "{shifted}");
    }

    #[test]
    fn guide_variance_stays_non_negative_for_any_kernel() {
        let mut p = params(3);
        p.mean_filter
            .logits
            .set_data(random(5, &[27]).data().iter().map(|v| 3.0 * v).collect())
            .unwrap();
        let y = random(6, &[2, 3, 6, 6]).scale(40.0);
        let stats = local_statistics(&random(7, &[2, 3, 6, 6]), &y, &p).unwrap();
        assert!(
            stats.var_y.data().iter().all(|&v| v > -1e-9),
            "{:?}",
            stats.var_y.data()
        );
    }

    #[test]
    fn constant_guide_gives_zero_slope_exactly() {
        let mut p = params(2);
        p.set_epsilon(1e-6).unwrap();
        let (x_dec, x_res) = (random(8, &[1, 2, 4, 4]), random(9, &[1, 2, 8, 8]));
        for c in [0.5, 2.0, -4.0] {
            let t = dgd_with_guide(&x_dec, &x_res, Tensor::full(&[1, 2, 4, 4], c), &p).unwrap();
            assert!(t.a.data().iter().all(|&v| v == 0.0), "c = {c}");
        }
    }

    #[test]
    fn mean_filter_is_depthwise() {
        let p = params(2);
        let mut v = vec![0.0; 16];
        v[8..].fill(1.0);
        let m = learnable_mean(&Tensor::from_vec(&[1, 2, 2, 4], v).unwrap(), &p).unwrap();
        assert!(m.data()[..8].iter().all(|&v| v == 0.0));
        assert!(m.data()[8..].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn statistics_edge_cases() {
        let p = params(2);
        let y = random(3, &[1, 2, 4, 4]);
        let constant = Tensor::full(&[1, 2, 4, 4], 2.0);
        let s = local_statistics(&constant, &y, &p).unwrap();
        assert!(s.cov_xy.max_abs() < 1e-15);

        let s = local_statistics(&y, &y, &p).unwrap();
        for (a, b) in s.cov_xy.data().iter().zip(s.var_y.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut k1 = params(2);
        k1.mean_filter = MeanFilter::new("m", 2, 1).unwrap();
        let x = random(4, &[1, 2, 4, 4]);
        let s = local_statistics(&x, &y, &k1).unwrap();
        assert!(s.cov_xy.max_abs() < 1e-15);
    }

    #[test]
    fn coefficient_limits() {
        let mut p = params(1);
        let mean_x = random(5, &[1, 1, 2, 2]);
        let mean_y = random(6, &[1, 1, 2, 2]);
        let var = random(7, &[1, 1, 2, 2]).square().add_scalar(0.5);
        let stats = LocalStatistics {
            mean_x: mean_x.clone(),
            mean_y: mean_y.clone(),
            cov_xy: Tensor::zeros(&[1, 1, 2, 2]),
            var_y: var.clone(),
        };
        let (a, b) = guided_coefficients(&stats, &p).unwrap();
        assert!(a.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.data(), mean_y.data());

        p.set_epsilon(1e-300).unwrap();
        let stats = LocalStatistics {
            cov_xy: var.clone(),
            ..stats
        };
        let (a, b) = guided_coefficients(&stats, &p).unwrap();
        for (i, av) in a.data().iter().enumerate() {
            assert!((av - 1.0).abs() < 1e-12);
            assert!((b.data()[i] - (mean_y.data()[i] - mean_x.data()[i])).abs() < 1e-12);
        }

        p.set_epsilon(1e6).unwrap();
        let (a, b) = guided_coefficients(&stats, &p).unwrap();
        assert!(a.max_abs() < 1e-5);
        for (bv, my) in b.data().iter().zip(mean_y.data()) {
            assert!((bv - my).abs() < 1e-5);
        }
    }

    #[test]
    fn classical_offset_swaps_roles() {
        let mut p = params(1);
        p.offset = OffsetForm::Classical;
        let mean_x = Tensor::full(&[1, 1, 1, 1], 3.0);
        let mean_y = Tensor::full(&[1, 1, 1, 1], 5.0);
        let stats = LocalStatistics {
            mean_x,
            mean_y,
            cov_xy: Tensor::zeros(&[1, 1, 1, 1]),
            var_y: Tensor::ones(&[1, 1, 1, 1]),
        };
        let (_, b) = guided_coefficients(&stats, &p).unwrap();
        assert_eq!(b.item(), 3.0);
    }

    #[test]
    fn pure_skip_when_detail_terms_vanish() {
        let mut p = params(2);
        zero_guide(&mut p);
        p.set_weights(0.0, 1.0).unwrap();
        let x_dec = random(8, &[1, 2, 4, 4]);
        let x_res = random(9, &[1, 2, 8, 8]);
        let z = dgd_forward(&x_dec, &x_res, &p).unwrap();
        assert_eq!(z.data(), x_res.data());
    }

    #[test]
    fn zero_covariance_leaves_upsampled_guide_mean() {
        let mut p = params(2);
        p.set_weights(1.0, 0.0).unwrap();
        // A constant decoder feature has zero covariance with any guide.
        let x_dec = Tensor::full(&[1, 2, 4, 4], 0.5);
        let x_res = random(10, &[1, 2, 8, 8]);
        let t = dgd_trace(&x_dec, &x_res, &p).unwrap();
        assert!(t.a.max_abs() < 1e-15);
        let want = t.stats.mean_y.upsample(2, UpsampleMode::BilinearCentered).unwrap();
        for (z, w) in t.output.data().iter().zip(want.data()) {
            assert!((z - w).abs() < 1e-12);
        }
    }

    #[test]
    fn output_is_affine_in_alpha_and_beta() {
        let mut p = params(2);
        let x_dec = random(11, &[1, 2, 4, 4]);
        let x_res = random(12, &[1, 2, 8, 8]);
        let mut eval = |a: f64, b: f64| {
            p.set_weights(a, b).unwrap();
            dgd_forward(&x_dec, &x_res, &p).unwrap().to_vec()
        };
        let z00 = eval(0.0, 0.0);
        let z10 = eval(1.0, 0.0);
        let z01 = eval(0.0, 1.0);
        let z = eval(-1.7, 2.3);
        for i in 0..z.len() {
            let t1 = z10[i] - z00[i];
            let t3 = z01[i] - z00[i];
            let want = -1.7 * t1 + z00[i] + 2.3 * t3;
            assert!((z[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_relation_enforced() {
        let p = params(2);
        let ok_dec = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(dgd_forward(&ok_dec, &Tensor::zeros(&[1, 2, 8, 6]), &p).is_err());
        assert!(dgd_forward(&ok_dec, &Tensor::zeros(&[1, 3, 8, 8]), &p).is_err());
        assert_eq!(
            dgd_forward(&ok_dec, &Tensor::zeros(&[1, 2, 8, 8]), &p).unwrap().shape(),
            &[1, 2, 8, 8]
        );
    }

    /// Gradient of a projected output w.r.t. both feature maps and every
    /// DGD parameter.
    fn dgd_gradcheck(source: GuideSource, seed: u64) -> GradCheckReport {
        let c = 2;
        let base = DgdParams::new("dgd", c, source, &mut Init::new(seed)).unwrap();
        let mut inputs = vec![random(seed + 1, &[1, c, 4, 4]), random(seed + 2, &[1, c, 8, 8])];
        let mut perturbed = base.clone();
        // Move away from the symmetric box initialisation.
        perturbed.visit_params_mut(&mut |p| {
            let data: Vec<f64> = p
                .tensor()
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v + 0.05 * ((i % 5) as f64 - 2.0))
                .collect();
            p.set_data(data).unwrap();
        });
        perturbed.visit_params(&mut |p| inputs.push(p.tensor().detach()));
        let proj = random(seed + 3, &[1, c, 8, 8]);
        grad_check(
            |t| {
                let mut p = perturbed.clone();
                let mut k = 2;
                p.visit_params_mut(&mut |param| {
                    param.set_tensor(t[k].clone()).unwrap();
                    k += 1;
                });
                Ok(dgd_forward(&t[0], &t[1], &p)?.mul(&proj)?.sum())
            },
            &inputs,
            1e-4,
        )
        .unwrap()
    }

    #[test]
    fn end_to_end_gradients() {
        for source in [GuideSource::Wavelet, GuideSource::Direct] {
            let r = dgd_gradcheck(source, 20);
            assert!(r.passed(), "{source:?}: {r:?}");
        }
    }
}
