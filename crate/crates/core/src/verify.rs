//! Fast self-checks shared by the `verify` command and the acceptance tests.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::tile_offsets;
use crate::error::Result;
use crate::glff::{glff_forward, multi_head_attention, AttentionBlock, FusionMode, GlffParams};
use crate::guided_filter::{dgd_forward, DgdParams, GuideSource};
use crate::layers::{Conv2d, ConvSpec, Init};
use crate::metrics::{compute_metrics, ConfusionMatrix, Metrics};
use crate::model::{Gdgt, GdgtConfig, LabelMask};
use crate::tensor::{grad_check_sampled, GradCheckReport, Module, Tensor};
use crate::training::loss;
use crate::wavelet::{haar_dwt, inverse_haar_dwt};

/// Stable suite names, in run order.
pub const SUITES: [&str; 4] = ["dwt-reconstruction", "grad-check", "metrics-oracle", "tiling-coverage"];

/// Relative-error bound for the gradient suite.
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteOutcome {
    /// One line, `PASS name (detail, 0.12s)`.
    pub fn line(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "{verdict} {} ({}, {:.2}s)",
            self.name,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SuiteOutcome {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    SuiteOutcome {
        name,
        passed,
        detail,
        elapsed: start.elapsed(),
    }
}

pub fn run_suite(name: &str) -> Option<SuiteOutcome> {
    Some(match name {
        "dwt-reconstruction" => dwt_reconstruction(1000, 0),
        "grad-check" => grad_suite(),
        "metrics-oracle" => metrics_oracle_suite(200, 0),
        "tiling-coverage" => tiling_suite(50, 0),
        _ => return None,
    })
}

pub fn run_all() -> Vec<SuiteOutcome> {
    SUITES.iter().filter_map(|s| run_suite(s)).collect()
}

/// Bit-exact reconstruction and the `Σ bands² = 4 Σ x²` identity on seeded
/// integer-valued 8×8 maps.
pub fn dwt_reconstruction(maps: usize, seed: u64) -> SuiteOutcome {
    timed("dwt-reconstruction", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst_energy: f64 = 0.0;
        for i in 0..maps {
            let data: Vec<f64> = (0..64).map(|_| rng.random_range(-128i32..=128) as f64).collect();
            let x = Tensor::from_vec(&[1, 1, 8, 8], data)?;
            let bands = haar_dwt(&x)?;
            if inverse_haar_dwt(&bands)?.data() != x.data() {
                return Ok((false, format!("map {i} not reconstructed exactly")));
            }
            let sq = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
            let bands_energy = sq(&bands.ll) + sq(&bands.lh) + sq(&bands.hl) + sq(&bands.hh);
            worst_energy = worst_energy.max((bands_energy - 4.0 * sq(&x)).abs());
        }
        Ok((
            worst_energy < 1e-9,
            format!("{maps} maps, energy error {worst_energy:.1e}"),
        ))
    })
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("sized")
}

/// Grad check of `f(inputs, module)` over the inputs and every parameter of
/// `base`. Outputs are contracted with a fixed random projection so every
/// element contributes.
fn check_module<M, F>(
    base: &M,
    inputs: Vec<Tensor>,
    per_input: Option<usize>,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    M: Module + Clone,
    F: FnMut(&[Tensor], &M) -> Result<Tensor>,
{
    let n_inputs = inputs.len();
    let mut all = inputs;
    base.visit_params(&mut |p| all.push(p.tensor().detach()));
    grad_check_sampled(
        |t| {
            let mut m = base.clone();
            let mut k = n_inputs;
            let mut status = Ok(());
            m.visit_params_mut(&mut |p| {
                if status.is_ok() {
                    status = p.set_tensor(t[k].clone());
                }
                k += 1;
            });
            status?;
            f(&t[..n_inputs], &m)
        },
        &all,
        GRAD_TOL,
        per_input,
        seed,
    )
}

fn projected(out: Tensor, rng_seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let proj = random(&mut rng, out.shape());
    Ok(out.mul(&proj)?.sum())
}

/// Named gradient checks covering every differentiable building block.
pub fn grad_cases() -> Vec<(&'static str, Result<GradCheckReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut init = Init::new(7);
    let mut cases = Vec::new();

    let conv = Conv2d::new("conv", ConvSpec::new(3, 4, 3).stride(2), &mut init);
    let x = random(&mut rng, &[2, 3, 8, 8]);
    cases.push((
        "conv2d",
        conv.and_then(|c| check_module(&c, vec![x], None, 1, |t, m| projected(m.forward(&t[0])?, 11))),
    ));

    let dw = Conv2d::new("dw", ConvSpec::new(4, 4, 3).depthwise().reflect(), &mut init);
    let x = random(&mut rng, &[1, 4, 6, 6]);
    cases.push((
        "conv2d-depthwise-reflect",
        dw.and_then(|c| check_module(&c, vec![x], None, 2, |t, m| projected(m.forward(&t[0])?, 12))),
    ));

    let attn = AttentionBlock::new("attn", 8, 2, 4, &mut init);
    let tokens = random(&mut rng, &[2, 16, 8]);
    cases.push((
        "attention",
        attn.and_then(|a| {
            check_module(&a, vec![tokens], None, 3, |t, m| {
                projected(multi_head_attention(&t[0], m)?.0, 13)
            })
        }),
    ));

    let glff = GlffParams::new("glff", 8, 2, 4, FusionMode::Scalar, &mut init).and_then(|mut p| {
        p.fusion_logits.set_data(vec![0.3, -0.2])?;
        Ok(p)
    });
    let x = random(&mut rng, &[1, 8, 8, 8]);
    cases.push((
        "glff-block",
        glff.and_then(|p| check_module(&p, vec![x], None, 4, |t, m| projected(glff_forward(&t[0], m)?, 14))),
    ));

    for (name, source) in [
        ("dgd-block", GuideSource::Wavelet),
        ("dgd-block-no-dwt", GuideSource::Direct),
    ] {
        let dgd = DgdParams::new("dgd", 4, source, &mut init);
        let x_dec = random(&mut rng, &[1, 4, 4, 4]);
        let x_res = random(&mut rng, &[1, 4, 8, 8]);
        cases.push((
            name,
            dgd.and_then(|p| {
                check_module(&p, vec![x_dec, x_res], None, 5, |t, m| {
                    projected(dgd_forward(&t[0], &t[1], m)?, 15)
                })
            }),
        ));
    }

    let config = GdgtConfig {
        input_size: 16,
        stage_channels: vec![4, 8],
        ..GdgtConfig::desk()
    };
    let labels: Vec<u8> = (0..256).map(|i| ((i * 7 + i / 16) % 5) as u8).collect();
    let image = random(&mut rng, &[1, 3, 16, 16]);
    cases.push((
        "model-2-stage",
        Gdgt::new(config, 3)
            .and_then(|g| check_module(&g, vec![image], Some(6), 6, |t, m| loss(&m.forward(&t[0])?, &labels))),
    ));

    let logits = random(&mut rng, &[2, 5, 3, 3]);
    let labels: Vec<u8> = (0..18).map(|i| (i % 5) as u8).collect();
    cases.push((
        "loss",
        grad_check_sampled(|t| loss(&t[0], &labels), &[logits], GRAD_TOL, None, 7),
    ));
    cases
}

pub fn grad_suite() -> SuiteOutcome {
    timed("grad-check", || {
        let cases = grad_cases();
        let mut worst: f64 = 0.0;
        for (name, r) in &cases {
            match r {
                Ok(r) if r.passed() => worst = worst.max(r.max_rel_err),
                Ok(r) => return Ok((false, format!("{name}: rel err {:.2e}", r.max_rel_err))),
                Err(e) => return Ok((false, format!("{name}: {e}"))),
            }
        }
        Ok((true, format!("{} cases, max rel err {worst:.1e}", cases.len())))
    })
}

/// Scores from a direct pixel scan, independent of the confusion matrix.
pub fn oracle_metrics(pred: &[u8], gt: &[u8], k: usize) -> Metrics {
    let (mut tp, mut fp, mut fn_, mut gt_count) = (vec![0u64; k], vec![0u64; k], vec![0u64; k], vec![0u64; k]);
    let mut correct = 0u64;
    for (&p, &g) in pred.iter().zip(gt) {
        gt_count[g as usize] += 1;
        if p == g {
            tp[g as usize] += 1;
            correct += 1;
        } else {
            fp[p as usize] += 1;
            fn_[g as usize] += 1;
        }
    }
    let total = gt.len() as f64;
    let mut iou = vec![None; k];
    let mut f1 = vec![None; k];
    let mut fwiou = 0.0;
    for c in 0..k {
        if tp[c] + fp[c] + fn_[c] == 0 {
            continue;
        }
        let i = tp[c] as f64 / (tp[c] + fp[c] + fn_[c]) as f64;
        iou[c] = Some(i);
        f1[c] = Some(2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fn_[c]) as f64);
        fwiou += gt_count[c] as f64 / total * i;
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Metrics {
        miou: mean(&iou),
        f1: mean(&f1),
        oa: correct as f64 / total,
        fwiou,
        per_category_iou: iou,
        per_category_f1: f1,
    }
}

/// The 2-category example: each category has 3 hits, 1 miss and 1 false alarm.
pub fn hand_example() -> Result<bool> {
    let gt = LabelMask::new(2, 4, vec![0, 0, 0, 0, 1, 1, 1, 1])?;
    let pred = LabelMask::new(2, 4, vec![0, 0, 0, 1, 1, 1, 1, 0])?;
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&pred, &gt)?;
    let m = compute_metrics(&cm)?;
    Ok((m.miou, m.oa, m.f1, m.fwiou) == (0.6, 0.75, 0.75, 0.6))
}

pub fn metrics_oracle_suite(pairs: usize, seed: u64) -> SuiteOutcome {
    timed("metrics-oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = 5;
        for i in 0..pairs {
            // Skewed draws so some categories are rare or absent.
            let present = rng.random_range(1..=k);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<u8> {
                (0..64 * 64).map(|_| rng.random_range(0..present) as u8).collect()
            };
            let gt = draw(&mut rng);
            let pred: Vec<u8> = draw(&mut rng)
                .into_iter()
                .zip(&gt)
                .map(|(p, &g)| if rng.random_bool(0.6) { g } else { p })
                .collect();
            let mut cm = ConfusionMatrix::new(k);
            cm.accumulate(
                &LabelMask::new(64, 64, pred.clone())?,
                &LabelMask::new(64, 64, gt.clone())?,
            )?;
            if compute_metrics(&cm)? != oracle_metrics(&pred, &gt, k) {
                return Ok((false, format!("pair {i} differs from the oracle")));
            }
        }
        if !hand_example()? {
            return Ok((false, "hand example mismatch".into()));
        }
        Ok((true, format!("{pairs} pairs + hand example exact")))
    })
}

/// Checks that the tiles for an `h×w` image stay in bounds and cover every
/// pixel. Returns the tile origins.
pub fn check_tiling(
    h: usize,
    w: usize,
    tile: usize,
    overlap: usize,
) -> Result<std::result::Result<Vec<(usize, usize)>, String>> {
    let rows = tile_offsets(h, tile, overlap)?;
    let cols = tile_offsets(w, tile, overlap)?;
    let (ph, pw) = (h.max(tile), w.max(tile));
    let mut covered = vec![false; h * w];
    let mut origins = Vec::new();
    for &r in &rows {
        for &c in &cols {
            if r + tile > ph || c + tile > pw {
                return Ok(Err(format!("tile at ({r}, {c}) leaves the {h}×{w} image")));
            }
            for y in r..(r + tile).min(h) {
                covered[y * w + c..y * w + (c + tile).min(w)].fill(true);
            }
            origins.push((r, c));
        }
    }
    if let Some(i) = covered.iter().position(|&c| !c) {
        return Ok(Err(format!("pixel ({}, {}) of {h}×{w} uncovered", i / w, i % w)));
    }
    Ok(Ok(origins))
}

pub fn tiling_suite(sizes: usize, seed: u64) -> SuiteOutcome {
    timed("tiling-coverage", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..sizes {
            let (h, w) = (rng.random_range(800..=3000), rng.random_range(800..=3000));
            if let Err(msg) = check_tiling(h, w, 800, 200)? {
                return Ok((false, msg));
            }
        }
        let origins = check_tiling(1400, 1400, 800, 200)?;
        let expected = vec![(0, 0), (0, 600), (600, 0), (600, 600)];
        if origins.as_ref() != Ok(&expected) {
            return Ok((false, format!("1400×1400 gave {origins:?}")));
        }
        Ok((true, format!("{sizes} sizes covered, 1400² -> 4 tiles")))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_resolve() {
        for name in SUITES {
            assert!(matches!(
                name,
                "dwt-reconstruction" | "grad-check" | "metrics-oracle" | "tiling-coverage"
            ));
        }
        assert!(run_suite("nope").is_none());
    }

    #[test]
    fn fast_suites_pass() {
        for s in [
            dwt_reconstruction(50, 1),
            metrics_oracle_suite(10, 1),
            tiling_suite(5, 1),
        ] {
            assert!(s.passed, "{}", s.line());
        }
    }

    #[test]
    fn oracle_detects_absent_categories() {
        let m = oracle_metrics(&[0, 0, 1], &[0, 0, 0], 3);
        assert_eq!(m.per_category_iou, vec![Some(2.0 / 3.0), Some(0.0), None]);
    }

    #[test]
    fn tiling_gap_is_reported() {
        assert!(check_tiling(1400, 1400, 800, 200).unwrap().is_ok());
        assert!(check_tiling(100, 100, 0, 0).is_err());
    }

    #[test]
    fn outcome_line_format() {
        let s = tiling_suite(1, 0);
        assert!(s.line().starts_with("PASS tiling-coverage ("));
    }
}
