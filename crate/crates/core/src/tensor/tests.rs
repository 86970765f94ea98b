use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Weighted sum against a fixed random tensor so every output element
/// carries a distinct gradient.
fn project(t: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, t.shape());
    Ok(t.mul(&w)?.sum())
}

fn check<F>(f: F, inputs: &[Tensor]) -> GradCheckReport
where
    F: FnMut(&[Tensor]) -> Result<Tensor>,
{
    let report = grad_check(f, inputs, TOL).unwrap();
    assert!(report.passed(), "{report:?}");
    report
}

#[test]
fn backward_linear_case() {
    let x = Tensor::from_vec(&[3], vec![0.5, -2.0, 4.0]).unwrap();
    let w = Tensor::from_vec(&[3], vec![1.0, 1.0, 1.0]).unwrap().requires_grad(true);
    w.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(w.grad().unwrap(), x.to_vec());
}

#[test]
fn backward_quadratic_case() {
    let w = Tensor::from_vec(&[4], vec![1.5, -0.25, 3.0, 0.0])
        .unwrap()
        .requires_grad(true);
    w.square().sum().scale(0.5).backward().unwrap();
    assert_eq!(w.grad().unwrap(), w.to_vec());
}

#[test]
fn backward_rejects_non_scalar() {
    let w = Tensor::ones(&[2]).requires_grad(true);
    assert!(matches!(w.scale(2.0).backward(), Err(Error::Shape(_))));
}

#[test]
fn repeated_backward_accumulates_and_reset_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let w = random(&mut rng, &[2, 3, 4, 4]).requires_grad(true);
    let k = random(&mut rng, &[3, 3, 3, 3]).requires_grad(true);
    let build = || {
        let y = w
            .conv2d(
                &k,
                None,
                Conv2dOptions {
                    padding: 1,
                    ..Default::default()
                },
            )
            .unwrap();
        y.relu().softmax(1).unwrap().square().sum()
    };
    let loss = build();
    loss.backward().unwrap();
    let first = k.grad().unwrap();
    loss.backward().unwrap();
    let doubled = k.grad().unwrap();
    for (a, b) in first.iter().zip(&doubled) {
        assert_eq!(2.0 * a, *b);
    }
    k.zero_grad();
    build().backward().unwrap();
    assert_eq!(k.grad().unwrap(), first);
}

#[test]
fn shared_subexpressions_accumulate() {
    let x = Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap().requires_grad(true);
    // f = sum(x * x + x) => df/dx = 2x + 1
    let y = x.mul(&x).unwrap().add(&x).unwrap().sum();
    y.backward().unwrap();
    assert_eq!(x.grad().unwrap(), vec![7.0, -1.0]);
}

#[test]
fn no_grad_guard_skips_recording() {
    let w = Tensor::ones(&[2]).requires_grad(true);
    let y = {
        let _g = NoGradGuard::new();
        w.scale(3.0)
    };
    assert!(!y.is_tracked());
    assert!(w.scale(3.0).is_tracked());
}

#[test]
fn grad_check_sum_of_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, &[3, 4]);
    let r = grad_check(|a| Ok(a[0].square().sum()), &[x], 1e-6).unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn grad_check_constant_function() {
    let x = Tensor::ones(&[3]);
    let r = grad_check(|_| Ok(Tensor::scalar(4.0)), &[x], 1e-6).unwrap();
    assert_eq!(r.max_abs_err, 0.0);
    assert!(r.passed());
}

#[test]
fn grad_elementwise_with_broadcasts() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[2, 3, 2, 2]);
    let b = random(&mut rng, &[2, 3, 2, 2]).add_scalar(3.0).detach();
    let v = random(&mut rng, &[3]);
    let s = random(&mut rng, &[1]);
    check(
        |t| {
            let y = t[0].mul(&t[1])?.sub(&t[0])?.div(&t[1])?.add(&t[2])?.mul(&t[3])?;
            project(&y, 5)
        },
        &[a.clone(), b, v.clone(), s],
    );
    check(
        |t| project(&t[0].mul_along(&t[1], 1)?.add_along(&t[1], 1)?, 6),
        &[a.clone(), v],
    );
    check(|t| project(&t[0].softplus().exp().gelu(), 7), std::slice::from_ref(&a));
    check(
        |t| project(&t[0].scale(-2.5).div_scalar(3.0).add_scalar(1.0).mean(), 8),
        &[a],
    );
}

#[test]
fn grad_relu_away_from_kink() {
    let x = Tensor::from_vec(&[4], vec![-0.7, -0.2, 0.3, 1.1]).unwrap();
    check(|t| project(&t[0].relu(), 9), &[x]);
}

#[test]
fn grad_conv2d_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let cases = [
        ([2, 4, 5, 6], [6, 2, 3, 3], 1, 1, 2),
        ([1, 3, 6, 6], [4, 3, 3, 3], 2, 1, 1),
        ([1, 3, 4, 4], [3, 1, 3, 3], 1, 0, 3),
        ([2, 4, 3, 3], [2, 4, 1, 1], 1, 0, 1),
        ([1, 2, 4, 4], [2, 2, 1, 1], 2, 0, 1),
    ];
    for (xs, ws, stride, padding, groups) in cases {
        let x = random(&mut rng, &xs);
        let w = random(&mut rng, &ws);
        let b = random(&mut rng, &[ws[0]]);
        let opts = Conv2dOptions {
            stride,
            padding,
            groups,
        };
        check(|t| project(&t[0].conv2d(&t[1], Some(&t[2]), opts)?, 12), &[x, w, b]);
    }
}

#[test]
fn grad_matmul_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = random(&mut rng, &[2, 3, 4]);
    let b = random(&mut rng, &[2, 4, 5]);
    let shared = random(&mut rng, &[4, 2]);
    check(|t| project(&t[0].matmul(&t[1])?, 13), &[a.clone(), b]);
    check(|t| project(&t[0].matmul(&t[1])?, 14), &[a.clone(), shared]);
    for axis in 0..3 {
        check(
            |t| project(&t[0].scale(3.0).softmax(axis)?, 15),
            std::slice::from_ref(&a),
        );
    }
}

#[test]
fn grad_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let x = random(&mut rng, &[2, 3, 4, 4]);
    let y = random(&mut rng, &[2, 1, 4, 4]);
    check(
        |t| project(&t[0].permute(&[0, 2, 3, 1])?.reshape(&[2, 16, 3])?, 16),
        std::slice::from_ref(&x),
    );
    check(
        |t| project(&Tensor::concat(&[t[0].clone(), t[1].clone()], 1)?.narrow(1, 2, 2)?, 17),
        &[x.clone(), y],
    );
    check(|t| project(&t[0].pad_reflect(2)?, 18), std::slice::from_ref(&x));
    let idx = Arc::new(vec![0, 5, 5, 7, 1, 0]);
    check(
        |t| project(&t[0].gather(idx.clone(), &[2, 3])?, 19),
        std::slice::from_ref(&x),
    );
    check(|t| project(&t[0].transpose_last()?, 20), &[x]);
}

#[test]
fn grad_upsample_norm_and_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = random(&mut rng, &[1, 2, 3, 4]);
    for mode in [
        UpsampleMode::Nearest,
        UpsampleMode::Bilinear,
        UpsampleMode::BilinearCentered,
    ] {
        check(|t| project(&t[0].upsample(2, mode)?, 21), std::slice::from_ref(&x));
        check(|t| project(&t[0].upsample(3, mode)?, 22), std::slice::from_ref(&x));
    }
    check(
        |t| project(&t[0].normalize_chunks(6, 1e-5)?, 23),
        std::slice::from_ref(&x),
    );
    let logits = random(&mut rng, &[2, 5, 3, 3]).scale(3.0).detach();
    let labels: Vec<u8> = (0..18).map(|i| (i * 7 % 5) as u8).collect();
    let r = grad_check(|t| t[0].cross_entropy(&labels), &[logits], 1e-5).unwrap();
    assert!(r.max_rel_err < 1e-5, "{r:?}");
}

#[test]
fn randomized_shapes_pass_gradient_checks() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for trial in 0..12 {
        let b = rng.random_range(1..3);
        let c = rng.random_range(1..4);
        let h = rng.random_range(3..7);
        let w = rng.random_range(3..7);
        let o = rng.random_range(1..4);
        let k = if rng.random_bool(0.5) { 1 } else { 3 };
        let x = random(&mut rng, &[b, c, h, w]);
        let wt = random(&mut rng, &[o, c, k, k]);
        let opts = Conv2dOptions {
            stride: 1,
            padding: k / 2,
            groups: 1,
        };
        check(
            |t| {
                let y = t[0].conv2d(&t[1], None, opts)?;
                let y = y.normalize_chunks(h * w, 1e-5)?.softmax(1)?;
                project(&y.upsample(2, UpsampleMode::Bilinear)?, 100 + trial)
            },
            &[x, wt],
        );
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-1000.0f64..1000.0, 1..24), rows in 1usize..4) {
        let n = values.len() * rows;
        let data: Vec<f64> = values.iter().cycle().take(n).enumerate().map(|(i, v)| v - i as f64).collect();
        let x = Tensor::from_vec(&[rows, values.len()], data).unwrap();
        let s = x.softmax(1).unwrap();
        for row in s.data().chunks(values.len()) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn upsample_by_one_is_exact(data in prop::collection::vec(-1e6f64..1e6, 12)) {
        let x = Tensor::from_vec(&[1, 3, 2, 2], data).unwrap();
        for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear, UpsampleMode::BilinearCentered] {
            let y = x.upsample(1, mode).unwrap();
            prop_assert_eq!(y.data(), x.data());
        }
    }
}
