//! Seeded synthetic sea-ice scenes with exact ground truth.
//!
//! Layout, in painting order: a textured land band along one border, thick
//! ice floes from thresholded value noise, a thin-ice halo around the floes,
//! and pool-ice pores punched into the interior of the larger floes. Every
//! remaining pixel is open sea.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Category, LabelMask};
use crate::tensor::Tensor;

use super::{Scene, SceneMeta};

pub const SYNTH_MIN_SIZE: usize = 64;
const MAX_ATTEMPTS: usize = 64;

/// Smooth value noise in `[0, 1]` with lattice spacing `cell`.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cell: f64) -> Vec<f64> {
    let g = (size as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..g * g).map(|_| rng.random()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f64 / cell;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..size {
            let fx = x as f64 / cell;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |yy: usize, xx: usize| lattice[yy * g + xx];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Pixels within Euclidean distance `r` of any set pixel.
fn dilate(mask: &[bool], size: usize, r: usize) -> Vec<bool> {
    let r2 = (r * r) as isize;
    let ri = r as isize;
    let mut out = vec![false; mask.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            if !mask[(y as usize) * size + x as usize] {
                continue;
            }
            for dy in -ri..=ri {
                for dx in -ri..=ri {
                    let (ny, nx) = (y + dy, x + dx);
                    if dy * dy + dx * dx <= r2 && ny >= 0 && nx >= 0 && ny < size as isize && nx < size as isize {
                        out[ny as usize * size + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

fn erode(mask: &[bool], size: usize, r: usize) -> Vec<bool> {
    let inverse: Vec<bool> = mask.iter().map(|m| !m).collect();
    let grown = dilate(&inverse, size, r);
    // Pixels near the border count as eroded away as well.
    (0..mask.len())
        .map(|i| {
            let (y, x) = (i / size, i % size);
            let inside = y >= r && x >= r && y + r < size && x + r < size;
            mask[i] && !grown[i] && inside
        })
        .collect()
}

fn stamp_disk(labels: &mut [u8], size: usize, cy: usize, cx: usize, r: f64, value: u8) {
    let ri = r.ceil() as isize;
    for dy in -ri..=ri {
        for dx in -ri..=ri {
            let (y, x) = (cy as isize + dy, cx as isize + dx);
            if ((dy * dy + dx * dx) as f64) <= r * r && y >= 0 && x >= 0 && y < size as isize && x < size as isize {
                labels[y as usize * size + x as usize] = value;
            }
        }
    }
}

/// Land band along a random border with a noisy inner edge.
fn land_band(rng: &mut ChaCha8Rng, size: usize) -> Vec<bool> {
    let side = rng.random_range(0..4);
    let depth = size as f64 * rng.random_range(0.12..0.2);
    let wobble = value_noise(rng, size, size as f64 / 3.0);
    (0..size * size)
        .map(|i| {
            let (y, x) = (i / size, i % size);
            let (dist, along) = match side {
                0 => (y, x),
                1 => (size - 1 - y, x),
                2 => (x, y),
                _ => (size - 1 - x, y),
            };
            let edge = depth * (0.6 + 0.8 * wobble[along]);
            (dist as f64) < edge
        })
        .collect()
}

fn draw_labels(rng: &mut ChaCha8Rng, size: usize) -> Vec<u8> {
    let u = size as f64 / 64.0;
    let land = land_band(rng, size);

    let coarse = value_noise(rng, size, size as f64 / 4.0);
    let fine = value_noise(rng, size, size as f64 / 16.0);
    let field: Vec<f64> = coarse.iter().zip(&fine).map(|(c, f)| 0.75 * c + 0.25 * f).collect();
    let mut open: Vec<f64> = field.iter().zip(&land).filter(|(_, &l)| !l).map(|(v, _)| *v).collect();
    open.sort_by(f64::total_cmp);
    let q = rng.random_range(0.55..0.72);
    let threshold = open[((open.len() as f64 * q) as usize).min(open.len() - 1)];
    let thick: Vec<bool> = field.iter().zip(&land).map(|(&v, &l)| !l && v > threshold).collect();

    let halo_r = (3.0 * u).round().max(2.0) as usize;
    let halo = dilate(&thick, size, halo_r);

    let mut labels: Vec<u8> = (0..size * size)
        .map(|i| {
            if land[i] {
                Category::Land as u8
            } else if thick[i] {
                Category::ThickIce as u8
            } else if halo[i] {
                Category::ThinIce as u8
            } else {
                Category::Sea as u8
            }
        })
        .collect();

    let pore_r = u * rng.random_range(3.0..4.5);
    let deep = erode(&thick, size, (pore_r + 2.0 * u).ceil() as usize);
    let candidates: Vec<usize> = (0..deep.len()).filter(|&i| deep[i]).collect();
    if !candidates.is_empty() {
        for _ in 0..rng.random_range(1..4) {
            let c = candidates[rng.random_range(0..candidates.len())];
            stamp_disk(&mut labels, size, c / size, c % size, pore_r, Category::PoolIce as u8);
        }
    }
    labels
}

/// Fixed layout holding all five categories: land along the top, one round
/// floe with a pore in the lower half.
fn fallback_labels(size: usize) -> Vec<u8> {
    let mut labels = vec![Category::Sea as u8; size * size];
    for v in labels.iter_mut().take(size * (size / 8)) {
        *v = Category::Land as u8;
    }
    let (cy, cx) = (size * 5 / 8, size / 2);
    let r = size as f64 / 5.0;
    stamp_disk(
        &mut labels,
        size,
        cy,
        cx,
        r + (size as f64 / 21.0).max(2.0),
        Category::ThinIce as u8,
    );
    stamp_disk(&mut labels, size, cy, cx, r, Category::ThickIce as u8);
    stamp_disk(&mut labels, size, cy, cx, r / 3.0, Category::PoolIce as u8);
    labels
}

fn all_present(labels: &[u8]) -> bool {
    let mut seen = [false; 5];
    labels.iter().for_each(|&l| seen[l as usize] = true);
    seen.iter().all(|&s| s)
}

/// Base colour and texture amplitude per category.
const APPEARANCE: [([f64; 3], f64); 5] = [
    ([0.05, 0.10, 0.28], 0.03),
    ([0.50, 0.62, 0.72], 0.03),
    ([0.93, 0.95, 0.97], 0.025),
    ([0.45, 0.30, 0.15], 0.08),
    ([0.16, 0.36, 0.62], 0.03),
];

fn render(rng: &mut ChaCha8Rng, labels: &[u8], size: usize) -> Vec<f64> {
    let texture = value_noise(rng, size, (size as f64 / 32.0).max(1.5));
    let plane = size * size;
    let mut image = vec![0.0; 3 * plane];
    for p in 0..plane {
        let (base, amp) = APPEARANCE[labels[p] as usize];
        let grain: f64 = rng.random_range(-1.0..1.0);
        let t = 2.0 * texture[p] - 1.0;
        for c in 0..3 {
            image[c * plane + p] = (base[c] + amp * (0.7 * t + 0.3 * grain)).clamp(0.0, 1.0);
        }
    }
    image
}

/// Deterministic `size×size` scene for `seed` containing all five categories.
/// Sizes below [`SYNTH_MIN_SIZE`] are raised to it.
pub fn synth_scene(seed: u64, size: usize) -> Scene {
    let size = size.max(SYNTH_MIN_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = (0..MAX_ATTEMPTS)
        .map(|_| draw_labels(&mut rng, size))
        .find(|l| all_present(l))
        .unwrap_or_else(|| fallback_labels(size));
    let image = render(&mut rng, &labels, size);
    Scene {
        image: Tensor::from_vec(&[3, size, size], image).expect("sized image"),
        mask: LabelMask::new(size, size, labels).expect("labels in range"),
        meta: SceneMeta::new(format!("synth:{seed}")),
    }
}
