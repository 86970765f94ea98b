//! Scenes, geometric resampling, tiling and the synthetic sea-ice generator.

mod io;
mod synth;
mod tiling;

use crate::error::{Error, Result};
use crate::model::LabelMask;
use crate::tensor::Tensor;

pub use io::{
    category_for_color, read_image, read_manifest, read_mask, read_scene, write_image, write_manifest, write_mask,
    ManifestEntry, PALETTE,
};
pub use synth::{synth_scene, SYNTH_MIN_SIZE};
pub use tiling::{stitch_predictions, tile_image, tile_offsets, tile_scene, Tile, TileLogits, TileSet};

pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.5, 1.0, 1.5];
pub const DEFAULT_TILE: usize = 800;
pub const DEFAULT_OVERLAP: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMeta {
    pub source: String,
    pub scale: f64,
    /// `(row, col)` of the crop within the rescaled source.
    pub offset: (usize, usize),
}

impl SceneMeta {
    pub fn new(source: impl Into<String>) -> SceneMeta {
        SceneMeta {
            source: source.into(),
            scale: 1.0,
            offset: (0, 0),
        }
    }
}

/// An RGB image in `[0, 1]` (`3×H×W`) with its label mask.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub mask: LabelMask,
    pub meta: SceneMeta,
}

impl Scene {
    pub fn new(image: Tensor, mask: LabelMask, meta: SceneMeta) -> Result<Scene> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("scene image must be 3×H×W, got {s:?}")));
        }
        if (s[1], s[2]) != (mask.height(), mask.width()) {
            return Err(Error::shape(format!(
                "scene image is {}×{} but mask is {}×{}",
                s[1],
                s[2],
                mask.height(),
                mask.width()
            )));
        }
        Ok(Scene { image, mask, meta })
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }
}

/// Source coordinate of output pixel `i` under pixel-centre alignment.
fn centre_coord(i: usize, src: usize, dst: usize) -> f64 {
    (i as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Bilinear resampling of `C×H×W` planes with pixel-centre alignment and
/// edge clamping. Equal sizes copy exactly.
pub fn resize_bilinear(data: &[f64], channels: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    if (h, w) == (nh, nw) {
        return data.to_vec();
    }
    let taps = |dst: usize, src: usize| -> Vec<(usize, usize, f64)> {
        (0..dst)
            .map(|i| {
                let s = centre_coord(i, src, dst).clamp(0.0, (src - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(nh, h), taps(nw, w));
    let mut out = Vec::with_capacity(channels * nh * nw);
    for c in 0..channels {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

/// Nearest-neighbour resampling of a label plane with pixel-centre alignment.
pub fn resize_nearest(labels: &[u8], h: usize, w: usize, nh: usize, nw: usize) -> Vec<u8> {
    let pick = |i: usize, src: usize, dst: usize| (((i as f64 + 0.5) * src as f64 / dst as f64) as usize).min(src - 1);
    let cols: Vec<usize> = (0..nw).map(|x| pick(x, w, nw)).collect();
    let mut out = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let row = pick(y, h, nh) * w;
        out.extend(cols.iter().map(|&x| labels[row + x]));
    }
    out
}

/// Resamples a scene to `nh×nw`: bilinear image, nearest mask.
pub fn resize_scene(scene: &Scene, nh: usize, nw: usize) -> Result<Scene> {
    if nh == 0 || nw == 0 {
        return Err(Error::invalid(format!("cannot resize to {nh}×{nw}")));
    }
    let (h, w) = (scene.height(), scene.width());
    let image = Tensor::from_vec(&[3, nh, nw], resize_bilinear(scene.image.data(), 3, h, w, nh, nw))?;
    let mask = LabelMask::new(nh, nw, resize_nearest(scene.mask.labels(), h, w, nh, nw))?;
    Scene::new(image, mask, scene.meta.clone())
}

/// One rescaled copy of `scene` per ratio; sizes round to the nearest pixel.
pub fn multiscale_rescale(scene: &Scene, ratios: &[f64]) -> Result<Vec<Scene>> {
    ratios
        .iter()
        .map(|&r| {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::invalid(format!("scale ratio {r} must be positive")));
            }
            let nh = (scene.height() as f64 * r).round() as usize;
            let nw = (scene.width() as f64 * r).round() as usize;
            if nh < 2 || nw < 2 {
                return Err(Error::invalid(format!(
                    "ratio {r} shrinks {}×{} below 2 pixels",
                    scene.height(),
                    scene.width()
                )));
            }
            let mut out = resize_scene(scene, nh, nw)?;
            out.meta.scale = scene.meta.scale * r;
            Ok(out)
        })
        .collect()
}

/// Square network input of side `side`.
pub fn resize_to_input(scene: &Scene, side: usize) -> Result<Scene> {
    resize_scene(scene, side, side)
}

/// Rescale, tile and resize each scene into `side×side` training samples.
/// A scene that already fits inside one tile is resized directly instead of
/// being padded up to the tile size.
pub fn prepare_samples(
    scenes: &[Scene],
    ratios: &[f64],
    tile_size: usize,
    overlap: usize,
    side: usize,
) -> Result<Vec<Scene>> {
    let mut out = Vec::new();
    for scene in scenes {
        for scaled in multiscale_rescale(scene, ratios)? {
            if scaled.height() <= tile_size && scaled.width() <= tile_size {
                out.push(resize_to_input(&scaled, side)?);
                continue;
            }
            for tile in tile_scene(&scaled, tile_size, overlap)?.tiles {
                out.push(resize_to_input(&tile.scene, side)?);
            }
        }
    }
    Ok(out)
}

/// Stacks scene images into a `B×3×H×W` batch and concatenates their labels.
pub fn batch(scenes: &[&Scene]) -> Result<(Tensor, Vec<u8>)> {
    let first = scenes.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w) = (first.height(), first.width());
    let mut pixels = Vec::with_capacity(scenes.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(scenes.len() * h * w);
    for s in scenes {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::shape(format!(
                "batch mixes {h}×{w} and {}×{} scenes",
                s.height(),
                s.width()
            )));
        }
        pixels.extend_from_slice(s.image.data());
        labels.extend_from_slice(s.mask.labels());
    }
    Ok((Tensor::from_vec(&[scenes.len(), 3, h, w], pixels)?, labels))
}
