//! Overlapping tiling of large scenes and stitching of per-tile logits.

use crate::error::{Error, Result};
use crate::model::{argmax_masks, LabelMask};
use crate::tensor::Tensor;

use super::{Scene, SceneMeta};

/// Tile origins along one axis: stride `tile − overlap`, with the last tile
/// clamped to end at the edge. Axes no longer than a tile get one origin.
pub fn tile_offsets(len: usize, tile: usize, overlap: usize) -> Result<Vec<usize>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::invalid(format!(
            "overlap {overlap} must be smaller than tile size {tile}"
        )));
    }
    let stride = tile - overlap;
    let mut offsets = vec![0];
    let mut o = 0;
    while o + tile < len {
        o = (o + stride).min(len - tile);
        offsets.push(o);
    }
    Ok(offsets)
}

#[derive(Clone, Debug)]
pub struct Tile {
    pub scene: Scene,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug)]
pub struct TileSet {
    pub tiles: Vec<Tile>,
    pub tile_size: usize,
    pub overlap: usize,
    /// Size of the source before any padding.
    pub height: usize,
    pub width: usize,
}

impl TileSet {
    /// Number of tiles covering each source pixel.
    pub fn coverage(&self) -> Vec<u32> {
        let mut count = vec![0u32; self.height * self.width];
        for t in &self.tiles {
            for y in t.row..(t.row + self.tile_size).min(self.height) {
                for x in t.col..(t.col + self.tile_size).min(self.width) {
                    count[y * self.width + x] += 1;
                }
            }
        }
        count
    }
}

/// Mirror index into `0..n` without repeating the edge sample.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pads the bottom and right edges of a `C×H×W` plane set.
fn pad_to<T: Copy>(data: &[T], channels: usize, h: usize, w: usize, nh: usize, nw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * nh * nw);
    for c in 0..channels {
        for y in 0..nh {
            let row = c * h * w + mirror(y, h) * w;
            out.extend((0..nw).map(|x| data[row + mirror(x, w)]));
        }
    }
    out
}

fn crop<T: Copy>(data: &[T], channels: usize, h: usize, w: usize, row: usize, col: usize, size: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        for y in row..row + size {
            let start = (c * h + y) * w + col;
            out.extend_from_slice(&data[start..start + size]);
        }
    }
    out
}

/// Cuts a scene into `tile_size` squares. Scenes smaller than a tile are
/// first reflect-padded on the bottom and right.
pub fn tile_scene(scene: &Scene, tile_size: usize, overlap: usize) -> Result<TileSet> {
    let (h, w) = (scene.height(), scene.width());
    let rows = tile_offsets(h, tile_size, overlap)?;
    let cols = tile_offsets(w, tile_size, overlap)?;
    let (ph, pw) = (h.max(tile_size), w.max(tile_size));
    let (image, labels) = if (ph, pw) == (h, w) {
        (scene.image.to_vec(), scene.mask.labels().to_vec())
    } else {
        (
            pad_to(scene.image.data(), 3, h, w, ph, pw),
            pad_to(scene.mask.labels(), 1, h, w, ph, pw),
        )
    };
    let mut tiles = Vec::with_capacity(rows.len() * cols.len());
    for &row in &rows {
        for &col in &cols {
            let img = crop(&image, 3, ph, pw, row, col, tile_size);
            let lab = crop(&labels, 1, ph, pw, row, col, tile_size);
            let meta = SceneMeta {
                offset: (scene.meta.offset.0 + row, scene.meta.offset.1 + col),
                ..scene.meta.clone()
            };
            let tile = Scene::new(
                Tensor::from_vec(&[3, tile_size, tile_size], img)?,
                LabelMask::new(tile_size, tile_size, lab)?,
                meta,
            )?;
            tiles.push(Tile { scene: tile, row, col });
        }
    }
    Ok(TileSet {
        tiles,
        tile_size,
        overlap,
        height: h,
        width: w,
    })
}

/// Image-only tiling for inference: `(3×t×t tile, row, col)`.
pub fn tile_image(image: &Tensor, tile_size: usize, overlap: usize) -> Result<Vec<(Tensor, usize, usize)>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let (ph, pw) = (h.max(tile_size), w.max(tile_size));
    let padded = if (ph, pw) == (h, w) {
        image.to_vec()
    } else {
        pad_to(image.data(), 3, h, w, ph, pw)
    };
    let mut out = Vec::new();
    for row in tile_offsets(h, tile_size, overlap)? {
        for col in tile_offsets(w, tile_size, overlap)? {
            let t = Tensor::from_vec(
                &[3, tile_size, tile_size],
                crop(&padded, 3, ph, pw, row, col, tile_size),
            )?;
            out.push((t, row, col));
        }
    }
    Ok(out)
}

/// Category logits of one tile, `K×t×t`, placed at `(row, col)`.
#[derive(Clone, Debug)]
pub struct TileLogits {
    pub logits: Tensor,
    pub row: usize,
    pub col: usize,
}

/// Averages overlapping tile logits over a `height×width` canvas and takes
/// the per-pixel argmax. Parts of tiles beyond the canvas are ignored.
pub fn stitch_predictions(tiles: &[TileLogits], height: usize, width: usize) -> Result<LabelMask> {
    let k = match tiles.first() {
        Some(t) if t.logits.ndim() == 3 => t.logits.shape()[0],
        Some(t) => {
            return Err(Error::shape(format!(
                "tile logits must be K×H×W, got {:?}",
                t.logits.shape()
            )))
        }
        None => return Err(Error::invalid("no tiles to stitch")),
    };
    let plane = height * width;
    let mut sum = vec![0.0; k * plane];
    let mut count = vec![0u32; plane];
    for t in tiles {
        let s = t.logits.shape();
        if s.len() != 3 || s[0] != k {
            return Err(Error::shape(format!("tile logits {s:?} do not have {k} categories")));
        }
        let (th, tw) = (s[1], s[2]);
        let data = t.logits.data();
        for y in 0..th {
            let gy = t.row + y;
            if gy >= height {
                break;
            }
            for x in 0..tw {
                let gx = t.col + x;
                if gx >= width {
                    break;
                }
                count[gy * width + gx] += 1;
                for c in 0..k {
                    sum[c * plane + gy * width + gx] += data[(c * th + y) * tw + x];
                }
            }
        }
    }
    if let Some(gap) = count.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!(
            "tiles leave pixel ({}, {}) uncovered",
            gap % width,
            gap / width
        )));
    }
    for c in 0..k {
        for p in 0..plane {
            sum[c * plane + p] /= count[p] as f64;
        }
    }
    let mean = Tensor::from_vec(&[1, k, height, width], sum)?;
    Ok(argmax_masks(&mean)?.remove(0))
}
