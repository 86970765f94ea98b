//! Image, palette-mask and manifest files.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::{ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::model::{LabelMask, NUM_CATEGORIES};
use crate::tensor::Tensor;

use super::{Scene, SceneMeta};

/// Mask colours, indexed by category.
pub const PALETTE: [[u8; 3]; NUM_CATEGORIES] = [
    [0, 0, 128],
    [135, 206, 235],
    [255, 255, 255],
    [139, 69, 19],
    [70, 130, 180],
];

pub fn category_for_color(rgb: [u8; 3]) -> Option<u8> {
    PALETTE.iter().position(|&p| p == rgb).map(|i| i as u8)
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    Ok(reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?
        .to_rgb8())
}

/// 8-bit RGB image as a `3×H×W` tensor of `v / 255`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open_rgb(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            data[c * h * w + p] = raw[3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::from_vec(&[3, h, w], data)
}

/// Writes a `3×H×W` tensor in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape(format!("expected a 3×H×W image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let data = image.data();
    let mut raw = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            raw[3 * p + c] = (data[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    let img = RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized for image");
    img.save(path)?;
    Ok(())
}

/// Reads a palette mask; any pixel whose colour is not in [`PALETTE`] is an error.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    let img = open_rgb(path)?;
    let (w, h) = (img.width(), img.height());
    let mut labels = Vec::with_capacity(w as usize * h as usize);
    for (x, y, px) in img.enumerate_pixels() {
        match category_for_color(px.0) {
            Some(c) => labels.push(c),
            None => return Err(Error::OffPalette { x, y, rgb: px.0 }),
        }
    }
    LabelMask::new(h as usize, w as usize, labels)
}

/// Writes an indexed PNG whose palette entries are the category colours.
pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), mask.width() as u32, mask.height() as u32);
    encoder.set_color(png::ColorType::Indexed);
    encoder.set_depth(png::BitDepth::Eight);
    encoder.set_palette(PALETTE.concat());
    let png_err = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(mask.labels()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn read_scene(image_path: &Path, mask_path: &Path) -> Result<Scene> {
    let image = read_image(image_path)?;
    let mask = read_mask(mask_path)?;
    Scene::new(image, mask, SceneMeta::new(image_path.display().to_string()))
}

/// One manifest record. Paths are stored as written; [`read_manifest`]
/// resolves relative ones against the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub scale: f64,
}

/// Parses `image<TAB>mask<TAB>scale` lines; blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |msg: String| Error::format(path, format!("line {}: {msg}", lineno + 1));
        if fields.len() != 3 {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let scale: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad scale {:?}", fields[2])))?;
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(bad(format!("scale {scale} must be positive")));
        }
        entries.push(ManifestEntry {
            image: base.join(fields[0]),
            mask: base.join(fields[1]),
            scale,
        });
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::from("# image\tmask\tscale\n");
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.image.display(), e.mask.display(), e.scale));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mask = LabelMask::new(3, 4, vec![0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1]).unwrap();
        write_mask(&path, &mask).unwrap();
        assert_eq!(read_mask(&path).unwrap(), mask);
    }

    #[test]
    fn off_palette_pixel_reports_coordinates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        let mut img = RgbImage::from_pixel(4, 3, image::Rgb(PALETTE[0]));
        img.put_pixel(2, 1, image::Rgb([1, 2, 3]));
        img.save(&path).unwrap();
        match read_mask(&path) {
            Err(Error::OffPalette { x, y, rgb }) => assert_eq!((x, y, rgb), (2, 1, [1, 2, 3])),
            other => panic!("expected off-palette error, got {other:?}"),
        }
    }

    #[test]
    fn image_values_are_scaled_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("i.png");
        RgbImage::from_raw(2, 1, vec![0, 51, 255, 10, 20, 30])
            .unwrap()
            .save(&path)
            .unwrap();
        let t = read_image(&path).unwrap();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(
            t.data(),
            &[0.0, 10.0 / 255.0, 51.0 / 255.0, 20.0 / 255.0, 1.0, 30.0 / 255.0]
        );
        write_image(&path, &t).unwrap();
        assert_eq!(read_image(&path).unwrap().data(), t.data());
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("list.tsv");
        let entries = vec![
            ManifestEntry {
                image: "a.png".into(),
                mask: "a_mask.png".into(),
                scale: 1.0,
            },
            ManifestEntry {
                image: "b.png".into(),
                mask: "b_mask.png".into(),
                scale: 0.25,
            },
        ];
        write_manifest(&path, &entries).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[1].image, dir.path().join("b.png"));
        assert_eq!(back[1].scale, 0.25);
        std::fs::write(&path, "a.png\tb.png\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Format { .. })));
        std::fs::write(&path, "a.png\tb.png\t-1\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(
            read_mask(Path::new("/nonexistent/m.png")),
            Err(Error::Io { .. })
        ));
    }
}
