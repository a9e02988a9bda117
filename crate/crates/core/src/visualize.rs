//! Attention heatmap overlays written as PNG files.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::agda::normalize_augmentation_map;
use crate::attention::AttentionMaps;
use crate::backbone::Backbone;
use crate::data::chw_to_rgb;
use crate::error::{Error, Result};
use crate::model::MultiAttentionModel;
use crate::nn::Mode;
use crate::tensor::Tensor;

/// Blue-cyan-yellow-red ramp for a value in `[0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let r = (1.5 - (4.0 * v - 3.0).abs()).clamp(0.0, 1.0);
    let g = (1.5 - (4.0 * v - 2.0).abs()).clamp(0.0, 1.0);
    let b = (1.5 - (4.0 * v - 1.0).abs()).clamp(0.0, 1.0);
    [r, g, b]
}

/// Blends the heatmap of one head over the image at 50% opacity.
pub fn overlay(image: &[f64], map: &[f64], h: usize, w: usize) -> RgbImage {
    let plane = h * w;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let heat = heat_color(map[i]);
        Rgb(std::array::from_fn(|c| {
            let v = 0.5 * image[c * plane + i].clamp(0.0, 1.0) + 0.5 * heat[c];
            (v * 255.0).round() as u8
        }))
    })
}

/// The input followed by one overlay per head, side by side.
pub fn grid(image: &RgbImage, overlays: &[RgbImage]) -> RgbImage {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(w * (overlays.len() as u32 + 1), h);
    for (k, tile) in std::iter::once(image).chain(overlays).enumerate() {
        image::imageops::replace(&mut out, tile, (k as u32 * w) as i64, 0);
    }
    out
}

/// Overlays for sample `b` of a batch: one image per head.
pub fn sample_overlays(images: &Tensor, maps: &AttentionMaps, b: usize) -> Result<Vec<RgbImage>> {
    let (_, _, h, w) = images.dims4()?;
    let (ah, aw) = maps.spatial();
    Ok((0..maps.heads())
        .map(|k| {
            let m = normalize_augmentation_map(maps.head(b, k), ah, aw, h, w);
            overlay(images.outer(b), &m, h, w)
        })
        .collect())
}

/// Writes `<id>_att<k>.png` for each head and `<id>_grid.png` per input.
pub fn write_overlays<B: Backbone>(
    model: &mut MultiAttentionModel<B>,
    inputs: &[(String, Vec<f64>)],
    resolution: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (id, pixels) in inputs {
        let x = Tensor::from_vec(&[1, 3, resolution, resolution], pixels.clone())?;
        let (out, _) = model.forward_full(&x, Mode::Eval, None)?;
        let overlays = sample_overlays(&x, &out.attention, 0)?;
        for (k, img) in overlays.iter().enumerate() {
            let p = out_dir.join(format!("{id}_att{}.png", k + 1));
            save(img, &p)?;
            written.push(p);
        }
        let p = out_dir.join(format!("{id}_grid.png"));
        save(&grid(&chw_to_rgb(pixels, resolution, resolution), &overlays), &p)?;
        written.push(p);
    }
    Ok(written)
}

fn save(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}
