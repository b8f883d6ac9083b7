//! PNG output for `dump-attn` and `render-pred`.

use std::path::Path;

use anyhow::Context;
use csts_core::data::frames::{gray_image, overlay};
use csts_core::data::{read_frames, ClipManifest, FrameSet};
use csts_core::data::ClipSample;
use csts_core::fusion::spatial_correlation_map;
use csts_core::heads::gaze_pixel;
use csts_core::{CstsError, Graph, Model, ParamStore, Precision};
use image::imageops::{resize, FilterType};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

/// Bilinear resize of a row-major `[h, w]` map.
fn upsample(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    if (h, w) == (out_h, out_w) {
        return map.to_vec();
    }
    let img: ImageBuffer<Luma<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, map.iter().map(|&v| v as f32).collect()).expect("map size");
    resize(&img, out_w as u32, out_h as u32, FilterType::Triangle).into_raw().into_iter().map(f64::from).collect()
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> anyhow::Result<()> {
    img(path).map_err(CstsError::from).with_context(|| format!("writing {}", path.display()))
}

fn frames_of(clip: &ClipManifest) -> anyhow::Result<FrameSet> {
    Ok(read_frames(&clip.frames)?)
}

/// Writes one grey map and one overlay per token time step. Maps are scaled
/// so uniform attention over the grid renders as mid grey.
pub fn dump_attention(
    model: &Model,
    store: &ParamStore,
    clip: &ClipManifest,
    sample: &ClipSample,
    precision: Precision,
    dir: &Path,
) -> anyhow::Result<usize> {
    if model.sts().is_none() {
        anyhow::bail!(CstsError::config("dump-attn needs a checkpoint with the STS fusion module"));
    }
    let s = sample.to_sample(&model.cfg)?;
    let mut g = Graph::with_params(store);
    g.set_precision(precision);
    let out = model.forward(&mut g, &s.frames, &s.spectrograms)?;
    let bundle = out.bundle.context("the forward pass produced no fusion outputs")?;
    let [t, gh, gw] = model.cfg.video.out_grid();
    let maps = spatial_correlation_map(Some(g.value(bundle.spatial_probs)), t, [gh, gw])?;
    let set = frames_of(clip)?;
    let (fh, fw) = (set.height, set.width);
    let n = (gh * gw) as f64;
    let mut written = 0;
    for k in 0..t {
        let map: Vec<f64> = maps.data()[k * gh * gw..(k + 1) * gh * gw].iter().map(|v| v * n / 2.0).collect();
        let up = upsample(&map, gh, gw, fh, fw);
        let attn = dir.join(format!("clip_{}_t{k}_attn.png", clip.id));
        save(|p| gray_image(&up, fh, fw).save(p), &attn)?;
        // the token at time k covers an equal share of the input frames
        let frame = sample.input_indices[k * sample.input_indices.len() / t];
        let over = dir.join(format!("clip_{}_t{k}_overlay.png", clip.id));
        save(|p| overlay(&set.image(frame), &up).save(p), &over)?;
        written += 2;
    }
    Ok(written)
}

fn draw_dot(img: &mut RgbImage, r: usize, c: usize) {
    let (h, w) = (img.height() as i64, img.width() as i64);
    for dr in -1..=1i64 {
        for dc in -1..=1i64 {
            let (y, x) = (r as i64 + dr, c as i64 + dc);
            if (0..h).contains(&y) && (0..w).contains(&x) {
                img.put_pixel(x as u32, y as u32, Rgb([0, 255, 0]));
            }
        }
    }
}

/// One overlay per future frame with the true gaze as a green dot. Frames
/// without gaze get a `_nogaze` suffix and no dot.
pub fn render_predictions(
    model: &Model,
    store: &ParamStore,
    clip: &ClipManifest,
    sample: &ClipSample,
    precision: Precision,
    dir: &Path,
) -> anyhow::Result<usize> {
    let s = sample.to_sample(&model.cfg)?;
    let pred = csts_core::train::predict(model, store, &s, precision)?;
    let [h, w] = model.cfg.image();
    let set = frames_of(clip)?;
    let (fh, fw) = (set.height, set.width);
    for (k, &frame) in sample.target_indices.iter().enumerate() {
        let map = &pred.data()[k * h * w..(k + 1) * h * w];
        let max = map.iter().cloned().fold(0.0, f64::max);
        let scaled: Vec<f64> = map.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
        let mut img = overlay(&set.image(frame), &upsample(&scaled, h, w, fh, fw));
        let name = match sample.gaze[k] {
            Some((x, y)) => {
                let (r, c) = gaze_pixel(x, y, fh, fw);
                draw_dot(&mut img, r, c);
                format!("clip_{}_f{k}_pred.png", clip.id)
            }
            None => format!("clip_{}_f{k}_pred_nogaze.png", clip.id),
        };
        save(|p| img.save(p), &dir.join(name))?;
    }
    Ok(sample.target_indices.len())
}
