//! Synthetic audio-visual gaze corpus.
//!
//! Each clip shows a bright white blob (the gaze target) that hovers near
//! its start point until the anchor and then drifts left or right. A tone
//! burst shortly before the anchor announces the side: a low tone for left,
//! a high tone for right, correct with probability `cue_validity`. Dimmer
//! coloured blobs wander around as distractors. The tone is also panned,
//! but the frontend mixes to mono so only its pitch survives.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::frames::{write_packed, write_png_dir, FrameSet};
use super::{write_gaze_csv, write_manifest, ClipRecord, Split};
use crate::audio::write_wav;
use crate::error::{CstsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub clips: usize,
    pub seed: u64,
    pub fps: f64,
    pub seconds: f64,
    pub anchor: f64,
    pub size: usize,
    pub sample_rate: u32,
    pub cue_validity: f64,
    pub distractors: usize,
    /// Horizontal displacement over the anticipation window, in image widths.
    pub drift: f64,
    pub left_hz: f64,
    pub right_hz: f64,
    pub test_every: usize,
    pub missing_gaze: f64,
    /// Write one packed file per clip instead of PNG frames.
    pub packed: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clips: 200,
            seed: 0,
            fps: 20.0,
            seconds: 5.0,
            anchor: 3.0,
            size: 32,
            sample_rate: 16_000,
            cue_validity: 0.9,
            distractors: 2,
            drift: 0.3,
            left_hz: 1000.0,
            right_hz: 2500.0,
            test_every: 5,
            missing_gaze: 0.02,
            packed: false,
        }
    }
}

/// Ground truth the generator planted in one clip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthClip {
    pub id: String,
    /// -1 left, +1 right.
    pub drift_side: i8,
    pub cue_side: i8,
    pub split: Split,
}

struct Blob {
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    colour: [f64; 3],
}

fn splat(img: &mut [f64], size: usize, x: f64, y: f64, sigma: f64, colour: [f64; 3]) {
    let (cx, cy) = (x * size as f64 - 0.5, y * size as f64 - 0.5);
    let r = (3.0 * sigma).ceil() as isize;
    for py in (cy.round() as isize - r)..=(cy.round() as isize + r) {
        for px in (cx.round() as isize - r)..=(cx.round() as isize + r) {
            if px < 0 || py < 0 || px >= size as isize || py >= size as isize {
                continue;
            }
            let d2 = (px as f64 - cx).powi(2) + (py as f64 - cy).powi(2);
            let a = (-d2 / (2.0 * sigma * sigma)).exp();
            let o = (py as usize * size + px as usize) * 3;
            for c in 0..3 {
                img[o + c] = img[o + c].max(a * colour[c] + (1.0 - a) * img[o + c]);
            }
        }
    }
}

fn generate_clip(cfg: &SynthConfig, index: usize, dir: &Path) -> Result<(ClipRecord, SynthClip)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let n = (cfg.seconds * cfg.fps).round() as usize;
    let size = cfg.size;
    let anchor_frame = (cfg.anchor * cfg.fps).round() as usize;
    let horizon = cfg.seconds - cfg.anchor;

    let drift_side: i8 = if rng.random::<bool>() { 1 } else { -1 };
    let cue_side = if rng.random::<f64>() < cfg.cue_validity { drift_side } else { -drift_side };

    // target path
    let (x0, y0) = (rng.random_range(0.35..0.65), rng.random_range(0.3..0.7));
    let vy = rng.random_range(-0.03..0.03);
    let mut path = Vec::with_capacity(n);
    let (mut jx, mut jy) = (0.0, 0.0);
    for f in 0..n {
        if f < anchor_frame {
            jx = 0.8 * jx + rng.random_range(-0.006..0.006);
            jy = 0.8 * jy + rng.random_range(-0.006..0.006);
            path.push((x0 + jx, y0 + jy));
        } else {
            let (ax, ay) = path[anchor_frame - 1];
            let dt = (f - anchor_frame + 1) as f64 / cfg.fps;
            let x = ax + drift_side as f64 * cfg.drift * dt / horizon;
            path.push((x.clamp(0.02, 0.98), (ay + vy * dt).clamp(0.02, 0.98)));
        }
    }

    let mut blobs: Vec<Blob> = (0..cfg.distractors)
        .map(|_| {
            let mut colour = [0.15; 3];
            colour[rng.random_range(0..3)] = rng.random_range(0.45..0.65);
            Blob {
                x: rng.random_range(0.1..0.9),
                y: rng.random_range(0.1..0.9),
                vx: rng.random_range(-0.15..0.15),
                vy: rng.random_range(-0.15..0.15),
                colour,
            }
        })
        .collect();

    let texture: Vec<f64> = (0..size * size * 3).map(|_| rng.random_range(0.05..0.15)).collect();
    let mut data = Vec::with_capacity(n * size * size * 3);
    for &(x, y) in &path {
        let mut img: Vec<f64> = texture.iter().map(|&t| t + rng.random_range(-0.02..0.02)).collect();
        for b in blobs.iter_mut() {
            splat(&mut img, size, b.x, b.y, 1.5, b.colour);
            b.x += b.vx / cfg.fps;
            b.y += b.vy / cfg.fps;
            if !(0.05..=0.95).contains(&b.x) {
                b.vx = -b.vx;
            }
            if !(0.05..=0.95).contains(&b.y) {
                b.vy = -b.vy;
            }
        }
        splat(&mut img, size, x, y, 1.5, [1.0; 3]);
        data.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let frames = FrameSet { count: n, height: size, width: size, data };

    let gaze: Vec<Option<(f64, f64)>> =
        path.iter().map(|&p| (rng.random::<f64>() >= cfg.missing_gaze).then_some(p)).collect();

    // stereo audio: low-level noise plus the panned tone burst
    let rate = cfg.sample_rate as f64;
    let len = (cfg.seconds * rate).round() as usize;
    let onset = rng.random_range(2.0..2.2);
    let (dur, ramp) = (0.4, 0.01);
    let freq = if cue_side < 0 { cfg.left_hz } else { cfg.right_hz };
    let (gl, gr) = if cue_side < 0 { (0.9, 0.1) } else { (0.1, 0.9) };
    let mut left = Vec::with_capacity(len);
    let mut right = Vec::with_capacity(len);
    for i in 0..len {
        let t = i as f64 / rate;
        let (nl, nr) = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));
        let u = t - onset;
        let tone = if (0.0..dur).contains(&u) {
            let env = (u / ramp).min((dur - u) / ramp).min(1.0);
            0.5 * env * (2.0 * PI * freq * u).sin()
        } else {
            0.0
        };
        left.push(nl + gl * tone);
        right.push(nr + gr * tone);
    }

    let id = format!("{index:04}");
    let clip_dir = dir.join("clips").join(format!("clip_{id}"));
    fs::create_dir_all(&clip_dir).map_err(|e| CstsError::io(&clip_dir, e))?;
    let frames_rel = if cfg.packed {
        write_packed(&clip_dir.join("frames.bin"), &frames)?;
        "frames.bin"
    } else {
        write_png_dir(&clip_dir.join("frames"), &frames)?;
        "frames"
    };
    write_wav(&clip_dir.join("audio.wav"), &[left, right], cfg.sample_rate)?;
    write_gaze_csv(&clip_dir.join("gaze.csv"), &gaze)?;

    let split = if cfg.test_every > 0 && index % cfg.test_every == cfg.test_every - 1 { Split::Test } else { Split::Train };
    let rel = PathBuf::from("clips").join(format!("clip_{id}"));
    let record = ClipRecord {
        id: id.clone(),
        frames: rel.join(frames_rel),
        audio: rel.join("audio.wav"),
        gaze: rel.join("gaze.csv"),
        fps: cfg.fps,
        split,
        anchor: Some(cfg.anchor),
    };
    Ok((record, SynthClip { id, drift_side, cue_side, split }))
}

/// Writes `cfg.clips` clips and `manifest.json` under `dir`. Identical
/// configs produce byte-identical trees.
pub fn synth_generate(cfg: &SynthConfig, dir: &Path) -> Result<Vec<SynthClip>> {
    if cfg.clips == 0 {
        return Err(CstsError::config("the corpus needs at least one clip"));
    }
    if !(0.0..=1.0).contains(&cfg.cue_validity) {
        return Err(CstsError::config(format!("cue validity {} outside [0, 1]", cfg.cue_validity)));
    }
    if cfg.anchor <= 0.0 || cfg.anchor >= cfg.seconds {
        return Err(CstsError::config("anchor must fall inside the clip"));
    }
    fs::create_dir_all(dir).map_err(|e| CstsError::io(dir, e))?;
    let mut records = Vec::with_capacity(cfg.clips);
    let mut truth = Vec::with_capacity(cfg.clips);
    for i in 0..cfg.clips {
        let (r, t) = generate_clip(cfg, i, dir)?;
        records.push(r);
        truth.push(t);
    }
    write_manifest(&dir.join("manifest.json"), &records)?;
    Ok(truth)
}
