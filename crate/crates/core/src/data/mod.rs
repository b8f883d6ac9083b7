//! Dataset plumbing: manifests, gaze CSVs, clip sampling around an anchor
//! time, the synthetic corpus and checkpoints.

pub mod checkpoint;
pub mod frames;
pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{pool_spectrograms, read_wav, spectrogram_stack};
use crate::error::{CstsError, Result};
use crate::model::{ModelConfig, Sample};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use frames::{read_frames, FrameSet};
pub use synth::{synth_generate, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// A manifest entry as written on disk. Paths are relative to the
/// manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipRecord {
    pub id: String,
    pub frames: PathBuf,
    pub audio: PathBuf,
    pub gaze: PathBuf,
    pub fps: f64,
    pub split: Split,
    /// Anchor time in seconds; the loader picks the latest valid anchor
    /// when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<f64>,
}

/// A validated clip with resolved paths and per-frame gaze.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipManifest {
    pub id: String,
    pub frames: PathBuf,
    pub audio: PathBuf,
    pub fps: f64,
    pub split: Split,
    pub anchor: Option<f64>,
    /// Indexed by original video frame; `None` where the tracker lost the eye.
    pub gaze: Vec<Option<(f64, f64)>>,
}

/// Observation and anticipation windows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub observe_seconds: f64,
    pub anticipate_seconds: f64,
    pub input_frames: usize,
    pub target_frames: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { observe_seconds: 3.0, anticipate_seconds: 2.0, input_frames: 8, target_frames: 8 }
    }
}

/// `n` indices spread evenly over `count` frames starting at `start`, both
/// ends included.
pub fn uniform_indices(start: usize, count: usize, n: usize) -> Vec<usize> {
    if n == 1 {
        return vec![start];
    }
    (0..n)
        .map(|k| start + ((k * (count - 1)) as f64 / (n - 1) as f64).round() as usize)
        .collect()
}

pub fn write_manifest(path: &Path, records: &[ClipRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records)?;
    fs::write(path, text + "\n").map_err(|e| CstsError::io(path, e))
}

/// Reads and validates a manifest. Every problem found is reported at once,
/// each prefixed by the clip id.
pub fn load_manifest(path: &Path) -> Result<Vec<ClipManifest>> {
    let text = fs::read_to_string(path).map_err(|e| CstsError::io(path, e))?;
    let values: Vec<serde_json::Value> = serde_json::from_str(&text)
        .map_err(|e| CstsError::Format(format!("{}: expected a JSON array of clip records: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut errors = Vec::new();
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, v) in values.into_iter().enumerate() {
        let label = v.get("id").and_then(|x| x.as_str()).map_or_else(|| format!("record {i}"), |s| format!("clip {s}"));
        let rec: ClipRecord = match serde_json::from_value(v) {
            Ok(r) => r,
            Err(e) => {
                errors.push(format!("{label}: malformed record: {e}"));
                continue;
            }
        };
        if !seen.insert(rec.id.clone()) {
            errors.push(format!("{label}: duplicate id"));
        }
        match validate_record(&rec, base) {
            Ok(m) => out.push(m),
            Err(msgs) => errors.extend(msgs.into_iter().map(|m| format!("{label}: {m}"))),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(CstsError::Validation(errors))
    }
}

fn validate_record(rec: &ClipRecord, base: &Path) -> std::result::Result<ClipManifest, Vec<String>> {
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    let (frames, audio, gaze_path) = (resolve(&rec.frames), resolve(&rec.audio), resolve(&rec.gaze));
    let mut errs = Vec::new();
    for (what, p) in [("frames", &frames), ("audio", &audio), ("gaze", &gaze_path)] {
        if !p.exists() {
            errs.push(format!("{what} path {} does not exist", p.display()));
        }
    }
    if !(rec.fps.is_finite() && rec.fps > 0.0) {
        errs.push(format!("fps {} must be positive", rec.fps));
    }
    let mut gaze = Vec::new();
    if gaze_path.exists() {
        match read_gaze_csv(&gaze_path) {
            Ok(g) => gaze = g,
            Err(e) => errs.push(e.to_string()),
        }
    }
    if errs.is_empty() {
        Ok(ClipManifest { id: rec.id.clone(), frames, audio, fps: rec.fps, split: rec.split, anchor: rec.anchor, gaze })
    } else {
        Err(errs)
    }
}

/// Parses `frame_index,x,y,valid`. Frames absent from the file, or with
/// `valid` of 0, count as missing.
pub fn read_gaze_csv(path: &Path) -> Result<Vec<Option<(f64, f64)>>> {
    let text = fs::read_to_string(path).map_err(|e| CstsError::io(path, e))?;
    let mut rows: Vec<Option<(f64, f64)>> = Vec::new();
    let bad = |line: usize, m: String| CstsError::Format(format!("{}:{line}: {m}", path.display()));
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("frame_index")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(bad(n + 1, format!("expected 4 columns, found {}", cols.len())));
        }
        let idx: usize = cols[0].parse().map_err(|_| bad(n + 1, format!("bad frame index {:?}", cols[0])))?;
        let x: f64 = cols[1].parse().map_err(|_| bad(n + 1, format!("bad x {:?}", cols[1])))?;
        let y: f64 = cols[2].parse().map_err(|_| bad(n + 1, format!("bad y {:?}", cols[2])))?;
        let valid = match cols[3] {
            "1" | "true" => true,
            "0" | "false" => false,
            other => return Err(bad(n + 1, format!("bad valid flag {other:?}"))),
        };
        if valid && !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
            return Err(CstsError::Range(format!("gaze ({x}, {y}) at frame {idx} is outside [0, 1]")));
        }
        if rows.len() <= idx {
            rows.resize(idx + 1, None);
        }
        rows[idx] = valid.then_some((x, y));
    }
    Ok(rows)
}

pub fn write_gaze_csv(path: &Path, gaze: &[Option<(f64, f64)>]) -> Result<()> {
    let mut s = String::from("frame_index,x,y,valid\n");
    for (i, g) in gaze.iter().enumerate() {
        match g {
            Some((x, y)) => s.push_str(&format!("{i},{x:.6},{y:.6},1\n")),
            None => s.push_str(&format!("{i},0,0,0\n")),
        }
    }
    fs::write(path, s).map_err(|e| CstsError::io(path, e))
}

/// One training or evaluation example before spectrogram pooling.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub id: String,
    pub anchor: f64,
    /// `[T_in, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor,
    /// `[T_in, bands, columns]` from the audio frontend.
    pub spectrograms: Tensor,
    pub gaze: Vec<Option<(f64, f64)>>,
    pub input_indices: Vec<usize>,
    pub target_indices: Vec<usize>,
}

impl ClipSample {
    /// Pools spectrograms to the audio encoder input and builds targets.
    pub fn to_sample(&self, cfg: &ModelConfig) -> Result<Sample> {
        let [_, f, s, _] = cfg.audio.input;
        let specs = pool_spectrograms(&self.spectrograms, f, s)?;
        Sample::new(self.frames.clone(), specs, self.gaze.clone(), cfg)
    }
}

/// Latest anchor that leaves a full anticipation window inside the clip.
pub fn default_anchor(frame_count: usize, fps: f64, window: &WindowConfig) -> f64 {
    let horizon = (window.anticipate_seconds * fps).round() as usize;
    frame_count.saturating_sub(horizon) as f64 / fps
}

/// Samples `T_in` frames over `[anchor - tau_o, anchor)` and `T_out` gaze
/// labels over `[anchor, anchor + tau_a)`.
pub fn load_clip(clip: &ClipManifest, anchor: Option<f64>, window: &WindowConfig, cfg: &ModelConfig) -> Result<ClipSample> {
    let set = read_frames(&clip.frames)?;
    let anchor = anchor.or(clip.anchor).unwrap_or_else(|| default_anchor(set.count, clip.fps, window));
    let observe = (window.observe_seconds * clip.fps).round() as usize;
    let horizon = (window.anticipate_seconds * clip.fps).round() as usize;
    let a = (anchor * clip.fps).round() as isize;
    if a < observe as isize || a as usize + horizon > set.count {
        return Err(CstsError::Range(format!(
            "clip {}: anchor {anchor:.3}s needs frames {}..{} but the clip has {}",
            clip.id,
            a - observe as isize,
            a + horizon as isize,
            set.count
        )));
    }
    let a = a as usize;
    let input_indices = uniform_indices(a - observe, observe, window.input_frames);
    let target_indices = uniform_indices(a, horizon, window.target_frames);
    let [h, w] = cfg.image();
    let frames = frames::frames_tensor(&set, &input_indices, h, w)?;
    let track = read_wav(&clip.audio)?;
    let times: Vec<f64> = input_indices.iter().map(|&i| i as f64 / clip.fps).collect();
    let spectrograms = spectrogram_stack(&track, &times, &cfg.frontend)?.values;
    let gaze = target_indices.iter().map(|&i| clip.gaze.get(i).copied().flatten()).collect();
    Ok(ClipSample { id: clip.id.clone(), anchor, frames, spectrograms, gaze, input_indices, target_indices })
}

/// Loads and pools every clip of a split, in manifest order. Clips load in
/// parallel; the output order does not depend on scheduling.
pub fn load_split(clips: &[ClipManifest], split: Split, window: &WindowConfig, cfg: &ModelConfig) -> Result<Vec<(String, Sample)>> {
    use rayon::prelude::*;
    clips
        .par_iter()
        .filter(|c| c.split == split)
        .map(|c| {
            let s = load_clip(c, None, window, cfg)?;
            Ok((c.id.clone(), s.to_sample(cfg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_indices_cover_both_ends() {
        assert_eq!(uniform_indices(0, 60, 8), vec![0, 8, 17, 25, 34, 42, 51, 59]);
        assert_eq!(uniform_indices(60, 40, 8), vec![60, 66, 71, 77, 82, 88, 93, 99]);
        assert_eq!(uniform_indices(5, 10, 1), vec![5]);
    }
}
