//! Frame storage: one PNG per frame in a directory, or a single packed
//! raw file per clip. The loader picks the format from the path.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{CstsError, Result};
use crate::tensor::Tensor;

pub const PACKED_MAGIC: &[u8; 8] = b"CSTSFRM1";
const DTYPE_U8: u8 = 1;

/// Frames as `u8` RGB, row-major `[count, height, width, 3]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameSet {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl FrameSet {
    pub fn frame(&self, i: usize) -> &[u8] {
        let n = self.height * self.width * 3;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> RgbImage {
        ImageBuffer::from_raw(self.width as u32, self.height as u32, self.frame(i).to_vec()).expect("frame size")
    }
}

pub fn frame_file_name(i: usize) -> String {
    format!("frame_{i:05}.png")
}

fn png_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CstsError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    Ok(paths)
}

/// Number of frames without decoding pixels.
pub fn frame_count(path: &Path) -> Result<usize> {
    if path.is_dir() {
        return Ok(png_paths(path)?.len());
    }
    let mut f = fs::File::open(path).map_err(|e| CstsError::io(path, e))?;
    let mut head = [0u8; 12];
    f.read_exact(&mut head).map_err(|e| CstsError::io(path, e))?;
    if &head[..8] != PACKED_MAGIC {
        return Err(CstsError::Format(format!("{}: not a packed frame file", path.display())));
    }
    Ok(u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize)
}

pub fn read_frames(path: &Path) -> Result<FrameSet> {
    if path.is_dir() {
        read_png_dir(path)
    } else {
        read_packed(path)
    }
}

fn read_png_dir(dir: &Path) -> Result<FrameSet> {
    let paths = png_paths(dir)?;
    let mut set: Option<FrameSet> = None;
    for p in &paths {
        let img = image::open(p)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => CstsError::io(p, io),
                other => CstsError::Format(format!("{}: {other}", p.display())),
            })?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let s = set.get_or_insert_with(|| FrameSet { count: 0, height: h, width: w, data: Vec::new() });
        if (s.height, s.width) != (h, w) {
            return Err(CstsError::Format(format!("{}: frame size {w}x{h} differs from the first frame", p.display())));
        }
        s.data.extend_from_slice(img.as_raw());
        s.count += 1;
    }
    set.ok_or_else(|| CstsError::Format(format!("{}: no PNG frames", dir.display())))
}

fn read_packed(path: &Path) -> Result<FrameSet> {
    let bytes = fs::read(path).map_err(|e| CstsError::io(path, e))?;
    let bad = |m: &str| CstsError::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 25 || &bytes[..8] != PACKED_MAGIC {
        return Err(bad("not a packed frame file"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (count, height, width, channels) = (word(0), word(1), word(2), word(3));
    if bytes[24] != DTYPE_U8 || channels != 3 {
        return Err(bad("unsupported dtype or channel count"));
    }
    let data = bytes[25..].to_vec();
    if data.len() != count * height * width * 3 {
        return Err(bad("payload length does not match header"));
    }
    Ok(FrameSet { count, height, width, data })
}

pub fn write_packed(path: &Path, set: &FrameSet) -> Result<()> {
    let mut out = Vec::with_capacity(25 + set.data.len());
    out.extend_from_slice(PACKED_MAGIC);
    for v in [set.count, set.height, set.width, 3] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.push(DTYPE_U8);
    out.extend_from_slice(&set.data);
    let mut f = fs::File::create(path).map_err(|e| CstsError::io(path, e))?;
    f.write_all(&out).map_err(|e| CstsError::io(path, e))
}

pub fn write_png_dir(dir: &Path, set: &FrameSet) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CstsError::io(dir, e))?;
    for i in 0..set.count {
        let p = dir.join(frame_file_name(i));
        set.image(i).save(&p)?;
    }
    Ok(())
}

/// Selected frames as `[n, H, W, 3]` in `[0, 1]`, resized when the stored
/// size differs from `(height, width)`.
pub fn frames_tensor(set: &FrameSet, indices: &[usize], height: usize, width: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(indices.len() * height * width * 3);
    for &i in indices {
        if i >= set.count {
            return Err(CstsError::Range(format!("frame {i} requested from a clip of {} frames", set.count)));
        }
        if (set.height, set.width) == (height, width) {
            data.extend(set.frame(i).iter().map(|&v| v as f64 / 255.0));
        } else {
            let img = image::imageops::resize(&set.image(i), width as u32, height as u32, image::imageops::FilterType::Triangle);
            data.extend(img.as_raw().iter().map(|&v| v as f64 / 255.0));
        }
    }
    Tensor::new(&[indices.len(), height, width, 3], data)
}

/// Converts an `[H, W]` map in `[0, 1]` (values are clamped) to grayscale.
pub fn gray_image(map: &[f64], height: usize, width: usize) -> image::GrayImage {
    let px = map.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::from_raw(width as u32, height as u32, px).expect("map size")
}

/// Blends a heat colour over an RGB frame in proportion to `map`.
pub fn overlay(frame: &RgbImage, map: &[f64]) -> RgbImage {
    let mut out = frame.clone();
    for (i, p) in out.pixels_mut().enumerate() {
        let a = map[i].clamp(0.0, 1.0) * 0.7;
        let Rgb([r, g, b]) = *p;
        let mix = |c: u8, h: f64| ((1.0 - a) * c as f64 + a * h).round() as u8;
        *p = Rgb([mix(r, 255.0), mix(g, 64.0), mix(b, 0.0)]);
    }
    out
}
