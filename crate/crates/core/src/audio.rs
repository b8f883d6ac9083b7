//! Audio frontend: WAV I/O, resampling, per-frame windowing and
//! log-magnitude STFT spectrograms.

use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{CstsError, Result};
use crate::tensor::Tensor;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioTrack {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioTrack {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(CstsError::contract("sample rate must be positive"));
        }
        Ok(Self { samples, sample_rate })
    }

    /// Averages interleaved channels down to mono.
    pub fn from_interleaved(interleaved: &[f64], channels: usize, sample_rate: u32) -> Result<Self> {
        if channels == 0 {
            return Err(CstsError::Format("zero audio channels".into()));
        }
        let samples = interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f64>() / channels as f64)
            .collect();
        Self::new(samples, sample_rate)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Reads a 16-bit PCM WAV file, mixing multi-channel audio to mono.
pub fn read_wav(path: &Path) -> Result<AudioTrack> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(CstsError::Format(format!(
            "{}: expected 16-bit PCM, found {:?} with {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        )));
    }
    let raw: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    AudioTrack::from_interleaved(&raw, spec.channels as usize, spec.sample_rate)
}

/// Writes channel-major audio as interleaved 16-bit PCM.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    let len = channels.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..len {
        for ch in channels {
            let v = (ch[i].clamp(-1.0, 1.0) * 32767.0).round() as i16;
            w.write_sample(v).map_err(|e| wav_error(path, e))?;
        }
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> CstsError {
    match e {
        hound::Error::IoError(io) => CstsError::io(path, io),
        other => CstsError::Format(format!("{}: {other}", path.display())),
    }
}

/// Linear-interpolation resampling.
pub fn resample(track: &AudioTrack, target_rate: u32) -> Result<AudioTrack> {
    if target_rate == 0 {
        return Err(CstsError::contract("target sample rate must be positive"));
    }
    if track.samples.is_empty() {
        return Err(CstsError::contract("cannot resample an empty track"));
    }
    if target_rate == track.sample_rate {
        return Ok(track.clone());
    }
    let n = track.samples.len();
    let ratio = track.sample_rate as f64 / target_rate as f64;
    let n_out = (((n - 1) as f64) / ratio).floor() as usize + 1;
    let samples = (0..n_out)
        .map(|j| {
            let pos = j as f64 * ratio;
            let i0 = (pos.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            let w = pos - i0 as f64;
            track.samples[i0] * (1.0 - w) + track.samples[i1] * w
        })
        .collect();
    AudioTrack::new(samples, target_rate)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut r = i.rem_euclid(period);
    if r >= n as isize {
        r = period - r;
    }
    r as usize
}

/// One window of `round(dt_w * rate)` samples centred on each frame time.
/// Samples outside the track are filled by reflection.
pub fn window_segments(track: &AudioTrack, frame_times: &[f64], dt_w: f64) -> Result<Vec<Vec<f64>>> {
    if dt_w <= 0.0 {
        return Err(CstsError::contract("window length must be positive"));
    }
    if track.samples.is_empty() {
        return Err(CstsError::contract("cannot window an empty track"));
    }
    let rate = track.sample_rate as f64;
    let len = (dt_w * rate).round() as usize;
    let n = track.samples.len();
    frame_times
        .iter()
        .map(|&t| {
            if t > track.duration() + dt_w || t < -dt_w {
                return Err(CstsError::Range(format!(
                    "frame time {t:.3}s is outside the {:.3}s track by more than the {dt_w}s window",
                    track.duration()
                )));
            }
            let start = (t * rate).round() as isize - (len / 2) as isize;
            Ok((0..len as isize).map(|k| track.samples[reflect(start + k, n)]).collect())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub window_seconds: f64,
    pub stft_window: usize,
    pub stft_hop: usize,
    pub n_fft: usize,
    pub bands: usize,
    pub columns: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 24_000,
            window_seconds: 1.28,
            stft_window: 240,
            stft_hop: 120,
            n_fft: 512,
            bands: 256,
            columns: 256,
        }
    }
}

/// Reusable STFT plan with a periodic Hann window.
pub struct Spectrogrammer {
    cfg: FrontendConfig,
    hann: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Spectrogrammer {
    pub fn new(cfg: FrontendConfig) -> Result<Self> {
        if cfg.bands + 1 > cfg.n_fft / 2 + 1 || cfg.stft_window > cfg.n_fft || cfg.stft_hop == 0 {
            return Err(CstsError::config(format!(
                "STFT of {} points cannot provide {} bands with window {}",
                cfg.n_fft, cfg.bands, cfg.stft_window
            )));
        }
        let w = cfg.stft_window;
        let hann = (0..w)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / w as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self { cfg, hann, fft })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    /// `log(1 + |STFT|)` of one window, `[bands, columns]`. Bins `1..=bands`
    /// are kept (DC dropped); the time axis is centre-padded with zeros or
    /// centre-cropped to `columns`.
    pub fn log_spectrogram(&self, window: &[f64]) -> Result<Tensor> {
        let c = &self.cfg;
        if window.len() < c.stft_window {
            return Err(CstsError::contract(format!(
                "window of {} samples is shorter than one STFT window ({})",
                window.len(),
                c.stft_window
            )));
        }
        let raw = (window.len() - c.stft_window) / c.stft_hop + 1;
        let (skip, pad_left) = if raw >= c.columns { ((raw - c.columns) / 2, 0) } else { (0, (c.columns - raw) / 2) };
        let used = raw.min(c.columns);
        let mut out = vec![0.0; c.bands * c.columns];
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        for f in 0..used {
            let start = (f + skip) * c.stft_hop;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = if i < c.stft_window {
                    Complex::new(window[start + i] * self.hann[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process(&mut buf);
            let col = pad_left + f;
            for band in 0..c.bands {
                out[band * c.columns + col] = buf[band + 1].norm().ln_1p();
            }
        }
        Tensor::new(&[c.bands, c.columns], out)
    }
}

/// Log-spectrograms for every sampled frame of a clip.
#[derive(Clone, Debug)]
pub struct SpectrogramStack {
    /// `[T_in, bands, columns]`
    pub values: Tensor,
    pub window_seconds: f64,
    pub frame_times: Vec<f64>,
}

/// Resamples, windows and transforms a track for the given frame times.
pub fn spectrogram_stack(track: &AudioTrack, frame_times: &[f64], cfg: &FrontendConfig) -> Result<SpectrogramStack> {
    let resampled = resample(track, cfg.sample_rate)?;
    let windows = window_segments(&resampled, frame_times, cfg.window_seconds)?;
    let spec = Spectrogrammer::new(cfg.clone())?;
    let mut data = Vec::with_capacity(windows.len() * cfg.bands * cfg.columns);
    for w in &windows {
        data.extend_from_slice(spec.log_spectrogram(w)?.data());
    }
    Ok(SpectrogramStack {
        values: Tensor::new(&[windows.len(), cfg.bands, cfg.columns], data)?,
        window_seconds: cfg.window_seconds,
        frame_times: frame_times.to_vec(),
    })
}

/// Block-mean pooling of `[T, F, S]` down to `[T, out_f, out_s]`.
pub fn pool_spectrograms(values: &Tensor, out_f: usize, out_s: usize) -> Result<Tensor> {
    let [t, f, s] = <[usize; 3]>::try_from(values.shape())
        .map_err(|_| CstsError::dim(format!("expected [T,F,S], got {:?}", values.shape())))?;
    if out_f == 0 || out_s == 0 || f % out_f != 0 || s % out_s != 0 {
        return Err(CstsError::dim(format!("cannot pool [{f}, {s}] to [{out_f}, {out_s}]")));
    }
    if (f, s) == (out_f, out_s) {
        return Ok(values.clone());
    }
    let (bf, bs) = (f / out_f, s / out_s);
    let norm = 1.0 / (bf * bs) as f64;
    let src = values.data();
    let mut out = vec![0.0; t * out_f * out_s];
    for ti in 0..t {
        for y in 0..f {
            for x in 0..s {
                out[(ti * out_f + y / bf) * out_s + x / bs] += src[(ti * f + y) * s + x] * norm;
            }
        }
    }
    Tensor::new(&[t, out_f, out_s], out)
}
