//! Heatmap scoring: thresholded prediction against the target kernel
//! support, micro-averaged into F1 / recall / precision.

use serde::{Deserialize, Serialize};

use crate::error::{CstsError, Result};
use crate::heads::{gaze_pixel, kernel_support};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f64 = 0.5;

/// Pixel counts for one frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    /// `|P ∩ G|`
    pub hit: usize,
    /// `|P|`
    pub predicted: usize,
    /// `|G|`
    pub truth: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        if self.predicted == 0 {
            0.0
        } else {
            self.hit as f64 / self.predicted as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.truth == 0 {
            0.0
        } else {
            self.hit as f64 / self.truth as f64
        }
    }

    fn add(&mut self, o: &Counts) {
        self.hit += o.hit;
        self.predicted += o.predicted;
        self.truth += o.truth;
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Scores one `[H, W]` map: `P` is every pixel at or above `gamma * max`,
/// `G` the border-clipped `kernel x kernel` support around the gaze pixel.
pub fn binarize_and_score(pred: &Tensor, gaze: (f64, f64), kernel: usize, gamma: f64) -> Result<Counts> {
    let [h, w] = <[usize; 2]>::try_from(pred.shape())
        .map_err(|_| CstsError::dim(format!("expected an [H, W] map, got {:?}", pred.shape())))?;
    let (x, y) = gaze;
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(CstsError::contract(format!("gaze ({x}, {y}) outside [0, 1]")));
    }
    let data = pred.data();
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let positive = |v: f64| max > 0.0 && v / max >= gamma;
    let predicted = data.iter().filter(|&&v| positive(v)).count();
    let (r, c) = gaze_pixel(x, y, h, w);
    let mut truth = 0;
    let mut hit = 0;
    for (py, px) in kernel_support(r, c, h, w, kernel) {
        truth += 1;
        if positive(data[py * w + px]) {
            hit += 1;
        }
    }
    Ok(Counts { hit, predicted, truth })
}

/// Scores every valid frame of a `[T, H, W]` stack; invalid frames give `None`.
pub fn score_clip(pred: &Tensor, gaze: &[Option<(f64, f64)>], kernel: usize, gamma: f64) -> Result<Vec<Option<Counts>>> {
    let shape = pred.shape();
    if shape.len() != 3 || shape[0] != gaze.len() {
        return Err(CstsError::dim(format!("{} gaze labels for prediction {shape:?}", gaze.len())));
    }
    let frame = shape[1] * shape[2];
    gaze.iter()
        .enumerate()
        .map(|(f, g)| {
            g.map(|xy| {
                let map = Tensor::new(&shape[1..], pred.data()[f * frame..(f + 1) * frame].to_vec())?;
                binarize_and_score(&map, xy, kernel, gamma)
            })
            .transpose()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub index: usize,
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub recall: f64,
    pub precision: f64,
    pub per_frame: Vec<FrameScore>,
    pub n_frames: usize,
}

/// Micro-averages pooled pixel counts over all valid frames; `per_frame`
/// groups by future-frame index.
pub fn aggregate(clips: &[Vec<Option<Counts>>]) -> Result<EvalReport> {
    let t_out = clips.iter().map(Vec::len).max().unwrap_or(0);
    let mut total = Counts::default();
    let mut by_frame = vec![Counts::default(); t_out];
    let mut n = 0;
    for clip in clips {
        for (k, c) in clip.iter().enumerate() {
            if let Some(c) = c {
                total.add(c);
                by_frame[k].add(c);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(CstsError::Eval("no valid frames to evaluate".into()));
    }
    let score = |c: &Counts| (c.precision(), c.recall(), f1(c.precision(), c.recall()));
    let (precision, recall, f) = score(&total);
    let per_frame = by_frame
        .iter()
        .enumerate()
        .map(|(index, c)| {
            let (p, r, f) = score(c);
            FrameScore { index, f1: f, recall: r, precision: p }
        })
        .collect();
    Ok(EvalReport { f1: f, recall, precision, per_frame, n_frames: n })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "frames {}\nf1 {:.4}  recall {:.4}  precision {:.4}\n\nframe      f1  recall  precision\n",
            self.n_frames, self.f1, self.recall, self.precision
        );
        for p in &self.per_frame {
            s.push_str(&format!("{:>5}  {:.4}  {:.4}     {:.4}\n", p.index, p.f1, p.recall, p.precision));
        }
        s
    }

    pub fn per_frame_csv(&self) -> String {
        let mut s = String::from("frame,f1,recall,precision\n");
        for p in &self.per_frame {
            s.push_str(&format!("{},{},{},{}\n", p.index, p.f1, p.recall, p.precision));
        }
        s
    }
}
