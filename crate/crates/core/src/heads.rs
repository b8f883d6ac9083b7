//! Heatmap decoder, KL-divergence supervision against Gaussian targets,
//! and the contrastive projection head with its InfoNCE loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Var};
use crate::encoders::{upsample_grid, EncoderConfig};
use crate::error::{CstsError, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::tensor::Tensor;

pub const KLD_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetConfig {
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { kernel: 19, sigma: 3.0 }
    }
}

/// Pixel `(row, col)` holding a normalised gaze point.
pub fn gaze_pixel(x: f64, y: f64, height: usize, width: usize) -> (usize, usize) {
    let r = ((y * height as f64).floor() as usize).min(height - 1);
    let c = ((x * width as f64).floor() as usize).min(width - 1);
    (r, c)
}

fn check_gaze(x: f64, y: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
        return Err(CstsError::contract(format!("gaze ({x}, {y}) outside [0, 1]")));
    }
    Ok(())
}

/// Pixels covered by the kernel stamped at `(r, c)`, clipped at the borders.
pub fn kernel_support(r: usize, c: usize, height: usize, width: usize, kernel: usize) -> impl Iterator<Item = (usize, usize)> {
    let half = (kernel / 2) as isize;
    let (r, c) = (r as isize, c as isize);
    (-half..=half).flat_map(move |dy| {
        (-half..=half).filter_map(move |dx| {
            let (y, x) = (r + dy, c + dx);
            (y >= 0 && x >= 0 && (y as usize) < height && (x as usize) < width).then_some((y as usize, x as usize))
        })
    })
}

/// One normalised, border-clipped Gaussian stamp of shape `[H, W]`.
pub fn gaussian_map(x: f64, y: f64, height: usize, width: usize, cfg: &TargetConfig) -> Result<Tensor> {
    check_gaze(x, y)?;
    let (r, c) = gaze_pixel(x, y, height, width);
    let mut out = vec![0.0; height * width];
    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    for (py, px) in kernel_support(r, c, height, width, cfg.kernel) {
        let d2 = (py as f64 - r as f64).powi(2) + (px as f64 - c as f64).powi(2);
        out[py * width + px] = (-d2 / two_s2).exp();
    }
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    Tensor::new(&[height, width], out)
}

/// Target stack `[T_out, H, W]` and per-frame validity. Frames without gaze
/// get a uniform map and are excluded from the loss.
pub fn gaussian_target(gaze: &[Option<(f64, f64)>], height: usize, width: usize, cfg: &TargetConfig) -> Result<(Tensor, Vec<bool>)> {
    let hw = height * width;
    let mut data = Vec::with_capacity(gaze.len() * hw);
    let mut valid = Vec::with_capacity(gaze.len());
    for g in gaze {
        match g {
            Some((x, y)) => {
                data.extend_from_slice(gaussian_map(*x, *y, height, width, cfg)?.data());
                valid.push(true);
            }
            None => {
                data.extend(std::iter::repeat_n(1.0 / hw as f64, hw));
                valid.push(false);
            }
        }
    }
    Ok((Tensor::new(&[gaze.len(), height, width], data)?, valid))
}

fn check_normalised(t: &Tensor, what: &str) -> Result<()> {
    let frame: usize = t.shape()[1..].iter().product();
    for (i, f) in t.data().chunks(frame).enumerate() {
        let s: f64 = f.iter().sum();
        if (s - 1.0).abs() > 1e-3 || f.iter().any(|&v| v < 0.0) {
            return Err(CstsError::contract(format!("{what} frame {i} is not a distribution (sum {s})")));
        }
    }
    Ok(())
}

/// `KL(target || pred)` averaged over valid frames.
pub fn kld(pred: &Tensor, target: &Tensor, valid: &[bool]) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape()[0] != valid.len() {
        return Err(CstsError::dim(format!(
            "prediction {:?} and target {:?} disagree ({} validity flags)",
            pred.shape(),
            target.shape(),
            valid.len()
        )));
    }
    check_normalised(pred, "prediction")?;
    check_normalised(target, "target")?;
    let frame = pred.numel() / valid.len();
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(CstsError::contract("no valid frames to score"));
    }
    let mut total = 0.0;
    for (f, _) in valid.iter().enumerate().filter(|(_, &v)| v) {
        let (p, t) = (&pred.data()[f * frame..(f + 1) * frame], &target.data()[f * frame..(f + 1) * frame]);
        total += p.iter().zip(t).filter(|(_, &t)| t > 0.0).map(|(&p, &t)| t * (t / (p + KLD_EPS)).ln()).sum::<f64>();
    }
    Ok(total / n as f64)
}

/// Differentiable [`kld`] with respect to `pred` (`[T, H, W]`).
pub fn kld_loss(g: &mut Graph<'_>, pred: Var, target: &Tensor, valid: &[bool]) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != target.shape() || shape[0] != valid.len() {
        return Err(CstsError::dim(format!(
            "prediction {shape:?} and target {:?} disagree ({} validity flags)",
            target.shape(),
            valid.len()
        )));
    }
    check_normalised(g.value(pred), "prediction")?;
    check_normalised(target, "target")?;
    let n = valid.iter().filter(|&&v| v).count();
    if n == 0 {
        return Err(CstsError::contract("no valid frames to score"));
    }
    let frame = target.numel() / valid.len();
    let mut weighted = target.clone();
    let mut entropy = 0.0;
    for (f, chunk) in weighted.data_mut().chunks_mut(frame).enumerate() {
        let w = if valid[f] { 1.0 / n as f64 } else { 0.0 };
        for v in chunk {
            if w > 0.0 && *v > 0.0 {
                entropy += w * *v * v.ln();
            }
            *v *= w;
        }
    }
    let pe = g.add_scalar(pred, KLD_EPS)?;
    let lp = g.log(pe)?;
    let tw = g.constant(weighted);
    let ce = g.mul(tw, lp)?;
    let s = g.sum(ce)?;
    let neg = g.scale(s, -1.0)?;
    g.add_scalar(neg, entropy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderStageConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub upsample: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub stages: Vec<DecoderStageConfig>,
    /// Token grid `(T, H, W)` of the decoder input.
    pub in_grid: [usize; 3],
    /// Temporal upsampling applied after the last stage.
    pub time_up: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Output heatmap size `(T_out, H_img, W_img)`.
    pub output: [usize; 3],
}

impl DecoderConfig {
    /// Mirrors `enc` stage by stage; `input_dim` is the width of the fused
    /// representation fed in (twice the encoder width for channel concat).
    pub fn mirror(enc: &EncoderConfig, input_dim: usize, t_out: usize, image: [usize; 2], heads: usize, mlp_ratio: f64) -> Self {
        let k = enc.stages.len();
        let stages = (0..k)
            .map(|j| {
                let st = &enc.stages[k - 1 - j];
                DecoderStageConfig { in_dim: if j == 0 { input_dim } else { st.out_dim }, out_dim: st.in_dim, upsample: st.pool }
            })
            .collect();
        let in_grid = enc.out_grid();
        Self { stages, in_grid, time_up: t_out / in_grid[0], heads, mlp_ratio, output: [t_out, image[0], image[1]] }
    }

    /// Grid after decoder stage `j` (before the final temporal upsampling).
    pub fn stage_grid(&self, j: usize) -> [usize; 3] {
        let [t, mut h, mut w] = self.in_grid;
        for st in &self.stages[..=j] {
            h *= st.upsample;
            w *= st.upsample;
        }
        [t, h, w]
    }

    /// Closed-form shapes of each decoder block output and the head.
    pub fn trace(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.stages.len();
        let mut out = Vec::new();
        for (j, st) in self.stages.iter().enumerate() {
            let [t, h, w] = self.stage_grid(j);
            let t = if j + 1 == k { t * self.time_up } else { t };
            out.push((format!("decoder block{}", j + 1), vec![t, h, w, st.out_dim]));
        }
        let [t, h, w] = self.stage_grid(k - 1);
        out.push(("head".into(), vec![t * self.time_up, h, w, 1]));
        out
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    block: TransformerBlock,
    proj: Linear,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    stages: Vec<DecoderStage>,
    head: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, rng: &mut R) -> Result<Self> {
        let stages = cfg
            .stages
            .iter()
            .enumerate()
            .map(|(j, st)| {
                Ok(DecoderStage {
                    block: TransformerBlock::new(store, &format!("{name}.s{j}.block"), st.in_dim, cfg.heads, cfg.mlp_ratio, rng)?,
                    proj: Linear::new(store, &format!("{name}.s{j}.proj"), st.in_dim, st.out_dim, rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let last = cfg.stages.last().map_or(0, |s| s.out_dim);
        let head = Linear::new(store, &format!("{name}.head"), last, 1, rng);
        Ok(Self { cfg: cfg.clone(), stages, head })
    }

    /// Logits `[T_out, h, w]` at decoder resolution. `skips[s]` is the
    /// output of encoder stage `s`; the last encoder stage is not used.
    pub fn logits(&self, g: &mut Graph<'_>, x: Var, skips: &[Var]) -> Result<Var> {
        self.logits_traced(g, x, skips, &mut Vec::new())
    }

    /// As [`Decoder::logits`], recording each block output shape as `[T, h, w, d]`.
    pub fn logits_traced(&self, g: &mut Graph<'_>, x: Var, skips: &[Var], trace: &mut Vec<(String, Vec<usize>)>) -> Result<Var> {
        let k = self.stages.len();
        let [t, mut h, mut w] = self.cfg.in_grid;
        let mut x = x;
        for (j, (stage, st)) in self.stages.iter().zip(&self.cfg.stages).enumerate() {
            x = upsample_grid(g, x, [t, h, w], st.upsample)?;
            h *= st.upsample;
            w *= st.upsample;
            let n = h * w;
            let flat = g.reshape(x, &[t * n, st.in_dim])?;
            let y = stage.block.forward(g, flat, None)?.out;
            let y = stage.proj.forward(g, y)?;
            x = g.reshape(y, &[t, n, st.out_dim])?;
            if j + 1 < k {
                let skip = *skips.get(k - 2 - j).ok_or_else(|| CstsError::dim(format!("decoder stage {} has no skip input", j + 1)))?;
                if g.shape(skip) != g.shape(x) {
                    return Err(CstsError::dim(format!(
                        "decoder stage {} output {:?} does not match skip {:?}",
                        j + 1,
                        g.shape(x),
                        g.shape(skip)
                    )));
                }
                x = g.add(x, skip)?;
            }
            if j + 1 == k && self.cfg.time_up > 1 {
                let tu = self.cfg.time_up;
                let idx: Vec<usize> = (0..t * tu).map(|i| i / tu).collect();
                x = g.index_select(x, 0, &idx)?;
            }
            let s = g.shape(x).to_vec();
            trace.push((format!("decoder block{}", j + 1), vec![s[0], h, w, s[2]]));
        }
        let y = self.head.forward(g, x)?;
        let t_out = g.shape(y)[0];
        trace.push(("head".into(), vec![t_out, h, w, 1]));
        g.reshape(y, &[t_out, h, w])
    }

    /// Heatmaps `[T_out, H_img, W_img]`, each frame a distribution.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, skips: &[Var]) -> Result<Var> {
        let logits = self.logits(g, x, skips)?;
        heatmaps_from_logits(g, logits, self.cfg.output)
    }
}

/// Trilinear resize of `[T, h, w]` logits to `size`, then per-frame softmax.
pub fn heatmaps_from_logits(g: &mut Graph<'_>, logits: Var, size: [usize; 3]) -> Result<Var> {
    let up = g.trilinear(logits, size)?;
    let flat = g.reshape(up, &[size[0], size[1] * size[2]])?;
    let p = g.softmax_last(flat)?;
    g.reshape(p, &size)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub dim: usize,
    pub temperature: f64,
    pub alpha: f64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { dim: 256, temperature: 0.05, alpha: 0.05 }
    }
}

#[derive(Clone, Debug)]
pub struct ContrastiveHead {
    pub f1: Linear,
    pub f2: Linear,
    pub cfg: ContrastiveConfig,
}

impl ContrastiveHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, cfg: ContrastiveConfig, rng: &mut R) -> Self {
        Self {
            f1: Linear::new(store, &format!("{name}.f1"), dim, cfg.dim, rng),
            f2: Linear::new(store, &format!("{name}.f2"), dim, cfg.dim, rng),
            cfg,
        }
    }

    /// Mean over every token, linear projection, L2 normalisation: `(w_v, w_a)`, each `[1, D']`.
    pub fn project(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<(Var, Var)> {
        let wv = {
            let m = mean_token(g, visual)?;
            let p = self.f1.forward(g, m)?;
            g.l2_normalize(p)?
        };
        let wa = {
            let m = mean_token(g, audio)?;
            let p = self.f2.forward(g, m)?;
            g.l2_normalize(p)?
        };
        Ok((wv, wa))
    }
}

/// Average of all tokens of a `[.., D]` tensor, as `[1, D]`.
pub fn mean_token(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let d = *s.last().unwrap_or(&0);
    let flat = g.reshape(x, &[s.iter().product::<usize>() / d.max(1), d])?;
    g.mean_axis(flat, 0)
}

/// Symmetric InfoNCE over a batch of paired unit vectors `[n, D']`;
/// returns `L_v2a + L_a2v`.
pub fn info_nce(g: &mut Graph<'_>, wv: Var, wa: Var, temperature: f64) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(CstsError::config(format!("temperature must be positive, got {temperature}")));
    }
    let (sv, sa) = (g.shape(wv).to_vec(), g.shape(wa).to_vec());
    if sv != sa || sv.len() != 2 || sv[0] == 0 {
        return Err(CstsError::dim(format!("contrastive batches disagree: {sv:?} vs {sa:?}")));
    }
    let n = sv[0];
    let at = g.transpose(wa)?;
    let sim = g.matmul(wv, at)?;
    let sim = g.scale(sim, 1.0 / temperature)?;
    let eye = g.constant(Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 }));
    let rows = g.log_softmax_last(sim)?;
    let simt = g.transpose(sim)?;
    let cols = g.log_softmax_last(simt)?;
    let v2a = g.mul(rows, eye)?;
    let a2v = g.mul(cols, eye)?;
    let both = g.add(v2a, a2v)?;
    let s = g.sum(both)?;
    g.scale(s, -1.0 / n as f64)
}

/// `kld + alpha * cntr`.
pub fn total_loss(g: &mut Graph<'_>, kld: Var, cntr: Option<Var>, alpha: f64) -> Result<Var> {
    match cntr {
        Some(c) if alpha != 0.0 => {
            let w = g.scale(c, alpha)?;
            g.add(kld, w)
        }
        _ => Ok(kld),
    }
}
