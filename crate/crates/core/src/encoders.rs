//! Video and audio token encoders.
//!
//! Both encoders share one structure: a strided 3-D patch embedding
//! followed by stages of transformer blocks. A stage first mean-pools the
//! token grid (2x2 over the two spatial / spectro-temporal axes), runs its
//! blocks, then changes channel width with a linear map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{CstsError, Result};
use crate::nn::{Linear, TransformerBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Video,
    Audio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub depth: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    /// Spatial pooling factor applied on entry (1 = none).
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// `[T_in, H, W, C]` of the raw input volume.
    pub input: [usize; 4],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub stages: Vec<StageConfig>,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "yes")]
    pub pos_embed: bool,
}

fn yes() -> bool {
    true
}

impl EncoderConfig {
    pub fn embed_dim(&self) -> usize {
        self.stages[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.out_dim)
    }

    /// Token grid right after patch embedding.
    pub fn embed_grid(&self) -> [usize; 3] {
        let [t, h, w, _] = self.input;
        let out = |n: usize, a: usize| (n + 2 * self.pad[a]).saturating_sub(self.kernel[a]) / self.stride[a] + 1;
        [out(t, 0), out(h, 1), out(w, 2)]
    }

    /// Token grid at the output of stage `s`.
    pub fn stage_grid(&self, s: usize) -> [usize; 3] {
        let [t, mut h, mut w] = self.embed_grid();
        for st in &self.stages[..=s] {
            h /= st.pool;
            w /= st.pool;
        }
        [t, h, w]
    }

    pub fn out_grid(&self) -> [usize; 3] {
        self.stage_grid(self.stages.len() - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(CstsError::config("encoder needs at least one stage"));
        }
        for w in self.stages.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(CstsError::config(format!(
                    "stage widths do not chain: {} then {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        for st in &self.stages {
            if st.pool == 0 || self.heads == 0 || st.in_dim % self.heads != 0 {
                return Err(CstsError::config(format!(
                    "{} heads do not divide stage width {} (or pool is zero)",
                    self.heads, st.in_dim
                )));
            }
        }
        let pools: usize = self.stages.iter().map(|s| s.pool).product();
        let need = [self.stride[0], self.stride[1] * pools, self.stride[2] * pools];
        let grid = self.embed_grid();
        let [t, h, w, _] = self.input;
        let exact = (0..3).all(|a| grid[a] * self.stride[a] == [t, h, w][a]);
        if t % need[0] != 0 || h % need[1] != 0 || w % need[2] != 0 || !exact {
            return Err(CstsError::dim(format!(
                "input {:?} must be divisible by {:?} (T, H, W) for kernel {:?} stride {:?}",
                self.input, need, self.kernel, self.stride
            )));
        }
        Ok(())
    }

    /// Closed-form shapes of every intermediate, named as in the model
    /// description: the embedding grid and each stage output.
    pub fn trace(&self, prefix: &str, modality: Modality) -> Vec<(String, Vec<usize>)> {
        let [t, h, w] = self.embed_grid();
        let mut out = vec![(format!("{prefix} token embedding"), vec![t, h, w, self.embed_dim()])];
        for (s, st) in self.stages.iter().enumerate() {
            let [t, h, w] = self.stage_grid(s);
            let shape = match modality {
                Modality::Video => vec![t, h, w, st.out_dim],
                Modality::Audio => vec![t, h * w, st.out_dim],
            };
            out.push((format!("{prefix} encoder block{}", s + 1), shape));
        }
        out
    }
}

/// Embedded tokens of one modality, `[T, N, D]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenSet {
    pub tokens: Var,
    pub modality: Modality,
    /// `(H, W)` of the token grid; for audio the frequency/time grid.
    pub grid: [usize; 2],
}

pub struct Encoded {
    pub out: TokenSet,
    /// Output of the patch embedding, `[T, H, W, D0]`.
    pub embedding: Var,
    /// Output of every stage, `[T, n_s, d_s]`, for decoder skips.
    pub stages: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Stage {
    blocks: Vec<TransformerBlock>,
    proj: Option<Linear>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub modality: Modality,
    embed: Linear,
    pos_time: Option<ParamId>,
    pos_cell: Option<ParamId>,
    stages: Vec<Stage>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: &EncoderConfig,
        modality: Modality,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let plen = cfg.kernel.iter().product::<usize>() * cfg.input[3];
        let d0 = cfg.embed_dim();
        let embed = Linear::new(store, &format!("{name}.embed"), plen, d0, rng);
        let [t, h, w] = cfg.embed_grid();
        let (pos_time, pos_cell) = if cfg.pos_embed {
            let bound = 0.02;
            (
                Some(store.add(format!("{name}.pos_time"), Tensor::uniform(&[t, 1, d0], -bound, bound, rng))),
                Some(store.add(format!("{name}.pos_cell"), Tensor::uniform(&[1, h * w, d0], -bound, bound, rng))),
            )
        } else {
            (None, None)
        };
        let mut stages = Vec::with_capacity(cfg.stages.len());
        for (s, st) in cfg.stages.iter().enumerate() {
            let blocks = (0..st.depth)
                .map(|b| TransformerBlock::new(store, &format!("{name}.s{s}.b{b}"), st.in_dim, cfg.heads, cfg.mlp_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            let proj = (st.in_dim != st.out_dim)
                .then(|| Linear::new(store, &format!("{name}.s{s}.proj"), st.in_dim, st.out_dim, rng));
            stages.push(Stage { blocks, proj });
        }
        Ok(Self { cfg: cfg.clone(), modality, embed, pos_time, pos_cell, stages })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.stages.iter().flat_map(|s| s.blocks.iter())
    }

    /// `input` is `[T_in, H, W, C]` (video) or `[T_in, F, S]` / `[T_in, F, S, 1]` (audio).
    pub fn forward(&self, g: &mut Graph<'_>, input: Var) -> Result<Encoded> {
        let mut shape = g.shape(input).to_vec();
        if shape.len() == 3 && self.modality == Modality::Audio {
            shape.push(1);
        }
        if shape[..] != self.cfg.input[..] {
            return Err(CstsError::dim(format!(
                "{:?} encoder expects input {:?}, got {:?}",
                self.modality,
                self.cfg.input,
                g.shape(input)
            )));
        }
        let x = g.reshape(input, &shape)?;
        let patches = g.patches(x, self.cfg.kernel, self.cfg.stride, self.cfg.pad)?;
        let embedding = self.embed.forward(g, patches)?;
        let [t, mut h, mut w] = self.cfg.embed_grid();
        let mut d = self.cfg.embed_dim();
        let mut x = g.reshape(embedding, &[t, h * w, d])?;
        if let (Some(pt), Some(pc)) = (self.pos_time, self.pos_cell) {
            let (pt, pc) = (g.param(pt), g.param(pc));
            let x1 = g.add(x, pt)?;
            x = g.add(x1, pc)?;
        }

        let mut stage_out = Vec::with_capacity(self.stages.len());
        for (stage, st) in self.stages.iter().zip(&self.cfg.stages) {
            if st.pool > 1 {
                x = pool_grid(g, x, [t, h, w], st.pool)?;
                h /= st.pool;
                w /= st.pool;
            }
            let mut flat = g.reshape(x, &[t * h * w, d])?;
            for block in &stage.blocks {
                flat = block.forward(g, flat, None)?.out;
            }
            if let Some(p) = &stage.proj {
                flat = p.forward(g, flat)?;
                d = st.out_dim;
            }
            x = g.reshape(flat, &[t, h * w, d])?;
            stage_out.push(x);
        }
        Ok(Encoded { out: TokenSet { tokens: x, modality: self.modality, grid: [h, w] }, embedding, stages: stage_out })
    }
}

/// Mean-pools a `[T, H*W, D]` token grid by `k` along both grid axes.
pub fn pool_grid(g: &mut Graph<'_>, x: Var, grid: [usize; 3], k: usize) -> Result<Var> {
    let [t, h, w] = grid;
    let d = *g.shape(x).last().unwrap_or(&0);
    if h % k != 0 || w % k != 0 {
        return Err(CstsError::dim(format!("grid {h}x{w} not divisible by pool {k}")));
    }
    let r = g.reshape(x, &[t * h / k, k, w / k, k, d])?;
    let s = g.sum_axis(r, 3)?;
    let s = g.sum_axis(s, 1)?;
    let m = g.scale(s, 1.0 / (k * k) as f64)?;
    g.reshape(m, &[t, (h / k) * (w / k), d])
}

/// Nearest-neighbour upsampling of a `[T, H*W, D]` grid by `k` along both grid axes.
pub fn upsample_grid(g: &mut Graph<'_>, x: Var, grid: [usize; 3], k: usize) -> Result<Var> {
    if k == 1 {
        return Ok(x);
    }
    let [_, h, w] = grid;
    let (ho, wo) = (h * k, w * k);
    let idx: Vec<usize> = (0..ho * wo).map(|i| (i / wo / k) * w + (i % wo) / k).collect();
    g.index_select(x, 1, &idx)
}
