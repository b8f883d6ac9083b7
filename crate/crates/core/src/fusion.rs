//! Audio-visual fusion: in-frame (spatial) attention with one pooled audio
//! token per frame, cross-frame (temporal) attention over pooled per-frame
//! tokens, the broadcast reweight merge, and the joint-fusion baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{CstsError, Result};
use crate::nn::{group_mask, Linear, TransformerBlock};
use crate::tensor::Tensor;

/// Learned map from all `n` tokens of a frame to a single token; a
/// full-grid convolution written as a linear layer over `n * D` inputs.
#[derive(Clone, Debug)]
pub struct TokenPool {
    pub linear: Linear,
    pub tokens: usize,
    pub dim: usize,
}

impl TokenPool {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, tokens: usize, dim: usize, rng: &mut R) -> Self {
        Self { linear: Linear::new(store, name, tokens * dim, dim, rng), tokens, dim }
    }

    /// `[T, n, D] -> [T, 1, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != self.tokens || s[2] != self.dim {
            return Err(CstsError::dim(format!(
                "token pool expects [T, {}, {}], got {s:?}",
                self.tokens, self.dim
            )));
        }
        let flat = g.reshape(x, &[s[0], self.tokens * self.dim])?;
        let y = self.linear.forward(g, flat)?;
        g.reshape(y, &[s[0], 1, self.dim])
    }

    /// Weights that average the tokens channel-wise, zero bias.
    pub fn set_mean(&self, store: &mut ParamStore) {
        let (n, d) = (self.tokens, self.dim);
        let w = Tensor::from_fn(&[n * d, d], |i| if (i / d) % d == i % d { 1.0 / n as f64 } else { 0.0 });
        store.set(self.linear.weight, w).expect("shape");
        if let Some(b) = self.linear.bias {
            store.set(b, Tensor::zeros(&[d])).expect("shape");
        }
    }
}

/// Splits of the fused representations.
#[derive(Clone, Copy, Debug)]
pub struct FusionBundle {
    /// `[T, N+1, D]`
    pub u_s: Var,
    /// `[2T, 1, D]`
    pub u_t: Var,
    pub u_vs: Var,
    pub u_as: Var,
    pub u_vt: Var,
    pub u_at: Var,
    /// `[T, N, D]`
    pub u_v: Var,
    /// `[T, M, D]`
    pub u_a: Var,
    /// Spatial attention weights `[heads, T(N+1), T(N+1)]`.
    pub spatial_probs: Var,
}

/// In-frame attention over `[visual tokens, audio token]` per frame.
#[derive(Clone, Debug)]
pub struct SpatialFusion {
    pub conv1: TokenPool,
    pub block: TransformerBlock,
}

pub struct SpatialOutput {
    pub u_s: Var,
    pub probs: Var,
}

impl SpatialFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        audio_tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: TokenPool::new(store, &format!("{name}.conv1"), audio_tokens, dim, rng),
            block: TransformerBlock::new(store, &format!("{name}.block"), dim, heads, 4.0, rng)?,
        })
    }

    /// `z_as = conv1(audio)`, `[T, M, D] -> [T, 1, D]`.
    pub fn pool_audio(&self, g: &mut Graph<'_>, audio: Var) -> Result<Var> {
        self.conv1.forward(g, audio)
    }

    pub fn forward(&self, g: &mut Graph<'_>, visual: Var, z_as: Var) -> Result<SpatialOutput> {
        spatial_attend(g, &self.block, visual, z_as, true)
    }
}

/// Runs `block` over per-frame token groups `[visual_t, extra_t]`; with
/// `masked`, attention is confined to each frame. Returns `[T, N+K, D]`.
fn spatial_attend(g: &mut Graph<'_>, block: &TransformerBlock, visual: Var, extra: Var, masked: bool) -> Result<SpatialOutput> {
    let (sv, se) = (g.shape(visual).to_vec(), g.shape(extra).to_vec());
    if sv.len() != 3 || se.len() != 3 || sv[0] != se[0] || sv[2] != se[2] {
        return Err(CstsError::dim(format!("fusion inputs disagree: visual {sv:?}, audio {se:?}")));
    }
    let (t, per, d) = (sv[0], sv[1] + se[1], sv[2]);
    let z = g.concat(&[visual, extra], 1)?;
    let flat = g.reshape(z, &[t * per, d])?;
    let mask = if masked {
        let groups: Vec<usize> = (0..t * per).map(|i| i / per).collect();
        Some(g.constant(group_mask(&groups)))
    } else {
        None
    };
    let out = block.forward(g, flat, mask)?;
    let u_s = g.reshape(out.out, &[t, per, d])?;
    Ok(SpatialOutput { u_s, probs: out.probs })
}

/// Cross-frame attention over pooled per-frame tokens of both modalities.
#[derive(Clone, Debug)]
pub struct TemporalFusion {
    pub conv2: TokenPool,
    pub conv3: TokenPool,
    pub block: TransformerBlock,
}

impl TemporalFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        visual_tokens: usize,
        audio_tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv2: TokenPool::new(store, &format!("{name}.conv2"), visual_tokens, dim, rng),
            conv3: TokenPool::new(store, &format!("{name}.conv3"), audio_tokens, dim, rng),
            block: TransformerBlock::new(store, &format!("{name}.block"), dim, heads, 4.0, rng)?,
        })
    }

    /// `(z_vt, z_at)`, each `[T, 1, D]`.
    pub fn pool_tokens(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<(Var, Var)> {
        Ok((self.conv2.forward(g, visual)?, self.conv3.forward(g, audio)?))
    }

    /// `u_t`, `[2T, 1, D]`: visual rows first, audio rows second.
    pub fn forward(&self, g: &mut Graph<'_>, z_vt: Var, z_at: Var) -> Result<Var> {
        let (sv, sa) = (g.shape(z_vt).to_vec(), g.shape(z_at).to_vec());
        if sv != sa || sv.len() != 3 || sv[1] != 1 {
            return Err(CstsError::dim(format!("temporal fusion inputs disagree: {sv:?} vs {sa:?}")));
        }
        let (t, d) = (sv[0], sv[2]);
        let z = g.concat(&[z_vt, z_at], 0)?;
        let flat = g.reshape(z, &[2 * t, d])?;
        let out = self.block.forward(g, flat, None)?;
        g.reshape(out.out, &[2 * t, 1, d])
    }
}

/// `u_v = u_vs * u_vt`, `u_a = audio * u_at`, broadcast over tokens.
pub fn merge_reweight(g: &mut Graph<'_>, u_vs: Var, u_vt: Var, audio: Var, u_at: Var) -> Result<(Var, Var)> {
    Ok((g.mul(u_vs, u_vt)?, g.mul(audio, u_at)?))
}

/// Spatial-temporal separable fusion of `[T, N, D]` visual and `[T, M, D]` audio tokens.
#[derive(Clone, Debug)]
pub struct StsFusion {
    pub spatial: SpatialFusion,
    pub temporal: TemporalFusion,
}

impl StsFusion {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        visual_tokens: usize,
        audio_tokens: usize,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            spatial: SpatialFusion::new(store, &format!("{name}.spatial"), audio_tokens, dim, heads, rng)?,
            temporal: TemporalFusion::new(store, &format!("{name}.temporal"), visual_tokens, audio_tokens, dim, heads, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<FusionBundle> {
        let s = self.spatial_only(g, visual, audio)?;
        let (u_vt, u_at, u_t) = self.temporal_only(g, visual, audio)?;
        let n = g.shape(visual)[1];
        let u_vs = g.narrow(s.u_s, 1, 0, n)?;
        let u_as = g.narrow(s.u_s, 1, n, 1)?;
        let (u_v, u_a) = merge_reweight(g, u_vs, u_vt, audio, u_at)?;
        Ok(FusionBundle { u_s: s.u_s, u_t, u_vs, u_as, u_vt, u_at, u_v, u_a, spatial_probs: s.probs })
    }

    pub fn spatial_only(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<SpatialOutput> {
        let z_as = self.spatial.pool_audio(g, audio)?;
        self.spatial.forward(g, visual, z_as)
    }

    /// `(u_vt, u_at, u_t)`.
    pub fn temporal_only(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<(Var, Var, Var)> {
        let t = g.shape(visual)[0];
        let (z_vt, z_at) = self.temporal.pool_tokens(g, visual, audio)?;
        let u_t = self.temporal.forward(g, z_vt, z_at)?;
        Ok((g.narrow(u_t, 0, 0, t)?, g.narrow(u_t, 0, t, t)?, u_t))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Baseline {
    Linear,
    Bilinear,
    Concat,
    VanillaSA,
}

impl std::str::FromStr for Baseline {
    type Err = CstsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "bilinear" => Ok(Self::Bilinear),
            "concat" => Ok(Self::Concat),
            "vanillasa" | "vanilla-sa" | "vanilla_sa" => Ok(Self::VanillaSA),
            _ => Err(CstsError::config(format!("unknown fusion strategy '{s}'"))),
        }
    }
}

/// Joint-fusion comparators. Each returns a visual-shaped tensor for the
/// decoder (`[T, N, 2D]` for concat).
#[derive(Clone, Debug)]
pub enum BaselineFusion {
    /// Channel concat, then linear-GELU-linear back to `D`.
    Linear { fc1: Linear, fc2: Linear },
    /// Token axes reduced to `L` per modality, a bilinear layer, then the
    /// token axis expanded back to `T * N`.
    Bilinear { reduce_v: Linear, reduce_a: Linear, weight: ParamId, bias: ParamId, expand: Linear, dim: usize },
    Concat,
    /// One attention block over all `T (N + M)` tokens.
    VanillaSA { block: TransformerBlock, masked: bool },
}

pub struct BaselineOutput {
    pub visual: Var,
    /// Fused audio rows, when the strategy produces them.
    pub audio: Option<Var>,
}

impl BaselineFusion {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        kind: Baseline,
        t: usize,
        visual_tokens: usize,
        audio_tokens: usize,
        dim: usize,
        heads: usize,
        bilinear_tokens: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let same_grid = || {
            if visual_tokens == audio_tokens {
                Ok(())
            } else {
                Err(CstsError::config(format!(
                    "{kind:?} fusion needs equal token grids, got N={visual_tokens}, M={audio_tokens}"
                )))
            }
        };
        Ok(match kind {
            Baseline::Linear => {
                same_grid()?;
                BaselineFusion::Linear {
                    fc1: Linear::new(store, &format!("{name}.fc1"), 2 * dim, dim, rng),
                    fc2: Linear::new(store, &format!("{name}.fc2"), dim, dim, rng),
                }
            }
            Baseline::Bilinear => {
                let l = bilinear_tokens;
                let bound = (6.0 / (2 * dim) as f64).sqrt();
                BaselineFusion::Bilinear {
                    reduce_v: Linear::new(store, &format!("{name}.reduce_v"), t * visual_tokens, l, rng),
                    reduce_a: Linear::new(store, &format!("{name}.reduce_a"), t * audio_tokens, l, rng),
                    weight: store.add(
                        format!("{name}.bilinear.weight"),
                        Tensor::uniform(&[dim, dim * dim], -bound / dim as f64, bound / dim as f64, rng),
                    ),
                    bias: store.add(format!("{name}.bilinear.bias"), Tensor::zeros(&[dim])),
                    expand: Linear::new(store, &format!("{name}.expand"), l, t * visual_tokens, rng),
                    dim,
                }
            }
            Baseline::Concat => {
                same_grid()?;
                BaselineFusion::Concat
            }
            Baseline::VanillaSA => BaselineFusion::VanillaSA {
                block: TransformerBlock::new(store, &format!("{name}.block"), dim, heads, 4.0, rng)?,
                masked: false,
            },
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, visual: Var, audio: Var) -> Result<BaselineOutput> {
        let sv = g.shape(visual).to_vec();
        let sa = g.shape(audio).to_vec();
        if sv.len() != 3 || sa.len() != 3 || sv[0] != sa[0] || sv[2] != sa[2] {
            return Err(CstsError::dim(format!("fusion inputs disagree: visual {sv:?}, audio {sa:?}")));
        }
        let (t, n, d) = (sv[0], sv[1], sv[2]);
        let visual = match self {
            BaselineFusion::Linear { fc1, fc2 } => {
                let cat = g.concat(&[visual, audio], 2)?;
                let h = fc1.forward(g, cat)?;
                let h = g.gelu(h)?;
                fc2.forward(g, h)?
            }
            BaselineFusion::Concat => g.concat(&[visual, audio], 2)?,
            BaselineFusion::Bilinear { reduce_v, reduce_a, weight, bias, expand, dim } => {
                let reduce = |g: &mut Graph<'_>, x: Var, lin: &Linear| -> Result<Var> {
                    let n_tok = g.shape(x)[0] * g.shape(x)[1];
                    let flat = g.reshape(x, &[n_tok, d])?;
                    let tr = g.transpose(flat)?; // [D, tokens]
                    let r = lin.forward(g, tr)?; // [D, L]
                    g.transpose(r) // [L, D]
                };
                let xv = reduce(g, visual, reduce_v)?;
                let xa = reduce(g, audio, reduce_a)?;
                let l = g.shape(xv)[0];
                let w = g.param(*weight);
                let xw = g.matmul(xv, w)?; // [L, D*D], index (k, j)
                let xw = g.reshape(xw, &[l, *dim, *dim])?;
                let ya = g.reshape(xa, &[l, 1, *dim])?;
                let prod = g.mul(xw, ya)?;
                let z = g.sum_axis(prod, 2)?;
                let z = g.reshape(z, &[l, *dim])?;
                let b = g.param(*bias);
                let z = g.add(z, b)?;
                let zt = g.transpose(z)?; // [D, L]
                let e = expand.forward(g, zt)?; // [D, T*N]
                let e = g.transpose(e)?;
                g.reshape(e, &[t, n, d])?
            }
            BaselineFusion::VanillaSA { block, masked } => {
                let out = spatial_attend(g, block, visual, audio, *masked)?;
                let v = g.narrow(out.u_s, 1, 0, n)?;
                let a = g.narrow(out.u_s, 1, n, sa[1])?;
                return Ok(BaselineOutput { visual: v, audio: Some(a) });
            }
        };
        Ok(BaselineOutput { visual, audio: None })
    }
}

/// Attention paid by each frame's audio query to that frame's `N` visual
/// keys, averaged over heads and renormalised, as `[T, H, W]`.
pub fn spatial_correlation_map(probs: Option<&Tensor>, t: usize, grid: [usize; 2]) -> Result<Tensor> {
    let probs = probs.ok_or_else(|| CstsError::State("spatial attention weights were not captured".into()))?;
    let n = grid[0] * grid[1];
    let per = n + 1;
    let s = t * per;
    let shape = probs.shape();
    if shape.len() != 3 || shape[1] != s || shape[2] != s {
        return Err(CstsError::dim(format!("attention weights {shape:?} do not match T={t}, N={n}")));
    }
    let heads = shape[0];
    let p = probs.data();
    let mut out = vec![0.0; t * n];
    for f in 0..t {
        let q = f * per + n;
        for h in 0..heads {
            let row = &p[(h * s + q) * s..(h * s + q + 1) * s];
            for k in 0..n {
                out[f * n + k] += row[f * per + k] / heads as f64;
            }
        }
        let frame = &mut out[f * n..(f + 1) * n];
        let z: f64 = frame.iter().sum();
        if z > 0.0 {
            frame.iter_mut().for_each(|v| *v /= z);
        }
    }
    Tensor::new(&[t, grid[0], grid[1]], out)
}

/// Makes a baseline attention layer use the per-frame mask of spatial fusion.
pub fn with_frame_mask(fusion: BaselineFusion) -> BaselineFusion {
    match fusion {
        BaselineFusion::VanillaSA { block, .. } => BaselineFusion::VanillaSA { block, masked: true },
        other => other,
    }
}
