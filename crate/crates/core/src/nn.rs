//! Parameterised layers built on the tape: linear maps, layer norm,
//! multi-head attention and pre-norm transformer blocks.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{CstsError, Result};
use crate::tensor::Tensor;

/// Additive mask value standing in for minus infinity.
pub const MASK_NEG: f64 = -1e30;

/// Xavier-uniform `[fan_in, fan_out]` weight.
pub fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let last = *g.shape(x).last().unwrap_or(&0);
        if last != self.in_dim {
            return Err(CstsError::dim(format!(
                "linear expects last dim {}, got shape {:?}",
                self.in_dim,
                g.shape(x)
            )));
        }
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gamma, beta)
    }
}

/// Multi-head scaled dot-product self-attention over a `[S, D]` sequence.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Row-stochastic weights, `[heads, S, S]`.
    pub probs: Var,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CstsError::config(format!("{heads} heads do not divide channel dim {dim}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
            dim,
        })
    }

    /// `mask`, when given, is an additive `[S, S]` constant.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Var>) -> Result<AttentionOutput> {
        let s = g.shape(x)[0];
        let dh = self.dim / self.heads;
        let q = self.query.forward(g, x)?;
        let k = self.key.forward(g, x)?;
        let v = self.value.forward(g, x)?;
        let split = |g: &mut Graph<'_>, t: Var, perm: &[usize]| -> Result<Var> {
            let r = g.reshape(t, &[s, self.heads, dh])?;
            g.permute(r, perm)
        };
        let q = split(g, q, &[1, 0, 2])?; // [H, S, dh]
        let kt = split(g, k, &[1, 2, 0])?; // [H, dh, S]
        let v = split(g, v, &[1, 0, 2])?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let scores = match mask {
            Some(m) => g.add(scores, m)?,
            None => scores,
        };
        let probs = g.softmax_last(scores)?;
        let ctx = g.matmul(probs, v)?; // [H, S, dh]
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[s, self.dim])?;
        let out = self.out.forward(g, ctx)?;
        Ok(AttentionOutput { out, probs })
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

/// Pre-norm transformer block: `x + MSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

pub struct BlockOutput {
    pub out: Var,
    pub probs: Var,
}

impl TransformerBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = ((dim as f64) * mlp_ratio).round().max(1.0) as usize;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            attn: Attention::new(store, &format!("{name}.attn"), dim, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, hidden, dim, rng),
        })
    }

    /// `x` is `[S, D]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, mask: Option<Var>) -> Result<BlockOutput> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, mask)?;
        let x = g.add(x, a.out)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        let out = g.add(x, m)?;
        Ok(BlockOutput { out, probs: a.probs })
    }

    /// Zeroes the value projection and the second MLP layer so the block
    /// reduces to its residual path.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for id in [
            Some(self.attn.value.weight),
            self.attn.value.bias,
            Some(self.mlp.fc2.weight),
            self.mlp.fc2.bias,
        ]
        .into_iter()
        .flatten()
        {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape)).expect("same shape");
        }
    }
}

/// Additive `[S, S]` mask that blocks attention between different groups.
pub fn group_mask(groups: &[usize]) -> Tensor {
    let s = groups.len();
    Tensor::from_fn(&[s, s], |i| if groups[i / s] == groups[i % s] { 0.0 } else { MASK_NEG })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_block_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, 4.0, &mut rng).unwrap();
        block.zero_residual_branches(&mut store);
        let x = Tensor::randn(&[5, 8], &mut rng);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let out = block.forward(&mut g, xv, None).unwrap();
        assert_eq!(g.value(out.out), &x);
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[6, 8], &mut rng);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x);
        let out = attn.forward(&mut g, xv, None).unwrap();
        for row in g.value(out.probs).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        assert!(matches!(Attention::new(&mut store, "a", 10, 3, &mut rng), Err(CstsError::Config(_))));
    }

    #[test]
    fn xavier_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = xavier(10, 20, &mut rng);
        let bound = (6.0f64 / 30.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
    }
}
