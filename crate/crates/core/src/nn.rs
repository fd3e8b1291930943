//! Transformer building blocks composed from graph primitives.

use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamId, ParamStore};
use crate::rng::SplitMix;
use crate::tensor::{Tensor, TensorError};

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut SplitMix) -> Self {
        let weight = store.add_xavier(format!("{name}.weight"), &[d_in, d_out], d_in, d_out, rng);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]));
        Self { weight, bias, d_in, d_out }
    }

    pub fn param_count(d_in: usize, d_out: usize) -> usize {
        d_in * d_out + d_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let y = g.matmul(x, p.var(self.weight))?;
        g.add_row(y, p.var(self.bias))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

/// Output of [`MultiHeadAttention::forward`]; `weights[h]` is the `[T, T]`
/// attention matrix of head `h`.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut SplitMix) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            heads,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        4 * Linear::param_count(dim, dim)
    }

    /// Unmasked scaled dot-product attention with scale `1 / sqrt(D / heads)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<AttentionOutput, TensorError> {
        let dim = self.q.d_out;
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "multi_head_attention",
                detail: format!("model dim {dim} not divisible by {} heads", self.heads),
            });
        }
        let head_dim = dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let mut contexts = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice(q, 1, h * head_dim, head_dim)?;
            let kh = g.slice(k, 1, h * head_dim, head_dim)?;
            let vh = g.slice(v, 1, h * head_dim, head_dim)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.mul_scalar(scores, scale)?;
            let attn = g.softmax(scores, 1)?;
            contexts.push(g.matmul(attn, vh)?);
            weights.push(attn);
        }
        let ctx = if contexts.len() == 1 { contexts[0] } else { g.concat(&contexts, 1)? };
        let output = self.out.forward(g, p, ctx)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Post-norm transformer layer:
/// `x = LN(x + MHA(x)); x = LN(x + W2 gelu(W1 x))`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: LayerNorm,
}

impl TransformerLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, ffn: usize, heads: usize, rng: &mut SplitMix) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), dim),
            ffn_in: Linear::new(store, &format!("{name}.ffn_in"), dim, ffn, rng),
            ffn_out: Linear::new(store, &format!("{name}.ffn_out"), ffn, dim, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), dim),
        }
    }

    pub fn param_count(dim: usize, ffn: usize) -> usize {
        MultiHeadAttention::param_count(dim)
            + Linear::param_count(dim, ffn)
            + Linear::param_count(ffn, dim)
            + 4 * dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var, TensorError> {
        let a = self.attn.forward(g, p, x)?.output;
        let r = g.add(x, a)?;
        let h = self.attn_norm.forward(g, p, r)?;
        let f = self.ffn_in.forward(g, p, h)?;
        let f = g.gelu(f)?;
        let f = self.ffn_out.forward(g, p, f)?;
        let r = g.add(h, f)?;
        self.ffn_norm.forward(g, p, r)
    }
}

/// Additive sinusoidal position table `[T, D]`.
pub fn sinusoidal_positions(frames: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(frames * dim);
    for t in 0..frames {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![frames, dim], data).expect("table shape")
}
