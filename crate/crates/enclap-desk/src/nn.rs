//! Neural network layers built on the autodiff graph.
//!
//! Layers hold parameter ids into a [`ParamStore`]; `forward` re-binds them
//! as graph leaves each step, so gradient accumulation lands in the store.
//! Transformer blocks are pre-norm with GELU feed-forward.

use crate::autodiff::{Graph, ParamId, ParamStore, Result, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Xavier-uniform matrix init.
pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

pub fn init_embedding(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).expect("init shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = ps.register(&format!("{name}.w"), init_matrix(rng, din, dout));
        let b = ps.register(&format!("{name}.b"), Tensor::vector(vec![0.0; dout]));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(ps, self.w)?;
        let b = g.param(ps, self.b)?;
        let y = g.matmul(x, w, false, false)?;
        g.add(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = ps.register(&format!("{name}.gain"), Tensor::vector(vec![1.0; dim]));
        let bias = ps.register(&format!("{name}.bias"), Tensor::vector(vec![0.0; dim]));
        LayerNorm { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let gain = g.param(ps, self.gain)?;
        let bias = g.param(ps, self.bias)?;
        g.layer_norm(x, gain, bias)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new(ps: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let table = ps.register(name, init_embedding(rng, vocab, dim, 0.1));
        Embedding { table }
    }

    pub fn lookup(&self, g: &mut Graph, ps: &ParamStore, ids: &[usize]) -> Result<Var> {
        let t = g.param(ps, self.table)?;
        g.gather_rows(t, ids)
    }
}

/// Additive attention mask: 0 where attending is allowed, a large negative
/// number where it is not.
pub fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = -1e30;
        }
    }
    Tensor::matrix(len, len, data).expect("mask shape")
}

/// Scaled dot-product attention over already-projected q/k/v.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
    let dk = g.value(q).cols() as f64;
    let scores = g.matmul(q, k, false, true)?;
    let scores = g.scale(scores, 1.0 / dk.sqrt())?;
    let scores = match mask {
        Some(m) => g.add(scores, m)?,
        None => scores,
    };
    let attn = g.softmax_rows(scores)?;
    g.matmul(attn, v, false, false)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            wq: Linear::new(ps, &format!("{name}.wq"), dim, dim, rng),
            wk: Linear::new(ps, &format!("{name}.wk"), dim, dim, rng),
            wv: Linear::new(ps, &format!("{name}.wv"), dim, dim, rng),
            wo: Linear::new(ps, &format!("{name}.wo"), dim, dim, rng),
            heads,
        }
    }

    /// `x_q` attends over `x_kv`; self-attention passes the same var twice.
    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x_q: Var,
        x_kv: Var,
        mask: Option<Var>,
    ) -> Result<Var> {
        let q = self.wq.forward(g, ps, x_q)?;
        let k = self.wk.forward(g, ps, x_kv)?;
        let v = self.wv.forward(g, ps, x_kv)?;
        let dim = g.value(q).cols();
        let dh = dim / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            outs.push(attention(g, qh, kh, vh, mask)?);
        }
        let cat = g.concat_cols(&outs)?;
        self.wo.forward(g, ps, cat)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub lin1: Linear,
    pub lin2: Linear,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        FeedForward {
            lin1: Linear::new(ps, &format!("{name}.lin1"), dim, hidden, rng),
            lin2: Linear::new(ps, &format!("{name}.lin2"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lin1.forward(g, ps, x)?;
        let h = g.gelu(h)?;
        self.lin2.forward(g, ps, h)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        EncoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ffn, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var) -> Result<Var> {
        let n = self.ln1.forward(g, ps, x)?;
        let a = self.attn.forward(g, ps, n, n, None)?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, n)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, ffn: usize, rng: &mut ChaCha8Rng) -> Self {
        DecoderLayer {
            ln1: LayerNorm::new(ps, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), dim, heads, rng),
            ln2: LayerNorm::new(ps, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), dim, heads, rng),
            ln3: LayerNorm::new(ps, &format!("{name}.ln3"), dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), dim, ffn, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: Var,
        memory: Var,
        self_mask: Var,
    ) -> Result<Var> {
        let n = self.ln1.forward(g, ps, x)?;
        let a = self.self_attn.forward(g, ps, n, n, Some(self_mask))?;
        let x = g.add(x, a)?;
        let n = self.ln2.forward(g, ps, x)?;
        let c = self.cross_attn.forward(g, ps, n, memory, None)?;
        let x = g.add(x, c)?;
        let n = self.ln3.forward(g, ps, x)?;
        let f = self.ffn.forward(g, ps, n)?;
        g.add(x, f)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(ps, &format!("{name}.{i}"), dim, heads, ffn, rng))
            .collect();
        TransformerEncoder {
            layers,
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, ps, x)?;
        }
        self.final_ln.forward(g, ps, x)
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
}

impl TransformerDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        ffn: usize,
        n_layers: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| DecoderLayer::new(ps, &format!("{name}.{i}"), dim, heads, ffn, rng))
            .collect();
        TransformerDecoder {
            layers,
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, x: Var, memory: Var) -> Result<Var> {
        let len = g.value(x).rows();
        let mask = g.constant(causal_mask(len))?;
        let mut x = x;
        for layer in &self.layers {
            x = layer.forward(g, ps, x, memory, mask)?;
        }
        self.final_ln.forward(g, ps, x)
    }
}
