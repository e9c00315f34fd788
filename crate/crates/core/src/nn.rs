//! Shared model building blocks: linear layers, pre-norm transformer
//! blocks and the symmetric contrastive loss used by both tokenizer and
//! encoder pretraining.

use rand_chacha::ChaCha8Rng;

use crate::rng;
use crate::tensor::{Result, Tensor, TensorError};

/// Default init scale for weights and embeddings.
pub const INIT_STD: f64 = 0.02;

/// Collects `(name, tensor)` pairs for checkpointing and optimizers.
pub type ParamList = Vec<(String, Tensor)>;

pub fn push_param(out: &mut ParamList, prefix: &str, name: &str, t: &Tensor) {
    out.push((format!("{prefix}{name}"), t.clone()));
}

/// Affine map `x @ w + b` with `w: [in, out]`, `b: [out]`.
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, std: f64) -> Linear {
        Linear {
            w: rng::randn_tensor(rng, vec![d_in, d_out], std).requires_grad(true),
            b: Tensor::zeros(vec![d_out]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        push_param(out, prefix, "w", &self.w);
        push_param(out, prefix, "b", &self.b);
    }
}

/// Learnable layer-norm over the last axis.
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(dim: usize) -> LayerNorm {
        LayerNorm {
            gain: Tensor::full(vec![dim], 1.0).requires_grad(true),
            bias: Tensor::zeros(vec![dim]).requires_grad(true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain, &self.bias)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        push_param(out, prefix, "gain", &self.gain);
        push_param(out, prefix, "bias", &self.bias);
    }
}

/// Two-layer MLP with GELU.
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, hidden: usize) -> Mlp {
        Mlp {
            fc1: Linear::new(rng, dim, hidden, INIT_STD),
            fc2: Linear::new(rng, hidden, dim, INIT_STD),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.collect(&format!("{prefix}fc1."), out);
        self.fc2.collect(&format!("{prefix}fc2."), out);
    }
}

/// Per-head attention weights captured during a forward pass; rows are
/// query positions, columns key positions.
#[derive(Clone)]
pub struct AttnMap {
    pub weights: Vec<f64>,
    pub seq_len: usize,
}

impl AttnMap {
    pub fn row(&self, q: usize) -> &[f64] {
        &self.weights[q * self.seq_len..(q + 1) * self.seq_len]
    }
}

/// Multi-head self-attention.
pub struct Attention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize) -> Attention {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        Attention {
            wq: Linear::new(rng, dim, dim, INIT_STD),
            wk: Linear::new(rng, dim, dim, INIT_STD),
            wv: Linear::new(rng, dim, dim, INIT_STD),
            wo: Linear::new(rng, dim, dim, INIT_STD),
            heads,
        }
    }

    /// `x: [T, dim]`. When `attn_sink` is given, a copy of every head's
    /// weight matrix is appended to it.
    pub fn forward(
        &self,
        x: &Tensor,
        causal: bool,
        attn_sink: Option<&mut Vec<AttnMap>>,
    ) -> Result<Tensor> {
        let t = x.shape()[0];
        let dim = x.shape()[1];
        let dh = dim / self.heads;
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut ctx_heads = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.slice(1, h * dh, dh)?;
            let kh = k.slice(1, h * dh, dh)?;
            let vh = v.slice(1, h * dh, dh)?;
            let scores = qh.matmul(&kh.transpose()?)?.scale(scale)?;
            let weights = if causal {
                scores.causal_softmax()?
            } else {
                scores.softmax()?
            };
            maps.push(AttnMap {
                weights: weights.data(),
                seq_len: t,
            });
            ctx_heads.push(weights.matmul(&vh)?);
        }
        if let Some(sink) = attn_sink {
            sink.extend(maps);
        }
        let ctx = Tensor::concat(&ctx_heads, 1)?;
        self.wo.forward(&ctx)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.wq.collect(&format!("{prefix}wq."), out);
        self.wk.collect(&format!("{prefix}wk."), out);
        self.wv.collect(&format!("{prefix}wv."), out);
        self.wo.collect(&format!("{prefix}wo."), out);
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new(rng: &mut ChaCha8Rng, dim: usize, heads: usize, mlp_ratio: usize) -> Block {
        Block {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(rng, dim, heads),
            ln2: LayerNorm::new(dim),
            mlp: Mlp::new(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor,
        causal: bool,
        attn_sink: Option<&mut Vec<AttnMap>>,
    ) -> Result<Tensor> {
        let a = self.attn.forward(&self.ln1.forward(x)?, causal, attn_sink)?;
        let x = x.add(&a)?;
        let m = self.mlp.forward(&self.ln2.forward(&x)?)?;
        x.add(&m)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.ln1.collect(&format!("{prefix}ln1."), out);
        self.attn.collect(&format!("{prefix}attn."), out);
        self.ln2.collect(&format!("{prefix}ln2."), out);
        self.mlp.collect(&format!("{prefix}mlp."), out);
    }
}

/// Symmetric InfoNCE over in-batch negatives.
///
/// `left` and `right` are `[B, d]` paired embeddings; row i of one side
/// must match row i of the other. Returns the per-direction average of the
/// two cross-entropies, i.e. ln(B) at uniform logits.
pub fn info_nce(left: &Tensor, right: &Tensor, tau: f64) -> Result<Tensor> {
    let b = left.shape()[0];
    if b < 2 {
        return Err(TensorError::Invalid {
            op: "info_nce",
            msg: format!("contrastive loss needs a batch of at least 2, got {b}"),
        });
    }
    if left.shape() != right.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "info_nce",
            lhs: left.shape(),
            rhs: right.shape(),
        });
    }
    let logits = left.matmul(&right.transpose()?)?.scale(1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let l2r = logits.cross_entropy_from_logits(&targets)?.mean()?;
    let r2l = logits
        .transpose()?
        .cross_entropy_from_logits(&targets)?
        .mean()?;
    l2r.add(&r2l)?.scale(0.5)
}
