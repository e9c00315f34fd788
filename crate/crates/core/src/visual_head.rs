//! Depth-transformer head: from one LLM hidden state, predict the D
//! residual codes of that visual position, one classification head per
//! depth. Attention runs over the depth axis only; visual positions are
//! handled independently.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{push_param, Block, Linear, ParamList, INIT_STD};
use crate::rng;
use crate::tensor::{NoGradGuard, Tensor};

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("expected {expected} codes, got {got}")]
    WrongCodeCount { expected: usize, got: usize },
    #[error("code {0} out of range for codebook of {1}")]
    CodeOutOfRange(usize, usize),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VisualHeadConfig {
    /// Depth-transformer width d_h.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VisualHeadConfig {
    fn default() -> Self {
        VisualHeadConfig {
            dim: 32,
            layers: 3,
            heads: 1,
            mlp_ratio: 2,
        }
    }
}

pub struct VisualHead {
    pub cfg: VisualHeadConfig,
    pub input_proj: Linear,
    /// Shared code-embedding table, `K x dim`, private to the head.
    pub code_embed: Tensor,
    pub blocks: Vec<Block>,
    /// One classification head per depth, `dim -> K`.
    pub heads: Vec<Linear>,
    pub depth: usize,
    pub codebook_size: usize,
}

impl VisualHead {
    pub fn new(
        rng: &mut ChaCha8Rng,
        cfg: &VisualHeadConfig,
        llm_dim: usize,
        codebook_size: usize,
        depth: usize,
    ) -> VisualHead {
        assert!(depth >= 1, "residual depth must be at least 1");
        VisualHead {
            input_proj: Linear::new(rng, llm_dim, cfg.dim, INIT_STD),
            code_embed: rng::randn_tensor(rng, vec![codebook_size, cfg.dim], INIT_STD)
                .requires_grad(true),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(rng, cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect(),
            heads: (0..depth)
                .map(|_| Linear::new(rng, cfg.dim, codebook_size, INIT_STD))
                .collect(),
            cfg: cfg.clone(),
            depth,
            codebook_size,
        }
    }

    pub fn params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.input_proj.collect("input_proj.", &mut out);
        push_param(&mut out, "", "code_embed", &self.code_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("block{i}."), &mut out);
        }
        for (d, h) in self.heads.iter().enumerate() {
            h.collect(&format!("head{d}."), &mut out);
        }
        out
    }

    /// Depth-axis input rows: row 0 is the projected hidden state, row d>0
    /// is the sum of the embeddings of the codes at depths < d (the hidden
    /// state reaches later rows only through attention to row 0).
    pub fn depth_inputs(&self, hidden: &Tensor, codes: &[usize]) -> Result<Tensor> {
        self.check_codes(codes, self.depth - 1)?;
        let mut rows = Vec::with_capacity(self.depth);
        rows.push(self.input_proj.forward(hidden)?);
        if self.depth > 1 {
            let mut acc = Tensor::gather(&self.code_embed, &codes[..1])?;
            rows.push(acc.clone());
            for d in 2..self.depth {
                acc = acc.add(&Tensor::gather(&self.code_embed, &codes[d - 1..d])?)?;
                rows.push(acc.clone());
            }
        }
        Ok(Tensor::concat(&rows, 0)?)
    }

    /// Teacher-forced logits: `[D, K]`, depth d read from the causal
    /// depth-transformer state at row d through classification head d.
    pub fn depth_logits(&self, hidden: &Tensor, target_codes: &[usize]) -> Result<Tensor> {
        self.check_codes(target_codes, self.depth)?;
        let mut x = self.depth_inputs(hidden, &target_codes[..self.depth - 1])?;
        for b in &self.blocks {
            x = b.forward(&x, true, None)?;
        }
        let mut logit_rows = Vec::with_capacity(self.depth);
        for (d, head) in self.heads.iter().enumerate() {
            logit_rows.push(head.forward(&x.slice(0, d, 1)?)?);
        }
        Ok(Tensor::concat(&logit_rows, 0)?)
    }

    /// Greedy inference: each depth's code is the argmax of logits computed
    /// with previously *predicted* codes feeding the depth inputs.
    pub fn depth_decode(&self, hidden: &Tensor) -> Result<Vec<usize>> {
        let _guard = NoGradGuard::new();
        let mut codes: Vec<usize> = Vec::with_capacity(self.depth);
        for d in 0..self.depth {
            // Build inputs for rows 0..=d using the codes decoded so far,
            // padding the unused tail with zeros (they sit behind the
            // causal mask and cannot influence row d).
            let mut padded = codes.clone();
            padded.resize(self.depth.saturating_sub(1), 0);
            let mut x = self.depth_inputs(hidden, &padded)?;
            for b in &self.blocks {
                x = b.forward(&x, true, None)?;
            }
            let logits = self.heads[d].forward(&x.slice(0, d, 1)?)?;
            codes.push(crate::encoder::argmax(&logits.data()));
        }
        Ok(codes)
    }

    fn check_codes(&self, codes: &[usize], expected: usize) -> Result<()> {
        if codes.len() < expected {
            return Err(HeadError::WrongCodeCount {
                expected,
                got: codes.len(),
            });
        }
        for &c in &codes[..expected] {
            if c >= self.codebook_size {
                return Err(HeadError::CodeOutOfRange(c, self.codebook_size));
            }
        }
        Ok(())
    }
}
