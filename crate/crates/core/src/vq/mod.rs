//! Residual-quantized visual tokenizers. The quantizer turns per-patch
//! feature vectors into depth-stacked discrete codes; decoding sums the
//! chosen code vectors. One tokenizer variant is trained to reconstruct
//! pixels, the other to align with label semantics.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{push_param, Linear, ParamList, INIT_STD};
use crate::rng;
use crate::tensor::{Result as TensorResult, Tensor};

mod train;
pub use train::{
    codebook_stats, perplexity_of_counts, train_appearance_tokenizer, train_semantic_tokenizer,
    CodebookStats,
};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("rq_encode: non-finite input feature")]
    NonFiniteInput,
    #[error("code {0} out of range for codebook of {1}")]
    CodeOutOfRange(usize, usize),
    #[error("contrastive training needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, VqError>;

/// Fixed-size table of code vectors. Entry 0 is pinned to the zero vector
/// and never updated, which makes residual norms non-increasing in depth.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Vec<f64>,
    k: usize,
    d_c: usize,
}

impl Codebook {
    pub fn zeros(k: usize, d_c: usize) -> Codebook {
        Codebook {
            entries: vec![0.0; k * d_c],
            k,
            d_c,
        }
    }

    /// Random init with the zero entry pinned.
    pub fn random(rng: &mut ChaCha8Rng, k: usize, d_c: usize, std: f64) -> Codebook {
        let mut cb = Codebook {
            entries: rng::randn_vec(rng, k * d_c, std),
            k,
            d_c,
        };
        cb.entries[..d_c].fill(0.0);
        cb
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    pub fn entry(&self, idx: usize) -> &[f64] {
        &self.entries[idx * self.d_c..(idx + 1) * self.d_c]
    }

    /// Overwrite a non-zero entry. Index 0 is rejected by assertion: the
    /// zero code is frozen.
    pub fn set_entry(&mut self, idx: usize, values: &[f64]) {
        assert!(idx != 0, "entry 0 is frozen to the zero vector");
        assert_eq!(values.len(), self.d_c);
        self.entries[idx * self.d_c..(idx + 1) * self.d_c].copy_from_slice(values);
    }

    pub fn flat(&self) -> &[f64] {
        &self.entries
    }

    pub fn from_flat(k: usize, d_c: usize, entries: Vec<f64>) -> Codebook {
        assert_eq!(entries.len(), k * d_c);
        assert!(entries[..d_c].iter().all(|&v| v == 0.0), "entry 0 must be zero");
        Codebook { entries, k, d_c }
    }
}

/// Result of encoding one feature vector to depth `D`: the chosen codes
/// and all D+1 residuals (residual 0 is the input itself).
#[derive(Debug, Clone)]
pub struct RqEncoding {
    pub codes: Vec<usize>,
    pub residuals: Vec<Vec<f64>>,
}

impl RqEncoding {
    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("at least one residual")
    }
}

/// Greedy residual quantization: at each depth pick the nearest code to
/// the current residual (ties break to the smallest index) and subtract it.
pub fn rq_encode(feature: &[f64], codebook: &Codebook, depth: usize) -> Result<RqEncoding> {
    assert!(depth >= 1, "depth must be at least 1");
    assert_eq!(feature.len(), codebook.d_c());
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(VqError::NonFiniteInput);
    }
    let mut residuals = Vec::with_capacity(depth + 1);
    let mut codes = Vec::with_capacity(depth);
    let mut current = feature.to_vec();
    residuals.push(current.clone());
    for _ in 0..depth {
        let code = nearest_code(&current, codebook);
        let entry = codebook.entry(code);
        for (c, e) in current.iter_mut().zip(entry.iter()) {
            *c -= e;
        }
        codes.push(code);
        residuals.push(current.clone());
    }
    Ok(RqEncoding { codes, residuals })
}

fn nearest_code(v: &[f64], codebook: &Codebook) -> usize {
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for k in 0..codebook.k() {
        let e = codebook.entry(k);
        let d: f64 = v.iter().zip(e.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_dist {
            best_dist = d;
            best = k;
        }
    }
    best
}

/// Sum of the code vectors along the depth stack.
pub fn rq_decode(codes: &[usize], codebook: &Codebook) -> Result<Vec<f64>> {
    let mut out = vec![0.0; codebook.d_c()];
    for &c in codes {
        if c >= codebook.k() {
            return Err(VqError::CodeOutOfRange(c, codebook.k()));
        }
        for (o, e) in out.iter_mut().zip(codebook.entry(c).iter()) {
            *o += e;
        }
    }
    Ok(out)
}

// ── Tokenizer models ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    Appearance,
    Semantic,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Codebook size K.
    pub codebook_size: usize,
    /// Residual depth D.
    pub depth: usize,
    /// Code dimension d_c.
    pub code_dim: usize,
    /// Patch-encoder hidden width.
    pub hidden: usize,
    /// Optimizer steps.
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Commitment weight.
    pub beta: f64,
    /// EMA decay for codebook updates.
    pub ema_decay: f64,
    /// Contrastive temperature (semantic kind).
    pub tau: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 64,
            depth: 3,
            code_dim: 16,
            hidden: 64,
            steps: 400,
            batch: 32,
            lr: 1e-3,
            beta: 0.25,
            ema_decay: 0.99,
            tau: 0.07,
        }
    }
}

/// Image -> per-patch feature stack: flatten 16x16x3 patches, two-layer
/// MLP with GELU, plus a learned positional row per patch.
pub struct PatchFeatureNet {
    pub fc1: Linear,
    pub fc2: Linear,
    pub pos: Tensor,
    pub patch_px: usize,
    pub grid: usize,
}

impl PatchFeatureNet {
    pub fn new(
        rng: &mut ChaCha8Rng,
        patch_px: usize,
        grid: usize,
        hidden: usize,
        d_out: usize,
    ) -> PatchFeatureNet {
        let d_in = patch_px * patch_px * 3;
        PatchFeatureNet {
            fc1: Linear::new(rng, d_in, hidden, INIT_STD),
            fc2: Linear::new(rng, hidden, d_out, INIT_STD),
            pos: rng::randn_tensor(rng, vec![grid * grid, d_out], INIT_STD).requires_grad(true),
            patch_px,
            grid,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// `[m, d_out]` features for an image of `grid*patch_px` pixels a side.
    pub fn forward(&self, image: &[f64]) -> TensorResult<Tensor> {
        let patches = extract_patches(image, self.patch_px, self.grid);
        let x = Tensor::from_vec(
            vec![self.num_patches(), self.patch_px * self.patch_px * 3],
            patches,
        )?;
        let h = self.fc1.forward(&x)?.gelu()?;
        self.fc2.forward(&h)?.add(&self.pos)
    }

    pub fn collect(&self, prefix: &str, out: &mut ParamList) {
        self.fc1.collect(&format!("{prefix}fc1."), out);
        self.fc2.collect(&format!("{prefix}fc2."), out);
        push_param(out, prefix, "pos", &self.pos);
    }
}

/// Row-major patch extraction: grid cells in raster order, each patch
/// flattened as (y, x, rgb).
pub fn extract_patches(image: &[f64], patch_px: usize, grid: usize) -> Vec<f64> {
    let image_px = patch_px * grid;
    assert_eq!(image.len(), image_px * image_px * 3, "image buffer size");
    let mut out = Vec::with_capacity(image.len());
    for gy in 0..grid {
        for gx in 0..grid {
            for ly in 0..patch_px {
                let y = gy * patch_px + ly;
                let x0 = gx * patch_px;
                let start = (y * image_px + x0) * 3;
                out.extend_from_slice(&image[start..start + patch_px * 3]);
            }
        }
    }
    out
}

/// A trained visual tokenizer: patch features, shared codebook across
/// depths, plus the kind-specific auxiliary net (pixel decoder or label
/// embedder).
pub struct TokenizerModel {
    pub kind: TokenizerKind,
    pub cfg: TokenizerConfig,
    pub encoder: PatchFeatureNet,
    pub codebook: Codebook,
    /// EMA accumulators per entry (cluster size, feature sum).
    pub ema_size: Vec<f64>,
    pub ema_sum: Vec<f64>,
    /// Appearance only: quantized feature -> patch pixels.
    pub decoder: Option<(Linear, Linear)>,
    /// Semantic only: (shape,color) class embeddings.
    pub label_embed: Option<Tensor>,
}

impl TokenizerModel {
    pub fn num_patches(&self) -> usize {
        self.encoder.num_patches()
    }

    /// Continuous per-patch features (the tokenizer's own feature space).
    pub fn features(&self, image: &[f64]) -> TensorResult<Tensor> {
        self.encoder.forward(image)
    }

    /// Discrete codes for every patch, `m` rows of `D` codes.
    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<Vec<usize>>> {
        let _guard = crate::tensor::NoGradGuard::new();
        let f = self.encoder.forward(image)?;
        let data = f.data();
        let d_c = self.codebook.d_c();
        data.chunks(d_c)
            .map(|row| Ok(rq_encode(row, &self.codebook, self.cfg.depth)?.codes))
            .collect()
    }

    /// Trainable parameters (codebook is EMA-updated, not a parameter).
    pub fn params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.encoder.collect("encoder.", &mut out);
        if let Some((d1, d2)) = &self.decoder {
            d1.collect("decoder.fc1.", &mut out);
            d2.collect("decoder.fc2.", &mut out);
        }
        if let Some(le) = &self.label_embed {
            push_param(&mut out, "", "label_embed", le);
        }
        out
    }
}

/// Straight-through quantization of a feature matrix: forward value is the
/// decoded codes, gradient passes to the features unchanged. Returns the
/// pass-through tensor, the codes, and the decoded constant.
pub fn quantize_straight_through(
    features: &Tensor,
    codebook: &Codebook,
    depth: usize,
) -> Result<(Tensor, Vec<Vec<usize>>, Tensor)> {
    let shape = features.shape();
    let d_c = codebook.d_c();
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[1], d_c);
    let data = features.data();
    let mut codes = Vec::with_capacity(shape[0]);
    let mut decoded = Vec::with_capacity(data.len());
    for row in data.chunks(d_c) {
        let enc = rq_encode(row, codebook, depth)?;
        decoded.extend_from_slice(&rq_decode(&enc.codes, codebook)?);
        codes.push(enc.codes);
    }
    let q = Tensor::from_vec(shape.clone(), decoded)?;
    // f + (q - f) with the bracket detached: value q, gradient d/df = 1.
    let delta = q.sub(&features.detach())?;
    let st = features.add(&delta)?;
    Ok((st, codes, q))
}

/// Commitment penalty `beta * mean_rows ||f - sg(q)||^2` pulling features
/// toward their quantization.
pub fn commitment_loss(features: &Tensor, decoded: &Tensor, beta: f64) -> TensorResult<Tensor> {
    let rows = features.shape()[0] as f64;
    let diff = features.sub(&decoded.detach())?;
    diff.mul(&diff)?.sum()?.scale(beta / rows)
}
