//! Continuous-feature provider: a small patch transformer pretrained with
//! the same contrastive recipe as the semantic tokenizer, plus the
//! quantized-feature input path used for the discrete-feature ablation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Sample, NUM_CLASSES};
use crate::nn::{info_nce, push_param, Block, Linear, ParamList, INIT_STD};
use crate::rng;
use crate::tensor::{NoGradGuard, Tensor};
use crate::train::optim::AdamW;
use crate::vq::{rq_decode, rq_encode, TokenizerModel};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("image of {got} values does not fit {px}x{px} RGB")]
    BadImageDims { got: usize, px: usize },
    #[error("contrastive training needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("tokenizer error: {0}")]
    Vq(#[from] crate::vq::VqError),
}

pub type Result<T> = std::result::Result<T, EncoderError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature width d_v.
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub tau: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            steps: 400,
            batch: 32,
            lr: 1e-3,
            tau: 0.07,
        }
    }
}

/// Patch transformer emitting one feature row per patch.
pub struct EncoderModel {
    pub cfg: EncoderConfig,
    pub patch_embed: Linear,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub label_embed: Tensor,
    pub patch_px: usize,
    pub grid: usize,
}

impl EncoderModel {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &EncoderConfig, patch_px: usize, grid: usize) -> Self {
        let d_in = patch_px * patch_px * 3;
        EncoderModel {
            patch_embed: Linear::new(rng, d_in, cfg.dim, INIT_STD),
            pos: rng::randn_tensor(rng, vec![grid * grid, cfg.dim], INIT_STD).requires_grad(true),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(rng, cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect(),
            label_embed: rng::randn_tensor(rng, vec![NUM_CLASSES, cfg.dim], 0.01)
                .requires_grad(true),
            cfg: cfg.clone(),
            patch_px,
            grid,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    /// Patch projections before positions are added; on a constant image
    /// every row is identical.
    pub fn patch_embeddings(&self, image: &[f64]) -> Result<Tensor> {
        let px = self.grid * self.patch_px;
        if image.len() != px * px * 3 {
            return Err(EncoderError::BadImageDims {
                got: image.len(),
                px,
            });
        }
        let patches = crate::vq::extract_patches(image, self.patch_px, self.grid);
        let x = Tensor::from_vec(
            vec![self.num_patches(), self.patch_px * self.patch_px * 3],
            patches,
        )?;
        Ok(self.patch_embed.forward(&x)?)
    }

    /// `[m, dim]` continuous features. Bidirectional attention over patches.
    pub fn encode_image(&self, image: &[f64]) -> Result<Tensor> {
        let mut x = self.patch_embeddings(image)?.add(&self.pos)?;
        for b in &self.blocks {
            x = b.forward(&x, false, None)?;
        }
        Ok(x)
    }

    pub fn params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.patch_embed.collect("patch_embed.", &mut out);
        push_param(&mut out, "", "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("block{i}."), &mut out);
        }
        push_param(&mut out, "", "label_embed", &self.label_embed);
        out
    }

    /// Mean-pooled image embedding used by the contrastive objective and
    /// retrieval.
    pub fn pooled(&self, image: &[f64]) -> Result<Tensor> {
        Ok(self.encode_image(image)?.mean_rows()?)
    }
}

/// Contrastive pretraining against label-set embeddings. The returned
/// model is frozen by the callers that consume it; nothing here enforces
/// that beyond never handing its params to a later optimizer.
pub fn pretrain_encoder(
    train: &[Sample],
    cfg: &EncoderConfig,
    patch_px: usize,
    grid: usize,
    seed: u64,
) -> Result<(EncoderModel, Vec<f64>)> {
    if cfg.batch < 2 {
        return Err(EncoderError::BatchTooSmall(cfg.batch));
    }
    let mut stream = rng::substream(seed, "vision-encoder");
    let model = EncoderModel::new(&mut stream, cfg, patch_px, grid);
    let mut opt = AdamW::new(&model.params(), 0.0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<&Sample> = (0..cfg.batch)
            .map(|_| &train[stream.gen_range(0..train.len())])
            .collect();
        let mut img_rows = Vec::with_capacity(batch.len());
        let mut lbl_rows = Vec::with_capacity(batch.len());
        for s in &batch {
            img_rows.push(model.pooled(&s.image)?);
            lbl_rows.push(Tensor::gather(&model.label_embed, &s.scene.class_ids())?.mean_rows()?);
        }
        let img = Tensor::concat(&img_rows, 0)?;
        let lbl = Tensor::concat(&lbl_rows, 0)?;
        let loss = info_nce(&img, &lbl, cfg.tau)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(EncoderError::Diverged { step, loss: v });
        }
        losses.push(v);
        opt.zero_grads();
        loss.backward()?;
        opt.step(cfg.lr);
    }
    Ok((model, losses))
}

/// Nearest-label class by dot product with the label embeddings.
pub fn retrieve_class(model: &EncoderModel, image: &[f64]) -> Result<usize> {
    let _guard = NoGradGuard::new();
    let pooled = model.pooled(image)?;
    let scores = pooled.matmul(&model.label_embed.transpose()?)?;
    Ok(argmax(&scores.data()))
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ── Input feature source ────────────────────────────────────────────────

/// Which input path feeds the multimodal model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureMode {
    Continuous,
    Discrete,
}

impl std::fmt::Display for FeatureMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureMode::Continuous => write!(f, "continuous"),
            FeatureMode::Discrete => write!(f, "discrete"),
        }
    }
}

/// Learned affine lift from tokenizer code space to the encoder feature
/// width, so both feature modes emit shape-identical sequences.
pub struct FeatureLift {
    pub lin: Linear,
}

impl FeatureLift {
    pub fn new(rng: &mut ChaCha8Rng, d_c: usize, d_v: usize) -> FeatureLift {
        FeatureLift {
            lin: Linear::new(rng, d_c, d_v, INIT_STD),
        }
    }

    pub fn params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.lin.collect("lift.", &mut out);
        out
    }
}

/// Quantized features for the discrete input path: encode, decode, lift.
/// The quantization bottleneck is the only difference from the tokenizer's
/// continuous features.
pub fn discrete_features(
    image: &[f64],
    tokenizer: &TokenizerModel,
    lift: &FeatureLift,
) -> Result<Tensor> {
    let decoded = decoded_feature_rows(image, tokenizer)?;
    lift.lin.forward(&decoded).map_err(EncoderError::from)
}

/// The decoded (quantized) feature rows in code space, before lifting.
pub fn decoded_feature_rows(image: &[f64], tokenizer: &TokenizerModel) -> Result<Tensor> {
    let f = {
        let _guard = NoGradGuard::new();
        tokenizer.features(image)?
    };
    let d_c = tokenizer.codebook.d_c();
    let mut rows = Vec::with_capacity(f.numel());
    for row in f.data().chunks(d_c) {
        let enc = rq_encode(row, &tokenizer.codebook, tokenizer.cfg.depth)?;
        rows.extend_from_slice(&rq_decode(&enc.codes, &tokenizer.codebook)?);
    }
    Ok(Tensor::from_vec(vec![tokenizer.num_patches(), d_c], rows)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, Scene, SceneObject};

    fn make_sample(shape: usize, color: usize, cell: usize, id: usize) -> Sample {
        let scene = Scene::new(vec![SceneObject { shape, color, cell }]).unwrap();
        let image = render(&scene, 48);
        Sample {
            id: format!("s{id}"),
            image,
            caption_text: String::new(),
            caption_ids: vec![],
            qa: vec![],
            scene,
        }
    }

    #[test]
    fn encode_shape_and_determinism() {
        let mut r = rng::seeded(1);
        let model = EncoderModel::new(&mut r, &EncoderConfig::default(), 16, 3);
        let s = make_sample(0, 0, 4, 0);
        let z1 = model.encode_image(&s.image).unwrap();
        let z2 = model.encode_image(&s.image).unwrap();
        assert_eq!(z1.shape(), vec![9, 32]);
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn bad_dims_rejected() {
        let mut r = rng::seeded(1);
        let model = EncoderModel::new(&mut r, &EncoderConfig::default(), 16, 3);
        let err = model.encode_image(&[0.0; 10]).unwrap_err();
        assert!(matches!(err, EncoderError::BadImageDims { .. }));
    }

    #[test]
    fn constant_image_rows_identical_before_positions() {
        let mut r = rng::seeded(2);
        let model = EncoderModel::new(&mut r, &EncoderConfig::default(), 16, 3);
        let white = vec![1.0; 48 * 48 * 3];
        let pe = model.patch_embeddings(&white).unwrap();
        let data = pe.data();
        let first = &data[..32];
        for row in data.chunks(32) {
            assert_eq!(row, first, "all-white patches must embed identically");
        }
    }

    #[test]
    fn initial_contrastive_loss_near_log_batch() {
        let mut samples = Vec::new();
        for i in 0..32 {
            samples.push(make_sample(i % 4, (i / 4) % 4, i % 9, i));
        }
        let cfg = EncoderConfig {
            steps: 1,
            ..EncoderConfig::default()
        };
        let (_, losses) = pretrain_encoder(&samples, &cfg, 16, 3, 123).unwrap();
        let expect = (cfg.batch as f64).ln();
        assert!(
            (losses[0] - expect).abs() / expect < 0.2,
            "step-0 loss {} vs ln(batch) {}",
            losses[0],
            expect
        );
    }

    #[test]
    fn pretraining_rejects_batch_of_one() {
        let samples = vec![make_sample(0, 0, 0, 0)];
        let cfg = EncoderConfig {
            batch: 1,
            ..EncoderConfig::default()
        };
        assert!(matches!(
            pretrain_encoder(&samples, &cfg, 16, 3, 1),
            Err(EncoderError::BatchTooSmall(1))
        ));
    }

    #[test]
    fn discrete_path_matches_continuous_shape_and_zero_codes_hit_bias() {
        let mut r = rng::seeded(5);
        let tok_cfg = crate::vq::TokenizerConfig {
            steps: 2,
            batch: 4,
            ..Default::default()
        };
        let samples: Vec<Sample> = (0..8).map(|i| make_sample(i % 4, i % 4, i % 9, i)).collect();
        let tok =
            crate::vq::train_semantic_tokenizer(&samples, &tok_cfg, 16, 3, 99).unwrap();
        let lift = FeatureLift::new(&mut r, tok_cfg.code_dim, 32);
        let feats = discrete_features(&samples[0].image, &tok, &lift).unwrap();
        assert_eq!(feats.shape(), vec![9, 32]);

        // A zero decoded row lifts to exactly the bias.
        let zero_row = Tensor::from_vec(vec![1, tok_cfg.code_dim], vec![0.0; tok_cfg.code_dim])
            .unwrap();
        let lifted = lift.lin.forward(&zero_row).unwrap();
        assert_eq!(lifted.data(), lift.lin.b.data());
    }
}
