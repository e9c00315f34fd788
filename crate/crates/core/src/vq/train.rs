//! Tokenizer training: straight-through gradients into the patch encoder,
//! exponential-moving-average codebook updates, and codebook diagnostics.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    commitment_loss, extract_patches, rq_decode, rq_encode, Codebook, PatchFeatureNet, Result,
    TokenizerConfig, TokenizerKind, TokenizerModel, VqError,
};
use crate::data::{Sample, NUM_CLASSES};
use crate::nn::{info_nce, INIT_STD};
use crate::rng;
use crate::tensor::Tensor;
use crate::train::optim::AdamW;

/// Label-embedding init is kept small so that contrastive logits start
/// near uniform.
const LABEL_EMBED_STD: f64 = 0.01;

struct BatchQuant {
    /// Straight-through tensor per image, `m x d_c`.
    st: Vec<Tensor>,
    /// Decoded constants per image.
    decoded: Vec<Tensor>,
    /// Per-code accumulated assignment counts and feature sums.
    counts: Vec<f64>,
    sums: Vec<f64>,
}

/// Quantize a batch of feature tensors, gathering EMA statistics: at depth
/// d the vector assigned to the chosen code is the incoming residual.
fn quantize_batch(features: &[Tensor], codebook: &Codebook, depth: usize) -> Result<BatchQuant> {
    let d_c = codebook.d_c();
    let mut counts = vec![0.0; codebook.k()];
    let mut sums = vec![0.0; codebook.k() * d_c];
    let mut st_out = Vec::with_capacity(features.len());
    let mut dec_out = Vec::with_capacity(features.len());
    for f in features {
        let shape = f.shape();
        let data = f.data();
        let mut decoded = Vec::with_capacity(data.len());
        for row in data.chunks(d_c) {
            let enc = rq_encode(row, codebook, depth)?;
            for (d, &code) in enc.codes.iter().enumerate() {
                counts[code] += 1.0;
                let assigned = &enc.residuals[d];
                let slot = &mut sums[code * d_c..(code + 1) * d_c];
                for (s, a) in slot.iter_mut().zip(assigned.iter()) {
                    *s += *a;
                }
            }
            decoded.extend_from_slice(&rq_decode(&enc.codes, codebook)?);
        }
        let q = Tensor::from_vec(shape.clone(), decoded)?;
        let st = f.add(&q.sub(&f.detach())?)?;
        st_out.push(st);
        dec_out.push(q);
    }
    Ok(BatchQuant {
        st: st_out,
        decoded: dec_out,
        counts,
        sums,
    })
}

/// EMA codebook update. Entry 0 stays the zero vector; entries whose
/// moving cluster size has decayed away keep their last position.
fn ema_update(model: &mut TokenizerModel, counts: &[f64], sums: &[f64]) {
    let decay = model.cfg.ema_decay;
    let d_c = model.codebook.d_c();
    for k in 1..model.codebook.k() {
        model.ema_size[k] = decay * model.ema_size[k] + (1.0 - decay) * counts[k];
        for i in 0..d_c {
            model.ema_sum[k * d_c + i] =
                decay * model.ema_sum[k * d_c + i] + (1.0 - decay) * sums[k * d_c + i];
        }
        if model.ema_size[k] > 1e-6 {
            let entry: Vec<f64> = (0..d_c)
                .map(|i| model.ema_sum[k * d_c + i] / model.ema_size[k])
                .collect();
            model.codebook.set_entry(k, &entry);
        }
    }
}

/// Seed the codebook from observed features: entries 1.. are drawn from
/// the rows of the first batch, which keeps early assignments spread out.
fn init_codebook_from_features(
    rng: &mut ChaCha8Rng,
    features: &[Tensor],
    k: usize,
    d_c: usize,
) -> Codebook {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for f in features {
        for row in f.data().chunks(d_c) {
            rows.push(row.to_vec());
        }
    }
    let mut cb = Codebook::zeros(k, d_c);
    for idx in 1..k {
        let row = &rows[rng.gen_range(0..rows.len())];
        // tiny jitter so duplicated source rows produce distinct entries
        let jitter = rng::randn_vec(rng, d_c, 1e-3);
        let entry: Vec<f64> = row.iter().zip(jitter.iter()).map(|(a, b)| a + b).collect();
        cb.set_entry(idx, &entry);
    }
    cb
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn encoder_features(net: &PatchFeatureNet, samples: &[&Sample]) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| net.forward(&s.image).map_err(VqError::from))
        .collect()
}

/// Train the pixel-reconstruction tokenizer on the train split.
pub fn train_appearance_tokenizer(
    train: &[Sample],
    cfg: &TokenizerConfig,
    patch_px: usize,
    grid: usize,
    seed: u64,
) -> Result<TokenizerModel> {
    let mut stream = rng::substream(seed, "tokenizer-appearance");
    let encoder = PatchFeatureNet::new(&mut stream, patch_px, grid, cfg.hidden, cfg.code_dim);
    let d_patch = patch_px * patch_px * 3;
    let decoder = (
        crate::nn::Linear::new(&mut stream, cfg.code_dim, cfg.hidden, INIT_STD),
        crate::nn::Linear::new(&mut stream, cfg.hidden, d_patch, INIT_STD),
    );
    let mut model = TokenizerModel {
        kind: TokenizerKind::Appearance,
        cfg: cfg.clone(),
        encoder,
        codebook: Codebook::zeros(cfg.codebook_size, cfg.code_dim),
        ema_size: vec![1.0; cfg.codebook_size],
        ema_sum: vec![0.0; cfg.codebook_size * cfg.code_dim],
        decoder: Some(decoder),
        label_embed: None,
    };
    let params = model.params();
    let mut opt = AdamW::new(&params, 0.0);

    for step in 1..=cfg.steps {
        let idx = batch_indices(&mut stream, train.len(), cfg.batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let features = encoder_features(&model.encoder, &batch)?;
        if step == 1 {
            model.codebook = init_codebook_from_features(
                &mut stream,
                &features,
                cfg.codebook_size,
                cfg.code_dim,
            );
            seed_ema_from_codebook(&mut model);
        }
        let quant = quantize_batch(&features, &model.codebook, cfg.depth)?;

        let mut recon_losses = Vec::with_capacity(batch.len());
        let mut commit_losses = Vec::with_capacity(batch.len());
        for (i, sample) in batch.iter().enumerate() {
            let target = Tensor::from_vec(
                vec![model.encoder.num_patches(), d_patch],
                extract_patches(&sample.image, patch_px, grid),
            )?;
            let (d1, d2) = model.decoder.as_ref().expect("appearance decoder");
            let recon = d2.forward(&d1.forward(&quant.st[i])?.gelu()?)?;
            let diff = recon.sub(&target)?;
            recon_losses.push(diff.mul(&diff)?.mean()?);
            commit_losses.push(commitment_loss(&features[i], &quant.decoded[i], cfg.beta)?);
        }
        let loss = mean_of(&recon_losses)?.add(&mean_of(&commit_losses)?)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(VqError::Diverged {
                step,
                loss: loss_val,
            });
        }
        opt.zero_grads();
        loss.backward()?;
        opt.step(cfg.lr);
        ema_update(&mut model, &quant.counts, &quant.sums);
    }
    Ok(model)
}

/// Train the label-alignment tokenizer on the train split.
pub fn train_semantic_tokenizer(
    train: &[Sample],
    cfg: &TokenizerConfig,
    patch_px: usize,
    grid: usize,
    seed: u64,
) -> Result<TokenizerModel> {
    if cfg.batch < 2 {
        return Err(VqError::BatchTooSmall(cfg.batch));
    }
    let mut stream = rng::substream(seed, "tokenizer-semantic");
    let encoder = PatchFeatureNet::new(&mut stream, patch_px, grid, cfg.hidden, cfg.code_dim);
    let label_embed = rng::randn_tensor(
        &mut stream,
        vec![NUM_CLASSES, cfg.code_dim],
        LABEL_EMBED_STD,
    )
    .requires_grad(true);
    let mut model = TokenizerModel {
        kind: TokenizerKind::Semantic,
        cfg: cfg.clone(),
        encoder,
        codebook: Codebook::zeros(cfg.codebook_size, cfg.code_dim),
        ema_size: vec![1.0; cfg.codebook_size],
        ema_sum: vec![0.0; cfg.codebook_size * cfg.code_dim],
        decoder: None,
        label_embed: Some(label_embed),
    };
    let params = model.params();
    let mut opt = AdamW::new(&params, 0.0);

    for step in 1..=cfg.steps {
        let idx = batch_indices(&mut stream, train.len(), cfg.batch);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let features = encoder_features(&model.encoder, &batch)?;
        if step == 1 {
            model.codebook = init_codebook_from_features(
                &mut stream,
                &features,
                cfg.codebook_size,
                cfg.code_dim,
            );
            seed_ema_from_codebook(&mut model);
        }
        let quant = quantize_batch(&features, &model.codebook, cfg.depth)?;

        let label_embed = model.label_embed.as_ref().expect("semantic label embedder");
        let mut pooled_rows = Vec::with_capacity(batch.len());
        let mut label_rows = Vec::with_capacity(batch.len());
        let mut commit_losses = Vec::with_capacity(batch.len());
        for (i, sample) in batch.iter().enumerate() {
            pooled_rows.push(quant.st[i].mean_rows()?);
            let classes = sample.scene.class_ids();
            label_rows.push(Tensor::gather(label_embed, &classes)?.mean_rows()?);
            commit_losses.push(commitment_loss(&features[i], &quant.decoded[i], cfg.beta)?);
        }
        let image_emb = Tensor::concat(&pooled_rows, 0)?;
        let label_emb = Tensor::concat(&label_rows, 0)?;
        let loss = info_nce(&image_emb, &label_emb, cfg.tau)?.add(&mean_of(&commit_losses)?)?;
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(VqError::Diverged {
                step,
                loss: loss_val,
            });
        }
        opt.zero_grads();
        loss.backward()?;
        opt.step(cfg.lr);
        ema_update(&mut model, &quant.counts, &quant.sums);
    }
    Ok(model)
}

fn seed_ema_from_codebook(model: &mut TokenizerModel) {
    let d_c = model.codebook.d_c();
    for k in 0..model.codebook.k() {
        model.ema_size[k] = 1.0;
        model.ema_sum[k * d_c..(k + 1) * d_c].copy_from_slice(model.codebook.entry(k));
    }
}

fn mean_of(losses: &[Tensor]) -> crate::tensor::Result<Tensor> {
    let mut acc = losses[0].clone();
    for l in &losses[1..] {
        acc = acc.add(l)?;
    }
    acc.scale(1.0 / losses.len() as f64)
}

/// Codebook usage diagnostics over a set of images.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CodebookStats {
    /// Fraction of entries assigned at least once.
    pub utilization: f64,
    /// exp(entropy) of the code distribution over all (position, depth)
    /// assignments.
    pub perplexity: f64,
    /// Mean squared residual norm after each depth (index 0 = raw feature).
    pub per_depth_residual_energy: Vec<f64>,
}

pub fn codebook_stats(model: &TokenizerModel, samples: &[Sample]) -> Result<CodebookStats> {
    let _guard = crate::tensor::NoGradGuard::new();
    let d_c = model.codebook.d_c();
    let depth = model.cfg.depth;
    let mut counts = vec![0usize; model.codebook.k()];
    let mut energy = vec![0.0; depth + 1];
    let mut positions = 0usize;
    for s in samples {
        let f = model.encoder.forward(&s.image)?;
        for row in f.data().chunks(d_c) {
            let enc = rq_encode(row, &model.codebook, depth)?;
            for &c in &enc.codes {
                counts[c] += 1;
            }
            for (d, res) in enc.residuals.iter().enumerate() {
                energy[d] += res.iter().map(|v| v * v).sum::<f64>();
            }
            positions += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let used = counts.iter().filter(|&&c| c > 0).count();
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    for e in energy.iter_mut() {
        *e /= positions as f64;
    }
    Ok(CodebookStats {
        utilization: used as f64 / model.codebook.k() as f64,
        perplexity: entropy.exp(),
        per_depth_residual_energy: energy,
    })
}

/// Perplexity of an explicit count histogram; exposed for direct checks.
pub fn perplexity_of_counts(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let mut entropy = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            entropy -= p * p.ln();
        }
    }
    entropy.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_uniform_and_collapsed() {
        assert!((perplexity_of_counts(&[5, 5, 5, 5]) - 4.0).abs() < 1e-12);
        assert!((perplexity_of_counts(&[10, 0, 0, 0]) - 1.0).abs() < 1e-12);
    }
}
