//! Multimodal backbone: projector, text embedding, causal transformer,
//! LM head, sequence assembly, greedy generation and attention-map
//! extraction.
//!
//! A layout is ordered `[<bos>, <boi>, image rows, <eoi>, prompt, response]`;
//! the `<boi>`/`<eoi>` markers bracket the visual span so the marker hidden
//! state can act as the predictor of the first visual position.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::EOS;
use crate::nn::{push_param, AttnMap, Block, Linear, ParamList, INIT_STD};
use crate::rng;
use crate::tensor::{NoGradGuard, Tensor};

#[derive(Debug, Error)]
pub enum LvlmError {
    #[error("token id {0} out of range for vocab of {1}")]
    TokenOutOfRange(u32, usize),
    #[error("sequence of {got} exceeds the positional table of {max}")]
    SequenceTooLong { got: usize, max: usize },
    #[error("features of shape {got:?} do not match expected {expected:?}")]
    BadFeatureShape { got: Vec<usize>, expected: Vec<usize> },
    #[error("max_len must be positive")]
    BadMaxLen,
    #[error("query position {query} precedes the text region starting at {text_start}")]
    QueryBeforeText { query: usize, text_start: usize },
    #[error("layout has no visual span")]
    EmptyVisualSpan,
    #[error("layer {0} out of range for {1} layers")]
    LayerOutOfRange(usize, usize),
    #[error("tensor error: {0}")]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, LvlmError>;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LvlmConfig {
    /// Backbone width d.
    pub dim: usize,
    /// Incoming visual feature width d_v.
    pub feature_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Positional table length; bounds any assembled sequence.
    pub max_seq: usize,
}

impl Default for LvlmConfig {
    fn default() -> Self {
        LvlmConfig {
            dim: 64,
            feature_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_seq: 64,
        }
    }
}

/// Ground-truth code grids attached to a training layout, one per
/// supervising tokenizer.
#[derive(Debug, Clone, Default)]
pub struct VisualTargets {
    pub semantic: Option<Vec<Vec<usize>>>,
    pub appearance: Option<Vec<Vec<usize>>>,
}

/// Assembled multimodal input with span bookkeeping.
#[derive(Debug)]
pub struct SequenceLayout {
    /// `[m + n + 3, d]` content embeddings (positions are added in
    /// `forward`).
    pub embeddings: Tensor,
    /// Number of visual rows m.
    pub m: usize,
    /// Number of text tokens n (prompt + response).
    pub n: usize,
    /// Prompt length s: text targets at indices < s are never supervised.
    pub prompt_end: usize,
    /// All n text token ids (prompt then response).
    pub targets_text: Vec<u32>,
    pub targets_visual: VisualTargets,
}

impl SequenceLayout {
    pub fn seq_len(&self) -> usize {
        self.m + self.n + 3
    }

    /// Global indices of the m image rows.
    pub fn visual_span(&self) -> std::ops::Range<usize> {
        2..2 + self.m
    }

    /// Global index of the first text token.
    pub fn text_start(&self) -> usize {
        self.m + 3
    }
}

/// Per-forward results; attention maps are grouped per layer.
pub struct ForwardOutput {
    /// `[T, d]` final hidden states (after the closing norm).
    pub hidden: Tensor,
    /// `[n, |V|]` logits at the text positions (empty text region gives
    /// zero rows).
    pub text_logits: Tensor,
    /// `attn[layer][head]` row-stochastic weight matrices.
    pub attn: Vec<Vec<AttnMap>>,
}

pub struct LvlmModel {
    pub cfg: LvlmConfig,
    pub vocab_size: usize,
    pub proj1: Linear,
    pub proj2: Linear,
    pub text_embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub final_ln: crate::nn::LayerNorm,
    pub lm_head: Linear,
    pub boi: Tensor,
    pub eoi: Tensor,
}

impl LvlmModel {
    pub fn new(rng: &mut ChaCha8Rng, cfg: &LvlmConfig, vocab_size: usize) -> LvlmModel {
        LvlmModel {
            proj1: Linear::new(rng, cfg.feature_dim, cfg.dim, INIT_STD),
            proj2: Linear::new(rng, cfg.dim, cfg.dim, INIT_STD),
            text_embed: rng::randn_tensor(rng, vec![vocab_size, cfg.dim], INIT_STD)
                .requires_grad(true),
            pos: rng::randn_tensor(rng, vec![cfg.max_seq, cfg.dim], INIT_STD).requires_grad(true),
            blocks: (0..cfg.layers)
                .map(|_| Block::new(rng, cfg.dim, cfg.heads, cfg.mlp_ratio))
                .collect(),
            final_ln: crate::nn::LayerNorm::new(cfg.dim),
            lm_head: Linear::new(rng, cfg.dim, vocab_size, INIT_STD),
            boi: rng::randn_tensor(rng, vec![1, cfg.dim], INIT_STD).requires_grad(true),
            eoi: rng::randn_tensor(rng, vec![1, cfg.dim], INIT_STD).requires_grad(true),
            cfg: cfg.clone(),
            vocab_size,
        }
    }

    /// Two affine maps with a GELU between, applied row-wise.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.cfg.feature_dim {
            let expected = vec![shape.first().copied().unwrap_or(0), self.cfg.feature_dim];
            return Err(LvlmError::BadFeatureShape { got: shape, expected });
        }
        Ok(self.proj2.forward(&self.proj1.forward(features)?.gelu()?)?)
    }

    fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        for &id in ids {
            if id as usize >= self.vocab_size {
                return Err(LvlmError::TokenOutOfRange(id, self.vocab_size));
            }
        }
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        Ok(Tensor::gather(&self.text_embed, &idx)?)
    }

    /// Build a layout from projected-or-raw features and token ids.
    /// `features = None` gives the text-only degenerate layout (m = 0).
    /// An empty response is allowed for inference prefixes.
    pub fn assemble(
        &self,
        features: Option<&Tensor>,
        prompt_ids: &[u32],
        response_ids: &[u32],
        targets_visual: VisualTargets,
    ) -> Result<SequenceLayout> {
        let projected = match features {
            Some(f) => Some(self.project(f)?),
            None => None,
        };
        let m = projected.as_ref().map_or(0, |p| p.shape()[0]);
        let n = prompt_ids.len() + response_ids.len();
        let seq_len = m + n + 3;
        if seq_len > self.cfg.max_seq {
            return Err(LvlmError::SequenceTooLong {
                got: seq_len,
                max: self.cfg.max_seq,
            });
        }
        let bos = self.embed_tokens(&[crate::data::BOS])?;
        let mut parts = vec![bos, self.boi.clone()];
        if let Some(p) = projected {
            parts.push(p);
        }
        parts.push(self.eoi.clone());
        let mut targets_text = Vec::with_capacity(n);
        targets_text.extend_from_slice(prompt_ids);
        targets_text.extend_from_slice(response_ids);
        if n > 0 {
            parts.push(self.embed_tokens(&targets_text)?);
        }
        Ok(SequenceLayout {
            embeddings: Tensor::concat(&parts, 0)?,
            m,
            n,
            prompt_end: prompt_ids.len(),
            targets_text,
            targets_visual,
        })
    }

    /// Causal forward pass over an assembled layout.
    pub fn forward(&self, layout: &SequenceLayout) -> Result<ForwardOutput> {
        let t = layout.seq_len();
        let mut x = layout.embeddings.add(&self.pos.slice(0, 0, t)?)?;
        let mut attn = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut sink = Vec::new();
            x = b.forward(&x, true, Some(&mut sink))?;
            attn.push(sink);
        }
        let hidden = self.final_ln.forward(&x)?;
        let text_logits = if layout.n > 0 {
            self.lm_head
                .forward(&hidden.slice(0, layout.text_start(), layout.n)?)?
        } else {
            Tensor::zeros(vec![0, self.vocab_size])
        };
        Ok(ForwardOutput {
            hidden,
            text_logits,
            attn,
        })
    }

    /// Logits for the next token after the last position of the layout.
    pub fn next_token_logits(&self, layout: &SequenceLayout) -> Result<Tensor> {
        let out = self.forward(layout)?;
        let last = out.hidden.slice(0, layout.seq_len() - 1, 1)?;
        Ok(self.lm_head.forward(&last)?)
    }

    /// Greedy decoding from `[image, prompt]` until `<eos>` or `max_len`
    /// generated tokens. Ties resolve to the smallest token id.
    pub fn generate(
        &self,
        features: Option<&Tensor>,
        prompt_ids: &[u32],
        max_len: usize,
    ) -> Result<Vec<u32>> {
        if max_len == 0 {
            return Err(LvlmError::BadMaxLen);
        }
        let _guard = NoGradGuard::new();
        let mut generated: Vec<u32> = Vec::new();
        for _ in 0..max_len {
            let mut text: Vec<u32> = prompt_ids.to_vec();
            text.extend_from_slice(&generated);
            let layout = self.assemble(features, &text, &[], VisualTargets::default())?;
            let logits = self.next_token_logits(&layout)?;
            let next = crate::encoder::argmax(&logits.data()) as u32;
            if next == EOS {
                break;
            }
            generated.push(next);
        }
        Ok(generated)
    }

    /// Head-averaged attention from `query_pos` to the visual span at one
    /// layer, renormalized to sum 1 and reshaped to the `grid x grid`
    /// patch layout.
    pub fn extract_attention(
        &self,
        layout: &SequenceLayout,
        layer: usize,
        query_pos: usize,
        grid: (usize, usize),
    ) -> Result<Vec<f64>> {
        if layout.m == 0 {
            return Err(LvlmError::EmptyVisualSpan);
        }
        if query_pos < layout.text_start() {
            return Err(LvlmError::QueryBeforeText {
                query: query_pos,
                text_start: layout.text_start(),
            });
        }
        if layer >= self.blocks.len() {
            return Err(LvlmError::LayerOutOfRange(layer, self.blocks.len()));
        }
        assert_eq!(grid.0 * grid.1, layout.m, "grid must tile the visual span");
        let _guard = NoGradGuard::new();
        let out = self.forward(layout)?;
        let maps = &out.attn[layer];
        let span = layout.visual_span();
        let mut heat = vec![0.0; layout.m];
        for map in maps {
            let row = map.row(query_pos);
            for (h, w) in heat.iter_mut().zip(row[span.clone()].iter()) {
                *h += w / maps.len() as f64;
            }
        }
        let total: f64 = heat.iter().sum();
        if total > 0.0 {
            for h in heat.iter_mut() {
                *h /= total;
            }
        }
        Ok(heat)
    }

    // ── Parameter groups ────────────────────────────────────────────────

    pub fn projector_params(&self) -> ParamList {
        let mut out = ParamList::new();
        self.proj1.collect("lvlm.proj1.", &mut out);
        self.proj2.collect("lvlm.proj2.", &mut out);
        out
    }

    /// Backbone, embeddings, head and markers: everything unlocked in the
    /// second training stage.
    pub fn backbone_params(&self) -> ParamList {
        let mut out = ParamList::new();
        push_param(&mut out, "lvlm.", "text_embed", &self.text_embed);
        push_param(&mut out, "lvlm.", "pos", &self.pos);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("lvlm.block{i}."), &mut out);
        }
        self.final_ln.collect("lvlm.final_ln.", &mut out);
        self.lm_head.collect("lvlm.lm_head.", &mut out);
        push_param(&mut out, "lvlm.", "boi", &self.boi);
        push_param(&mut out, "lvlm.", "eoi", &self.eoi);
        out
    }

    pub fn all_params(&self) -> ParamList {
        let mut out = self.projector_params();
        out.extend(self.backbone_params());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn tiny_model(seed: u64) -> LvlmModel {
        let mut r = rng::seeded(seed);
        LvlmModel::new(&mut r, &LvlmConfig::default(), 38)
    }

    fn features(seed: u64, m: usize) -> Tensor {
        let mut r = rng::seeded(seed + 1000);
        rng::randn_tensor(&mut r, vec![m, 32], 1.0)
    }

    #[test]
    fn projector_zero_input_closed_form() {
        let model = tiny_model(1);
        let z = Tensor::zeros(vec![9, 32]);
        let out = model.project(&z).unwrap();
        assert_eq!(out.shape(), vec![9, 64]);
        // row = b2 + W2 . gelu(b1); with zero-init biases that's zero.
        let gelu_b1 = model.proj1.b.gelu().unwrap().reshape(vec![1, 64]).unwrap();
        let expect = gelu_b1.matmul(&model.proj2.w).unwrap().add(&model.proj2.b).unwrap();
        for row in out.data().chunks(64) {
            assert_eq!(row, &expect.data()[..], "closed form row");
        }
    }

    #[test]
    fn projector_shape_and_grad() {
        let model = tiny_model(2);
        let z = features(2, 9).requires_grad(true);
        assert_eq!(model.project(&z).unwrap().shape(), vec![9, 64]);
        let err = grad_check(
            |z| {
                model
                    .project(z)
                    .map_err(|_| crate::tensor::TensorError::NonFinite { op: "proj" })?
                    .mean()
            },
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "projector grad: {err}");
    }

    #[test]
    fn assemble_lengths() {
        let model = tiny_model(3);
        let f = features(3, 9);
        let layout = model
            .assemble(Some(&f), &[6, 7, 8, 9], &[10, 11, 12], VisualTargets::default())
            .unwrap();
        assert_eq!(layout.seq_len(), 19);
        assert_eq!(layout.embeddings.shape(), vec![19, 64]);
        assert_eq!(layout.prompt_end, 4);
        assert_eq!(layout.visual_span(), 2..11);
    }

    #[test]
    fn assemble_empty_prompt_supervises_everything() {
        let model = tiny_model(3);
        let f = features(3, 9);
        let layout = model
            .assemble(Some(&f), &[], &[10, 11], VisualTargets::default())
            .unwrap();
        assert_eq!(layout.prompt_end, 0);
        assert_eq!(layout.n, 2);
    }

    #[test]
    fn assemble_rejects_bad_token() {
        let model = tiny_model(3);
        let f = features(3, 9);
        let err = model
            .assemble(Some(&f), &[999], &[], VisualTargets::default())
            .unwrap_err();
        assert!(matches!(err, LvlmError::TokenOutOfRange(999, _)));
    }

    #[test]
    fn swapping_response_targets_keeps_prompt_rows() {
        let model = tiny_model(4);
        let f = features(4, 9);
        let a = model
            .assemble(Some(&f), &[6, 7], &[8, 9], VisualTargets::default())
            .unwrap();
        let b = model
            .assemble(Some(&f), &[6, 7], &[9, 8], VisualTargets::default())
            .unwrap();
        assert_ne!(a.targets_text, b.targets_text);
        let pa = a.embeddings.slice(0, 0, a.text_start() + 2).unwrap();
        let pb = b.embeddings.slice(0, 0, b.text_start() + 2).unwrap();
        assert_eq!(
            pa.data(),
            pb.data(),
            "prompt-region embeddings must be identical"
        );
    }

    #[test]
    fn causality_last_position_perturbation() {
        let model = tiny_model(5);
        let f = features(5, 4);
        let ids = [6u32, 7, 8];
        let layout = model
            .assemble(Some(&f), &ids, &[], VisualTargets::default())
            .unwrap();
        let base = model.forward(&layout).unwrap().hidden.data();

        // Perturb the last text embedding by switching the final token.
        let layout2 = model
            .assemble(Some(&f), &[6, 7, 9], &[], VisualTargets::default())
            .unwrap();
        let pert = model.forward(&layout2).unwrap().hidden.data();
        let t = layout.seq_len();
        let d = 64;
        assert_eq!(
            &base[..(t - 1) * d],
            &pert[..(t - 1) * d],
            "prefix hidden states must be bitwise unchanged"
        );
        assert_ne!(&base[(t - 1) * d..], &pert[(t - 1) * d..]);
    }

    #[test]
    fn causality_every_position() {
        // Zeroing embeddings after position i must leave hidden[0..=i]
        // bitwise unchanged; realized by truncating the sequence.
        let model = tiny_model(6);
        let f = features(6, 4);
        let ids = [6u32, 7, 8, 9, 10];
        let full = model
            .assemble(Some(&f), &ids, &[], VisualTargets::default())
            .unwrap();
        let full_hidden = model.forward(&full).unwrap().hidden.data();
        let d = 64;
        for keep in 1..=ids.len() {
            let part = model
                .assemble(Some(&f), &ids[..keep], &[], VisualTargets::default())
                .unwrap();
            let part_hidden = model.forward(&part).unwrap().hidden.data();
            let t = part.seq_len();
            assert_eq!(
                &part_hidden[..t * d],
                &full_hidden[..t * d],
                "prefix of {keep} tokens"
            );
        }
    }

    #[test]
    fn single_token_text_logits_shape() {
        let model = tiny_model(7);
        let f = features(7, 9);
        let layout = model
            .assemble(Some(&f), &[], &[6], VisualTargets::default())
            .unwrap();
        let out = model.forward(&layout).unwrap();
        assert_eq!(out.text_logits.shape(), vec![1, 38]);
    }

    #[test]
    fn attention_rows_sum_to_one_every_layer_head() {
        let model = tiny_model(8);
        let f = features(8, 9);
        let layout = model
            .assemble(Some(&f), &[6, 7], &[8], VisualTargets::default())
            .unwrap();
        let out = model.forward(&layout).unwrap();
        assert_eq!(out.attn.len(), 2);
        for layer in &out.attn {
            assert_eq!(layer.len(), 4);
            for map in layer {
                for q in 0..map.seq_len {
                    let sum: f64 = map.row(q).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-12, "attn row {q} sums to {sum}");
                }
            }
        }
    }

    #[test]
    fn text_only_layout_runs_as_plain_lm() {
        let model = tiny_model(9);
        let layout = model
            .assemble(None, &[6, 7], &[8, 9], VisualTargets::default())
            .unwrap();
        assert_eq!(layout.m, 0);
        assert_eq!(layout.seq_len(), 7);
        let out = model.forward(&layout).unwrap();
        assert_eq!(out.text_logits.shape(), vec![4, 38]);
    }

    #[test]
    fn generate_rejects_zero_max_len_and_is_deterministic() {
        let model = tiny_model(10);
        let f = features(10, 9);
        assert!(matches!(
            model.generate(Some(&f), &[6], 0),
            Err(LvlmError::BadMaxLen)
        ));
        let a = model.generate(Some(&f), &[6, 7], 6).unwrap();
        let b = model.generate(Some(&f), &[6, 7], 6).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= 6);
    }

    #[test]
    fn eos_dominant_model_generates_nothing() {
        let model = tiny_model(11);
        // Force the LM head to always favor <eos>.
        model.lm_head.w.with_data_mut(|w| w.iter_mut().for_each(|v| *v = 0.0));
        model.lm_head.b.with_data_mut(|b| {
            b.iter_mut().for_each(|v| *v = 0.0);
            b[EOS as usize] = 50.0;
        });
        let f = features(11, 9);
        let out = model.generate(Some(&f), &[6, 7], 8).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn extract_attention_normalizes_and_shapes() {
        let model = tiny_model(12);
        let f = features(12, 9);
        let layout = model
            .assemble(Some(&f), &[6, 7, 8], &[], VisualTargets::default())
            .unwrap();
        let q = layout.seq_len() - 1;
        let heat = model.extract_attention(&layout, 1, q, (3, 3)).unwrap();
        assert_eq!(heat.len(), 9);
        let sum: f64 = heat.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12, "heatmap sums to {sum}");

        let err = model.extract_attention(&layout, 1, 1, (3, 3)).unwrap_err();
        assert!(matches!(err, LvlmError::QueryBeforeText { .. }));
    }
}
