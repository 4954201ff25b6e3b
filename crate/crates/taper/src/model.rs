//! Small BERT-style encoder: learned token+position embeddings, K layers of
//! multi-head self-attention plus a two-layer GELU feed-forward block with
//! post-layer layernorms and residuals, and a masked-LM head whose decoder is
//! tied to the token embedding table.
//!
//! Every forward pass exposes the logits, the embedding output, the per-layer
//! hidden states and the head-averaged attention probability maps, which the
//! distillation losses consume.
//!
//! The model carries "live width" counters (`hidden_live`, per-layer
//! `qk_live`). A pruned-but-still-dense model sets them from its masks so
//! layernorm moments and attention scaling match a physically narrowed model
//! exactly; unpruned models keep them at the full widths.

use std::collections::BTreeMap;

use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub layernorm_eps: f64,
    /// Per-head width of the query/key projections. Defaults to
    /// hidden_dim / num_heads; compact exports of pruned models set it
    /// explicitly.
    #[serde(default)]
    pub qk_head_dim: Option<usize>,
    /// Per-head width of the value projection (and W_O row blocks).
    #[serde(default)]
    pub vo_head_dim: Option<usize>,
}

impl ModelConfig {
    pub fn new(
        vocab_size: usize,
        max_seq_len: usize,
        num_layers: usize,
        hidden_dim: usize,
        ffn_dim: usize,
        num_heads: usize,
    ) -> ModelConfig {
        ModelConfig {
            vocab_size,
            max_seq_len,
            num_layers,
            hidden_dim,
            ffn_dim,
            num_heads,
            layernorm_eps: 1e-9,
            qk_head_dim: None,
            vo_head_dim: None,
        }
    }

    /// The 12-layer, 768/3072 teacher-scale configuration.
    pub fn bert_base() -> ModelConfig {
        ModelConfig::new(30522, 512, 12, 768, 3072, 12)
    }

    /// A 12-layer student-scale preset at the given widths (30k vocab,
    /// sequence length 512, 8 heads).
    pub fn narrow_preset(hidden_dim: usize, ffn_dim: usize) -> ModelConfig {
        ModelConfig::new(30522, 512, 12, hidden_dim, ffn_dim, 8)
    }

    pub fn qk_head_dim(&self) -> usize {
        self.qk_head_dim.unwrap_or(self.hidden_dim / self.num_heads)
    }

    pub fn vo_head_dim(&self) -> usize {
        self.vo_head_dim.unwrap_or(self.hidden_dim / self.num_heads)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_heads", self.num_heads),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{} must be positive", name)));
            }
        }
        if self.layernorm_eps <= 0.0 {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        if (self.qk_head_dim.is_none() || self.vo_head_dim.is_none())
            && self.hidden_dim % self.num_heads != 0
        {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if let Some(d) = self.qk_head_dim {
            if d == 0 {
                return Err(Error::Config("qk_head_dim must be positive".into()));
            }
        }
        if let Some(d) = self.vo_head_dim {
            if d == 0 {
                return Err(Error::Config("vo_head_dim must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Everything one forward pass exposes to the losses.
pub struct ForwardOutput {
    /// [seq_len, vocab]
    pub logits: Tensor,
    /// Embedding-layer output, [seq_len, hidden]
    pub embedding_output: Tensor,
    /// One per layer, [seq_len, hidden]
    pub hidden_states: Vec<Tensor>,
    /// One per layer, head-averaged post-softmax probabilities, [seq_len, seq_len]
    pub attention_maps: Vec<Tensor>,
}

pub struct TransformerModel {
    pub config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    /// Count of unpruned hidden dimensions (layernorm moment divisor).
    pub hidden_live: usize,
    /// Per-layer count of unpruned query/key columns per head (attention
    /// scale divisor).
    pub qk_live: Vec<usize>,
}

impl std::fmt::Debug for TransformerModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformerModel")
            .field("config", &self.config)
            .field("hidden_live", &self.hidden_live)
            .field("qk_live", &self.qk_live)
            .field("params", &self.params.len())
            .finish()
    }
}

const INIT_STD: f64 = 0.02;

impl TransformerModel {
    /// Expected parameter names and shapes for a configuration. This single
    /// table drives initialization, checkpoint validation and traversal.
    pub fn expected_shapes(cfg: &ModelConfig) -> BTreeMap<String, Vec<usize>> {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let qk = cfg.num_heads * cfg.qk_head_dim();
        let vo = cfg.num_heads * cfg.vo_head_dim();
        let mut shapes = BTreeMap::new();
        shapes.insert("embed.tok".into(), vec![cfg.vocab_size, d]);
        shapes.insert("embed.pos".into(), vec![cfg.max_seq_len, d]);
        shapes.insert("embed.ln.gamma".into(), vec![d]);
        shapes.insert("embed.ln.beta".into(), vec![d]);
        for k in 0..cfg.num_layers {
            let p = format!("layer.{}", k);
            shapes.insert(format!("{}.attn.w_q", p), vec![d, qk]);
            shapes.insert(format!("{}.attn.b_q", p), vec![qk]);
            shapes.insert(format!("{}.attn.w_k", p), vec![d, qk]);
            shapes.insert(format!("{}.attn.b_k", p), vec![qk]);
            shapes.insert(format!("{}.attn.w_v", p), vec![d, vo]);
            shapes.insert(format!("{}.attn.b_v", p), vec![vo]);
            shapes.insert(format!("{}.attn.w_o", p), vec![vo, d]);
            shapes.insert(format!("{}.attn.b_o", p), vec![d]);
            shapes.insert(format!("{}.ln_attn.gamma", p), vec![d]);
            shapes.insert(format!("{}.ln_attn.beta", p), vec![d]);
            shapes.insert(format!("{}.ffn.w_in", p), vec![d, f]);
            shapes.insert(format!("{}.ffn.b_in", p), vec![f]);
            shapes.insert(format!("{}.ffn.w_out", p), vec![f, d]);
            shapes.insert(format!("{}.ffn.b_out", p), vec![d]);
            shapes.insert(format!("{}.ln_ffn.gamma", p), vec![d]);
            shapes.insert(format!("{}.ln_ffn.beta", p), vec![d]);
        }
        shapes.insert("head.w_mlm".into(), vec![d, d]);
        shapes.insert("head.b_mlm".into(), vec![d]);
        shapes.insert("head.ln.gamma".into(), vec![d]);
        shapes.insert("head.ln.beta".into(), vec![d]);
        shapes.insert("head.b_vocab".into(), vec![cfg.vocab_size]);
        shapes
    }

    /// Fresh model. Matrices are truncated-normal(0.02) within two standard
    /// deviations, biases zero, layernorm scales one.
    pub fn new(config: ModelConfig, rng: &mut ChaCha12Rng) -> TransformerModel {
        config.validate().expect("invalid model config");
        let normal = Normal::new(0.0, INIT_STD).unwrap();
        let trunc = |rng: &mut ChaCha12Rng| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * INIT_STD {
                return v;
            }
        };
        let mut params = BTreeMap::new();
        for (name, shape) in Self::expected_shapes(&config) {
            let numel: usize = shape.iter().product();
            let data = if name.ends_with("gamma") {
                vec![1.0; numel]
            } else if name.ends_with("beta") || name.contains(".b_") {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| trunc(rng)).collect()
            };
            params.insert(name, Tensor::param(&shape, data));
        }
        let qk_live = vec![config.qk_head_dim(); config.num_layers];
        TransformerModel { hidden_live: config.hidden_dim, qk_live, config, params }
    }

    /// Rebuild from named tensors (checkpoint load). Shapes must match the
    /// configuration exactly.
    pub fn from_tensors(
        config: ModelConfig,
        mut tensors: BTreeMap<String, Tensor>,
    ) -> Result<TransformerModel> {
        config.validate()?;
        let mut params = BTreeMap::new();
        for (name, shape) in Self::expected_shapes(&config) {
            let t = tensors.remove(&name).ok_or_else(|| {
                Error::Shape(format!("checkpoint is missing tensor {}", name))
            })?;
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor {} has shape {:?}, config wants {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            t.set_requires_grad(true);
            params.insert(name, t);
        }
        let qk_live = vec![config.qk_head_dim(); config.num_layers];
        Ok(TransformerModel { hidden_live: config.hidden_dim, qk_live, config, params })
    }

    pub fn named_params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    /// Parameter lookup by name. Panics on unknown names: the name table is
    /// fixed by the configuration.
    pub fn param(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter name: {}", name))
    }

    pub fn set_trainable(&self, trainable: bool) {
        for t in self.params.values() {
            t.set_requires_grad(trainable);
        }
    }

    pub fn zero_grads(&self) {
        for t in self.params.values() {
            t.zero_grad();
        }
    }

    /// Deep copy: the clone owns independent storage, so mutating either
    /// model never affects the other. Live widths carry over.
    pub fn clone_model(&self) -> TransformerModel {
        let params =
            self.params.iter().map(|(k, v)| (k.clone(), v.deep_clone())).collect();
        TransformerModel {
            config: self.config.clone(),
            params,
            hidden_live: self.hidden_live,
            qk_live: self.qk_live.clone(),
        }
    }

    /// Full forward pass for one sequence.
    ///
    /// `pad_mask[i]` is true for real tokens; attention to padded positions
    /// is suppressed with a large negative score before the softmax.
    pub fn forward(&self, tokens: &[usize], pad_mask: &[bool]) -> ForwardOutput {
        let n = tokens.len();
        let cfg = &self.config;
        assert!(n >= 1, "empty token sequence");
        assert!(n <= cfg.max_seq_len, "sequence length {} exceeds max {}", n, cfg.max_seq_len);
        assert_eq!(pad_mask.len(), n, "pad mask length mismatch");
        for &t in tokens {
            assert!(t < cfg.vocab_size, "token id {} out of range for vocab {}", t, cfg.vocab_size);
        }
        let heads = cfg.num_heads;
        let qk_dim = cfg.qk_head_dim();
        let vo_dim = cfg.vo_head_dim();
        let eps = cfg.layernorm_eps;
        let hl = self.hidden_live;

        let tok = self.param("embed.tok").embedding(tokens);
        let positions: Vec<usize> = (0..n).collect();
        let pos = self.param("embed.pos").embedding(&positions);
        let emb = tok.add(&pos);
        let emb_out = emb.layernorm(
            self.param("embed.ln.gamma"),
            self.param("embed.ln.beta"),
            eps,
            hl,
        );

        // Constant additive bias: large negative at padded key columns.
        let mut bias = vec![0.0; n * n];
        for (j, &real) in pad_mask.iter().enumerate() {
            if !real {
                for i in 0..n {
                    bias[i * n + j] = -1e9;
                }
            }
        }
        let pad_bias = Tensor::from_vec(&[n, n], bias);

        let mut h = emb_out.clone();
        let mut hidden_states = Vec::with_capacity(cfg.num_layers);
        let mut attention_maps = Vec::with_capacity(cfg.num_layers);

        for k in 0..cfg.num_layers {
            let p = format!("layer.{}", k);
            let q = h
                .matmul(self.param(&format!("{}.attn.w_q", p)))
                .add_row_bias(self.param(&format!("{}.attn.b_q", p)));
            let key = h
                .matmul(self.param(&format!("{}.attn.w_k", p)))
                .add_row_bias(self.param(&format!("{}.attn.b_k", p)));
            let v = h
                .matmul(self.param(&format!("{}.attn.w_v", p)))
                .add_row_bias(self.param(&format!("{}.attn.b_v", p)));

            let scale = 1.0 / (self.qk_live[k] as f64).sqrt();
            let mut contexts = Vec::with_capacity(heads);
            let mut head_maps: Option<Tensor> = None;
            for hd in 0..heads {
                let qh = q.slice_cols(hd * qk_dim, qk_dim);
                let kh = key.slice_cols(hd * qk_dim, qk_dim);
                let vh = v.slice_cols(hd * vo_dim, vo_dim);
                let scores = qh.matmul(&kh.transpose()).scale(scale).add(&pad_bias);
                let probs = scores.softmax(1);
                contexts.push(probs.matmul(&vh));
                head_maps = Some(match head_maps {
                    Some(acc) => acc.add(&probs),
                    None => probs,
                });
            }
            let avg_map = head_maps.expect("at least one head").scale(1.0 / heads as f64);
            let ctx = Tensor::concat_cols(&contexts);
            let attn_out = ctx
                .matmul(self.param(&format!("{}.attn.w_o", p)))
                .add_row_bias(self.param(&format!("{}.attn.b_o", p)));
            h = h.add(&attn_out).layernorm(
                self.param(&format!("{}.ln_attn.gamma", p)),
                self.param(&format!("{}.ln_attn.beta", p)),
                eps,
                hl,
            );

            let inner = h
                .matmul(self.param(&format!("{}.ffn.w_in", p)))
                .add_row_bias(self.param(&format!("{}.ffn.b_in", p)))
                .gelu();
            let ffn_out = inner
                .matmul(self.param(&format!("{}.ffn.w_out", p)))
                .add_row_bias(self.param(&format!("{}.ffn.b_out", p)));
            h = h.add(&ffn_out).layernorm(
                self.param(&format!("{}.ln_ffn.gamma", p)),
                self.param(&format!("{}.ln_ffn.beta", p)),
                eps,
                hl,
            );

            hidden_states.push(h.clone());
            attention_maps.push(avg_map);
        }

        let transformed = h
            .matmul(self.param("head.w_mlm"))
            .add_row_bias(self.param("head.b_mlm"))
            .gelu()
            .layernorm(self.param("head.ln.gamma"), self.param("head.ln.beta"), eps, hl);
        let logits = transformed
            .matmul(&self.param("embed.tok").transpose())
            .add_row_bias(self.param("head.b_vocab"));

        ForwardOutput { logits, embedding_output: emb_out, hidden_states, attention_maps }
    }
}

/// Parameter counts split the way deployment size is reported: `embedding`
/// is the token embedding table, `backbone` is position embeddings plus all
/// encoder layers and their layernorms. The masked-LM prediction head (which
/// is dropped after pre-training; its decoder weights are tied to the
/// embedding anyway) is excluded from both.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: usize,
    pub backbone: usize,
    pub total: usize,
}

impl ParamCounts {
    /// Closed-form count for a configuration, without instantiating weights.
    pub fn for_config(cfg: &ModelConfig) -> ParamCounts {
        let d = cfg.hidden_dim;
        let f = cfg.ffn_dim;
        let qk = cfg.num_heads * cfg.qk_head_dim();
        let vo = cfg.num_heads * cfg.vo_head_dim();
        let embedding = cfg.vocab_size * d;
        let per_layer = 2 * (d * qk + qk)  // W_Q, W_K and biases
            + (d * vo + vo)                // W_V and bias
            + (vo * d + d)                 // W_O and bias
            + 2 * d                        // attention layernorm
            + (d * f + f)                  // W_in and bias
            + (f * d + d)                  // W_out and bias
            + 2 * d; // ffn layernorm
        let backbone = cfg.max_seq_len * d + 2 * d + cfg.num_layers * per_layer;
        ParamCounts { embedding, backbone, total: embedding + backbone }
    }
}

/// Count by summing the shapes of the instantiated tensors.
pub fn count_parameters(model: &TransformerModel) -> ParamCounts {
    let mut embedding = 0;
    let mut backbone = 0;
    for (name, t) in model.named_params() {
        if name == "embed.tok" {
            embedding += t.numel();
        } else if name.starts_with("head.") {
            // prediction head: excluded
        } else {
            backbone += t.numel();
        }
    }
    ParamCounts { embedding, backbone, total: embedding + backbone }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config() -> ModelConfig {
        ModelConfig::new(32, 16, 2, 8, 16, 2)
    }

    fn toy_model(seed: u64) -> TransformerModel {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        TransformerModel::new(toy_config(), &mut rng)
    }

    #[test]
    fn forward_shape_contract() {
        let model = toy_model(0);
        let tokens = [5, 9, 1, 30, 2];
        let out = model.forward(&tokens, &[true; 5]);
        assert_eq!(out.logits.shape(), vec![5, 32]);
        assert_eq!(out.embedding_output.shape(), vec![5, 8]);
        assert_eq!(out.hidden_states.len(), 2);
        assert_eq!(out.attention_maps.len(), 2);
        for h in &out.hidden_states {
            assert_eq!(h.shape(), vec![5, 8]);
        }
        for a in &out.attention_maps {
            assert_eq!(a.shape(), vec![5, 5]);
        }
    }

    #[test]
    fn single_token_attention_is_one() {
        let model = toy_model(1);
        let out = model.forward(&[7], &[true]);
        for a in &out.attention_maps {
            assert_eq!(a.to_vec(), vec![1.0]);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let model = toy_model(2);
        let out = model.forward(&[3, 4, 5, 6], &[true, true, true, false]);
        for a in &out.attention_maps {
            let d = a.to_vec();
            for i in 0..4 {
                let s: f64 = d[i * 4..(i + 1) * 4].iter().sum();
                assert!((s - 1.0).abs() < 1e-9, "row {} sums to {}", i, s);
            }
        }
    }

    #[test]
    fn padded_keys_get_no_attention() {
        let model = toy_model(3);
        let out = model.forward(&[3, 4, 5, 0], &[true, true, true, false]);
        for a in &out.attention_maps {
            let d = a.to_vec();
            for i in 0..4 {
                assert!(d[i * 4 + 3] < 1e-12, "pad column attended: {}", d[i * 4 + 3]);
            }
        }
    }

    #[test]
    fn hand_computed_attention_map() {
        // One layer, one head, two positions, two dims: fix the weights and
        // evaluate softmax(Q K^T / sqrt(d)) by hand from the actual embedding
        // output.
        let cfg = ModelConfig::new(8, 4, 1, 2, 4, 1);
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let model = TransformerModel::new(cfg, &mut rng);
        // Identity projections, zero biases.
        model.param("layer.0.attn.w_q").apply(|d| d.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]));
        model.param("layer.0.attn.b_q").apply(|d| d.fill(0.0));
        model.param("layer.0.attn.w_k").apply(|d| d.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]));
        model.param("layer.0.attn.b_k").apply(|d| d.fill(0.0));

        let tokens = [1usize, 2];
        let out = model.forward(&tokens, &[true, true]);
        let e = out.embedding_output.to_vec(); // 2x2, rows are Q = K
        let scale = 1.0 / 2f64.sqrt();
        let mut expect = [0.0; 4];
        for i in 0..2 {
            let mut scores = [0.0; 2];
            for j in 0..2 {
                scores[j] = scale * (e[i * 2] * e[j * 2] + e[i * 2 + 1] * e[j * 2 + 1]);
            }
            let m = scores[0].max(scores[1]);
            let exps = [(scores[0] - m).exp(), (scores[1] - m).exp()];
            let sum = exps[0] + exps[1];
            expect[i * 2] = exps[0] / sum;
            expect[i * 2 + 1] = exps[1] / sum;
        }
        let got = out.attention_maps[0].to_vec();
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-12, "attention {} vs hand {}", g, e);
        }
    }

    #[test]
    #[should_panic(expected = "out of range")]
    fn out_of_range_token_rejected() {
        let model = toy_model(5);
        let _ = model.forward(&[99], &[true]);
    }

    #[test]
    fn clone_forward_identical_and_isolated() {
        let teacher = toy_model(6);
        let student = teacher.clone_model();
        let tokens = [1, 2, 3, 4];
        let mask = [true; 4];
        let a = teacher.forward(&tokens, &mask);
        let b = student.forward(&tokens, &mask);
        assert_eq!(a.logits.data_bits(), b.logits.data_bits());

        // Zero one student column; the teacher must be untouched.
        student.param("layer.0.attn.w_v").apply(|d| {
            for r in 0..8 {
                d[r * 4] = 0.0;
            }
        });
        let a2 = teacher.forward(&tokens, &mask);
        assert_eq!(a.logits.data_bits(), a2.logits.data_bits());
        let b2 = student.forward(&tokens, &mask);
        assert_ne!(b.logits.data_bits(), b2.logits.data_bits());
    }

    #[test]
    fn initialization_deterministic() {
        let a = toy_model(7);
        let b = toy_model(7);
        for (name, t) in a.named_params() {
            assert_eq!(t.data_bits(), b.param(name).data_bits(), "mismatch in {}", name);
        }
        let out_a = a.forward(&[1, 2], &[true, true]);
        let out_b = b.forward(&[1, 2], &[true, true]);
        assert_eq!(out_a.logits.data_bits(), out_b.logits.data_bits());
    }

    #[test]
    fn toy_param_count_matches_shape_sum() {
        let model = toy_model(8);
        let counts = count_parameters(&model);
        let from_cfg = ParamCounts::for_config(&toy_config());
        assert_eq!(counts, from_cfg);

        // Closed-form oracle spelled out for the toy shapes:
        // embed.tok 32*8; pos 16*8; emb ln 2*8;
        // per layer: q/k/v/o 4*(8*8)+4*8, lns 4*8, ffn 8*16+16+16*8+8.
        let embedding = 32 * 8;
        let per_layer = 4 * 64 + 4 * 8 + 4 * 8 + (8 * 16 + 16) + (16 * 8 + 8);
        let backbone = 16 * 8 + 2 * 8 + 2 * per_layer;
        assert_eq!(counts.embedding, embedding);
        assert_eq!(counts.backbone, backbone);
        assert_eq!(counts.total, embedding + backbone);
    }

    #[test]
    fn preset_counts_near_reported_sizes() {
        let base = ParamCounts::for_config(&ModelConfig::bert_base());
        let rel = |got: usize, want: f64| (got as f64 - want).abs() / want;
        assert!(rel(base.total, 109e6) < 0.01, "teacher preset total {}", base.total);

        let small = ParamCounts::for_config(&ModelConfig::narrow_preset(256, 1024));
        assert!(rel(small.total, 17.3e6) < 0.01, "256-wide preset total {}", small.total);
    }
}
