//! BERT-style transformer on candle, loadable from Hugging Face checkpoint
//! directories (`config.json`, `vocab.txt`, and `model.safetensors` or
//! `pytorch_model.bin`).

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    check_nonempty, unsupported, LanguageModel, LossGrad, MaskDistribution, ModelInfo, ModelMode, Pooling,
    PrefixExample, PrefixVectors, SentimentTargets, WordPieceTokenizer,
};
use crate::{util, Error, Result};

const NEG_INF: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    #[serde(default = "default_positions")]
    pub max_position_embeddings: usize,
    #[serde(default = "default_types")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_dropout")]
    pub hidden_dropout_prob: f64,
    /// Left-to-right attention with next-token prediction.
    #[serde(default)]
    pub is_decoder: bool,
}

fn default_positions() -> usize {
    512
}
fn default_types() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_dropout() -> f64 {
    0.1
}

impl TransformerConfig {
    /// Standard BERT sizes: tiny (2/128), mini (4/256), small (4/512),
    /// medium (8/512), base (12/768), large (24/1024).
    pub fn preset(name: &str) -> Result<Self> {
        let (layers, hidden, heads) = match name {
            "tiny" => (2, 128, 2),
            "mini" => (4, 256, 4),
            "small" => (4, 512, 8),
            "medium" => (8, 512, 8),
            "base" => (12, 768, 12),
            "large" => (24, 1024, 16),
            other => {
                return Err(Error::invalid(format!(
                    "unknown model preset `{other}` (tiny, mini, small, medium, base, large)"
                )))
            }
        };
        Ok(Self {
            vocab_size: 30522,
            hidden_size: hidden,
            num_hidden_layers: layers,
            num_attention_heads: heads,
            intermediate_size: 4 * hidden,
            max_position_embeddings: 512,
            type_vocab_size: 2,
            layer_norm_eps: 1e-12,
            hidden_dropout_prob: 0.1,
            is_decoder: false,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || !self.hidden_size.is_multiple_of(self.num_attention_heads.max(1)) {
            return Err(Error::invalid(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden_size, self.num_attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    #[serde(default)]
    pub precision: Precision,
    /// Overrides the pooling found in the checkpoint.
    #[serde(default)]
    pub pooling: Option<Pooling>,
    /// Overrides embedding normalization found in the checkpoint.
    #[serde(default)]
    pub normalize: Option<bool>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

trait Source {
    fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

struct RandomSource {
    rng: ChaCha8Rng,
    std: f64,
    dtype: DType,
}

impl Source for RandomSource {
    fn get(&mut self, _name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal => {
                let normal = Normal::new(0.0, self.std).expect("finite std");
                (0..n).map(|_| normal.sample(&mut self.rng)).collect()
            }
        };
        Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }
}

struct MapSource<'a> {
    map: &'a HashMap<String, Tensor>,
    dtype: DType,
}

impl Source for MapSource<'_> {
    fn get(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("checkpoint lacks tensor `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::invalid(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(self.dtype)?.contiguous()?)
    }
}

#[derive(Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn build(src: &mut dyn Source, name: &str, out: usize, inp: usize) -> Result<Self> {
        Ok(Self {
            w: src.get(&format!("{name}.weight"), &[out, inp], Init::Normal)?,
            b: src.get(&format!("{name}.bias"), &[out], Init::Zeros)?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut dims = x.dims().to_vec();
        let inp = *dims.last().unwrap();
        let y = x.reshape(((), inp))?.matmul(&self.w.t()?)?.broadcast_add(&self.b)?;
        *dims.last_mut().unwrap() = self.w.dim(0)?;
        y.reshape(dims)
    }

    fn named(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.weight"), self.w.clone()));
        out.push((format!("{name}.bias"), self.b.clone()));
    }
}

#[derive(Clone)]
struct Norm {
    g: Tensor,
    b: Tensor,
    eps: f64,
}

impl Norm {
    fn build(src: &mut dyn Source, name: &str, dim: usize, eps: f64) -> Result<Self> {
        Ok(Self {
            g: src.get(&format!("{name}.weight"), &[dim], Init::Ones)?,
            b: src.get(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.g)?
            .broadcast_add(&self.b)
    }

    fn named(&self, name: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{name}.weight"), self.g.clone()));
        out.push((format!("{name}.bias"), self.b.clone()));
    }
}

#[derive(Clone)]
struct Layer {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: Norm,
    inter: Linear,
    out: Linear,
    out_norm: Norm,
}

#[derive(Clone)]
struct MlmHead {
    dense: Linear,
    norm: Norm,
    bias: Tensor,
}

#[derive(Clone)]
pub(crate) struct Weights {
    word: Tensor,
    position: Tensor,
    token_type: Tensor,
    emb_norm: Norm,
    layers: Vec<Layer>,
    mlm: Option<MlmHead>,
    pooler: Option<Linear>,
    nsp: Option<Linear>,
}

#[derive(Clone, Copy)]
struct Parts {
    mlm: bool,
    pair: bool,
}

impl Weights {
    fn build(cfg: &TransformerConfig, src: &mut dyn Source, parts: Parts) -> Result<Self> {
        let (h, eps) = (cfg.hidden_size, cfg.layer_norm_eps);
        let e = "bert.embeddings";
        let mut layers = Vec::with_capacity(cfg.num_hidden_layers);
        for i in 0..cfg.num_hidden_layers {
            let p = format!("bert.encoder.layer.{i}");
            layers.push(Layer {
                query: Linear::build(src, &format!("{p}.attention.self.query"), h, h)?,
                key: Linear::build(src, &format!("{p}.attention.self.key"), h, h)?,
                value: Linear::build(src, &format!("{p}.attention.self.value"), h, h)?,
                attn_out: Linear::build(src, &format!("{p}.attention.output.dense"), h, h)?,
                attn_norm: Norm::build(src, &format!("{p}.attention.output.LayerNorm"), h, eps)?,
                inter: Linear::build(src, &format!("{p}.intermediate.dense"), cfg.intermediate_size, h)?,
                out: Linear::build(src, &format!("{p}.output.dense"), h, cfg.intermediate_size)?,
                out_norm: Norm::build(src, &format!("{p}.output.LayerNorm"), h, eps)?,
            });
        }
        let word = src.get(
            &format!("{e}.word_embeddings.weight"),
            &[cfg.vocab_size, h],
            Init::Normal,
        )?;
        let mlm = if parts.mlm {
            Some(MlmHead {
                dense: Linear::build(src, "cls.predictions.transform.dense", h, h)?,
                norm: Norm::build(src, "cls.predictions.transform.LayerNorm", h, eps)?,
                bias: src.get("cls.predictions.bias", &[cfg.vocab_size], Init::Zeros)?,
            })
        } else {
            None
        };
        let (pooler, nsp) = if parts.pair {
            (
                Some(Linear::build(src, "bert.pooler.dense", h, h)?),
                Some(Linear::build(src, "cls.seq_relationship", 2, h)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            position: src.get(
                &format!("{e}.position_embeddings.weight"),
                &[cfg.max_position_embeddings, h],
                Init::Normal,
            )?,
            token_type: src.get(
                &format!("{e}.token_type_embeddings.weight"),
                &[cfg.type_vocab_size, h],
                Init::Normal,
            )?,
            emb_norm: Norm::build(src, &format!("{e}.LayerNorm"), h, eps)?,
            word,
            layers,
            mlm,
            pooler,
            nsp,
        })
    }

    fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let e = "bert.embeddings";
        out.push((format!("{e}.word_embeddings.weight"), self.word.clone()));
        out.push((format!("{e}.position_embeddings.weight"), self.position.clone()));
        out.push((format!("{e}.token_type_embeddings.weight"), self.token_type.clone()));
        self.emb_norm.named(&format!("{e}.LayerNorm"), &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("bert.encoder.layer.{i}");
            l.query.named(&format!("{p}.attention.self.query"), &mut out);
            l.key.named(&format!("{p}.attention.self.key"), &mut out);
            l.value.named(&format!("{p}.attention.self.value"), &mut out);
            l.attn_out.named(&format!("{p}.attention.output.dense"), &mut out);
            l.attn_norm.named(&format!("{p}.attention.output.LayerNorm"), &mut out);
            l.inter.named(&format!("{p}.intermediate.dense"), &mut out);
            l.out.named(&format!("{p}.output.dense"), &mut out);
            l.out_norm.named(&format!("{p}.output.LayerNorm"), &mut out);
        }
        if let Some(m) = &self.mlm {
            m.dense.named("cls.predictions.transform.dense", &mut out);
            m.norm.named("cls.predictions.transform.LayerNorm", &mut out);
            out.push(("cls.predictions.bias".into(), m.bias.clone()));
        }
        if let Some(p) = &self.pooler {
            p.named("bert.pooler.dense", &mut out);
        }
        if let Some(n) = &self.nsp {
            n.named("cls.seq_relationship", &mut out);
        }
        out
    }
}

/// Seeded dropout for training passes.
pub(crate) struct Dropout {
    rng: ChaCha8Rng,
    p: f64,
}

impl Dropout {
    pub(crate) fn new(rng: ChaCha8Rng, p: f64) -> Self {
        Self { rng, p }
    }

    fn apply(&mut self, x: &Tensor) -> candle_core::Result<Tensor> {
        if self.p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 / (1.0 - self.p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if self.rng.random::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x.mul(&mask)
    }
}

fn maybe_drop(d: &mut Option<&mut Dropout>, x: Tensor) -> candle_core::Result<Tensor> {
    match d {
        Some(d) => d.apply(&x),
        None => Ok(x),
    }
}

fn softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(D::Minus1)?)
}

pub(crate) fn log_softmax_last(x: &Tensor) -> candle_core::Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    shifted.broadcast_sub(&lse)
}

/// Token ids of a batch before prefix insertion. Position 0 of every row
/// must be the leading marker.
pub(crate) struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub types: Option<Vec<Vec<u32>>>,
}

impl Batch {
    pub(crate) fn new(ids: Vec<Vec<u32>>) -> Self {
        Self { ids, types: None }
    }
}

#[derive(Clone)]
pub struct TransformerLm {
    info: ModelInfo,
    config: TransformerConfig,
    tokenizer: WordPieceTokenizer,
    weights: Weights,
    dtype: DType,
}

impl std::fmt::Debug for TransformerLm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformerLm").field("info", &self.info).finish()
    }
}

impl TransformerLm {
    /// Randomly initialized model with every head present.
    pub fn random(
        id: impl Into<String>,
        config: TransformerConfig,
        tokenizer: WordPieceTokenizer,
        options: &LoadOptions,
        init_std: f64,
    ) -> Result<Self> {
        Self::random_seeded(id, config, tokenizer, options, init_std, 0)
    }

    pub fn random_seeded(
        id: impl Into<String>,
        config: TransformerConfig,
        tokenizer: WordPieceTokenizer,
        options: &LoadOptions,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::invalid(format!(
                "tokenizer has {} tokens but the model expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let dtype = options.precision.dtype();
        let mut src = RandomSource {
            rng: util::sub_rng(seed, "transformer-init"),
            std: init_std,
            dtype,
        };
        let weights = Weights::build(&config, &mut src, Parts { mlm: true, pair: true })?;
        Ok(Self::assemble(
            id.into(),
            config,
            tokenizer,
            weights,
            dtype,
            options,
            Pooling::MeanNonSpecial,
            false,
        ))
    }

    pub fn load(dir: &Path, options: &LoadOptions) -> Result<Self> {
        let config: TransformerConfig = util::read_json(&dir.join("config.json"))?;
        config.validate()?;
        let lowercase = std::fs::read_to_string(dir.join("tokenizer_config.json"))
            .ok()
            .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
            .and_then(|v| v.get("do_lower_case").and_then(|b| b.as_bool()))
            .unwrap_or(true);
        let tokenizer = WordPieceTokenizer::from_file(&dir.join("vocab.txt"), lowercase)?;
        let raw = read_tensors(dir)?;
        let map = normalize_names(raw);
        let parts = Parts {
            mlm: map.contains_key("cls.predictions.transform.dense.weight"),
            pair: map.contains_key("cls.seq_relationship.weight") && map.contains_key("bert.pooler.dense.weight"),
        };
        let dtype = options.precision.dtype();
        let weights = Weights::build(&config, &mut MapSource { map: &map, dtype }, parts)?;
        let (pooling, normalize) = sentence_encoder_settings(dir);
        Ok(Self::assemble(
            dir.display().to_string(),
            config,
            tokenizer,
            weights,
            dtype,
            options,
            pooling,
            normalize,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        id: String,
        config: TransformerConfig,
        tokenizer: WordPieceTokenizer,
        weights: Weights,
        dtype: DType,
        options: &LoadOptions,
        pooling: Pooling,
        normalize: bool,
    ) -> Self {
        let param_count = weights.named().iter().map(|(_, t)| t.elem_count()).sum();
        let info = ModelInfo {
            id,
            mode: if config.is_decoder {
                ModelMode::Causal
            } else {
                ModelMode::Masked
            },
            dim: config.hidden_size,
            vocab_size: config.vocab_size,
            param_count,
            max_len: config.max_position_embeddings,
            pooling: options.pooling.unwrap_or(pooling),
            normalize: options.normalize.unwrap_or(normalize),
            has_mlm_head: weights.mlm.is_some(),
            has_pair_head: weights.nsp.is_some(),
            differentiable: true,
        };
        Self {
            info,
            config,
            tokenizer,
            weights,
            dtype,
        }
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.info.id = id.into();
    }

    /// Writes `model.safetensors`, `config.json`, `vocab.txt` and a
    /// `promptrec.json` metadata file into `dir`.
    pub fn save(&self, dir: &Path, metadata: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tensors: HashMap<String, Tensor> = self.weights.named().into_iter().collect();
        candle_core::safetensors::save(&tensors, dir.join("model.safetensors"))?;
        util::write_json(&dir.join("config.json"), &self.config)?;
        self.tokenizer.save(&dir.join("vocab.txt"))?;
        util::write_json(
            &dir.join("tokenizer_config.json"),
            &serde_json::json!({ "do_lower_case": self.tokenizer.lowercase() }),
        )?;
        util::write_json(
            &dir.join("promptrec.json"),
            &serde_json::json!({
                "info": self.info,
                "weights_sha256": self.weights_hash()?,
                "metadata": metadata,
            }),
        )
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.weights.named()
    }

    /// Same architecture with the given tensors swapped in.
    pub(crate) fn with_tensors(&self, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        let parts = Parts {
            mlm: self.weights.mlm.is_some(),
            pair: self.weights.nsp.is_some(),
        };
        let weights = Weights::build(
            &self.config,
            &mut MapSource {
                map: tensors,
                dtype: self.dtype,
            },
            parts,
        )?;
        let mut out = self.clone();
        out.weights = weights;
        Ok(out)
    }

    fn device(&self) -> &Device {
        self.weights.word.device()
    }

    fn to_tensor(&self, rows: &Array2<f64>) -> Result<Tensor> {
        let data: Vec<f64> = rows.iter().copied().collect();
        Ok(Tensor::from_vec(data, rows.dim(), self.device())?.to_dtype(self.dtype)?)
    }

    fn check_length(&self, tokens: usize, prefix: usize) -> Result<()> {
        let budget = self.config.max_position_embeddings;
        if tokens + prefix > budget {
            return Err(Error::TooLong { tokens, prefix, budget });
        }
        Ok(())
    }

    /// Final hidden states `[batch, seq + prefix, hidden]`.
    fn encode(
        &self,
        w: &Weights,
        batch: &Batch,
        prefix: Option<&Tensor>,
        mut dropout: Option<&mut Dropout>,
    ) -> Result<Tensor> {
        let b = batch.ids.len();
        let t = batch.ids.iter().map(|r| r.len()).max().unwrap_or(0);
        let plen = prefix.map_or(0, |p| p.dim(0).unwrap_or(0));
        if b == 0 || t == 0 {
            return Err(Error::invalid("empty batch"));
        }
        self.check_length(t, plen)?;
        let h = self.config.hidden_size;
        let s = t + plen;
        let dev = self.device().clone();

        let pad = self.tokenizer.pad_id();
        let mut flat = Vec::with_capacity(b * t);
        let mut keep = Vec::with_capacity(b * s);
        let mut types = Vec::with_capacity(b * s);
        for (r, row) in batch.ids.iter().enumerate() {
            flat.extend(row.iter().copied().chain(std::iter::repeat(pad)).take(t));
            let row_types = batch.types.as_ref().map(|ty| &ty[r]);
            for k in 0..s {
                let (real, ty) = if k >= 1 && k < 1 + plen {
                    (true, 0)
                } else {
                    let j = if k == 0 { 0 } else { k - plen };
                    (j < row.len(), row_types.and_then(|ty| ty.get(j)).copied().unwrap_or(0))
                };
                keep.push(if real { 0.0 } else { NEG_INF });
                types.push(ty);
            }
        }
        let ids = Tensor::from_vec(flat, b * t, &dev)?;
        let mut x = w.word.index_select(&ids, 0)?.reshape((b, t, h))?;
        if let Some(p) = prefix.filter(|_| plen > 0) {
            let p = p.unsqueeze(0)?.broadcast_as((b, plen, h))?;
            let mut pieces = vec![x.narrow(1, 0, 1)?, p];
            if t > 1 {
                pieces.push(x.narrow(1, 1, t - 1)?);
            }
            x = Tensor::cat(&pieces, 1)?;
        }
        let pos = w.position.narrow(0, 0, s)?;
        let types = Tensor::from_vec(types, b * s, &dev)?;
        let ty = w.token_type.index_select(&types, 0)?.reshape((b, s, h))?;
        x = x.broadcast_add(&pos)?.add(&ty)?;
        x = maybe_drop(&mut dropout, w.emb_norm.forward(&x)?)?;

        let mut bias = Tensor::from_vec(keep, (b, 1, 1, s), &dev)?.to_dtype(self.dtype)?;
        if self.config.is_decoder {
            let causal: Vec<f64> = (0..s * s).map(|k| if k % s > k / s { NEG_INF } else { 0.0 }).collect();
            let causal = Tensor::from_vec(causal, (1, 1, s, s), &dev)?.to_dtype(self.dtype)?;
            bias = bias.broadcast_add(&causal)?;
        }
        let heads = self.config.num_attention_heads;
        let dh = h / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &w.layers {
            let split = |y: Tensor| -> candle_core::Result<Tensor> {
                y.reshape((b, s, heads, dh))?.transpose(1, 2)?.contiguous()
            };
            let q = split(layer.query.forward(&x)?)?;
            let k = split(layer.key.forward(&x)?)?;
            let v = split(layer.value.forward(&x)?)?;
            let att = q.matmul(&k.t()?)?.affine(scale, 0.0)?.broadcast_add(&bias)?;
            let ctx = softmax_last(&att)?
                .matmul(&v)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((b, s, h))?;
            let a = maybe_drop(&mut dropout, layer.attn_out.forward(&ctx)?)?;
            let a = layer.attn_norm.forward(&(a + &x)?)?;
            let f = layer.inter.forward(&a)?.gelu_erf()?;
            let f = maybe_drop(&mut dropout, layer.out.forward(&f)?)?;
            x = layer.out_norm.forward(&(f + a)?)?;
        }
        Ok(x)
    }

    /// Rows of `hidden` at flat positions `row * seq + col`.
    fn gather(&self, hidden: &Tensor, positions: &[(usize, usize)]) -> Result<Tensor> {
        let (b, s, h) = hidden.dims3()?;
        let idx: Vec<u32> = positions.iter().map(|&(r, c)| (r * s + c) as u32).collect();
        let idx = Tensor::from_vec(idx, positions.len(), self.device())?;
        Ok(hidden.reshape((b * s, h))?.index_select(&idx, 0)?)
    }

    fn mlm_logits(&self, w: &Weights, rows: &Tensor) -> Result<Tensor> {
        let head = match &w.mlm {
            Some(h) => h,
            None => return unsupported(&self.info, "mask_logprobs", "checkpoint has no language-model head"),
        };
        let x = head.norm.forward(&head.dense.forward(rows)?.gelu_erf()?)?;
        Ok(x.matmul(&w.word.t()?)?.broadcast_add(&head.bias)?)
    }

    /// Logits at the given `(row, position)` pairs, positions counted before
    /// prefix insertion.
    pub(crate) fn logits_at(
        &self,
        w: &Weights,
        batch: &Batch,
        positions: &[(usize, usize)],
        prefix: Option<&Tensor>,
        dropout: Option<&mut Dropout>,
    ) -> Result<Tensor> {
        let plen = prefix.map_or(0, |p| p.dim(0).unwrap_or(0));
        let hidden = self.encode(w, batch, prefix, dropout)?;
        let shifted: Vec<(usize, usize)> = positions
            .iter()
            .map(|&(r, c)| (r, if c >= 1 { c + plen } else { c }))
            .collect();
        let rows = self.gather(&hidden, &shifted)?;
        self.mlm_logits(w, &rows)
    }

    fn distributions(&self, logits: &Tensor) -> Result<Vec<MaskDistribution>> {
        Ok(logits
            .to_dtype(DType::F64)?
            .to_vec2::<f64>()?
            .iter()
            .map(|row| MaskDistribution::from_logits(row))
            .collect())
    }

    fn mask_batch(&self, texts: &[&str]) -> Result<(Batch, Vec<(usize, usize)>)> {
        let mask = self.tokenizer.mask_id();
        let mut ids = Vec::with_capacity(texts.len());
        let mut positions = Vec::with_capacity(texts.len());
        for (r, text) in texts.iter().enumerate() {
            let row = self.tokenizer.encode_framed(text);
            let found: Vec<usize> = (0..row.len()).filter(|&k| row[k] == mask).collect();
            if found.len() != 1 {
                return Err(Error::invalid(format!(
                    "expected one mask token, found {} in `{text}`",
                    found.len()
                )));
            }
            positions.push((r, found[0]));
            ids.push(row);
        }
        Ok((Batch::new(ids), positions))
    }

    fn prefix_tensor(&self, prefix: Option<&PrefixVectors>) -> Result<Option<Tensor>> {
        match prefix {
            Some(p) if !p.is_empty() => {
                p.check_dim(&self.info)?;
                Ok(Some(self.to_tensor(p.rows())?))
            }
            _ => Ok(None),
        }
    }

    fn require_mode(&self, mode: ModelMode, op: &'static str) -> Result<()> {
        if self.info.mode != mode {
            let reason = match mode {
                ModelMode::Masked => "masked-mode operation on a causal model",
                ModelMode::Causal => "causal-mode operation on a masked model",
            };
            return unsupported(&self.info, op, reason);
        }
        Ok(())
    }

    fn sentiment_loss(
        &self,
        examples: &[PrefixExample],
        targets: &SentimentTargets,
        prefix: Option<&Tensor>,
    ) -> Result<Tensor> {
        if examples.is_empty() {
            return Err(Error::invalid("prefix loss over an empty batch"));
        }
        let texts: Vec<&str> = examples.iter().map(|e| e.text.as_str()).collect();
        let (batch, positions) = self.mask_batch(&texts)?;
        let logits = self.logits_at(&self.weights, &batch, &positions, prefix, None)?;
        let logp = log_softmax_last(&logits)?;
        let dev = self.device();
        let mean_over = |ids: &[u32]| -> Result<Tensor> {
            let idx = Tensor::from_vec(ids.to_vec(), ids.len(), dev)?;
            Ok(logp.index_select(&idx, 1)?.mean_keepdim(1)?)
        };
        let two = Tensor::cat(&[mean_over(&targets.positive)?, mean_over(&targets.negative)?], 1)?;
        let two = log_softmax_last(&two)?;
        let onehot: Vec<f64> = examples
            .iter()
            .flat_map(|e| if e.label { [1.0, 0.0] } else { [0.0, 1.0] })
            .collect();
        let onehot = Tensor::from_vec(onehot, (examples.len(), 2), dev)?.to_dtype(self.dtype)?;
        Ok(two.mul(&onehot)?.sum_all()?.affine(-1.0 / examples.len() as f64, 0.0)?)
    }

    /// Mean two-way cross-entropy without gradients.
    pub fn prefix_loss(
        &self,
        examples: &[PrefixExample],
        targets: &SentimentTargets,
        prefix: &PrefixVectors,
    ) -> Result<f64> {
        self.require_mode(ModelMode::Masked, "prefix_gradients")?;
        let p = self.prefix_tensor(Some(prefix))?;
        Ok(self
            .sentiment_loss(examples, targets, p.as_ref())?
            .to_dtype(DType::F64)?
            .to_scalar::<f64>()?)
    }

    /// Logits and targets for masked-language-model training.
    pub(crate) fn mlm_loss(
        &self,
        w: &Weights,
        batch: &Batch,
        positions: &[(usize, usize)],
        labels: &[u32],
        smoothing: f64,
        dropout: Option<&mut Dropout>,
    ) -> Result<Tensor> {
        let logits = self.logits_at(w, batch, positions, None, dropout)?;
        let logp = log_softmax_last(&logits)?;
        let idx = Tensor::from_vec(labels.to_vec(), (labels.len(), 1), self.device())?;
        let nll = logp.gather(&idx, 1)?.mean_all()?.neg()?;
        if smoothing > 0.0 {
            let uniform = logp.mean_all()?.neg()?;
            Ok(((nll * (1.0 - smoothing))? + (uniform * smoothing)?)?)
        } else {
            Ok(nll)
        }
    }

    pub(crate) fn weights_from_vars(&self, vars: &[(String, Var)]) -> Result<Weights> {
        let map: HashMap<String, Tensor> = vars.iter().map(|(n, v)| (n.clone(), v.as_tensor().clone())).collect();
        let parts = Parts {
            mlm: self.weights.mlm.is_some(),
            pair: self.weights.nsp.is_some(),
        };
        Weights::build(
            &self.config,
            &mut MapSource {
                map: &map,
                dtype: self.dtype,
            },
            parts,
        )
    }
}

impl LanguageModel for TransformerLm {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    fn mask_logprobs_batch(&self, texts: &[&str], prefix: Option<&PrefixVectors>) -> Result<Vec<MaskDistribution>> {
        self.require_mode(ModelMode::Masked, "mask_logprobs")?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let p = self.prefix_tensor(prefix)?;
        let (batch, positions) = self.mask_batch(texts)?;
        let logits = self.logits_at(&self.weights, &batch, &positions, p.as_ref(), None)?;
        self.distributions(&logits)
    }

    fn next_token_logprobs_batch(&self, texts: &[&str]) -> Result<Vec<MaskDistribution>> {
        self.require_mode(ModelMode::Causal, "next_token_logprobs")?;
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut ids = Vec::with_capacity(texts.len());
        let mut positions = Vec::with_capacity(texts.len());
        for (r, text) in texts.iter().enumerate() {
            let mut row = vec![self.tokenizer.cls_id()];
            row.extend(self.tokenizer.encode(text));
            positions.push((r, row.len() - 1));
            ids.push(row);
        }
        let logits = self.logits_at(&self.weights, &Batch::new(ids), &positions, None, None)?;
        self.distributions(&logits)
    }

    fn sequence_embeddings(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let rows: Vec<Vec<u32>> = texts
            .iter()
            .map(|t| {
                check_nonempty(&self.info, t, "text")?;
                Ok(self.tokenizer.encode_framed(t))
            })
            .collect::<Result<_>>()?;
        let hidden = self.encode(&self.weights, &Batch::new(rows.clone()), None, None)?;
        let (b, s, _) = hidden.dims3()?;
        let pooled = match self.info.pooling {
            Pooling::Cls => hidden.narrow(1, 0, 1)?.squeeze(1)?,
            Pooling::MeanNonSpecial => {
                let mut weights = vec![0.0; b * s];
                for (r, row) in rows.iter().enumerate() {
                    let content: Vec<usize> = (0..row.len()).filter(|&k| !self.tokenizer.is_special(row[k])).collect();
                    let n = content.len().max(1) as f64;
                    for k in content {
                        weights[r * s + k] = 1.0 / n;
                    }
                }
                let wt = Tensor::from_vec(weights, (b, s, 1), self.device())?.to_dtype(self.dtype)?;
                hidden.broadcast_mul(&wt)?.sum(1)?
            }
        };
        let mut out = pooled.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        if self.info.normalize {
            for v in &mut out {
                let norm = util::dot(v, v).sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|a| *a /= norm);
                }
            }
        }
        Ok(out)
    }

    fn nsp_score(&self, first: &str, second: &str) -> Result<f64> {
        let (pooler, nsp) = match (&self.weights.pooler, &self.weights.nsp) {
            (Some(p), Some(n)) => (p, n),
            _ => return unsupported(&self.info, "nsp_score", "checkpoint has no sentence-pair head"),
        };
        self.require_mode(ModelMode::Masked, "nsp_score")?;
        check_nonempty(&self.info, first, "first text")?;
        check_nonempty(&self.info, second, "second text")?;
        let (ids, types) = self.tokenizer.encode_pair(first, second);
        let batch = Batch {
            ids: vec![ids],
            types: Some(vec![types]),
        };
        let hidden = self.encode(&self.weights, &batch, None, None)?;
        let cls = hidden.narrow(1, 0, 1)?.squeeze(1)?;
        let logits = nsp.forward(&pooler.forward(&cls)?.tanh()?)?;
        let l = logits.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        // Index 0 is "second follows first".
        Ok(util::sigmoid(l[0][0] - l[0][1]))
    }

    fn target_logprobs(&self, condition: &str, target: &str) -> Result<Vec<f64>> {
        let cond = self.tokenizer.encode(condition);
        let tgt = self.tokenizer.encode(target);
        if tgt.is_empty() {
            return Err(Error::invalid("conditional_logprob: empty target"));
        }
        let cls = self.tokenizer.cls_id();
        let (batch, positions) = match self.info.mode {
            ModelMode::Masked => {
                let mask = self.tokenizer.mask_id();
                let mut rows = Vec::with_capacity(tgt.len());
                let mut positions = Vec::with_capacity(tgt.len());
                for l in 0..tgt.len() {
                    let mut row = vec![cls];
                    row.extend(&cond);
                    row.extend(&tgt[..l]);
                    row.extend(std::iter::repeat_n(mask, tgt.len() - l));
                    row.push(self.tokenizer.sep_id());
                    positions.push((l, 1 + cond.len() + l));
                    rows.push(row);
                }
                (Batch::new(rows), positions)
            }
            ModelMode::Causal => {
                let mut row = vec![cls];
                row.extend(&cond);
                row.extend(&tgt);
                let positions = (0..tgt.len()).map(|l| (0, cond.len() + l)).collect();
                (Batch::new(vec![row]), positions)
            }
        };
        let logits = self.logits_at(&self.weights, &batch, &positions, None, None)?;
        Ok(self
            .distributions(&logits)?
            .iter()
            .zip(&tgt)
            .map(|(d, &id)| d.get(id))
            .collect())
    }

    fn span_logprobs(&self, before: &str, span: &str, after: &str) -> Result<Vec<f64>> {
        let pre = self.tokenizer.encode(before);
        let mid = self.tokenizer.encode(span);
        let post = self.tokenizer.encode(after);
        if mid.is_empty() {
            return Err(Error::invalid("span_logprobs: empty span"));
        }
        let cls = self.tokenizer.cls_id();
        let (batch, positions) = match self.info.mode {
            ModelMode::Masked => {
                let mut rows = Vec::with_capacity(mid.len());
                let mut positions = Vec::with_capacity(mid.len());
                for l in 0..mid.len() {
                    let mut masked = mid.clone();
                    masked[l] = self.tokenizer.mask_id();
                    let mut row = vec![cls];
                    row.extend(&pre);
                    row.extend(&masked);
                    row.extend(&post);
                    row.push(self.tokenizer.sep_id());
                    positions.push((l, 1 + pre.len() + l));
                    rows.push(row);
                }
                (Batch::new(rows), positions)
            }
            ModelMode::Causal => {
                let mut row = vec![cls];
                row.extend(&pre);
                row.extend(&mid);
                let positions = (0..mid.len()).map(|l| (0, pre.len() + l)).collect();
                (Batch::new(vec![row]), positions)
            }
        };
        let logits = self.logits_at(&self.weights, &batch, &positions, None, None)?;
        Ok(self
            .distributions(&logits)?
            .iter()
            .zip(&mid)
            .map(|(d, &id)| d.get(id))
            .collect())
    }

    fn token_embeddings(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let h = self.config.hidden_size;
        if ids.is_empty() {
            return Ok(Array2::zeros((0, h)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!("token id {bad} out of range")));
        }
        let idx = Tensor::from_vec(ids.to_vec(), ids.len(), self.device())?;
        let rows = self
            .weights
            .word
            .index_select(&idx, 0)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Array2::from_shape_vec((ids.len(), h), rows).map_err(|e| Error::invalid(e.to_string()))
    }

    fn prefix_loss_grad(
        &self,
        examples: &[PrefixExample],
        targets: &SentimentTargets,
        prefix: &PrefixVectors,
    ) -> Result<LossGrad> {
        self.require_mode(ModelMode::Masked, "prefix_gradients")?;
        if prefix.is_empty() {
            let loss = self.sentiment_loss(examples, targets, None)?;
            return Ok(LossGrad {
                loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
                grad: Array2::zeros((0, prefix.dim())),
            });
        }
        prefix.check_dim(&self.info)?;
        let var = Var::from_tensor(&self.to_tensor(prefix.rows())?)?;
        let loss = self.sentiment_loss(examples, targets, Some(var.as_tensor()))?;
        let grads = loss.backward()?;
        let g = grads
            .get(var.as_tensor())
            .ok_or_else(|| Error::invalid("prefix received no gradient"))?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        Ok(LossGrad {
            loss: loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            grad: Array2::from_shape_vec(prefix.rows().dim(), g).map_err(|e| Error::invalid(e.to_string()))?,
        })
    }

    fn weights_hash(&self) -> Result<String> {
        let mut named = self.weights.named();
        named.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, t) in named {
            h.update(name.as_bytes());
            let flat = t.flatten_all()?;
            match t.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|v| h.update(v.to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|v| h.update(v.to_le_bytes())),
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn read_tensors(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let st = dir.join("model.safetensors");
    if st.exists() {
        return Ok(candle_core::safetensors::load(&st, &Device::Cpu)?);
    }
    let bin = dir.join("pytorch_model.bin");
    if bin.exists() {
        return Ok(candle_core::pickle::read_all(&bin)?.into_iter().collect());
    }
    Err(Error::Io {
        path: PathBuf::from(dir),
        source: std::io::Error::new(
            std::io::ErrorKind::NotFound,
            "neither model.safetensors nor pytorch_model.bin found",
        ),
    })
}

/// Maps checkpoint tensor names onto the `bert.*` / `cls.*` layout.
fn normalize_names(raw: HashMap<String, Tensor>) -> HashMap<String, Tensor> {
    let mut out = HashMap::with_capacity(raw.len());
    for (name, t) in raw {
        let mut n = name
            .replace("LayerNorm.gamma", "LayerNorm.weight")
            .replace("LayerNorm.beta", "LayerNorm.bias");
        if n.starts_with("embeddings.") || n.starts_with("encoder.") || n.starts_with("pooler.") {
            n = format!("bert.{n}");
        }
        if n == "cls.predictions.decoder.bias" {
            out.entry("cls.predictions.bias".to_string())
                .or_insert_with(|| t.clone());
            continue;
        }
        out.insert(n, t);
    }
    out
}

/// Pooling and normalization declared by a sentence-transformers layout.
fn sentence_encoder_settings(dir: &Path) -> (Pooling, bool) {
    let modules = std::fs::read_to_string(dir.join("modules.json")).unwrap_or_default();
    let normalize = modules.contains("Normalize");
    let pooling = std::fs::read_to_string(dir.join("1_Pooling/config.json"))
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .map(|v| {
            if v.get("pooling_mode_cls_token").and_then(|b| b.as_bool()) == Some(true) {
                Pooling::Cls
            } else {
                Pooling::MeanNonSpecial
            }
        })
        .unwrap_or_default();
    (pooling, normalize)
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;

    #[test]
    fn mask_distribution_is_normalized_and_deterministic() {
        let m = toy_model(Precision::F32, 0.2, 1);
        let d = m.mask_logprobs("the user feels [MASK] about the item .", None).unwrap();
        assert_eq!(d.logprobs.len(), m.info().vocab_size);
        assert!(d.logsumexp().abs() < 1e-4);
        let again = m.mask_logprobs("the user feels [MASK] about the item .", None).unwrap();
        assert_eq!(d, again);
        let empty = m
            .mask_logprobs(
                "the user feels [MASK] about the item .",
                Some(&PrefixVectors::empty(16)),
            )
            .unwrap();
        assert_eq!(d, empty);
    }

    #[test]
    fn batching_and_padding_do_not_change_outputs() {
        let m = toy_model(Precision::F32, 0.2, 2);
        let a = "the user feels [MASK] .";
        let b = "a woman is a writer living in michigan and likes [MASK] movies .";
        let one = m.mask_logprobs(a, None).unwrap();
        let both = m.mask_logprobs_batch(&[b, a], None).unwrap();
        let max = one
            .logprobs
            .iter()
            .zip(&both[1].logprobs)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-5, "{max}");
    }

    #[test]
    fn over_long_inputs_are_rejected() {
        let m = toy_model(Precision::F32, 0.02, 0);
        let long = format!("{} [MASK]", "the user ".repeat(40));
        match m.mask_logprobs(&long, None) {
            Err(Error::TooLong { tokens, budget, .. }) => assert!(tokens > budget),
            other => panic!("{other:?}"),
        }
        let pre = PrefixVectors::new(Array2::zeros((10, 16))).unwrap();
        let near = format!("{} [MASK]", "the user ".repeat(28));
        assert!(m.mask_logprobs(&near, None).is_ok());
        assert!(matches!(
            m.mask_logprobs(&near, Some(&pre)),
            Err(Error::TooLong { prefix: 10, .. })
        ));
    }

    #[test]
    fn mode_mismatches_are_capability_errors() {
        let m = toy_model(Precision::F32, 0.02, 0);
        assert!(matches!(
            m.next_token_logprobs("the user"),
            Err(Error::Capability { .. })
        ));
        let tok = WordPieceTokenizer::build(CORPUS, 0).unwrap();
        let mut cfg = tiny_config(tok.vocab_size(), 1, 8, 2);
        cfg.is_decoder = true;
        let c = TransformerLm::random("causal", cfg, tok, &LoadOptions::default(), 0.2).unwrap();
        assert!(matches!(
            c.mask_logprobs("the [MASK]", None),
            Err(Error::Capability { .. })
        ));
        let d = c.next_token_logprobs("the user feels").unwrap();
        assert!(d.logsumexp().abs() < 1e-4);
        assert!(c.conditional_logprob("the user", "feels positive").unwrap() <= 0.0);
    }

    #[test]
    fn causal_attention_ignores_the_future() {
        let tok = WordPieceTokenizer::build(CORPUS, 0).unwrap();
        let mut cfg = tiny_config(tok.vocab_size(), 2, 8, 2);
        cfg.is_decoder = true;
        let c = TransformerLm::random("causal", cfg, tok, &LoadOptions::default(), 0.3).unwrap();
        let a = c.target_logprobs("the user", "feels positive").unwrap();
        let b = c.target_logprobs("the user", "feels negative").unwrap();
        assert!((a[0] - b[0]).abs() < 1e-6);
    }

    #[test]
    fn conditional_logprob_of_single_token_target() {
        let m = toy_model(Precision::F64, 0.2, 3);
        let single = m.conditional_logprob("the user feels", "positive").unwrap();
        let d = m.mask_logprobs("the user feels [MASK]", None).unwrap();
        let id = m.tokenizer().token_id("positive").unwrap();
        assert!((single - d.get(id)).abs() < 1e-9);
        assert!(m.conditional_logprob("the user", "feels positive about").unwrap() <= 0.0);
        assert!(m.conditional_logprob("the user", "").is_err());
    }

    #[test]
    fn embeddings_and_pair_head() {
        let m = toy_model(Precision::F32, 0.2, 4);
        let a = m.sequence_embedding("the user feels positive").unwrap();
        assert_eq!(a.len(), 16);
        assert_eq!(a, m.sequence_embedding("the user feels positive").unwrap());
        assert!(m.sequence_embedding("").is_err());
        let p = m.nsp_score("the user", "the item").unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn save_and_load_round_trip() {
        let m = toy_model(Precision::F32, 0.2, 5);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path(), &serde_json::json!({"note": "test"})).unwrap();
        let back = TransformerLm::load(dir.path(), &LoadOptions::default()).unwrap();
        assert_eq!(m.weights_hash().unwrap(), back.weights_hash().unwrap());
        let t = "the user feels [MASK] .";
        assert_eq!(m.mask_logprobs(t, None).unwrap(), back.mask_logprobs(t, None).unwrap());
        assert!(back.info().has_pair_head);
    }

    #[test]
    fn legacy_names_are_normalized() {
        let t = Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap();
        let raw: HashMap<String, Tensor> = [
            ("embeddings.LayerNorm.gamma".to_string(), t.clone()),
            ("cls.predictions.decoder.bias".to_string(), t.clone()),
        ]
        .into();
        let n = normalize_names(raw);
        assert!(n.contains_key("bert.embeddings.LayerNorm.weight"));
        assert!(n.contains_key("cls.predictions.bias"));
    }

    #[test]
    fn presets_match_published_sizes() {
        let count = |name: &str| {
            let cfg = TransformerConfig::preset(name).unwrap();
            let (v, h, l, i) = (
                cfg.vocab_size,
                cfg.hidden_size,
                cfg.num_hidden_layers,
                cfg.intermediate_size,
            );
            let emb = (v + 512 + 2) * h + 2 * h;
            let layer = 4 * (h * h + h) + 2 * (h * i) + i + h + 4 * h;
            emb + l * layer + (h * h + h)
        };
        assert!((count("tiny") as f64 / 4.4e6 - 1.0).abs() < 0.02);
        assert!((count("small") as f64 / 29.1e6 - 1.0).abs() < 0.02);
        assert!((count("base") as f64 / 110e6 - 1.0).abs() < 0.02);
    }
}
