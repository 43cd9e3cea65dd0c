//! Language-model backends behind a common contract: mask-position and
//! next-token distributions, sequence embeddings, sentence-pair scores,
//! conditional likelihoods, and differentiable prefix vectors.

pub mod pretrain;
pub mod stub;
pub mod tokenizer;
pub mod transformer;

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::prompting::{MultiTokenPolicy, SentimentVocab};
use crate::{Error, Result};

pub use pretrain::{further_pretrain, PretrainConfig, PretrainOutcome, StepLog};
pub use stub::StubModel;
pub use tokenizer::WordPieceTokenizer;
pub use transformer::{LoadOptions, TransformerConfig, TransformerLm};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelMode {
    #[default]
    Masked,
    Causal,
}

/// Pooling used by [`LanguageModel::sequence_embedding`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    /// Mean of final-layer states over non-special tokens.
    #[default]
    MeanNonSpecial,
    Cls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub mode: ModelMode,
    pub dim: usize,
    pub vocab_size: usize,
    pub param_count: usize,
    pub max_len: usize,
    pub pooling: Pooling,
    /// Embeddings are L2-normalized after pooling.
    pub normalize: bool,
    pub has_mlm_head: bool,
    pub has_pair_head: bool,
    pub differentiable: bool,
}

/// Log-probabilities over the whole vocabulary at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskDistribution {
    pub logprobs: Vec<f64>,
}

impl MaskDistribution {
    pub fn from_logits(logits: &[f64]) -> Self {
        Self {
            logprobs: crate::util::log_softmax(logits),
        }
    }

    pub fn logsumexp(&self) -> f64 {
        let m = self.logprobs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + self.logprobs.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
    }

    pub fn get(&self, id: u32) -> f64 {
        self.logprobs[id as usize]
    }
}

/// Continuous vectors inserted after the leading `[CLS]` marker.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixVectors {
    rows: Array2<f64>,
}

impl PrefixVectors {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("prefix vectors must be finite"));
        }
        Ok(Self { rows })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    /// Stacks prefixes in order.
    pub fn concat(parts: &[&PrefixVectors]) -> Result<Self> {
        let dim = parts.first().map_or(0, |p| p.dim());
        if parts.iter().any(|p| p.dim() != dim) {
            return Err(Error::invalid("prefix parts have different widths"));
        }
        let views: Vec<_> = parts.iter().map(|p| p.rows.view()).collect();
        let rows = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self { rows })
    }

    pub fn check_dim(&self, info: &ModelInfo) -> Result<()> {
        if self.dim() != info.dim {
            return Err(Error::invalid(format!(
                "prefix width {} does not match model width {}",
                self.dim(),
                info.dim
            )));
        }
        Ok(())
    }
}

/// Sentiment words resolved to token ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentimentTargets {
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
    /// Words scored by their first sub-token only.
    pub truncated: Vec<String>,
}

impl SentimentTargets {
    pub fn resolve(tokenizer: &WordPieceTokenizer, vocab: &SentimentVocab, policy: MultiTokenPolicy) -> Result<Self> {
        let mut truncated = Vec::new();
        let mut ids = |words: &[String]| -> Result<Vec<u32>> {
            words
                .iter()
                .map(|w| match tokenizer.single_token(w) {
                    Ok(id) => Ok(id),
                    Err(e) => match (policy, tokenizer.encode(w).first()) {
                        (MultiTokenPolicy::FirstSubtoken, Some(&id)) if id != tokenizer.unk_id() => {
                            truncated.push(w.clone());
                            Ok(id)
                        }
                        _ => Err(e),
                    },
                })
                .collect()
        };
        let positive = ids(vocab.positive())?;
        let negative = ids(vocab.negative())?;
        Ok(Self {
            positive,
            negative,
            truncated,
        })
    }

    /// Mean log-probability of the positive and negative words.
    pub fn means(&self, dist: &MaskDistribution) -> (f64, f64) {
        let mean = |ids: &[u32]| ids.iter().map(|&i| dist.get(i)).sum::<f64>() / ids.len() as f64;
        (mean(&self.positive), mean(&self.negative))
    }
}

/// A labelled context for prefix training.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixExample {
    pub text: String,
    pub label: bool,
}

/// Mean two-way cross-entropy over a batch and its gradient with respect to
/// the prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Array2<f64>,
}

fn unsupported<T>(info: &ModelInfo, operation: &'static str, reason: &str) -> Result<T> {
    Err(Error::Capability {
        model: info.id.clone(),
        operation,
        reason: reason.to_string(),
    })
}

/// Contract shared by every backend. Inference methods take `&self` and are
/// safe to call from several threads.
pub trait LanguageModel: Send + Sync {
    fn info(&self) -> &ModelInfo;

    fn tokenizer(&self) -> &WordPieceTokenizer;

    /// Distributions at the single mask token of each text.
    fn mask_logprobs_batch(&self, texts: &[&str], prefix: Option<&PrefixVectors>) -> Result<Vec<MaskDistribution>> {
        let _ = (texts, prefix);
        unsupported(self.info(), "mask_logprobs", "masked-mode operation")
    }

    /// Distributions for the token following each text.
    fn next_token_logprobs_batch(&self, texts: &[&str]) -> Result<Vec<MaskDistribution>> {
        let _ = texts;
        unsupported(self.info(), "next_token_logprobs", "causal-mode operation")
    }

    fn sequence_embeddings(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>>;

    /// Probability that `second` follows `first`.
    fn nsp_score(&self, first: &str, second: &str) -> Result<f64> {
        let _ = (first, second);
        unsupported(self.info(), "nsp_score", "no sentence-pair head")
    }

    /// Per-token log-probabilities of `target` given `condition`: masked
    /// models predict each target token with it and every later target token
    /// masked; causal models read left-to-right conditionals.
    fn target_logprobs(&self, condition: &str, target: &str) -> Result<Vec<f64>>;

    /// Per-token log-probabilities of `span` inside `before span after`:
    /// masked models mask one span token at a time, causal models condition
    /// on everything to the left.
    fn span_logprobs(&self, before: &str, span: &str, after: &str) -> Result<Vec<f64>>;

    /// Input-embedding rows for the given token ids.
    fn token_embeddings(&self, ids: &[u32]) -> Result<Array2<f64>>;

    fn prefix_loss_grad(
        &self,
        examples: &[PrefixExample],
        targets: &SentimentTargets,
        prefix: &PrefixVectors,
    ) -> Result<LossGrad> {
        let _ = (examples, targets, prefix);
        unsupported(self.info(), "prefix_gradients", "backend is not differentiable")
    }

    /// Content hash of the weights.
    fn weights_hash(&self) -> Result<String>;

    fn mask_logprobs(&self, text: &str, prefix: Option<&PrefixVectors>) -> Result<MaskDistribution> {
        Ok(self.mask_logprobs_batch(&[text], prefix)?.remove(0))
    }

    fn next_token_logprobs(&self, text: &str) -> Result<MaskDistribution> {
        Ok(self.next_token_logprobs_batch(&[text])?.remove(0))
    }

    fn sequence_embedding(&self, text: &str) -> Result<Vec<f64>> {
        Ok(self.sequence_embeddings(&[text])?.remove(0))
    }

    /// Mean per-token log-probability of `target` given `condition`.
    fn conditional_logprob(&self, condition: &str, target: &str) -> Result<f64> {
        let lp = self.target_logprobs(condition, target)?;
        Ok(lp.iter().sum::<f64>() / lp.len() as f64)
    }
}

/// Opens a model by path or by `random:<preset>` name.
///
/// Random presets build an untrained transformer of the named size whose
/// vocabulary covers `vocab_texts`; they serve tests and latency runs.
pub fn load_model(spec: &str, options: &LoadOptions, vocab_texts: &[&str]) -> Result<Box<dyn LanguageModel>> {
    Ok(Box::new(load_transformer(spec, options, vocab_texts)?))
}

pub fn load_transformer(spec: &str, options: &LoadOptions, vocab_texts: &[&str]) -> Result<TransformerLm> {
    if let Some(preset) = spec.strip_prefix("random:") {
        let config = TransformerConfig::preset(preset)?;
        let tokenizer = WordPieceTokenizer::build(vocab_texts, config.vocab_size)?;
        let config = TransformerConfig {
            vocab_size: tokenizer.vocab_size(),
            ..config
        };
        return TransformerLm::random(spec, config, tokenizer, options, 0.02);
    }
    TransformerLm::load(Path::new(spec), options)
}

pub(crate) fn check_nonempty(info: &ModelInfo, text: &str, what: &'static str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::invalid(format!("{}: {what} is empty", info.id)));
    }
    Ok(())
}
