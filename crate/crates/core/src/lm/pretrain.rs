//! Masked-language-model further pre-training on a document collection.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::transformer::{Batch, Dropout};
use super::{LanguageModel, TransformerLm};
use crate::{util, Error, Result};

/// Models below this many parameters get the small-model defaults.
const SMALLEST_MODEL_PARAMS: usize = 10_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_len: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    /// Decoupled weight decay on matrices and embeddings.
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub mask_prob: f64,
    /// Dropout during training; `None` uses the model's configured rate.
    pub dropout: Option<f64>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 10_000,
            batch_size: 32,
            max_len: 256,
            warmup_steps: 500,
            peak_lr: 4e-5,
            weight_decay: 0.1,
            label_smoothing: 0.1,
            adam_eps: 1e-8,
            beta1: 0.9,
            beta2: 0.95,
            mask_prob: 0.15,
            dropout: None,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    /// Defaults for a model of the given size: the smallest models use peak
    /// learning rate 2e-5 without label smoothing.
    pub fn for_model(param_count: usize) -> Self {
        if param_count < SMALLEST_MODEL_PARAMS {
            Self {
                peak_lr: 2e-5,
                label_smoothing: 0.0,
                ..Self::default()
            }
        } else {
            Self::default()
        }
    }

    /// Learning rate at 1-based `step`: linear warmup, then linear decay to
    /// zero at the final step.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let rest = self.steps.saturating_sub(self.warmup_steps).max(1);
        let done = step.saturating_sub(self.warmup_steps);
        self.peak_lr * (1.0 - done as f64 / rest as f64).max(0.0)
    }

    fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if self.max_len < 3 {
            errs.push("max_len must be at least 3".to_string());
        }
        if !(0.0..1.0).contains(&self.mask_prob) || self.mask_prob == 0.0 {
            errs.push("mask_prob must lie in (0, 1)".to_string());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            errs.push("label_smoothing must lie in [0, 1)".to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub model: TransformerLm,
    pub log: Vec<StepLog>,
}

/// Continues masked-LM training of `model` on `documents`. The input model
/// is left untouched; the returned model carries the updated weights.
pub fn further_pretrain(
    model: &TransformerLm,
    documents: &[&str],
    config: &PretrainConfig,
    log_path: Option<&Path>,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if !model.info().has_mlm_head {
        return Err(Error::Capability {
            model: model.info().id.clone(),
            operation: "further_pretrain",
            reason: "checkpoint has no language-model head".into(),
        });
    }
    let tok = model.tokenizer();
    let window = config.max_len.min(model.info().max_len) - 2;
    let mut segments: Vec<Vec<u32>> = Vec::new();
    for doc in documents {
        let ids = tok.encode(doc);
        for chunk in ids.chunks(window) {
            let mut row = Vec::with_capacity(chunk.len() + 2);
            row.push(tok.cls_id());
            row.extend_from_slice(chunk);
            row.push(tok.sep_id());
            segments.push(row);
        }
    }
    if segments.is_empty() {
        return Err(Error::invalid("further_pretrain: corpus has no text"));
    }

    let mut writer = match log_path {
        Some(p) => Some((util::create(p)?, p)),
        None => None,
    };
    if let Some((w, p)) = writer.as_mut() {
        util::write_json_line(
            w,
            p,
            &serde_json::json!({
                "hyperparameters": config,
                "model": model.info().id,
                "documents": documents.len(),
                "segments": segments.len(),
            }),
        )?;
    }

    let mut log = Vec::with_capacity(config.steps);
    if config.steps == 0 {
        return Ok(PretrainOutcome {
            model: model.clone(),
            log,
        });
    }

    let vars: Vec<(String, Var)> = model
        .named_tensors()
        .into_iter()
        .map(|(n, t)| Ok((n, Var::from_tensor(&t)?)))
        .collect::<Result<_>>()?;
    let (decay, plain): (Vec<_>, Vec<_>) = vars
        .iter()
        .partition(|(n, _)| n.ends_with(".weight") && !n.contains("LayerNorm"));
    let params = |wd| ParamsAdamW {
        lr: 0.0,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.adam_eps,
        weight_decay: wd,
    };
    let mut opt_decay = AdamW::new(
        decay.into_iter().map(|(_, v)| v.clone()).collect(),
        params(config.weight_decay),
    )?;
    let mut opt_plain = AdamW::new(plain.into_iter().map(|(_, v)| v.clone()).collect(), params(0.0))?;
    let weights = model.weights_from_vars(&vars)?;

    let mut rng = util::sub_rng(config.seed, "pretrain");
    let mut dropout = Dropout::new(
        util::sub_rng(config.seed, "pretrain-dropout"),
        config.dropout.unwrap_or(model.config().hidden_dropout_prob),
    );
    let vocab = tok.vocab_size() as u32;
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut cursor = order.len();

    for step in 1..=config.steps {
        let mut ids = Vec::with_capacity(config.batch_size);
        let mut positions = Vec::new();
        let mut labels = Vec::new();
        for r in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let mut row = segments[order[cursor]].clone();
            cursor += 1;
            let candidates: Vec<usize> = (0..row.len()).filter(|&k| !tok.is_special(row[k])).collect();
            let mut chosen: Vec<usize> = candidates
                .iter()
                .copied()
                .filter(|_| rng.random::<f64>() < config.mask_prob)
                .collect();
            if chosen.is_empty() && !candidates.is_empty() {
                chosen.push(candidates[rng.random_range(0..candidates.len())]);
            }
            for k in chosen {
                labels.push(row[k]);
                positions.push((r, k));
                let roll: f64 = rng.random();
                if roll < 0.8 {
                    row[k] = tok.mask_id();
                } else if roll < 0.9 {
                    row[k] = loop {
                        let id = rng.random_range(0..vocab);
                        if !tok.is_special(id) {
                            break id;
                        }
                    };
                }
            }
            ids.push(row);
        }
        if labels.is_empty() {
            continue;
        }
        let lr = config.lr_at(step);
        opt_decay.set_learning_rate(lr);
        opt_plain.set_learning_rate(lr);
        let loss = model.mlm_loss(
            &weights,
            &Batch::new(ids),
            &positions,
            &labels,
            config.label_smoothing,
            Some(&mut dropout),
        )?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let grads = loss.backward()?;
        opt_decay.step(&grads)?;
        opt_plain.step(&grads)?;
        let entry = StepLog { step, loss: value, lr };
        if let Some((w, p)) = writer.as_mut() {
            util::write_json_line(w, p, &entry)?;
        }
        log.push(entry);
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| Error::io(p, e))?;
    }

    let tensors: HashMap<String, Tensor> = vars.into_iter().map(|(n, v)| (n, v.as_tensor().detach())).collect();
    let mut trained = model.with_tensors(&tensors)?;
    trained.set_id(format!("{}+pretrained", model.info().id));
    Ok(PretrainOutcome { model: trained, log })
}
