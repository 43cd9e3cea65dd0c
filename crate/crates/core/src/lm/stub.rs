//! Controllable in-memory models with hand-computable outputs.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use ndarray::Array2;

use super::{
    check_nonempty, unsupported, LanguageModel, LossGrad, MaskDistribution, ModelInfo, ModelMode, Pooling,
    PrefixExample, PrefixVectors, SentimentTargets, WordPieceTokenizer,
};
use crate::{util, Error, Result};

/// Logits at the mask, given content token ids and the mask index.
pub type MaskFn = Arc<dyn Fn(&[u32], usize) -> Vec<f64> + Send + Sync>;
/// Logits for the next token, given the content token ids so far.
pub type NextFn = Arc<dyn Fn(&[u32]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct StubModel {
    info: ModelInfo,
    tokenizer: WordPieceTokenizer,
    mask_fn: Option<MaskFn>,
    next_fn: Option<NextFn>,
    token_logprob: Option<Vec<f64>>,
    embeddings: Array2<f64>,
    text_embeddings: HashMap<String, Vec<f64>>,
    nsp_logit: Option<f64>,
    prefix_readout: bool,
    delay: Duration,
}

impl StubModel {
    pub fn new(id: impl Into<String>, tokenizer: WordPieceTokenizer, dim: usize) -> Self {
        let vocab_size = tokenizer.vocab_size();
        Self {
            info: ModelInfo {
                id: id.into(),
                mode: ModelMode::Masked,
                dim,
                vocab_size,
                param_count: vocab_size * dim,
                max_len: 512,
                pooling: Pooling::MeanNonSpecial,
                normalize: false,
                has_mlm_head: true,
                has_pair_head: false,
                differentiable: false,
            },
            tokenizer,
            mask_fn: None,
            next_fn: None,
            token_logprob: None,
            embeddings: Array2::zeros((vocab_size, dim)),
            text_embeddings: HashMap::new(),
            nsp_logit: None,
            prefix_readout: false,
            delay: Duration::ZERO,
        }
    }

    pub fn causal(mut self) -> Self {
        self.info.mode = ModelMode::Causal;
        self
    }

    pub fn with_mask_fn(mut self, f: impl Fn(&[u32], usize) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.mask_fn = Some(Arc::new(f));
        self
    }

    /// Mask logits looked up by mask index; later indices reuse the last row.
    pub fn lookup_table(self, rows: Vec<Vec<f64>>) -> Self {
        self.with_mask_fn(move |_, pos| rows[pos.min(rows.len() - 1)].clone())
    }

    /// Next-token logits from a table indexed by the previous token id
    /// (`[CLS]` for empty input).
    pub fn with_bigram(mut self, table: Vec<Vec<f64>>) -> Self {
        let cls = self.tokenizer.cls_id();
        self.next_fn = Some(Arc::new(move |ids: &[u32]| {
            table[*ids.last().unwrap_or(&cls) as usize].clone()
        }));
        self.causal()
    }

    /// Context-free per-token probabilities used for conditional and span
    /// likelihoods.
    pub fn with_unigram(mut self, probs: &[f64]) -> Self {
        self.token_logprob = Some(probs.iter().map(|p| p.ln()).collect());
        self
    }

    pub fn with_token_embeddings(mut self, rows: Array2<f64>) -> Self {
        self.info.dim = rows.ncols();
        self.embeddings = rows;
        self
    }

    pub fn with_text_embedding(mut self, text: impl Into<String>, v: Vec<f64>) -> Self {
        self.text_embeddings.insert(text.into(), v);
        self
    }

    pub fn with_text_embeddings(mut self, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Self {
        self.text_embeddings.extend(entries);
        self
    }

    pub fn with_nsp_logit(mut self, logit: f64) -> Self {
        self.nsp_logit = Some(logit);
        self.info.has_pair_head = true;
        self
    }

    pub fn with_delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    /// Accepts prefix vectors. With column sums `s` of the prefix and the
    /// mean content embedding `c`, mask logit `v` gains `Σ_d s_d c_d E[v, d]`
    /// where `E` is the token-embedding table. Without a mask table the base
    /// logits are zero.
    pub fn differentiable(mut self) -> Self {
        self.prefix_readout = true;
        self.info.differentiable = true;
        self
    }

    pub fn normalized(mut self) -> Self {
        self.info.normalize = true;
        self
    }

    fn mask_position(&self, text: &str) -> Result<(Vec<u32>, usize)> {
        let ids = self.tokenizer.encode(text);
        let mask = self.tokenizer.mask_id();
        let pos: Vec<usize> = (0..ids.len()).filter(|&k| ids[k] == mask).collect();
        if pos.len() != 1 {
            return Err(Error::invalid(format!(
                "expected one mask token, found {} in `{text}`",
                pos.len()
            )));
        }
        Ok((ids, pos[0]))
    }

    fn content_mean(&self, ids: &[u32]) -> Vec<f64> {
        let mut c = vec![0.0; self.embeddings.ncols()];
        let content: Vec<u32> = ids.iter().copied().filter(|&i| !self.tokenizer.is_special(i)).collect();
        for &i in &content {
            for (a, b) in c.iter_mut().zip(self.embeddings.row(i as usize)) {
                *a += b;
            }
        }
        let n = content.len().max(1) as f64;
        c.iter_mut().for_each(|a| *a /= n);
        c
    }

    /// Mask logits plus the gate `s ⊙ c` they depend on through the prefix.
    fn prefixed_logits(&self, ids: &[u32], pos: usize, prefix: Option<&PrefixVectors>) -> (Vec<f64>, Vec<f64>) {
        let mut logits = match &self.mask_fn {
            Some(f) => f(ids, pos),
            None => vec![0.0; self.info.vocab_size],
        };
        let c = self.content_mean(ids);
        let gate: Vec<f64> = match prefix {
            Some(p) if !p.is_empty() => p
                .rows()
                .sum_axis(ndarray::Axis(0))
                .iter()
                .zip(&c)
                .map(|(s, c)| s * c)
                .collect(),
            _ => return (logits, c),
        };
        for (v, l) in logits.iter_mut().enumerate() {
            *l += util::dot(&gate, self.embeddings.row(v).as_slice().expect("standard layout"));
        }
        (logits, c)
    }

    fn unigram(&self, op: &'static str) -> Result<&[f64]> {
        match &self.token_logprob {
            Some(t) => Ok(t),
            None => unsupported(&self.info, op, "stub has no token likelihoods"),
        }
    }
}

impl LanguageModel for StubModel {
    fn info(&self) -> &ModelInfo {
        &self.info
    }

    fn tokenizer(&self) -> &WordPieceTokenizer {
        &self.tokenizer
    }

    fn mask_logprobs_batch(&self, texts: &[&str], prefix: Option<&PrefixVectors>) -> Result<Vec<MaskDistribution>> {
        if self.info.mode != ModelMode::Masked {
            return unsupported(&self.info, "mask_logprobs", "causal-mode model");
        }
        let prefixed = prefix.is_some_and(|p| !p.is_empty());
        if prefixed && !self.prefix_readout {
            return unsupported(&self.info, "mask_logprobs", "stub models take no prefix vectors");
        }
        if let Some(p) = prefix.filter(|_| prefixed) {
            p.check_dim(&self.info)?;
        }
        if self.mask_fn.is_none() && !self.prefix_readout {
            return unsupported(&self.info, "mask_logprobs", "stub has no mask table");
        }
        texts
            .iter()
            .map(|t| {
                std::thread::sleep(self.delay);
                let (ids, pos) = self.mask_position(t)?;
                Ok(MaskDistribution::from_logits(
                    &self.prefixed_logits(&ids, pos, prefix).0,
                ))
            })
            .collect()
    }

    fn next_token_logprobs_batch(&self, texts: &[&str]) -> Result<Vec<MaskDistribution>> {
        if self.info.mode != ModelMode::Causal {
            return unsupported(&self.info, "next_token_logprobs", "masked-mode model");
        }
        let f = match &self.next_fn {
            Some(f) => f,
            None => return unsupported(&self.info, "next_token_logprobs", "stub has no bigram table"),
        };
        Ok(texts
            .iter()
            .map(|t| {
                std::thread::sleep(self.delay);
                MaskDistribution::from_logits(&f(&self.tokenizer.encode(t)))
            })
            .collect())
    }

    fn sequence_embeddings(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts
            .iter()
            .map(|t| {
                check_nonempty(&self.info, t, "text")?;
                let mut v = match self.text_embeddings.get(*t) {
                    Some(v) => v.clone(),
                    None => {
                        let ids: Vec<u32> = self
                            .tokenizer
                            .encode(t)
                            .into_iter()
                            .filter(|&i| !self.tokenizer.is_special(i))
                            .collect();
                        let mut v = vec![0.0; self.embeddings.ncols()];
                        for &i in &ids {
                            for (a, b) in v.iter_mut().zip(self.embeddings.row(i as usize)) {
                                *a += b;
                            }
                        }
                        let n = ids.len().max(1) as f64;
                        v.iter_mut().for_each(|a| *a /= n);
                        v
                    }
                };
                if self.info.normalize {
                    let norm = util::dot(&v, &v).sqrt();
                    if norm > 0.0 {
                        v.iter_mut().for_each(|a| *a /= norm);
                    }
                }
                Ok(v)
            })
            .collect()
    }

    fn nsp_score(&self, first: &str, second: &str) -> Result<f64> {
        match self.nsp_logit {
            Some(l) => {
                check_nonempty(&self.info, first, "first text")?;
                check_nonempty(&self.info, second, "second text")?;
                Ok(util::sigmoid(l))
            }
            None => unsupported(&self.info, "nsp_score", "no sentence-pair head"),
        }
    }

    fn target_logprobs(&self, condition: &str, target: &str) -> Result<Vec<f64>> {
        let table = self.unigram("conditional_logprob")?;
        let _ = condition;
        let ids = self.tokenizer.encode(target);
        if ids.is_empty() {
            return Err(Error::invalid("conditional_logprob: empty target"));
        }
        Ok(ids.iter().map(|&i| table[i as usize]).collect())
    }

    fn span_logprobs(&self, before: &str, span: &str, after: &str) -> Result<Vec<f64>> {
        let _ = (before, after);
        let table = self.unigram("span_logprobs")?;
        let ids = self.tokenizer.encode(span);
        if ids.is_empty() {
            return Err(Error::invalid("span_logprobs: empty span"));
        }
        Ok(ids.iter().map(|&i| table[i as usize]).collect())
    }

    fn token_embeddings(&self, ids: &[u32]) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((ids.len(), self.embeddings.ncols()));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&self.embeddings.row(i as usize));
        }
        Ok(out)
    }

    fn prefix_loss_grad(
        &self,
        examples: &[PrefixExample],
        targets: &SentimentTargets,
        prefix: &PrefixVectors,
    ) -> Result<LossGrad> {
        if !self.prefix_readout {
            return unsupported(&self.info, "prefix_gradients", "backend is not differentiable");
        }
        if examples.is_empty() {
            return Err(Error::invalid("prefix_loss_grad: empty batch"));
        }
        prefix.check_dim(&self.info)?;
        let dim = self.info.dim;
        let mut loss = 0.0;
        // Every prefix row receives the same gradient.
        let mut row_grad = vec![0.0; dim];
        for ex in examples {
            let (ids, pos) = self.mask_position(&ex.text)?;
            let (logits, c) = self.prefixed_logits(&ids, pos, Some(prefix));
            let dist = MaskDistribution::from_logits(&logits);
            let (lpos, lneg) = targets.means(&dist);
            let two = util::log_softmax(&[lpos, lneg]);
            let y = if ex.label { [1.0, 0.0] } else { [0.0, 1.0] };
            loss -= y[0] * two[0] + y[1] * two[1];
            let g_pos = two[0].exp() - y[0];
            let g_neg = two[1].exp() - y[1];
            let mut d_logit: Vec<f64> = dist.logprobs.iter().map(|l| -(g_pos + g_neg) * l.exp()).collect();
            for &i in &targets.positive {
                d_logit[i as usize] += g_pos / targets.positive.len() as f64;
            }
            for &i in &targets.negative {
                d_logit[i as usize] += g_neg / targets.negative.len() as f64;
            }
            for (v, g) in d_logit.iter().enumerate() {
                for d in 0..dim {
                    row_grad[d] += g * c[d] * self.embeddings[[v, d]];
                }
            }
        }
        let n = examples.len() as f64;
        let grad = Array2::from_shape_fn(prefix.rows().dim(), |(_, d)| row_grad[d] / n);
        Ok(LossGrad { loss: loss / n, grad })
    }

    fn weights_hash(&self) -> Result<String> {
        let mut bytes: Vec<u8> = self.embeddings.iter().flat_map(|v| v.to_le_bytes()).collect();
        if let Some(t) = &self.token_logprob {
            bytes.extend(t.iter().flat_map(|v| v.to_le_bytes()));
        }
        Ok(util::sha256_hex(&bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> WordPieceTokenizer {
        WordPieceTokenizer::build(&["a b c d the user feels positive negative"], 0).unwrap()
    }

    #[test]
    fn lookup_table_rows_by_mask_position() {
        let t = tok();
        let v = t.vocab_size();
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|k| (0..v).map(|j| ((j * (k + 1)) % 7) as f64).collect())
            .collect();
        let m = StubModel::new("stub", t, 4).lookup_table(rows.clone());
        let d = m.mask_logprobs("a [MASK] b", None).unwrap();
        assert_eq!(d, MaskDistribution::from_logits(&rows[1]));
        assert!(d.logsumexp().abs() < 1e-9);
        let same = m.mask_logprobs("a [MASK] b", Some(&PrefixVectors::empty(4))).unwrap();
        assert_eq!(d, same);
        let pre = PrefixVectors::new(Array2::zeros((1, 4))).unwrap();
        assert!(matches!(
            m.mask_logprobs("a [MASK]", Some(&pre)),
            Err(Error::Capability { .. })
        ));
        assert!(matches!(m.next_token_logprobs("a"), Err(Error::Capability { .. })));
    }

    #[test]
    fn bigram_rows() {
        let t = tok();
        let v = t.vocab_size();
        let table: Vec<Vec<f64>> = (0..v).map(|k| (0..v).map(|j| ((j + k) % 5) as f64).collect()).collect();
        let a = t.token_id("a").unwrap() as usize;
        let m = StubModel::new("bigram", t, 2).with_bigram(table.clone());
        let d = m.next_token_logprobs("b a").unwrap();
        assert_eq!(d, MaskDistribution::from_logits(&table[a]));
        assert_eq!(d, m.next_token_logprobs("b a").unwrap());
        assert!(matches!(m.mask_logprobs("[MASK]", None), Err(Error::Capability { .. })));
    }

    #[test]
    fn mean_pooled_embeddings() {
        let t = tok();
        let v = t.vocab_size();
        let rows = Array2::from_shape_fn((v, 2), |(i, j)| (i * 2 + j) as f64);
        let (a, b) = (t.token_id("a").unwrap() as f64, t.token_id("b").unwrap() as f64);
        let m = StubModel::new("emb", t, 2).with_token_embeddings(rows);
        let e = m.sequence_embedding("a b").unwrap();
        assert_eq!(
            e,
            vec![(2.0 * a + 2.0 * b) / 2.0, (2.0 * a + 1.0 + 2.0 * b + 1.0) / 2.0]
        );
        assert_eq!(e, m.sequence_embedding("a b").unwrap());
        assert!(m.sequence_embedding("  ").is_err());
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let t = tok();
        let v = t.vocab_size();
        let rows = Array2::from_shape_fn((v, 3), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0);
        let targets = SentimentTargets {
            positive: vec![t.token_id("positive").unwrap()],
            negative: vec![t.token_id("negative").unwrap()],
            truncated: vec![],
        };
        let m = StubModel::new("diff", t, 3)
            .with_token_embeddings(rows)
            .differentiable();
        let examples = vec![
            PrefixExample {
                text: "a b [MASK]".into(),
                label: true,
            },
            PrefixExample {
                text: "c d the [MASK]".into(),
                label: false,
            },
        ];
        let p = Array2::from_shape_fn((2, 3), |(r, d)| 0.3 * r as f64 - 0.2 * d as f64 + 0.1);
        let lg = m
            .prefix_loss_grad(&examples, &targets, &PrefixVectors::new(p.clone()).unwrap())
            .unwrap();
        let loss_at = |q: Array2<f64>| {
            m.prefix_loss_grad(&examples, &targets, &PrefixVectors::new(q).unwrap())
                .unwrap()
                .loss
        };
        let h = 1e-6;
        for r in 0..2 {
            for d in 0..3 {
                let (mut up, mut down) = (p.clone(), p.clone());
                up[[r, d]] += h;
                down[[r, d]] -= h;
                let fd = (loss_at(up) - loss_at(down)) / (2.0 * h);
                assert!((fd - lg.grad[[r, d]]).abs() < 1e-7, "{fd} vs {}", lg.grad[[r, d]]);
            }
        }
        let prefix = PrefixVectors::new(p).unwrap();
        let d = m.mask_logprobs("a b [MASK]", Some(&prefix)).unwrap();
        let (lpos, lneg) = targets.means(&d);
        let single = m.prefix_loss_grad(&examples[..1], &targets, &prefix).unwrap();
        assert!((single.loss + util::log_softmax(&[lpos, lneg])[0]).abs() < 1e-12);
    }

    #[test]
    fn unigram_conditionals_and_pair_head() {
        let t = tok();
        let v = t.vocab_size();
        let m = StubModel::new("uni", t, 2)
            .with_unigram(&vec![0.25; v])
            .with_nsp_logit(0.0);
        let lp = m.conditional_logprob("the user", "a b c d").unwrap();
        assert!((lp - 0.25f64.ln()).abs() < 1e-12);
        assert_eq!(m.nsp_score("a", "b").unwrap(), 0.5);
        assert!(m.conditional_logprob("a", "").is_err());
    }
}
