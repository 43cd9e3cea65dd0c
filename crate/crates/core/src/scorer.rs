//! Preference scores: the sentiment-word scorer and the zero-shot baselines.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Interaction, RecDataset};
use crate::eval::{self, LatencyReport};
use crate::lm::{LanguageModel, MaskDistribution, ModelMode, PrefixVectors, SentimentTargets};
use crate::prompting::{CompiledPack, Side, TemplateMode, UserItemContext};
use crate::{util, Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFormula {
    /// `exp(lpos) / (exp(lpos) + exp(lneg))`.
    #[default]
    Softmax,
    /// `lpos / (lpos + lneg)` on the mean log-probabilities.
    Literal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    PromptRec,
    Random,
    EmbSim,
    PairNsp,
    ItemLm,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::PromptRec => "promptrec",
            Method::Random => "random",
            Method::EmbSim => "embsim",
            Method::PairNsp => "pairnsp",
            Method::ItemLm => "itemlm",
        }
    }

    pub fn needs_model(self) -> bool {
        self != Method::Random
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "promptrec" => Method::PromptRec,
            "random" => Method::Random,
            "embsim" => Method::EmbSim,
            "pairnsp" => Method::PairNsp,
            "itemlm" => Method::ItemLm,
            other => return Err(Error::invalid(format!("unknown method `{other}`"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScore {
    pub user_id: String,
    pub item_id: String,
    pub value: f64,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formula: Option<ScoreFormula>,
    pub model: String,
    pub pack_version: String,
}

/// Picks the larger of two complementary shares, so that swapping the
/// arguments maps the result `r` to exactly `1 - r`.
fn complementary(share_pos: f64, share_neg: f64) -> f64 {
    if share_pos > share_neg {
        share_pos
    } else if share_pos < share_neg {
        1.0 - share_neg
    } else {
        0.5
    }
}

/// Combines mean positive and negative log-probabilities into a score.
pub fn combine(lpos: f64, lneg: f64, formula: ScoreFormula) -> f64 {
    match formula {
        ScoreFormula::Softmax => complementary(1.0 / (1.0 + (lneg - lpos).exp()), 1.0 / (1.0 + (lpos - lneg).exp())),
        ScoreFormula::Literal => {
            let denom = lpos + lneg;
            if denom == 0.0 {
                0.5
            } else {
                complementary(lpos / denom, lneg / denom)
            }
        }
    }
}

/// Score from one distribution at the mask slot.
pub fn promptrec_value(dist: &MaskDistribution, targets: &SentimentTargets, formula: ScoreFormula) -> f64 {
    let (lpos, lneg) = targets.means(dist);
    combine(lpos, lneg, formula)
}

/// Scores one rendered context; masked models read the mask slot, causal
/// models the token after the text preceding it.
pub fn promptrec_score(
    model: &dyn LanguageModel,
    context: &UserItemContext,
    targets: &SentimentTargets,
    prefix: Option<&PrefixVectors>,
    formula: ScoreFormula,
) -> Result<f64> {
    Ok(promptrec_batch(model, &[context], targets, prefix, formula)?[0])
}

fn promptrec_batch(
    model: &dyn LanguageModel,
    contexts: &[&UserItemContext],
    targets: &SentimentTargets,
    prefix: Option<&PrefixVectors>,
    formula: ScoreFormula,
) -> Result<Vec<f64>> {
    let dists = match model.info().mode {
        ModelMode::Masked => {
            let texts: Vec<&str> = contexts.iter().map(|c| c.text.as_str()).collect();
            model.mask_logprobs_batch(&texts, prefix)?
        }
        ModelMode::Causal => {
            if prefix.is_some_and(|p| !p.is_empty()) {
                return Err(Error::Capability {
                    model: model.info().id.clone(),
                    operation: "promptrec_score",
                    reason: "prefix vectors need a masked model".into(),
                });
            }
            let texts: Vec<&str> = contexts.iter().map(|c| c.before_mask()).collect();
            model.next_token_logprobs_batch(&texts)?
        }
    };
    Ok(dists.iter().map(|d| promptrec_value(d, targets, formula)).collect())
}

pub fn template_mode(model: &dyn LanguageModel) -> TemplateMode {
    match model.info().mode {
        ModelMode::Masked => TemplateMode::Masked,
        ModelMode::Causal => TemplateMode::Causal,
    }
}

/// I.i.d. uniform scores.
pub fn baseline_random(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = util::sub_rng(seed, "random-baseline");
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Maps values linearly onto `[0, 1]`; a constant input maps to 0.5.
pub fn min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi <= lo {
        return vec![0.5; values.len()];
    }
    values.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Raw dot products of user and item text embeddings.
pub fn embsim_raw(model: &dyn LanguageModel, pairs: &[(String, String)], batch_size: usize) -> Result<Vec<f64>> {
    let mut unique: Vec<&str> = Vec::new();
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (u, i) in pairs {
        for t in [u.as_str(), i.as_str()] {
            if !index.contains_key(t) {
                index.insert(t, unique.len());
                unique.push(t);
            }
        }
    }
    let mut embeddings = Vec::with_capacity(unique.len());
    for chunk in unique.chunks(batch_size.max(1)) {
        embeddings.extend(model.sequence_embeddings(chunk)?);
    }
    Ok(pairs
        .iter()
        .map(|(u, i)| util::dot(&embeddings[index[u.as_str()]], &embeddings[index[i.as_str()]]))
        .collect())
}

/// Mean log-likelihood of the item-name span inside the rendered context.
pub fn itemlm_raw(model: &dyn LanguageModel, context: &UserItemContext, item_feature: &str) -> Result<f64> {
    let span = context.span(Side::Item, item_feature).ok_or_else(|| {
        Error::invalid(format!(
            "item name `{item_feature}` not found in context for item `{}`",
            context.provenance.item_id
        ))
    })?;
    let text = &context.text;
    let lp = model.span_logprobs(
        &text[..span.range.start],
        &text[span.range.clone()],
        &text[span.range.end..],
    )?;
    Ok(lp.iter().sum::<f64>() / lp.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreOptions {
    pub method: Method,
    pub formula: ScoreFormula,
    pub batch_size: usize,
    pub seed: u64,
    pub prefix: Option<PrefixVectors>,
    /// Stop at the first failing interaction instead of collecting failures.
    pub fail_fast: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreFailure {
    pub user_id: String,
    pub item_id: String,
    pub error: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreRun {
    pub scores: Vec<PreferenceScore>,
    pub failures: Vec<ScoreFailure>,
    /// Sentiment words scored by their first sub-token only.
    #[serde(default)]
    pub truncated_words: Vec<String>,
}

/// Scores `interactions` in order.
pub fn score_dataset(
    model: Option<&dyn LanguageModel>,
    dataset: &RecDataset,
    interactions: &[&Interaction],
    pack: &CompiledPack,
    options: &ScoreOptions,
) -> Result<ScoreRun> {
    let method = options.method;
    let model_id = model.map_or("none".to_string(), |m| m.info().id.clone());
    let model = match (model, method.needs_model()) {
        (Some(m), _) => Some(m),
        (None, false) => None,
        (None, true) => return Err(Error::invalid(format!("method `{}` needs a model", method.name()))),
    };
    let batch = options.batch_size.max(1);
    let mut run = ScoreRun::default();

    let fail = |run: &mut ScoreRun, it: &Interaction, e: Error| -> Result<()> {
        if options.fail_fast {
            return Err(Error::invalid(format!(
                "user `{}`, item `{}`: {e}",
                it.user_id, it.item_id
            )));
        }
        run.failures.push(ScoreFailure {
            user_id: it.user_id.clone(),
            item_id: it.item_id.clone(),
            error: e.to_string(),
        });
        Ok(())
    };

    let profiles = |it: &Interaction| {
        let u = dataset.user(&it.user_id).expect("dataset references are checked");
        let i = dataset.item(&it.item_id).expect("dataset references are checked");
        (u, i)
    };

    let mut values: Vec<(usize, f64)> = Vec::with_capacity(interactions.len());
    match method {
        Method::Random => {
            values.extend(
                baseline_random(interactions.len(), options.seed)
                    .into_iter()
                    .enumerate(),
            );
        }
        Method::PromptRec => {
            let m = model.unwrap();
            let targets = SentimentTargets::resolve(m.tokenizer(), pack.vocab(), pack.pack.multi_token)?;
            run.truncated_words = targets.truncated.clone();
            let mode = template_mode(m);
            let mut rendered: Vec<(usize, UserItemContext)> = Vec::new();
            for (k, it) in interactions.iter().enumerate() {
                let (u, i) = profiles(it);
                match pack.render(u, i, mode) {
                    Ok(c) => rendered.push((k, c)),
                    Err(e) => fail(&mut run, it, e)?,
                }
            }
            for chunk in rendered.chunks(batch) {
                let refs: Vec<&UserItemContext> = chunk.iter().map(|(_, c)| c).collect();
                match promptrec_batch(m, &refs, &targets, options.prefix.as_ref(), options.formula) {
                    Ok(v) => values.extend(chunk.iter().map(|(k, _)| *k).zip(v)),
                    Err(e) if options.fail_fast || chunk.len() == 1 => fail(&mut run, interactions[chunk[0].0], e)?,
                    Err(_) => {
                        // Retry one by one to attribute the failure.
                        for (k, c) in chunk {
                            match promptrec_batch(m, &[c], &targets, options.prefix.as_ref(), options.formula) {
                                Ok(v) => values.push((*k, v[0])),
                                Err(e) => fail(&mut run, interactions[*k], e)?,
                            }
                        }
                    }
                }
            }
        }
        Method::EmbSim | Method::PairNsp => {
            let m = model.unwrap();
            let mut pairs = Vec::new();
            for (k, it) in interactions.iter().enumerate() {
                let (u, i) = profiles(it);
                match (pack.user_text(u), pack.item_text(i)) {
                    (Ok(a), Ok(b)) => pairs.push((k, (a, b))),
                    (Err(e), _) | (_, Err(e)) => fail(&mut run, it, e)?,
                }
            }
            if method == Method::EmbSim {
                let texts: Vec<(String, String)> = pairs.iter().map(|(_, p)| p.clone()).collect();
                let raw = embsim_raw(m, &texts, batch)?;
                let mapped = min_max(&raw);
                values.extend(pairs.iter().map(|(k, _)| *k).zip(mapped));
            } else {
                for (k, (a, b)) in &pairs {
                    match m.nsp_score(a, b) {
                        Ok(v) => values.push((*k, v)),
                        Err(e) => fail(&mut run, interactions[*k], e)?,
                    }
                }
            }
        }
        Method::ItemLm => {
            let m = model.unwrap();
            let feature = pack
                .pack
                .item_name
                .clone()
                .ok_or_else(|| Error::invalid("itemlm needs `item_name` in the prompt pack"))?;
            let mode = template_mode(m);
            let mut raw = Vec::new();
            for (k, it) in interactions.iter().enumerate() {
                let (u, i) = profiles(it);
                match pack.render(u, i, mode).and_then(|c| itemlm_raw(m, &c, &feature)) {
                    Ok(v) => raw.push((k, v)),
                    Err(e) => fail(&mut run, it, e)?,
                }
            }
            let mapped = min_max(&raw.iter().map(|(_, v)| *v).collect::<Vec<_>>());
            values.extend(raw.iter().map(|(k, _)| *k).zip(mapped));
        }
    }

    values.sort_by_key(|(k, _)| *k);
    let formula = (method == Method::PromptRec).then_some(options.formula);
    for (k, v) in values {
        if !(0.0..=1.0).contains(&v) {
            fail(
                &mut run,
                interactions[k],
                Error::invalid(format!("score {v} outside [0, 1]")),
            )?;
            continue;
        }
        run.scores.push(PreferenceScore {
            user_id: interactions[k].user_id.clone(),
            item_id: interactions[k].item_id.clone(),
            value: v,
            method,
            formula,
            model: model_id.clone(),
            pack_version: pack.pack.version.clone(),
        });
    }
    Ok(run)
}

/// Median per-interaction time to score the given contexts.
pub fn measure_scoring_latency(
    model: &dyn LanguageModel,
    contexts: &[UserItemContext],
    targets: &SentimentTargets,
    prefix: Option<&PrefixVectors>,
    batch_size: usize,
    warmup: usize,
    repetitions: usize,
) -> Result<LatencyReport> {
    let refs: Vec<&UserItemContext> = contexts.iter().collect();
    eval::measure_latency(contexts.len(), warmup, repetitions, || {
        for chunk in refs.chunks(batch_size.max(1)) {
            promptrec_batch(model, chunk, targets, prefix, ScoreFormula::Softmax)?;
        }
        Ok(())
    })
}

/// Identifies one scored split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset: String,
    pub split: String,
    pub model: String,
    pub method: Method,
    pub pack_hash: String,
    pub seed: u64,
    /// Formula, prefix and other knobs that change the values.
    pub variant: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        util::hash_json(self).expect("cache keys serialize")
    }
}

/// Line-delimited score files keyed by [`CacheKey`] digests.
#[derive(Clone, Debug)]
pub struct ScoreCache {
    dir: PathBuf,
}

impl ScoreCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.jsonl", key.digest()))
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<PreferenceScore>>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let mut lines = util::read_lines(&path)?;
        match lines.next() {
            Some(header) => {
                let (_, h) = header?;
                let stored: CacheKey = serde_json::from_str::<serde_json::Value>(&h)?
                    .get("key")
                    .cloned()
                    .map(serde_json::from_value)
                    .transpose()?
                    .ok_or_else(|| Error::invalid(format!("{}: missing cache header", path.display())))?;
                if &stored != key {
                    return Ok(None);
                }
            }
            None => return Ok(None),
        }
        let mut out = Vec::new();
        for line in lines {
            let (_, l) = line?;
            out.push(serde_json::from_str(&l)?);
        }
        Ok(Some(out))
    }

    pub fn put(&self, key: &CacheKey, scores: &[PreferenceScore]) -> Result<PathBuf> {
        let path = self.path(key);
        write_scores(&path, Some(key), scores)?;
        Ok(path)
    }
}

pub fn write_scores(path: &Path, key: Option<&CacheKey>, scores: &[PreferenceScore]) -> Result<()> {
    use std::io::Write;
    let mut w = util::create(path)?;
    if let Some(k) = key {
        util::write_json_line(&mut w, path, &serde_json::json!({ "key": k }))?;
    }
    for s in scores {
        util::write_json_line(&mut w, path, s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a score file written by [`write_scores`], skipping a cache header.
pub fn read_scores(path: &Path) -> Result<Vec<PreferenceScore>> {
    let mut out = Vec::new();
    for line in util::read_lines(path)? {
        let (n, l) = line?;
        let value: serde_json::Value = serde_json::from_str(&l)?;
        if n == 1 && value.get("key").is_some() {
            continue;
        }
        out.push(serde_json::from_value(value)?);
    }
    Ok(out)
}
