//! Corpus refinement: admit documents from a general corpus, score them
//! against the probe set, keep the exact top-K, and further pre-train on
//! the result.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::RecDataset;
use crate::lm::{further_pretrain, LanguageModel, PretrainConfig, StepLog, TransformerLm};
use crate::prompting::{build_probe_set, probe_set_hash, CompiledPack, ProbeText, TemplateMode};
use crate::{util, Error, Result};

pub const DEFAULT_K: usize = 10_000;
pub const DEFAULT_PROBE_SAMPLE: usize = 10_000;
pub const SENTENCE_RULE: &str = "segments split on a run of . ! ? followed by whitespace";
pub const WORD_RULE: &str = "case-folded maximal alphanumeric runs";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: u64,
    pub text: String,
    /// Line number in the source stream.
    pub offset: u64,
}

pub fn unique_words(text: &str) -> usize {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect::<HashSet<_>>()
        .len()
}

pub fn sentence_count(text: &str) -> usize {
    let mut count = 0;
    let mut has_content = false;
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '!' | '?') {
            while chars.peek().is_some_and(|n| matches!(n, '.' | '!' | '?')) {
                chars.next();
            }
            if chars.peek().is_some_and(|n| n.is_whitespace()) {
                if has_content {
                    count += 1;
                }
                has_content = false;
                continue;
            }
            has_content = true;
        } else if !c.is_whitespace() {
            has_content = true;
        }
    }
    count + usize::from(has_content)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmissionFilter {
    pub sample_rate: f64,
    pub min_unique_words: usize,
    pub min_sentences: usize,
    pub seed: u64,
}

impl Default for AdmissionFilter {
    fn default() -> Self {
        Self {
            sample_rate: 0.05,
            min_unique_words: 30,
            min_sentences: 3,
            seed: 0,
        }
    }
}

impl AdmissionFilter {
    pub fn eligible(&self, text: &str) -> bool {
        unique_words(text) >= self.min_unique_words && sentence_count(text) >= self.min_sentences
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusProvenance {
    pub source: String,
    pub filter: Option<AdmissionFilter>,
    pub sentence_rule: String,
    pub word_rule: String,
    pub seen: u64,
    pub sampled: u64,
    pub admitted: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneralCorpus {
    pub documents: Vec<Document>,
    pub provenance: CorpusProvenance,
}

/// Reads a corpus file: one document per line, either plain text or a JSON
/// object with a `text` field.
pub fn read_raw_corpus(path: &Path) -> Result<impl Iterator<Item = Result<(u64, String)>>> {
    let display = path.to_path_buf();
    Ok(util::read_lines(path)?.filter_map(move |line| match line {
        Err(e) => Some(Err(e)),
        Ok((n, l)) => {
            let trimmed = l.trim();
            if trimmed.is_empty() {
                return None;
            }
            if trimmed.starts_with('{') {
                let parsed = serde_json::from_str::<serde_json::Value>(trimmed)
                    .ok()
                    .and_then(|v| v.get("text").and_then(|t| t.as_str()).map(str::to_string));
                return Some(parsed.map(|t| (n, t)).ok_or_else(|| Error::Row {
                    path: display.clone(),
                    line: n,
                    message: "JSON line without a string `text` field".into(),
                }));
            }
            Some(Ok((n, l)))
        }
    }))
}

/// Seeded Bernoulli sampling followed by the structural thresholds. The
/// random draw happens for every document, so the sample does not depend on
/// the thresholds.
pub fn filter_general_corpus<I>(raw: I, source: &str, filter: &AdmissionFilter) -> Result<GeneralCorpus>
where
    I: IntoIterator<Item = Result<(u64, String)>>,
{
    if !(0.0..=1.0).contains(&filter.sample_rate) {
        return Err(Error::invalid("sample_rate must lie in [0, 1]"));
    }
    let mut rng = util::sub_rng(filter.seed, "corpus-sample");
    let mut out = GeneralCorpus {
        documents: Vec::new(),
        provenance: CorpusProvenance {
            source: source.to_string(),
            filter: Some(filter.clone()),
            sentence_rule: SENTENCE_RULE.into(),
            word_rule: WORD_RULE.into(),
            ..Default::default()
        },
    };
    for entry in raw {
        let (offset, text) = entry?;
        let p = &mut out.provenance;
        p.seen += 1;
        if rng.random::<f64>() >= filter.sample_rate {
            continue;
        }
        p.sampled += 1;
        if !filter.eligible(&text) {
            continue;
        }
        p.admitted += 1;
        out.documents.push(Document {
            id: p.seen - 1,
            text,
            offset,
        });
    }
    log::info!(
        "corpus {source}: {} seen, {} sampled, {} admitted",
        out.provenance.seen,
        out.provenance.sampled,
        out.provenance.admitted
    );
    Ok(out)
}

/// Joint relevance `sigmoid(e_c · e_z)` of a document and a probe.
pub fn joint_prob(encoder: &dyn LanguageModel, doc: &str, probe: &str) -> Result<f64> {
    let e = encoder.sequence_embeddings(&[doc, probe])?;
    Ok(util::sigmoid(util::dot(&e[0], &e[1])))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionalMode {
    /// Treat the probe likelihood as constant: score = Σ p(c, z).
    #[default]
    Constant,
    /// score = Σ p(c, z) · log p(z | c).
    Modeled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredDocument {
    pub id: u64,
    pub score: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineSettings {
    pub k: usize,
    pub conditional: ConditionalMode,
    pub encoder: String,
    pub encoder_pooling: String,
    pub encoder_normalized: bool,
    #[serde(default)]
    pub conditional_model: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinedCorpus {
    /// Sorted by descending score, ties by ascending id.
    pub documents: Vec<ScoredDocument>,
    pub probe_hash: String,
    pub settings: RefineSettings,
    pub scored: u64,
    /// K exceeded the corpus size; every document was kept.
    pub k_exceeds_corpus: bool,
}

impl RefinedCorpus {
    pub fn ids(&self) -> Vec<u64> {
        self.documents.iter().map(|d| d.id).collect()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.documents.iter().map(|d| d.text.as_str()).collect()
    }

    /// Writes `refined.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        let path = dir.join("refined.jsonl");
        let mut w = util::create(&path)?;
        for d in &self.documents {
            util::write_json_line(&mut w, &path, d)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        util::write_json(
            &dir.join("manifest.json"),
            &serde_json::json!({
                "probe_hash": self.probe_hash,
                "settings": self.settings,
                "scored": self.scored,
                "selected": self.documents.len(),
                "k_exceeds_corpus": self.k_exceeds_corpus,
                "ids": self.ids(),
                "extra": extra,
            }),
        )
    }

    pub fn read(dir: &Path) -> Result<Vec<ScoredDocument>> {
        let mut out = Vec::new();
        for line in util::read_lines(&dir.join("refined.jsonl"))? {
            let (_, l) = line?;
            out.push(serde_json::from_str(&l)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Ranked {
    score: f64,
    id: u64,
    text: String,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    /// Greater means preferred: higher score, then lower id.
    fn cmp(&self, other: &Self) -> Ordering {
        self.score.total_cmp(&other.score).then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct RefineOptions {
    pub k: usize,
    pub conditional: ConditionalMode,
    /// Documents embedded per encoder call.
    pub batch_size: usize,
    /// Documents held in memory per parallel round.
    pub chunk_size: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            conditional: ConditionalMode::Constant,
            batch_size: 32,
            chunk_size: 4096,
        }
    }
}

/// Scores every document against every probe in one pass and keeps the
/// exact top-K with a bounded heap. `conditional_model` supplies
/// `log p(z | c)` in modeled mode and defaults to `encoder`.
pub fn refine_corpus<I>(
    documents: I,
    probes: &[ProbeText],
    encoder: &dyn LanguageModel,
    conditional_model: Option<&dyn LanguageModel>,
    options: &RefineOptions,
) -> Result<RefinedCorpus>
where
    I: IntoIterator<Item = Document>,
{
    if options.k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    if probes.is_empty() {
        return Err(Error::invalid("refine_corpus needs a nonempty probe set"));
    }
    let probe_texts: Vec<&str> = probes.iter().map(|p| p.text.as_str()).collect();
    let mut probe_emb = Vec::with_capacity(probes.len());
    for chunk in probe_texts.chunks(options.batch_size.max(1)) {
        probe_emb.extend(encoder.sequence_embeddings(chunk)?);
    }
    let cond = conditional_model.unwrap_or(encoder);

    let score_batch = |docs: &[Document]| -> Result<Vec<f64>> {
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        let emb = encoder.sequence_embeddings(&texts)?;
        emb.iter()
            .zip(docs)
            .map(|(e, d)| {
                let mut total = 0.0;
                for (z, pe) in probe_emb.iter().enumerate() {
                    let joint = util::sigmoid(util::dot(e, pe));
                    total += match options.conditional {
                        ConditionalMode::Constant => joint,
                        ConditionalMode::Modeled => joint * cond.conditional_logprob(&d.text, probe_texts[z])?,
                    };
                }
                if total.is_nan() {
                    return Err(Error::invalid(format!("document {} scored NaN", d.id)));
                }
                Ok(total)
            })
            .collect()
    };

    let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(options.k + 1);
    let mut scored = 0u64;
    let mut pending: Vec<Document> = Vec::with_capacity(options.chunk_size);
    let mut flush = |pending: &mut Vec<Document>, heap: &mut BinaryHeap<Reverse<Ranked>>| -> Result<()> {
        let scores: Vec<Vec<f64>> = pending
            .par_chunks(options.batch_size.max(1))
            .map(&score_batch)
            .collect::<Result<_>>()?;
        for (doc, score) in pending.drain(..).zip(scores.into_iter().flatten()) {
            scored += 1;
            let cand = Ranked {
                score,
                id: doc.id,
                text: doc.text,
            };
            if heap.len() < options.k {
                heap.push(Reverse(cand));
            } else if heap.peek().is_some_and(|Reverse(worst)| cand > *worst) {
                heap.pop();
                heap.push(Reverse(cand));
            }
        }
        Ok(())
    };
    for doc in documents {
        if doc.text.trim().is_empty() {
            return Err(Error::invalid(format!("document {} is empty", doc.id)));
        }
        pending.push(doc);
        if pending.len() >= options.chunk_size.max(1) {
            flush(&mut pending, &mut heap)?;
        }
    }
    flush(&mut pending, &mut heap)?;

    let k_exceeds_corpus = (scored as usize) < options.k;
    if k_exceeds_corpus {
        log::warn!(
            "K = {} exceeds the corpus size {scored}; keeping every document",
            options.k
        );
    }
    let mut kept: Vec<Ranked> = heap.into_iter().map(|Reverse(r)| r).collect();
    kept.sort_by(|a, b| b.cmp(a));
    let info = encoder.info();
    Ok(RefinedCorpus {
        documents: kept
            .into_iter()
            .map(|r| ScoredDocument {
                id: r.id,
                score: r.score,
                text: r.text,
            })
            .collect(),
        probe_hash: probe_set_hash(probes),
        settings: RefineSettings {
            k: options.k,
            conditional: options.conditional,
            encoder: info.id.clone(),
            encoder_pooling: format!("{:?}", info.pooling),
            encoder_normalized: info.normalize,
            conditional_model: (options.conditional == ConditionalMode::Modeled).then(|| cond.info().id.clone()),
        },
        scored,
        k_exceeds_corpus,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcmpConfig {
    pub k: usize,
    pub probe_sample_size: usize,
    pub conditional: ConditionalMode,
    pub seed: u64,
    pub pretrain: PretrainConfig,
}

impl RcmpConfig {
    pub fn for_model(model: &dyn LanguageModel) -> Self {
        Self {
            k: DEFAULT_K,
            probe_sample_size: DEFAULT_PROBE_SAMPLE,
            conditional: ConditionalMode::Constant,
            seed: 0,
            pretrain: PretrainConfig::for_model(model.info().param_count),
        }
    }
}

#[derive(Debug)]
pub struct RcmpOutcome {
    pub model: TransformerLm,
    pub refined: RefinedCorpus,
    pub log: Vec<StepLog>,
    pub manifest: serde_json::Value,
}

/// Refined corpus plus the manifest describing how it was selected.
#[derive(Debug)]
pub struct Refinement {
    pub refined: RefinedCorpus,
    pub manifest: serde_json::Value,
}

/// Probe set and corpus refinement for `dataset`. The probe set, the
/// refined corpus and its manifest are written under `out_dir` when given.
pub fn refine_for_dataset(
    model: &TransformerLm,
    encoder: &dyn LanguageModel,
    dataset: &RecDataset,
    corpus: &GeneralCorpus,
    pack: &CompiledPack,
    config: &RcmpConfig,
    out_dir: Option<&Path>,
) -> Result<Refinement> {
    let probes = build_probe_set(
        dataset,
        pack.template(TemplateMode::Masked),
        pack.verbalizers(),
        pack.vocab(),
        config.probe_sample_size,
        config.seed,
    )
    .map_err(|e| e.in_stage("build_probe_set"))?;
    if let Some(dir) = out_dir {
        crate::prompting::write_probe_set(&dir.join("probes.jsonl"), &probes)?;
    }
    let refined = refine_corpus(
        corpus.documents.iter().cloned(),
        &probes,
        encoder,
        Some(model),
        &RefineOptions {
            k: config.k,
            conditional: config.conditional,
            ..Default::default()
        },
    )
    .map_err(|e| e.in_stage("refine_corpus"))?;
    let manifest = serde_json::json!({
        "dataset": dataset.name(),
        "pack_hash": pack.hash,
        "probe_hash": refined.probe_hash,
        "probes": probes.len(),
        "k": config.k,
        "conditional": config.conditional,
        "seed": config.seed,
        "corpus": corpus.provenance,
        "refine": refined.settings,
        "pretrain": PretrainConfig { seed: config.seed, ..config.pretrain.clone() },
        "base_model": model.info().id,
        "base_weights_sha256": model.weights_hash()?,
    });
    if let Some(dir) = out_dir {
        refined.write(dir, &manifest)?;
    }
    Ok(Refinement { refined, manifest })
}

/// Further pre-training on refined documents; the model is saved to
/// `out_dir/model` and the loss log to `out_dir/train_log.jsonl`.
pub fn pretrain_on_refined(
    model: &TransformerLm,
    documents: &[&str],
    config: &RcmpConfig,
    manifest: &serde_json::Value,
    out_dir: Option<&Path>,
) -> Result<crate::lm::PretrainOutcome> {
    let pretrain = PretrainConfig {
        seed: config.seed,
        ..config.pretrain.clone()
    };
    let outcome = further_pretrain(
        model,
        documents,
        &pretrain,
        out_dir.map(|d| d.join("train_log.jsonl")).as_deref(),
    )
    .map_err(|e| e.in_stage("further_pretrain"))?;
    if let Some(dir) = out_dir {
        outcome.model.save(&dir.join("model"), manifest)?;
    }
    Ok(outcome)
}

/// Probe set, refinement and further pre-training in sequence. Artifacts
/// are written under `out_dir` when given.
pub fn run_rcmp(
    model: &TransformerLm,
    encoder: &dyn LanguageModel,
    dataset: &RecDataset,
    corpus: &GeneralCorpus,
    pack: &CompiledPack,
    config: &RcmpConfig,
    out_dir: Option<&Path>,
) -> Result<RcmpOutcome> {
    let Refinement { refined, manifest } = refine_for_dataset(model, encoder, dataset, corpus, pack, config, out_dir)?;
    let outcome = pretrain_on_refined(model, &refined.texts(), config, &manifest, out_dir)?;
    Ok(RcmpOutcome {
        model: outcome.model,
        refined,
        log: outcome.log,
        manifest,
    })
}
