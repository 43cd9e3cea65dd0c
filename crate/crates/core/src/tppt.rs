//! Transferable prompt pre-training: keyword domain prompts, a soft task
//! prompt trained on source domains, and prefix assembly for the target.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Interaction, Part, RecDataset};
use crate::eval::{auc, gauc, ScoredRecord, UndefinedUsers};
use crate::lm::{LanguageModel, PrefixExample, PrefixVectors, SentimentTargets};
use crate::prompting::{CompiledPack, TemplateMode, UserItemContext};
use crate::scorer::{score_dataset, Method, ScoreFormula, ScoreOptions};
use crate::{util, Error, Result};

pub const DOMAIN_LENGTHS: [usize; 5] = [5, 10, 50, 100, 200];
pub const TASK_LENGTHS: [usize; 2] = [10, 50];
/// Size of the frequent-word pool used to initialize task prompts.
pub const INIT_POOL: usize = 5000;

/// Lower-cased alphanumeric runs containing at least one letter.
pub fn terms(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.chars().any(char::is_alphabetic))
        .map(str::to_lowercase)
}

/// One pseudo-document per dataset: every verbalized item profile.
pub fn pseudo_document(dataset: &RecDataset, pack: &CompiledPack) -> Result<String> {
    if dataset.items().is_empty() {
        return Err(Error::invalid(format!(
            "dataset `{}` has no item profiles",
            dataset.name()
        )));
    }
    let texts: Vec<String> = dataset
        .items()
        .iter()
        .map(|i| pack.item_text(i))
        .collect::<Result<_>>()?;
    Ok(texts.join(" "))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainPrompt {
    pub dataset: String,
    pub keywords: Vec<String>,
    pub scores: Vec<f64>,
}

impl DomainPrompt {
    pub fn len(&self) -> usize {
        self.keywords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keywords.is_empty()
    }

    pub fn empty(dataset: impl Into<String>) -> Self {
        Self {
            dataset: dataset.into(),
            keywords: vec![],
            scores: vec![],
        }
    }

    pub fn truncated(&self, length: usize) -> Self {
        let n = length.min(self.len());
        Self {
            dataset: self.dataset.clone(),
            keywords: self.keywords[..n].to_vec(),
            scores: self.scores[..n].to_vec(),
        }
    }

    /// Each keyword as the mean of its sub-token input embeddings.
    pub fn vectors(&self, model: &dyn LanguageModel) -> Result<PrefixVectors> {
        let dim = model.info().dim;
        let mut rows = Array2::zeros((self.len(), dim));
        for (r, word) in self.keywords.iter().enumerate() {
            let ids = model.tokenizer().encode(word);
            if ids.is_empty() {
                return Err(Error::Vocabulary {
                    word: word.clone(),
                    reason: "tokenizes to nothing".into(),
                });
            }
            let emb = model.token_embeddings(&ids)?;
            rows.row_mut(r)
                .assign(&emb.mean_axis(ndarray::Axis(0)).expect("nonempty"));
        }
        PrefixVectors::new(rows)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        util::write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        util::read_json(path)
    }
}

/// Term frequency counted in the target document; smoothed inverse
/// document frequency `ln((1 + N) / (1 + df)) + 1` over all documents.
pub fn tfidf_keywords(target: &str, background: &[&str], length: usize) -> Vec<(String, f64)> {
    let mut tf: BTreeMap<String, usize> = BTreeMap::new();
    for t in terms(target) {
        *tf.entry(t).or_default() += 1;
    }
    let others: Vec<BTreeSet<String>> = background.iter().map(|d| terms(d).collect()).collect();
    let n = (1 + background.len()) as f64;
    let mut scored: Vec<(String, f64)> = tf
        .into_iter()
        .map(|(term, count)| {
            let df = 1 + others.iter().filter(|d| d.contains(&term)).count();
            let idf = ((1.0 + n) / (1.0 + df as f64)).ln() + 1.0;
            (term, count as f64 * idf)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(length);
    scored
}

pub fn extract_domain_prompt(
    target: (&RecDataset, &CompiledPack),
    background: &[(&RecDataset, &CompiledPack)],
    length: usize,
) -> Result<DomainPrompt> {
    if background.is_empty() {
        return Err(Error::invalid("domain prompt extraction needs background datasets"));
    }
    let doc = pseudo_document(target.0, target.1)?;
    let others: Vec<String> = background
        .iter()
        .map(|(d, p)| pseudo_document(d, p))
        .collect::<Result<_>>()?;
    let refs: Vec<&str> = others.iter().map(String::as_str).collect();
    let (keywords, scores) = tfidf_keywords(&doc, &refs, length).into_iter().unzip();
    Ok(DomainPrompt {
        dataset: target.0.name().to_string(),
        keywords,
        scores,
    })
}

/// What the learning-rate schedule did after one validation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleEvent {
    Continue,
    Reduced,
    Stop,
}

/// Halves the learning rate after two consecutive validation declines and
/// stops at the third reduction or at the step limit. A decline is a
/// strictly lower value than the previous validation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSchedule {
    pub optimizer: String,
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub reduce_factor: f64,
    pub declines_to_reduce: usize,
    pub max_reductions: usize,
    pub declines: usize,
    pub reductions: usize,
    pub last: Option<f64>,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        Self {
            optimizer: "adamw".into(),
            lr: 1e-4,
            batch_size: 64,
            max_steps: 50_000,
            reduce_factor: 0.5,
            declines_to_reduce: 2,
            max_reductions: 3,
            declines: 0,
            reductions: 0,
            last: None,
        }
    }
}

impl TrainingSchedule {
    pub fn observe(&mut self, value: f64) -> ScheduleEvent {
        let declined = self.last.is_some_and(|l| value < l);
        self.last = Some(value);
        if !declined {
            self.declines = 0;
            return ScheduleEvent::Continue;
        }
        self.declines += 1;
        if self.declines < self.declines_to_reduce {
            return ScheduleEvent::Continue;
        }
        self.declines = 0;
        self.reductions += 1;
        if self.reductions >= self.max_reductions {
            return ScheduleEvent::Stop;
        }
        self.lr *= self.reduce_factor;
        ScheduleEvent::Reduced
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub mean_loss: f64,
    pub validation: f64,
    pub per_source: BTreeMap<String, f64>,
    pub lr: f64,
    pub event: ScheduleEvent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskPromptManifest {
    pub rows: usize,
    pub dim: usize,
    pub model: String,
    pub seed: u64,
    pub init_tokens: Vec<String>,
    pub target: Option<String>,
    pub sources: Vec<String>,
    pub pack_hashes: BTreeMap<String, String>,
    pub domain_lengths: BTreeMap<String, usize>,
    pub schedule: Option<TrainingSchedule>,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_validation: Option<f64>,
    pub steps: usize,
    pub weights_sha256: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskPrompt {
    pub vectors: PrefixVectors,
    pub manifest: TaskPromptManifest,
}

impl TaskPrompt {
    /// Writes `task_prompt.bin` (row-major little-endian f64) and
    /// `task_prompt.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("task_prompt.bin");
        let mut w = util::create(&path)?;
        for v in self.vectors.rows().iter() {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        util::write_json(&dir.join("task_prompt.json"), &self.manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: TaskPromptManifest = util::read_json(&dir.join("task_prompt.json"))?;
        let path = dir.join("task_prompt.bin");
        let mut bytes = Vec::new();
        util::open(&path)?
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&path, e))?;
        if bytes.len() != manifest.rows * manifest.dim * 8 {
            return Err(Error::invalid(format!(
                "{}: expected {}x{} values",
                path.display(),
                manifest.rows,
                manifest.dim
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let rows =
            Array2::from_shape_vec((manifest.rows, manifest.dim), values).map_err(|e| Error::invalid(e.to_string()))?;
        Ok(Self {
            vectors: PrefixVectors::new(rows)?,
            manifest,
        })
    }
}

/// Whole-word alphabetic vocabulary entries, in vocabulary order, capped at
/// [`INIT_POOL`].
pub fn init_pool(model: &dyn LanguageModel) -> Vec<u32> {
    let tok = model.tokenizer();
    tok.tokens()
        .iter()
        .enumerate()
        .filter(|(id, t)| !tok.is_special(*id as u32) && !t.is_empty() && t.chars().all(char::is_alphabetic))
        .map(|(id, _)| id as u32)
        .take(INIT_POOL)
        .collect()
}

pub fn init_task_prompt(model: &dyn LanguageModel, length: usize, seed: u64) -> Result<TaskPrompt> {
    if length == 0 {
        return Err(Error::invalid("task prompt length must be at least 1"));
    }
    let info = model.info();
    if length + 3 > info.max_len {
        return Err(Error::TooLong {
            tokens: 3,
            prefix: length,
            budget: info.max_len,
        });
    }
    let pool = init_pool(model);
    if pool.is_empty() {
        return Err(Error::invalid(
            "vocabulary has no whole-word entries to initialize from",
        ));
    }
    let mut rng = util::sub_rng(seed, "task-prompt-init");
    let ids: Vec<u32> = if pool.len() >= length {
        pool.choose_multiple(&mut rng, length).copied().collect()
    } else {
        (0..length).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    };
    let rows = model.token_embeddings(&ids)?;
    Ok(TaskPrompt {
        vectors: PrefixVectors::new(rows)?,
        manifest: TaskPromptManifest {
            rows: length,
            dim: info.dim,
            model: info.id.clone(),
            seed,
            init_tokens: ids
                .iter()
                .map(|&i| model.tokenizer().token(i).unwrap_or_default().to_string())
                .collect(),
            ..Default::default()
        },
    })
}

/// Task rows followed by domain keyword rows.
pub fn assemble_prefix(task: &TaskPrompt, domain: &PrefixVectors) -> Result<PrefixVectors> {
    PrefixVectors::concat(&[&task.vectors, domain])
}

/// Prefix for scoring `context`, checked against the model's length budget.
pub fn assemble_prefixed_input<'a>(
    task: &TaskPrompt,
    domain: &DomainPrompt,
    context: &'a UserItemContext,
    model: &dyn LanguageModel,
) -> Result<(PrefixVectors, &'a UserItemContext)> {
    let prefix = assemble_prefix(task, &domain.vectors(model)?)?;
    prefix.check_dim(model.info())?;
    let tokens = model.tokenizer().encode(&context.text).len() + 2;
    if tokens + prefix.len() > model.info().max_len {
        return Err(Error::TooLong {
            tokens,
            prefix: prefix.len(),
            budget: model.info().max_len,
        });
    }
    Ok((prefix, context))
}

/// A source domain for task-prompt training.
pub struct PromptSource<'a> {
    pub dataset: &'a RecDataset,
    pub split: &'a DatasetSplit,
    pub pack: &'a CompiledPack,
    pub domain: &'a DomainPrompt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TpptConfig {
    pub prompt_len: usize,
    pub schedule: TrainingSchedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TpptConfig {
    fn default() -> Self {
        Self {
            prompt_len: 10,
            schedule: TrainingSchedule::default(),
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

struct Adam {
    m: Array2<f64>,
    v: Array2<f64>,
    t: i32,
}

impl Adam {
    fn step(&mut self, p: &mut Array2<f64>, g: &Array2<f64>, lr: f64, c: &TpptConfig) {
        self.t += 1;
        self.m = &self.m * c.beta1 + g * (1.0 - c.beta1);
        self.v = &self.v * c.beta2 + &(g * g) * (1.0 - c.beta2);
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        ndarray::Zip::from(p).and(&self.m).and(&self.v).for_each(|p, &m, &v| {
            *p -= lr * ((m / bc1) / ((v / bc2).sqrt() + c.eps) + c.weight_decay * *p);
        });
    }
}

struct PreparedSource<'a> {
    name: String,
    source: &'a PromptSource<'a>,
    domain: PrefixVectors,
    targets: SentimentTargets,
    pool: Vec<PrefixExample>,
    order: Vec<usize>,
    cursor: usize,
    valid: Vec<&'a Interaction>,
}

fn labelled(it: &Interaction, dataset: &RecDataset) -> Result<bool> {
    it.label.ok_or_else(|| {
        Error::invalid(format!(
            "dataset `{}`: interaction ({}, {}) is not binarized",
            dataset.name(),
            it.user_id,
            it.item_id
        ))
    })
}

fn prepare<'a>(model: &dyn LanguageModel, source: &'a PromptSource<'a>) -> Result<PreparedSource<'a>> {
    let ds = source.dataset;
    if source.domain.dataset != ds.name() {
        return Err(Error::invalid(format!(
            "domain prompt for `{}` paired with source `{}`",
            source.domain.dataset,
            ds.name()
        )));
    }
    let valid_set: BTreeSet<usize> = source.split.part(Part::Valid).iter().copied().collect();
    let mut pool = Vec::new();
    for (k, it) in ds.interactions().iter().enumerate() {
        if valid_set.contains(&k) {
            continue;
        }
        let user = ds.user(&it.user_id).expect("checked references");
        let item = ds.item(&it.item_id).expect("checked references");
        let ctx = source.pack.render(user, item, TemplateMode::Masked)?;
        pool.push(PrefixExample {
            text: ctx.text,
            label: labelled(it, ds)?,
        });
    }
    if pool.is_empty() {
        return Err(Error::invalid(format!(
            "source `{}` has no training interactions",
            ds.name()
        )));
    }
    let valid: Vec<&Interaction> = source.split.interactions(ds, Part::Valid).collect();
    for it in &valid {
        labelled(it, ds)?;
    }
    Ok(PreparedSource {
        name: ds.name().to_string(),
        source,
        domain: source.domain.vectors(model)?,
        targets: SentimentTargets::resolve(model.tokenizer(), source.pack.vocab(), source.pack.pack.multi_token)?,
        order: (0..pool.len()).collect(),
        cursor: pool.len(),
        pool,
        valid,
    })
}

/// Validation score of one source: GAUC, else AUC when no user has both
/// classes, else 0.5.
fn validate_source(model: &dyn LanguageModel, src: &PreparedSource, prefix: &PrefixVectors) -> Result<f64> {
    if src.valid.is_empty() {
        return Ok(0.5);
    }
    let run = score_dataset(
        Some(model),
        src.source.dataset,
        &src.valid,
        src.source.pack,
        &ScoreOptions {
            method: Method::PromptRec,
            formula: ScoreFormula::Softmax,
            batch_size: 32,
            prefix: Some(prefix.clone()),
            fail_fast: true,
            ..Default::default()
        },
    )?;
    let records: Vec<ScoredRecord> = run
        .scores
        .iter()
        .zip(&src.valid)
        .map(|(s, it)| ScoredRecord {
            user_id: s.user_id.clone(),
            item_id: s.item_id.clone(),
            score: s.value,
            label: it.label.expect("checked"),
        })
        .collect();
    if let Ok(r) = gauc(&records, UndefinedUsers::Exclude) {
        return Ok(r.gauc);
    }
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.label).collect();
    Ok(auc(&scores, &labels)?.unwrap_or(0.5))
}

/// Trains a task prompt on the sources with frozen model weights and
/// returns the checkpoint with the best mean validation score. Each step
/// draws one source uniformly at random and a batch from its pool; an epoch
/// ends once as many examples as the pools hold have been drawn.
pub fn train_task_prompt(
    model: &dyn LanguageModel,
    sources: &[PromptSource],
    target: Option<&str>,
    config: &TpptConfig,
) -> Result<TaskPrompt> {
    if sources.is_empty() {
        return Err(Error::invalid("task-prompt training needs at least one source"));
    }
    if let Some(t) = target {
        if let Some(s) = sources.iter().find(|s| s.dataset.name() == t) {
            return Err(Error::invalid(format!(
                "source `{}` is the target domain; training must leave it out",
                s.dataset.name()
            )));
        }
    }
    let names: BTreeSet<&str> = sources.iter().map(|s| s.dataset.name()).collect();
    if names.len() != sources.len() {
        return Err(Error::invalid("source datasets must be distinct"));
    }
    if config.schedule.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let weights_before = model.weights_hash()?;
    let mut prepared: Vec<PreparedSource> = sources.iter().map(|s| prepare(model, s)).collect::<Result<_>>()?;
    let epoch_size: usize = prepared.iter().map(|s| s.pool.len()).sum();

    let mut prompt = init_task_prompt(model, config.prompt_len, config.seed)?;
    let mut params = prompt.vectors.rows().clone();
    let mut adam = Adam {
        m: Array2::zeros(params.dim()),
        v: Array2::zeros(params.dim()),
        t: 0,
    };
    let mut schedule = config.schedule.clone();
    let mut rng = util::sub_rng(config.seed, "task-prompt-batches");
    let mut trace = Vec::new();
    let mut best: Option<(f64, f64, usize, Array2<f64>)> = None;
    let mut drawn = 0usize;
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;

    while step < schedule.max_steps {
        step += 1;
        let pick = rng.random_range(0..prepared.len());
        let src = &mut prepared[pick];
        let mut batch = Vec::with_capacity(schedule.batch_size);
        for _ in 0..schedule.batch_size {
            if src.cursor == src.order.len() {
                src.order.shuffle(&mut rng);
                src.cursor = 0;
            }
            batch.push(src.pool[src.order[src.cursor]].clone());
            src.cursor += 1;
        }
        drawn += batch.len();
        let task = PrefixVectors::new(params.clone())?;
        let prefix = PrefixVectors::concat(&[&task, &src.domain])?;
        let lg = model.prefix_loss_grad(&batch, &src.targets, &prefix)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
        epoch_losses.push(lg.loss);
        let grad = lg.grad.slice(ndarray::s![..config.prompt_len, ..]).to_owned();
        adam.step(&mut params, &grad, schedule.lr, config);

        let epoch_end = drawn >= epoch_size;
        if !epoch_end && step < schedule.max_steps {
            continue;
        }
        drawn = drawn.saturating_sub(epoch_size);
        let task = PrefixVectors::new(params.clone())?;
        let mut per_source = BTreeMap::new();
        for s in &prepared {
            let prefix = PrefixVectors::concat(&[&task, &s.domain])?;
            per_source.insert(s.name.clone(), validate_source(model, s, &prefix)?);
        }
        let validation = per_source.values().sum::<f64>() / per_source.len() as f64;
        let epoch = trace.len() + 1;
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len() as f64;
        // Equal validation scores go to the lower training loss.
        if best
            .as_ref()
            .is_none_or(|(b, l, _, _)| validation > *b || (validation == *b && mean_loss < *l))
        {
            best = Some((validation, mean_loss, epoch, params.clone()));
        }
        let lr = schedule.lr;
        let event = schedule.observe(validation);
        log::info!("task prompt epoch {epoch} step {step}: validation {validation:.4}, lr {lr:e}, {event:?}");
        trace.push(EpochRecord {
            epoch,
            step,
            mean_loss,
            validation,
            per_source,
            lr,
            event,
        });
        epoch_losses.clear();
        if event == ScheduleEvent::Stop {
            break;
        }
    }

    if model.weights_hash()? != weights_before {
        return Err(Error::invalid("model weights changed during task-prompt training"));
    }
    let (best_validation, _, best_epoch, best_params) = best.expect("at least one validation");
    prompt.vectors = PrefixVectors::new(best_params)?;
    let m = &mut prompt.manifest;
    m.target = target.map(str::to_string);
    m.sources = prepared.iter().map(|s| s.name.clone()).collect();
    m.pack_hashes = prepared
        .iter()
        .map(|s| (s.name.clone(), s.source.pack.hash.clone()))
        .collect();
    m.domain_lengths = prepared.iter().map(|s| (s.name.clone(), s.domain.len())).collect();
    m.schedule = Some(schedule);
    m.trace = trace;
    m.best_epoch = Some(best_epoch);
    m.best_validation = Some(best_validation);
    m.steps = step;
    m.weights_sha256 = Some(weights_before);
    Ok(prompt)
}

/// Mean training loss of a fixed prompt on the given examples.
pub fn prompt_loss(
    model: &dyn LanguageModel,
    task: &TaskPrompt,
    domain: &PrefixVectors,
    examples: &[PrefixExample],
    targets: &SentimentTargets,
) -> Result<f64> {
    Ok(model
        .prefix_loss_grad(examples, targets, &assemble_prefix(task, domain)?)?
        .loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureDef, FeatureKind, FeatureSchema, FeatureValue, Profile};
    use crate::lm::{StubModel, WordPieceTokenizer};
    use crate::prompting::PromptPack;
    use proptest::prelude::*;

    /// Independent schedule rules for comparison.
    fn reference_trace(values: &[f64]) -> Vec<(f64, bool)> {
        let (mut lr, mut run, mut cuts, mut prev) = (1e-4, 0, 0, f64::NAN);
        let mut out = Vec::new();
        for &v in values {
            if v < prev {
                run += 1;
            } else {
                run = 0;
            }
            prev = v;
            let mut stop = false;
            if run == 2 {
                run = 0;
                cuts += 1;
                if cuts == 3 {
                    stop = true;
                } else {
                    lr /= 2.0;
                }
            }
            out.push((lr, stop));
            if stop {
                break;
            }
        }
        out
    }

    #[test]
    fn schedule_halves_after_two_declines_and_stops_at_third_cut() {
        let mut s = TrainingSchedule::default();
        assert_eq!(s.observe(0.60), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.58), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.57), ScheduleEvent::Reduced);
        assert_eq!(s.lr, 5e-5);
        assert_eq!(s.observe(0.59), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.50), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.40), ScheduleEvent::Reduced);
        assert_eq!(s.lr, 2.5e-5);
        assert_eq!(s.observe(0.30), ScheduleEvent::Continue);
        assert_eq!(s.observe(0.20), ScheduleEvent::Stop);
    }

    proptest! {
        #[test]
        fn schedule_matches_reference(values in proptest::collection::vec(0u8..6, 0..40)) {
            let values: Vec<f64> = values.iter().map(|&v| v as f64 / 10.0).collect();
            let mut s = TrainingSchedule::default();
            let mut got = Vec::new();
            for &v in &values {
                let e = s.observe(v);
                got.push((s.lr, e == ScheduleEvent::Stop));
                if e == ScheduleEvent::Stop {
                    break;
                }
            }
            prop_assert_eq!(got, reference_trace(&values));
        }

        #[test]
        fn tfidf_matches_brute_force(
            docs in proptest::collection::vec(proptest::collection::vec(0u8..12, 0..30), 2..5),
            length in 1usize..8,
        ) {
            let text = |d: &Vec<u8>| d.iter().map(|w| format!("t{}", (b'a' + w) as char)).collect::<Vec<_>>().join(" ");
            let texts: Vec<String> = docs.iter().map(text).collect();
            let bg: Vec<&str> = texts[1..].iter().map(String::as_str).collect();
            let got = tfidf_keywords(&texts[0], &bg, length);
            let n = docs.len() as f64;
            let mut expect: Vec<(String, f64)> = Vec::new();
            for w in 0u8..12 {
                let tf = docs[0].iter().filter(|&&x| x == w).count();
                if tf == 0 {
                    continue;
                }
                let df = docs.iter().filter(|d| d.contains(&w)).count() as f64;
                expect.push((format!("t{}", (b'a' + w) as char), tf as f64 * (((1.0 + n) / (1.0 + df)).ln() + 1.0)));
            }
            expect.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            expect.truncate(length);
            prop_assert_eq!(got.len(), expect.len());
            for (g, e) in got.iter().zip(&expect) {
                prop_assert_eq!(&g.0, &e.0);
                prop_assert!((g.1 - e.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tfidf_hand_counted() {
        // Target: apple x3, pear x2, fig x1, kiwi x1. Background: "pear fig", "fig plum".
        let got = tfidf_keywords("apple pear apple fig apple pear kiwi", &["pear fig", "fig plum"], 5);
        let idf = |df: f64| (4.0 / (1.0 + df)).ln() + 1.0;
        let expect = [
            ("apple", 3.0 * idf(1.0)),
            ("pear", 2.0 * idf(2.0)),
            ("kiwi", idf(1.0)),
            ("fig", idf(3.0)),
        ];
        assert_eq!(got.len(), 4);
        for ((w, s), (ew, es)) in got.iter().zip(expect) {
            assert_eq!(w, ew);
            assert!((s - es).abs() < 1e-12);
        }
        // A shared term never outranks an equally frequent exclusive one.
        let tie = tfidf_keywords("shared only", &["shared"], 2);
        assert_eq!(tie[0].0, "only");
    }

    const PACK: &str = r#"
name = "synthetic"
version = "1"

[templates]
masked = "a {item.kind} thing . [MASK] ."
causal = "a {item.kind} thing [MASK]"
user_profile = "someone"
item_profile = "a {item.kind} thing"

[vocab]
positive = ["good"]
negative = ["bad"]
"#;

    fn synthetic(name: &str, n: usize) -> (RecDataset, CompiledPack) {
        let schema = FeatureSchema::new(
            vec![FeatureDef::new("who", FeatureKind::Discrete)],
            vec![FeatureDef::new("kind", FeatureKind::Discrete)],
        )
        .unwrap();
        let users: Vec<Profile> = (0..10)
            .map(|u| Profile {
                id: format!("u{u}"),
                values: vec![FeatureValue::Text("x".into())],
            })
            .collect();
        let items: Vec<Profile> = ["sunny", "gloomy"]
            .iter()
            .map(|k| Profile {
                id: k.to_string(),
                values: vec![FeatureValue::Text(k.to_string())],
            })
            .collect();
        let interactions = (0..n)
            .map(|k| Interaction {
                user_id: format!("u{}", k % 10),
                item_id: ["sunny", "gloomy"][(k / 10) % 2].into(),
                raw_label: None,
                label: Some((k / 10) % 2 == 0),
            })
            .collect();
        let ds = RecDataset::new(name, schema.clone(), users, items, interactions).unwrap();
        let pack = PromptPack::from_toml_str(PACK).unwrap().compile(&schema).unwrap();
        (ds, pack)
    }

    fn model() -> StubModel {
        let tok = WordPieceTokenizer::build(&["a sunny gloomy thing good bad x someone . the and"], 0).unwrap();
        let v = tok.vocab_size();
        let emb = Array2::from_shape_fn((v, 6), |(i, j)| (((i * 13 + j * 7) % 17) as f64 / 8.0 - 1.0) * 0.5);
        StubModel::new("diff-stub", tok, 6)
            .with_token_embeddings(emb)
            .differentiable()
    }

    #[test]
    fn init_rows_come_from_the_embedding_table() {
        let m = model();
        let a = init_task_prompt(&m, 4, 9).unwrap();
        assert_eq!(a, init_task_prompt(&m, 4, 9).unwrap());
        assert_eq!(a.vectors.rows().dim(), (4, 6));
        let table = m
            .token_embeddings(&(0..m.info().vocab_size as u32).collect::<Vec<_>>())
            .unwrap();
        for row in a.vectors.rows().rows() {
            assert!(table.rows().into_iter().any(|t| t == row));
        }
        for w in &a.manifest.init_tokens {
            assert!(w.chars().all(char::is_alphabetic));
        }
        assert!(matches!(init_task_prompt(&m, 600, 0), Err(Error::TooLong { .. })));
    }

    #[test]
    fn prefix_order_and_length() {
        let m = model();
        let (ds, pack) = synthetic("s", 20);
        let task = init_task_prompt(&m, 3, 1).unwrap();
        let ctx = pack
            .render(&ds.users()[0], &ds.items()[0], TemplateMode::Masked)
            .unwrap();
        let domain = DomainPrompt {
            dataset: "s".into(),
            keywords: vec!["sunny".into(), "gloomy".into()],
            scores: vec![2.0, 1.0],
        };
        let (prefix, _) = assemble_prefixed_input(&task, &domain, &ctx, &m).unwrap();
        assert_eq!(prefix.len(), 5);
        assert_eq!(prefix.rows().slice(ndarray::s![..3, ..]), task.vectors.rows());
        let (alone, _) = assemble_prefixed_input(&task, &DomainPrompt::empty("s"), &ctx, &m).unwrap();
        assert_eq!(&alone, &task.vectors);
        let via_scorer = m.mask_logprobs(&ctx.text, Some(&prefix)).unwrap();
        let rows = PrefixVectors::concat(&[&task.vectors, &domain.vectors(&m).unwrap()]).unwrap();
        assert_eq!(via_scorer, m.mask_logprobs(&ctx.text, Some(&rows)).unwrap());
    }

    #[test]
    fn separable_source_loss_halves_within_200_steps() {
        let m = model();
        let (ds, pack) = synthetic("src", 400);
        let split = crate::data::partition_dataset(&ds, 0).unwrap();
        let domain = DomainPrompt::empty("src");
        let sources = [PromptSource {
            dataset: &ds,
            split: &split,
            pack: &pack,
            domain: &domain,
        }];
        let config = TpptConfig {
            prompt_len: 2,
            schedule: TrainingSchedule {
                lr: 0.05,
                batch_size: 16,
                max_steps: 200,
                ..Default::default()
            },
            weight_decay: 0.0,
            ..Default::default()
        };
        let before = m.weights_hash().unwrap();
        let trained = train_task_prompt(&m, &sources, Some("tgt"), &config).unwrap();
        assert_eq!(m.weights_hash().unwrap(), before);
        let trace = &trained.manifest.trace;
        assert!(!trace.is_empty());
        let examples: Vec<PrefixExample> = ds
            .interactions()
            .iter()
            .map(|it| PrefixExample {
                text: pack
                    .render(
                        ds.user(&it.user_id).unwrap(),
                        ds.item(&it.item_id).unwrap(),
                        TemplateMode::Masked,
                    )
                    .unwrap()
                    .text,
                label: it.label.unwrap(),
            })
            .collect();
        let targets = SentimentTargets::resolve(m.tokenizer(), pack.vocab(), pack.pack.multi_token).unwrap();
        let empty = PrefixVectors::empty(6);
        let init = init_task_prompt(&m, 2, 0).unwrap();
        let start = prompt_loss(&m, &init, &empty, &examples, &targets).unwrap();
        let end = prompt_loss(&m, &trained, &empty, &examples, &targets).unwrap();
        assert!(end <= 0.5 * start, "loss {start} -> {end}");
        assert_eq!(trained.manifest.sources, vec!["src".to_string()]);
        let again = train_task_prompt(&m, &sources, Some("tgt"), &config).unwrap();
        assert_eq!(again, trained);
    }

    #[test]
    fn leave_one_out_is_enforced() {
        let m = model();
        let (ds, pack) = synthetic("same", 400);
        let split = crate::data::partition_dataset(&ds, 0).unwrap();
        let domain = DomainPrompt::empty("same");
        let sources = [PromptSource {
            dataset: &ds,
            split: &split,
            pack: &pack,
            domain: &domain,
        }];
        let err = train_task_prompt(&m, &sources, Some("same"), &TpptConfig::default()).unwrap_err();
        assert!(err.to_string().contains("leave it out"));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model();
        let p = init_task_prompt(&m, 3, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(TaskPrompt::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn domain_prompt_from_item_profiles() {
        let (a, pa) = synthetic("a", 20);
        let (b, pb) = synthetic("b", 20);
        let d = extract_domain_prompt((&a, &pa), &[(&b, &pb)], 5).unwrap();
        assert_eq!(d.dataset, "a");
        assert!(d.len() <= 5);
        assert!(d.scores.windows(2).all(|w| w[0] >= w[1]));
        assert!(extract_domain_prompt((&a, &pa), &[], 5).is_err());
    }
}
