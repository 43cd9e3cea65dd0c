//! Config-driven experiments: prepare, optionally enhance, score, evaluate
//! and report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    binarize_labels, ingest_dataset, partition_dataset, DatasetSource, DatasetSplit, Interaction, Part, RecDataset,
};
use crate::eval::{
    aggregate_report, gauc, ExperimentReport, GaucReport, LatencyReport, ReportHeader, ScoredRecord, UndefinedUsers,
};
use crate::lm::{
    load_transformer, LanguageModel, LoadOptions, PrefixVectors, PretrainConfig, PretrainOutcome, SentimentTargets,
    TransformerLm,
};
use crate::prompting::{CompiledPack, PromptPack};
use crate::rcmp::{
    filter_general_corpus, pretrain_on_refined, read_raw_corpus, refine_for_dataset, AdmissionFilter, ConditionalMode,
    RcmpConfig, RefinedCorpus, Refinement,
};
use crate::scorer::{
    measure_scoring_latency, score_dataset, template_mode, CacheKey, Method, PreferenceScore, ScoreCache, ScoreFormula,
    ScoreOptions,
};
use crate::tppt::{extract_domain_prompt, train_task_prompt, DomainPrompt, PromptSource, TaskPrompt, TpptConfig};
use crate::{util, Error, Result};

pub const DATA_DIR_VAR: &str = "PROMPTREC_DATA_DIR";
pub const MODEL_DIR_VAR: &str = "PROMPTREC_MODEL_DIR";
pub const OUTPUT_DIR_VAR: &str = "PROMPTREC_OUTPUT_DIR";
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Enhancement {
    #[default]
    None,
    Rcmp,
    Tppt,
}

impl Enhancement {
    pub fn name(self) -> &'static str {
        match self {
            Enhancement::None => "none",
            Enhancement::Rcmp => "rcmp",
            Enhancement::Tppt => "tppt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    pub name: String,
    /// Column mapping, relative to the config file.
    pub source: PathBuf,
    /// Directory holding the raw files.
    #[serde(default = "current_dir")]
    pub data_dir: PathBuf,
    /// Prompt pack, relative to the config file.
    pub pack: PathBuf,
    /// Overrides the threshold shipped with the source.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn current_dir() -> PathBuf {
    PathBuf::from(".")
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    /// Checkpoint directory or `random:<preset>`.
    #[serde(default)]
    pub scorer: Option<String>,
    /// Sentence encoder used by corpus refinement.
    #[serde(default)]
    pub encoder: Option<String>,
    #[serde(default)]
    pub load: LoadOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RcmpSection {
    pub corpus: PathBuf,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_k")]
    pub probe_sample_size: usize,
    #[serde(default)]
    pub conditional: ConditionalMode,
    #[serde(default)]
    pub filter: AdmissionFilter,
    /// Keys overriding the size-dependent pre-training defaults.
    #[serde(default)]
    pub pretrain: Option<serde_json::Value>,
    #[serde(default)]
    pub seed: u64,
}

fn default_k() -> usize {
    10_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpptSection {
    pub sources: Vec<DatasetRef>,
    /// Several values form a grid; the best mean over seeds is reported.
    #[serde(default = "default_task_lengths")]
    pub prompt_lengths: Vec<usize>,
    #[serde(default = "default_domain_lengths")]
    pub domain_lengths: Vec<usize>,
    #[serde(default)]
    pub training: TpptConfig,
}

fn default_task_lengths() -> Vec<usize> {
    vec![10]
}

fn default_domain_lengths() -> Vec<usize> {
    vec![5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LatencySection {
    pub interactions: usize,
    pub warmup: usize,
    pub repetitions: usize,
}

impl Default for LatencySection {
    fn default() -> Self {
        Self {
            interactions: 64,
            warmup: 2,
            repetitions: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub enhancement: Enhancement,
    #[serde(default)]
    pub formula: ScoreFormula,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub undefined_users: UndefinedUsers,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    pub dataset: DatasetRef,
    #[serde(default)]
    pub model: ModelRef,
    #[serde(default)]
    pub rcmp: Option<RcmpSection>,
    #[serde(default)]
    pub tppt: Option<TpptSection>,
    #[serde(default)]
    pub latency: Option<LatencySection>,
}

fn default_seeds() -> Vec<u64> {
    DEFAULT_SEEDS.to_vec()
}

fn default_batch() -> usize {
    32
}

#[derive(Clone, Copy)]
enum PathKind {
    Config,
    Data,
    Model,
    Output,
}

fn resolve(path: &Path, kind: PathKind, base: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    let var = match kind {
        PathKind::Config => None,
        PathKind::Data => Some(DATA_DIR_VAR),
        PathKind::Model => Some(MODEL_DIR_VAR),
        PathKind::Output => Some(OUTPUT_DIR_VAR),
    };
    match var.and_then(std::env::var_os) {
        Some(root) => PathBuf::from(root).join(path),
        None => base.join(path),
    }
}

fn resolve_model(spec: &str, base: &Path) -> String {
    if spec.starts_with("random:") {
        return spec.to_string();
    }
    resolve(Path::new(spec), PathKind::Model, base).display().to_string()
}

impl DatasetRef {
    fn resolved(&self, base: &Path) -> Self {
        Self {
            name: self.name.clone(),
            source: resolve(&self.source, PathKind::Config, base),
            data_dir: resolve(&self.data_dir, PathKind::Data, base),
            pack: resolve(&self.pack, PathKind::Config, base),
            threshold: self.threshold,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    /// Parses a config and resolves its relative paths against the file's
    /// directory or the path environment overrides.
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config =
            toml::from_str::<Self>(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Ok(config.resolved(base))
    }

    pub fn resolved(&self, base: &Path) -> Self {
        let mut c = self.clone();
        c.output_dir = resolve(&self.output_dir, PathKind::Output, base);
        c.cache_dir = self.cache_dir.as_ref().map(|p| resolve(p, PathKind::Output, base));
        c.dataset = self.dataset.resolved(base);
        c.model.scorer = self.model.scorer.as_ref().map(|s| resolve_model(s, base));
        c.model.encoder = self.model.encoder.as_ref().map(|s| resolve_model(s, base));
        if let Some(r) = c.rcmp.as_mut() {
            r.corpus = resolve(&r.corpus, PathKind::Data, base);
        }
        if let Some(t) = c.tppt.as_mut() {
            t.sources = t.sources.iter().map(|s| s.resolved(base)).collect();
        }
        c
    }

    pub fn hash(&self) -> String {
        util::hash_json(self).expect("configs serialize")
    }

    /// Every violation at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.seeds.is_empty() {
            errs.push("seeds: at least one seed is required".to_string());
        }
        if self.batch_size == 0 {
            errs.push("batch_size must be positive".to_string());
        }
        if self.method.needs_model() && self.model.scorer.is_none() {
            errs.push(format!("method `{}` needs model.scorer", self.method.name()));
        }
        if self.enhancement != Enhancement::None && self.method != Method::PromptRec {
            errs.push(format!(
                "enhancement `{}` applies to method `promptrec` only",
                self.enhancement.name()
            ));
        }
        let mut files = vec![
            ("dataset.source", &self.dataset.source),
            ("dataset.pack", &self.dataset.pack),
        ];
        match self.enhancement {
            Enhancement::None => {}
            Enhancement::Rcmp => match &self.rcmp {
                None => errs.push("enhancement `rcmp` needs an [rcmp] section".into()),
                Some(r) => {
                    if self.model.encoder.is_none() {
                        errs.push("enhancement `rcmp` needs model.encoder".into());
                    }
                    if r.k == 0 {
                        errs.push("rcmp.k must be positive".into());
                    }
                    if r.probe_sample_size == 0 {
                        errs.push("rcmp.probe_sample_size must be positive".into());
                    }
                    if !(0.0..=1.0).contains(&r.filter.sample_rate) {
                        errs.push("rcmp.filter.sample_rate must lie in [0, 1]".into());
                    }
                    files.push(("rcmp.corpus", &r.corpus));
                }
            },
            Enhancement::Tppt => match &self.tppt {
                None => errs.push("enhancement `tppt` needs a [tppt] section".into()),
                Some(t) => {
                    if t.sources.is_empty() {
                        errs.push("tppt.sources: at least one source dataset is required".into());
                    }
                    for s in &t.sources {
                        if s.name == self.dataset.name {
                            errs.push(format!(
                                "tppt.sources contains the target `{}`; leave-one-out training excludes the target domain",
                                s.name
                            ));
                        }
                    }
                    let mut names: Vec<&str> = t.sources.iter().map(|s| s.name.as_str()).collect();
                    names.sort_unstable();
                    if names.windows(2).any(|w| w[0] == w[1]) {
                        errs.push("tppt.sources lists a dataset twice".into());
                    }
                    if t.prompt_lengths.is_empty() || t.prompt_lengths.contains(&0) {
                        errs.push("tppt.prompt_lengths must be nonempty and positive".into());
                    }
                    if t.domain_lengths.is_empty() {
                        errs.push("tppt.domain_lengths must be nonempty".into());
                    }
                    for s in &t.sources {
                        files.push(("tppt.sources.source", &s.source));
                        files.push(("tppt.sources.pack", &s.pack));
                    }
                }
            },
        }
        for (what, path) in files {
            if !path.exists() {
                errs.push(format!("{what}: {} does not exist", path.display()));
            }
        }
        for (what, spec) in [
            ("model.scorer", &self.model.scorer),
            ("model.encoder", &self.model.encoder),
        ] {
            if let Some(s) = spec {
                if !s.starts_with("random:") && !Path::new(s).exists() {
                    errs.push(format!("{what}: {s} does not exist"));
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// A binarized dataset with its compiled prompt pack.
#[derive(Clone, Debug)]
pub struct Domain {
    pub dataset: RecDataset,
    pub pack: CompiledPack,
    pub source_hash: String,
}

pub fn load_domain(r: &DatasetRef) -> Result<Domain> {
    let source = DatasetSource::from_toml_file(&r.source)?;
    let raw = ingest_dataset(&source, &r.data_dir)?;
    let threshold = r
        .threshold
        .or(source.threshold)
        .ok_or_else(|| Error::Config(vec![format!("dataset `{}` has no binarization threshold", r.name)]))?;
    let dataset = binarize_labels(&raw, threshold)?;
    if dataset.name() != r.name {
        return Err(Error::Config(vec![format!(
            "dataset name `{}` does not match source name `{}`",
            r.name,
            dataset.name()
        )]));
    }
    let pack = PromptPack::from_toml_file(&r.pack)?.compile(dataset.schema())?;
    pack.check_coverage(&dataset)?;
    Ok(Domain {
        dataset,
        pack,
        source_hash: util::hash_json(&source)?,
    })
}

fn test_records(domain: &Domain, split: &DatasetSplit) -> Vec<Interaction> {
    split.interactions(&domain.dataset, Part::Test).cloned().collect()
}

/// Texts covering the words a random-preset model must know.
fn vocab_texts(domain: &Domain) -> Result<Vec<String>> {
    let mut texts: Vec<String> = domain.pack.vocab().words().cloned().collect();
    texts.push(domain.pack.pack.templates.masked.clone());
    texts.push(domain.pack.pack.templates.causal.clone());
    for u in domain.dataset.users() {
        texts.push(domain.pack.user_text(u)?);
    }
    for i in domain.dataset.items() {
        texts.push(domain.pack.item_text(i)?);
    }
    Ok(texts)
}

pub fn load_scorer(spec: &str, options: &LoadOptions, domains: &[&Domain]) -> Result<TransformerLm> {
    let mut texts = Vec::new();
    for d in domains {
        texts.extend(vocab_texts(d)?);
    }
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    load_transformer(spec, options, &refs)
}

/// Progress record written next to the artifacts.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub completed: Vec<String>,
    pub artifacts: Vec<PathBuf>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
}

/// Task length, domain length and the per-seed prefixes of one grid cell.
type GridPrefixes = (usize, usize, BTreeMap<u64, PrefixVectors>);

/// Prepared state of one experiment: the target domain, its seeded splits,
/// and the artifact directory.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub target: Domain,
    pub splits: BTreeMap<u64, DatasetSplit>,
    pub manifest: RunManifest,
    hashes: BTreeMap<String, String>,
    /// Artifacts in the output directory come from this same config.
    reusable: bool,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = &config.output_dir;
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let config_hash = config.hash();
        util::write_json(
            &out.join("config.json"),
            &serde_json::json!({ "config_hash": config_hash, "config": config }),
        )?;
        let previous: Option<RunManifest> = util::read_json(&out.join("manifest.json")).ok();
        let reusable = previous.as_ref().is_some_and(|m| m.config_hash == config_hash);
        let mut manifest = match previous {
            Some(m) if reusable => RunManifest {
                failed_stage: None,
                error: None,
                ..m
            },
            _ => RunManifest {
                config_hash: config_hash.clone(),
                ..Default::default()
            },
        };
        let mut hashes = BTreeMap::from([("config".to_string(), config_hash)]);
        let mut splits = BTreeMap::new();
        let prepared = (|| -> Result<Domain> {
            let target = load_domain(&config.dataset)?;
            let data_dir = out.join("data");
            std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
            let snapshot = data_dir.join("dataset.jsonl");
            target.dataset.write_snapshot(&snapshot)?;
            manifest.artifacts.push(snapshot);
            for &seed in &config.seeds {
                let split = partition_dataset(&target.dataset, seed)?;
                let path = data_dir.join(format!("split_{seed}.jsonl"));
                split.write(&target.dataset, &path)?;
                manifest.artifacts.push(path);
                hashes.insert(format!("split_{seed}"), util::hash_json(&split)?);
                splits.insert(seed, split);
            }
            hashes.insert("dataset_source".into(), target.source_hash.clone());
            hashes.insert("pack".into(), target.pack.hash.clone());
            Ok(target)
        })();
        match prepared {
            Ok(target) => {
                manifest.completed.push("prepare".into());
                let mut exp = Self {
                    config: config.clone(),
                    target,
                    splits,
                    manifest,
                    hashes,
                    reusable,
                };
                exp.write_manifest()?;
                Ok(exp)
            }
            Err(e) => {
                manifest.failed_stage = Some("prepare".into());
                manifest.error = Some(e.to_string());
                util::write_json(&out.join("manifest.json"), &manifest)?;
                Err(e.in_stage("prepare"))
            }
        }
    }

    /// Runs `f` as a named stage, recording success or failure in the run
    /// manifest.
    fn stage<T>(&mut self, name: &'static str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        match f(self) {
            Ok(v) => {
                self.manifest.completed.push(name.into());
                self.write_manifest()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.failed_stage = Some(name.into());
                self.manifest.error = Some(e.to_string());
                self.write_manifest()?;
                Err(e.in_stage(name))
            }
        }
    }

    fn write_manifest(&mut self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        self.manifest.artifacts.retain(|a| seen.insert(a.clone()));
        util::write_json(&self.config.output_dir.join("manifest.json"), &self.manifest)
    }

    pub fn hashes(&self) -> &BTreeMap<String, String> {
        &self.hashes
    }

    pub fn load_scorer(&self, extra: &[&Domain]) -> Result<Option<TransformerLm>> {
        let Some(spec) = &self.config.model.scorer else {
            return Ok(None);
        };
        let mut domains = vec![&self.target];
        domains.extend_from_slice(extra);
        load_scorer(spec, &self.config.model.load, &domains).map(Some)
    }

    pub fn rcmp_dir(&self) -> PathBuf {
        self.config.output_dir.join("rcmp")
    }

    fn rcmp_config(&self, model: &TransformerLm) -> Result<(RcmpSection, RcmpConfig)> {
        let section = self
            .config
            .rcmp
            .clone()
            .ok_or_else(|| Error::Config(vec!["missing [rcmp]".into()]))?;
        let mut pretrain = serde_json::to_value(PretrainConfig::for_model(model.info().param_count))?;
        if let Some(serde_json::Value::Object(over)) = &section.pretrain {
            for (k, v) in over {
                pretrain[k] = v.clone();
            }
        }
        let config = RcmpConfig {
            k: section.k,
            probe_sample_size: section.probe_sample_size,
            conditional: section.conditional,
            seed: section.seed,
            pretrain: serde_json::from_value(pretrain)?,
        };
        Ok((section, config))
    }

    /// Probe set and corpus refinement, written under [`Self::rcmp_dir`].
    pub fn refine(&mut self, model: &TransformerLm) -> Result<Refinement> {
        let (section, config) = self.rcmp_config(model)?;
        let encoder_spec = self
            .config
            .model
            .encoder
            .clone()
            .ok_or_else(|| Error::Config(vec!["missing model.encoder".into()]))?;
        self.stage("refine_corpus", |exp| {
            let encoder = load_scorer(&encoder_spec, &LoadOptions::default(), &[&exp.target])?;
            let source = section.corpus.display().to_string();
            let corpus = filter_general_corpus(read_raw_corpus(&section.corpus)?, &source, &section.filter)?;
            let dir = exp.rcmp_dir();
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let r = refine_for_dataset(
                model,
                &encoder,
                &exp.target.dataset,
                &corpus,
                &exp.target.pack,
                &config,
                Some(&dir),
            )?;
            exp.hashes.insert("probe_set".into(), r.refined.probe_hash.clone());
            exp.manifest.artifacts.push(dir.join("refined.jsonl"));
            Ok(r)
        })
    }

    /// Further pre-training on the refined corpus found in
    /// [`Self::rcmp_dir`]; the model is saved to `rcmp/model`.
    pub fn pretrain(&mut self, model: &TransformerLm) -> Result<PretrainOutcome> {
        let (_, config) = self.rcmp_config(model)?;
        self.stage("pretrain", |exp| {
            let dir = exp.rcmp_dir();
            let docs = RefinedCorpus::read(&dir)?;
            let manifest: serde_json::Value = util::read_json(&dir.join("manifest.json"))?;
            let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
            let outcome = pretrain_on_refined(model, &texts, &config, &manifest, Some(&dir))?;
            exp.hashes.insert("rcmp_model".into(), outcome.model.weights_hash()?);
            exp.manifest.artifacts.push(dir.join("model"));
            Ok(outcome)
        })
    }

    /// The further pre-trained model left by an earlier run, if any.
    pub fn load_rcmp_model(&self) -> Result<Option<TransformerLm>> {
        let dir = self.rcmp_dir().join("model");
        if !dir.exists() {
            return Ok(None);
        }
        TransformerLm::load(&dir, &self.config.model.load).map(Some)
    }

    /// Corpus refinement and further pre-training of `model`, reusing the
    /// refined corpus or the retrained model of an earlier run.
    pub fn rcmp(&mut self, model: &TransformerLm) -> Result<TransformerLm> {
        if self.reusable {
            if let Some(m) = self.load_rcmp_model()? {
                log::info!("reusing {}", self.rcmp_dir().join("model").display());
                self.hashes.insert("rcmp_model".into(), m.weights_hash()?);
                return Ok(m);
            }
        }
        if !(self.reusable && self.rcmp_dir().join("refined.jsonl").exists()) {
            self.refine(model)?;
        }
        Ok(self.pretrain(model)?.model)
    }

    /// Source domains for prompt training.
    pub fn load_sources(&mut self) -> Result<Vec<Domain>> {
        let refs = self.config.tppt.as_ref().map(|t| t.sources.clone()).unwrap_or_default();
        self.stage("load_sources", |exp| {
            let domains: Vec<Domain> = refs.iter().map(load_domain).collect::<Result<_>>()?;
            for d in &domains {
                exp.hashes
                    .insert(format!("pack_{}", d.dataset.name()), d.pack.hash.clone());
            }
            Ok(domains)
        })
    }

    /// Domain prompts for the target and each source, each against all the
    /// other datasets.
    pub fn domain_prompts(&self, sources: &[Domain], length: usize) -> Result<BTreeMap<String, DomainPrompt>> {
        let all: Vec<&Domain> = std::iter::once(&self.target).chain(sources).collect();
        let mut out = BTreeMap::new();
        for (k, d) in all.iter().enumerate() {
            let background: Vec<(&RecDataset, &CompiledPack)> = all
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, o)| (&o.dataset, &o.pack))
                .collect();
            out.insert(
                d.dataset.name().to_string(),
                extract_domain_prompt((&d.dataset, &d.pack), &background, length)?,
            );
        }
        Ok(out)
    }

    /// Trains one task prompt on the sources for `seed`.
    pub fn train_prompt(
        &self,
        model: &dyn LanguageModel,
        sources: &[Domain],
        domains: &BTreeMap<String, DomainPrompt>,
        prompt_len: usize,
        seed: u64,
    ) -> Result<TaskPrompt> {
        let section = self
            .config
            .tppt
            .as_ref()
            .ok_or_else(|| Error::Config(vec!["missing [tppt]".into()]))?;
        let splits: Vec<DatasetSplit> = sources
            .iter()
            .map(|d| partition_dataset(&d.dataset, seed))
            .collect::<Result<_>>()?;
        let prompt_sources: Vec<PromptSource> = sources
            .iter()
            .zip(&splits)
            .map(|(d, split)| PromptSource {
                dataset: &d.dataset,
                split,
                pack: &d.pack,
                domain: &domains[d.dataset.name()],
            })
            .collect();
        let config = TpptConfig {
            prompt_len,
            seed,
            ..section.training.clone()
        };
        train_task_prompt(model, &prompt_sources, Some(self.target.dataset.name()), &config)
    }

    fn cache(&self) -> Option<ScoreCache> {
        self.config.cache_dir.as_ref().map(ScoreCache::new)
    }

    /// Scores the test split of `seed`, consulting the cache when enabled.
    pub fn score_seed(
        &self,
        model: Option<&dyn LanguageModel>,
        seed: u64,
        prefix: Option<&PrefixVectors>,
        variant: &str,
    ) -> Result<Vec<PreferenceScore>> {
        let split = &self.splits[&seed];
        let test = test_records(&self.target, split);
        let key = CacheKey {
            dataset: self.target.dataset.name().to_string(),
            split: self.hashes[&format!("split_{seed}")].clone(),
            model: match model {
                Some(m) => format!("{}#{}", m.info().id, m.weights_hash()?),
                None => "none".into(),
            },
            method: self.config.method,
            pack_hash: self.target.pack.hash.clone(),
            seed,
            variant: format!("{:?}/{variant}", self.config.formula),
        };
        let cache = self.cache();
        if let Some(hit) = cache.as_ref().map(|c| c.get(&key)).transpose()?.flatten() {
            return Ok(hit);
        }
        let refs: Vec<&Interaction> = test.iter().collect();
        let run = score_dataset(
            model,
            &self.target.dataset,
            &refs,
            &self.target.pack,
            &ScoreOptions {
                method: self.config.method,
                formula: self.config.formula,
                batch_size: self.config.batch_size,
                seed,
                prefix: prefix.cloned(),
                fail_fast: true,
            },
        )?;
        if let Some(c) = cache {
            c.put(&key, &run.scores)?;
        }
        Ok(run.scores)
    }

    pub fn evaluate_seed(&self, seed: u64, scores: &[PreferenceScore]) -> Result<GaucReport> {
        let test = test_records(&self.target, &self.splits[&seed]);
        if test.len() != scores.len() {
            return Err(Error::invalid(format!(
                "{} scores for {} test interactions",
                scores.len(),
                test.len()
            )));
        }
        let records: Vec<ScoredRecord> = test
            .iter()
            .zip(scores)
            .map(|(it, s)| {
                if it.user_id != s.user_id || it.item_id != s.item_id {
                    return Err(Error::invalid("scores are not aligned with the test split"));
                }
                Ok(ScoredRecord {
                    user_id: s.user_id.clone(),
                    item_id: s.item_id.clone(),
                    score: s.value,
                    label: it.label.expect("binarized"),
                })
            })
            .collect::<Result<_>>()?;
        let mut report = gauc(&records, self.config.undefined_users)?;
        report.seed = Some(seed);
        Ok(report)
    }

    fn scores_path(&self, variant: &str, seed: u64) -> PathBuf {
        self.config.output_dir.join(format!("scores_{variant}_{seed}.jsonl"))
    }

    fn latency_path(&self, variant: &str) -> PathBuf {
        self.config.output_dir.join(format!("latency_{variant}.json"))
    }

    /// Scores every seed with `model` and optional per-seed prefixes, then
    /// times the first seed's configuration when latency is requested.
    fn score_variant(
        &mut self,
        model: Option<&dyn LanguageModel>,
        prefixes: &BTreeMap<u64, PrefixVectors>,
        name: String,
        notes: Vec<String>,
    ) -> Result<Variant> {
        for seed in self.config.seeds.clone() {
            self.stage("score", |exp| {
                let scores = exp.score_seed(model, seed, prefixes.get(&seed), &name)?;
                let path = exp.scores_path(&name, seed);
                crate::scorer::write_scores(&path, None, &scores)?;
                exp.manifest.artifacts.push(path);
                Ok(())
            })?;
        }
        if let Some(m) = model {
            let first = prefixes.get(&self.config.seeds[0]);
            if let Some(latency) = self.latency(m, first)? {
                util::write_json(&self.latency_path(&name), &latency)?;
            }
        }
        Ok(Variant {
            name,
            model: model.map_or("none".into(), |m| m.info().id.clone()),
            notes,
            hashes: self.hashes.clone(),
        })
    }

    /// Scores the test split of every seed for each configuration the
    /// enhancement calls for; writes `variants.json` and one score file per
    /// (configuration, seed).
    pub fn score(&mut self) -> Result<Vec<Variant>> {
        let variants = match self.config.enhancement {
            Enhancement::None => {
                let scorer = self.load_scorer(&[])?;
                let model = scorer.as_ref().map(|m| m as &dyn LanguageModel);
                if let Some(m) = model {
                    self.hashes.insert("model".into(), m.weights_hash()?);
                }
                vec![self.score_variant(model, &BTreeMap::new(), "base".into(), vec![])?]
            }
            Enhancement::Rcmp => {
                let base = self.load_scorer(&[])?.expect("validated");
                self.hashes.insert("model".into(), base.weights_hash()?);
                let model = self.rcmp(&base)?;
                let kept = RefinedCorpus::read(&self.rcmp_dir())?.len();
                let notes = vec![format!("refined corpus: {kept} documents")];
                vec![self.score_variant(Some(&model), &BTreeMap::new(), "rcmp".into(), notes)?]
            }
            Enhancement::Tppt => {
                let sources = self.load_sources()?;
                let refs: Vec<&Domain> = sources.iter().collect();
                let model = self.load_scorer(&refs)?.expect("validated");
                self.hashes.insert("model".into(), model.weights_hash()?);
                let grid = self.tppt_prefixes(&model, &sources)?;
                let mut out = Vec::new();
                for (lt, ld, prefixes) in grid {
                    let notes = vec![format!("task prompt length {lt}, domain prompt length {ld}")];
                    out.push(self.score_variant(Some(&model), &prefixes, format!("tppt_lt{lt}_ld{ld}"), notes)?);
                }
                out
            }
        };
        util::write_json(&self.config.output_dir.join("variants.json"), &variants)?;
        Ok(variants)
    }

    /// Evaluates the score files left by [`Self::score`] and writes the
    /// report; with several configurations the best mean is reported.
    pub fn evaluate(&mut self) -> Result<ExperimentReport> {
        let path = self.config.output_dir.join("variants.json");
        let variants: Vec<Variant> = util::read_json(&path).map_err(|e| e.in_stage("evaluate"))?;
        let mut best: Option<ExperimentReport> = None;
        for v in &variants {
            let mut reports = Vec::new();
            for seed in self.config.seeds.clone() {
                let report = self.stage("evaluate", |exp| {
                    let scores = crate::scorer::read_scores(&exp.scores_path(&v.name, seed))?;
                    let r = exp.evaluate_seed(seed, &scores)?;
                    util::write_json(&exp.config.output_dir.join(format!("gauc_{}_{seed}.json", v.name)), &r)?;
                    Ok(r)
                })?;
                reports.push(report);
            }
            let latency_path = self.latency_path(&v.name);
            let latency = if latency_path.exists() {
                Some(util::read_json(&latency_path)?)
            } else {
                None
            };
            let mut header = self.header(&v.model, v.notes.clone());
            header.hashes.extend(v.hashes.clone());
            let report = aggregate_report(header, &reports, latency)?;
            if best.as_ref().is_none_or(|b| report.mean > b.mean) {
                best = Some(report);
            }
        }
        let report = best.ok_or_else(|| Error::invalid(format!("{}: no scored configurations", path.display())))?;
        self.finish(report)
    }

    fn latency(&mut self, model: &dyn LanguageModel, prefix: Option<&PrefixVectors>) -> Result<Option<LatencyReport>> {
        let Some(section) = self.config.latency.clone() else {
            return Ok(None);
        };
        if self.config.method != Method::PromptRec {
            return Ok(None);
        }
        self.stage("latency", |exp| {
            let seed = exp.config.seeds[0];
            let test = test_records(&exp.target, &exp.splits[&seed]);
            let mode = template_mode(model);
            let contexts = test
                .iter()
                .take(section.interactions)
                .map(|it| {
                    let d = &exp.target.dataset;
                    exp.target
                        .pack
                        .render(d.user(&it.user_id).unwrap(), d.item(&it.item_id).unwrap(), mode)
                })
                .collect::<Result<Vec<_>>>()?;
            let targets = SentimentTargets::resolve(
                model.tokenizer(),
                exp.target.pack.vocab(),
                exp.target.pack.pack.multi_token,
            )?;
            measure_scoring_latency(
                model,
                &contexts,
                &targets,
                prefix,
                exp.config.batch_size,
                section.warmup,
                section.repetitions,
            )
            .map(Some)
        })
    }

    fn header(&self, model: &str, notes: Vec<String>) -> ReportHeader {
        ReportHeader {
            dataset: self.target.dataset.name().to_string(),
            method: self.config.method.name().to_string(),
            model: model.to_string(),
            enhancement: self.config.enhancement.name().to_string(),
            hashes: self.hashes.clone(),
            notes,
        }
    }

    fn finish(&mut self, report: ExperimentReport) -> Result<ExperimentReport> {
        self.stage("report", |exp| {
            let out = &exp.config.output_dir;
            util::write_json(&out.join("report.json"), &report)?;
            let table = crate::eval::render_table(std::slice::from_ref(&report));
            std::fs::write(out.join("report.txt"), &table).map_err(|e| Error::io(out.join("report.txt"), e))?;
            Ok(report)
        })
    }

    /// Trains (or reloads) every task prompt of the grid without scoring.
    pub fn train_prompts(&mut self) -> Result<usize> {
        let sources = self.load_sources()?;
        let refs: Vec<&Domain> = sources.iter().collect();
        let model = self
            .load_scorer(&refs)?
            .ok_or_else(|| Error::Config(vec!["missing model.scorer".into()]))?;
        self.hashes.insert("model".into(), model.weights_hash()?);
        Ok(self.tppt_prefixes(&model, &sources)?.len() * self.config.seeds.len())
    }

    /// Per-seed prefixes (task prompt followed by the target's domain
    /// prompt) for every (task length, domain length) pair of the grid.
    fn tppt_prefixes(
        &mut self,
        model: &TransformerLm,
        sources: &[Domain],
    ) -> Result<Vec<GridPrefixes>> {
        let section = self
            .config
            .tppt
            .clone()
            .ok_or_else(|| Error::Config(vec!["missing [tppt]".into()]))?;
        let dir = self.config.output_dir.join("tppt");
        let weights = model.weights_hash()?;
        let mut grid = Vec::new();
        for &ld in &section.domain_lengths {
            let domains = self.stage("domain_prompts", |exp| {
                let d = exp.domain_prompts(sources, ld)?;
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for p in d.values() {
                    p.write(&dir.join(format!("domain_{}_{ld}.json", p.dataset)))?;
                }
                Ok(d)
            })?;
            let target_domain = domains[self.target.dataset.name()].vectors(model)?;
            for &lt in &section.prompt_lengths {
                let mut prefixes = BTreeMap::new();
                for seed in self.config.seeds.clone() {
                    let prompt = self.stage("train_prompt", |exp| {
                        let at = dir.join(format!("task_lt{lt}_ld{ld}_seed{seed}"));
                        if exp.reusable && at.join("task_prompt.json").exists() {
                            let p = TaskPrompt::load(&at)?;
                            if p.manifest.weights_sha256.as_deref() == Some(weights.as_str()) && p.manifest.seed == seed
                            {
                                log::info!("reusing task prompt {}", at.display());
                                return Ok(p);
                            }
                        }
                        let p = exp.train_prompt(model, sources, &domains, lt, seed)?;
                        p.save(&at)?;
                        exp.manifest.artifacts.push(at);
                        Ok(p)
                    })?;
                    self.hashes.insert(
                        format!("task_prompt_lt{lt}_ld{ld}_seed{seed}"),
                        util::hash_json(&prompt.vectors.rows().iter().map(|v| v.to_bits()).collect::<Vec<_>>())?,
                    );
                    prefixes.insert(seed, PrefixVectors::concat(&[&prompt.vectors, &target_domain])?);
                }
                grid.push((lt, ld, prefixes));
            }
        }
        Ok(grid)
    }
}

/// One scored configuration of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: String,
    pub notes: Vec<String>,
    pub hashes: BTreeMap<String, String>,
}

/// Runs the whole pipeline for one config, reusing stage artifacts left in
/// the output directory by an earlier run of the same config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut exp = Experiment::prepare(config)?;
    exp.score()?;
    exp.evaluate()
}
