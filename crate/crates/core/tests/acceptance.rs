//! One test per acceptance criterion. Each prints a single
//! `criterion N name: PASS|FAIL (details)` line to stderr, bypassing the
//! test harness capture, and then asserts the verdict.
//!
//! Criteria 5 to 8 need the public datasets and checkpoints laid out under
//! `$PROMPTREC_ASSETS` (default `<workspace>/assets`):
//!
//! ```text
//! datasets/{ml-100k,coupon,restaurant}/...    raw files as distributed
//! datasets/c4-sample/en.jsonl                 >= 100K general-corpus documents
//! models/{bert-tiny,bert-small,bert-base-uncased,all-MiniLM-L6-v2}/
//! ```

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptrec::eval::{gauc, ExperimentReport, ScoredRecord, UndefinedUsers};
use promptrec::experiment::{run_experiment, Experiment, ExperimentConfig};
use promptrec::lm::{
    load_model, LanguageModel, LoadOptions, MaskDistribution, PrefixExample, PrefixVectors, SentimentTargets,
    StubModel, TransformerConfig, TransformerLm, WordPieceTokenizer,
};
use promptrec::prompting::{
    build_probe_set, ContextProvenance, MultiTokenPolicy, ProbeText, SentimentVocab, TemplateMode, UserItemContext,
};
use promptrec::rcmp::{
    filter_general_corpus, pretrain_on_refined, read_raw_corpus, refine_corpus, Document, RcmpConfig, RefineOptions,
    RefinedCorpus,
};
use promptrec::scorer::{combine, measure_scoring_latency, promptrec_value, ScoreFormula};

fn verdict(n: u32, name: &str, pass: bool, details: &str) {
    let line = format!(
        "criterion {n} {name}: {} ({details})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. GAUC against a pairwise oracle

fn pairwise_gauc(records: &[ScoredRecord]) -> Option<f64> {
    let mut by_user: BTreeMap<&str, Vec<&ScoredRecord>> = BTreeMap::new();
    for r in records {
        by_user.entry(&r.user_id).or_default().push(r);
    }
    let (mut num, mut den) = (0.0, 0.0);
    for rs in by_user.values() {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for p in rs.iter().filter(|r| r.label) {
            for n in rs.iter().filter(|r| !r.label) {
                pairs += 1.0;
                if p.score > n.score {
                    wins += 1.0;
                } else if p.score == n.score {
                    wins += 0.5;
                }
            }
        }
        if pairs > 0.0 {
            num += rs.len() as f64 * wins / pairs;
            den += rs.len() as f64;
        }
    }
    (den > 0.0).then(|| num / den)
}

fn random_records(r: &mut ChaCha8Rng) -> Vec<ScoredRecord> {
    let n = r.random_range(1..=200);
    let users = r.random_range(1..=20);
    let coarse = r.random_bool(0.5);
    let positive_rate = r.random_range(0.05..0.95);
    (0..n)
        .map(|k| ScoredRecord {
            user_id: format!("u{}", r.random_range(0..users)),
            item_id: format!("i{k}"),
            score: if coarse {
                r.random_range(0..5) as f64 / 4.0
            } else {
                r.random::<f64>()
            },
            label: r.random_bool(positive_rate),
        })
        .collect()
}

#[test]
fn criterion_1_gauc_matches_pairwise_oracle() {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut worst, mut mismatched, mut undefined) = (0.0f64, 0, 0);
    for _ in 0..1000 {
        let records = random_records(&mut r);
        match (pairwise_gauc(&records), gauc(&records, UndefinedUsers::Exclude)) {
            (Some(want), Ok(got)) => worst = worst.max((want - got.gauc).abs()),
            (None, Err(_)) => undefined += 1,
            _ => mismatched += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = mismatched == 0 && worst <= 1e-9 && secs < 60.0;
    verdict(
        1,
        "gauc-oracle",
        pass,
        &format!("1000 instances, max |diff| {worst:.1e}, {undefined} undefined on both sides, {mismatched} mismatched, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Scorer algebra

fn random_targets(r: &mut ChaCha8Rng, vocab: usize) -> SentimentTargets {
    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    ids.shuffle(r);
    let np = r.random_range(1..=5);
    let nn = r.random_range(1..=5);
    SentimentTargets {
        positive: ids[..np].to_vec(),
        negative: ids[np..np + nn].to_vec(),
        truncated: vec![],
    }
}

fn swapped(t: &SentimentTargets) -> SentimentTargets {
    SentimentTargets {
        positive: t.negative.clone(),
        negative: t.positive.clone(),
        truncated: vec![],
    }
}

#[test]
fn criterion_2_scorer_algebra() {
    let start = Instant::now();
    let mut r = rng(2);
    let (mut asym, mut nonmono) = (0, 0);
    for _ in 0..10_000 {
        let vocab = r.random_range(12..200);
        let scale = r.random_range(0.1..8.0);
        let logits: Vec<f64> = (0..vocab).map(|_| r.random_range(-scale..scale)).collect();
        let dist = MaskDistribution::from_logits(&logits);
        let t = random_targets(&mut r, vocab);
        for f in [ScoreFormula::Softmax, ScoreFormula::Literal] {
            if promptrec_value(&dist, &swapped(&t), f) != 1.0 - promptrec_value(&dist, &t, f) {
                asym += 1;
            }
        }

        let base = promptrec_value(&dist, &t, ScoreFormula::Softmax);
        let bump = r.random_range(0.1..3.0);
        let mut up = logits.clone();
        up[t.positive[r.random_range(0..t.positive.len())] as usize] += bump;
        let mut down = logits.clone();
        down[t.negative[r.random_range(0..t.negative.len())] as usize] += bump;
        if promptrec_value(&MaskDistribution::from_logits(&up), &t, ScoreFormula::Softmax) < base
            || promptrec_value(&MaskDistribution::from_logits(&down), &t, ScoreFormula::Softmax) > base
        {
            nonmono += 1;
        }
        let (lpos, lneg) = t.means(&dist);
        if combine(lpos + bump, lneg, ScoreFormula::Softmax) < combine(lpos, lneg, ScoreFormula::Softmax) {
            nonmono += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        2,
        "scorer-algebra",
        asym == 0 && nonmono == 0,
        &format!("10000 distributions, {asym} swap violations, {nonmono} monotonicity violations, {secs:.2}s"),
    );
}

// ---------------------------------------------------------------------------
// 3. Corpus refinement

fn probe(text: String) -> ProbeText {
    ProbeText {
        context: UserItemContext {
            text: "[MASK]".into(),
            mask_offset: 0,
            provenance: ContextProvenance {
                user_id: "u".into(),
                item_id: "i".into(),
                template_id: "t".into(),
            },
            spans: vec![],
        },
        word: text.clone(),
        text,
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Documents with ids drawn from a permutation, their embeddings, and the
/// probe embeddings; half the documents share a coarse lattice of vectors.
struct Geometry {
    docs: Vec<Document>,
    doc_emb: Vec<Vec<f64>>,
    probe_emb: Vec<Vec<f64>>,
}

impl Geometry {
    fn lattice(r: &mut ChaCha8Rng, n: usize, probes: usize, dim: usize) -> Self {
        let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
        ids.shuffle(r);
        let vector = |r: &mut ChaCha8Rng, coarse: bool| -> Vec<f64> {
            (0..dim)
                .map(|_| {
                    if coarse {
                        r.random_range(-2..=2) as f64 * 0.5
                    } else {
                        r.random_range(-1.0..1.0)
                    }
                })
                .collect()
        };
        let doc_emb: Vec<Vec<f64>> = (0..n).map(|k| vector(r, k % 2 == 0)).collect();
        let probe_emb = (0..probes).map(|_| vector(r, false)).collect();
        let docs = (0..n)
            .map(|k| Document {
                id: ids[k],
                text: format!("doc{k}"),
                offset: k as u64,
            })
            .collect();
        Self {
            docs,
            doc_emb,
            probe_emb,
        }
    }

    fn encoder(&self) -> StubModel {
        let tok = WordPieceTokenizer::build(&["doc"], 0).unwrap();
        let dim = self.probe_emb[0].len();
        let entries = self
            .docs
            .iter()
            .zip(&self.doc_emb)
            .map(|(d, e)| (d.text.clone(), e.clone()))
            .chain(
                self.probe_emb
                    .iter()
                    .enumerate()
                    .map(|(z, e)| (format!("probe{z}"), e.clone())),
            );
        StubModel::new("enc", tok, dim).with_text_embeddings(entries)
    }

    fn probes(&self) -> Vec<ProbeText> {
        (0..self.probe_emb.len()).map(|z| probe(format!("probe{z}"))).collect()
    }

    fn brute_force(&self, k: usize) -> Vec<u64> {
        let mut scored: Vec<(f64, u64)> = self
            .docs
            .iter()
            .zip(&self.doc_emb)
            .map(|(d, e)| (self.probe_emb.iter().map(|p| logistic(dot(e, p))).sum(), d.id))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().take(k).map(|s| s.1).collect()
    }

    fn refine(&self, k: usize, chunk_size: usize) -> RefinedCorpus {
        let options = RefineOptions {
            k,
            batch_size: 37,
            chunk_size,
            ..Default::default()
        };
        refine_corpus(self.docs.clone(), &self.probes(), &self.encoder(), None, &options).unwrap()
    }
}

fn planted_recall(r: &mut ChaCha8Rng) -> usize {
    let dim = 16;
    let topic: Vec<f64> = (0..dim).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect();
    let gauss = |r: &mut ChaCha8Rng, sd: f64| -> Vec<f64> {
        (0..dim)
            .map(|_| {
                let (u, v): (f64, f64) = (r.random_range(1e-12..1.0), r.random());
                sd * (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
            })
            .collect()
    };
    let near = |r: &mut ChaCha8Rng, strength: f64, sd: f64| -> Vec<f64> {
        gauss(r, sd).iter().zip(&topic).map(|(n, t)| n + strength * t).collect()
    };
    let (n, planted) = (10_000, 100);
    let mut doc_emb: Vec<Vec<f64>> = (0..n - planted).map(|_| gauss(r, 0.5)).collect();
    doc_emb.extend((0..planted).map(|_| near(r, 2.5, 0.5)));
    let probe_emb: Vec<Vec<f64>> = (0..50).map(|_| near(r, 1.5, 0.3)).collect();
    let docs: Vec<Document> = (0..n)
        .map(|k| Document {
            id: k as u64,
            text: format!("doc{k}"),
            offset: k as u64,
        })
        .collect();
    let g = Geometry {
        docs,
        doc_emb,
        probe_emb,
    };
    let kept: HashSet<u64> = g.refine(200, 4096).ids().into_iter().collect();
    ((n - planted) as u64..n as u64).filter(|id| kept.contains(id)).count()
}

#[test]
fn criterion_3_corpus_refinement_is_exact_and_recalls_planted_documents() {
    let start = Instant::now();
    let mut r = rng(3);
    let mut cases = 0;
    let mut wrong = Vec::new();
    for (n, probes) in [(1, 3), (64, 5), (1000, 8), (10_000, 8)] {
        let g = Geometry::lattice(&mut r, n, probes, 6);
        for k in [1, 7, 100, 1000, 10_000, 12_000] {
            for chunk in [97, 4096] {
                cases += 1;
                let got = g.refine(k, chunk);
                if got.ids() != g.brute_force(k) || got.k_exceeds_corpus != (k > n) {
                    wrong.push(format!("n={n} k={k} chunk={chunk}"));
                }
            }
        }
    }
    let recalled = planted_recall(&mut r);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        3,
        "corpus-refinement",
        wrong.is_empty() && recalled >= 90 && secs < 300.0,
        &format!(
            "{cases} corpora/K settings, {} differ from full sort {wrong:?}; planted recall {recalled}/100 at K=200; {secs:.1}s",
            wrong.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Prefix gradients

const GRAD_TEXTS: &[&str] = &[
    "the woman is a young writer . the user feels [MASK] about the item .",
    "the man is an old doctor . the user feels [MASK] about the movie .",
    "a quiet restaurant with cheap food . the user feels [MASK] about it .",
    "the coupon expires in one day . the user feels [MASK] about the coupon .",
    "positive negative good bad",
];

fn gradient_model() -> TransformerLm {
    let tok = WordPieceTokenizer::build(GRAD_TEXTS, 0).unwrap();
    let config = TransformerConfig {
        vocab_size: tok.vocab_size(),
        hidden_size: 16,
        num_hidden_layers: 2,
        num_attention_heads: 2,
        intermediate_size: 32,
        max_position_embeddings: 64,
        type_vocab_size: 2,
        layer_norm_eps: 1e-12,
        hidden_dropout_prob: 0.1,
        is_decoder: false,
    };
    let options = LoadOptions {
        precision: promptrec::lm::transformer::Precision::F64,
        ..Default::default()
    };
    TransformerLm::random_seeded("grad", config, tok, &options, 0.2, 4).unwrap()
}

#[test]
fn criterion_4_prefix_gradients_match_finite_differences() {
    let start = Instant::now();
    let model = gradient_model();
    let vocab = SentimentVocab::new(
        vec!["positive".into(), "good".into()],
        vec!["negative".into(), "bad".into()],
    )
    .unwrap();
    let targets = SentimentTargets::resolve(model.tokenizer(), &vocab, MultiTokenPolicy::Reject).unwrap();
    let examples: Vec<PrefixExample> = GRAD_TEXTS[..4]
        .iter()
        .enumerate()
        .map(|(k, t)| PrefixExample {
            text: t.to_string(),
            label: k % 2 == 0,
        })
        .collect();
    let mut r = rng(4);
    let rows = Array2::from_shape_fn((3, 16), |_| r.random_range(-0.5..0.5));
    let prefix = PrefixVectors::new(rows.clone()).unwrap();
    let analytic = model.prefix_loss_grad(&examples, &targets, &prefix).unwrap();

    let h = 1e-5;
    let loss_at = |rows: Array2<f64>| {
        model
            .prefix_loss(&examples, &targets, &PrefixVectors::new(rows).unwrap())
            .unwrap()
    };
    let (mut ok, mut worst) = (0, 0.0f64);
    for ((i, j), &g) in analytic.grad.indexed_iter() {
        let (mut plus, mut minus) = (rows.clone(), rows.clone());
        plus[(i, j)] += h;
        minus[(i, j)] -= h;
        let fd = (loss_at(plus) - loss_at(minus)) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
        if rel <= 1e-3 {
            ok += 1;
        }
    }
    let total = analytic.grad.len();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        4,
        "prefix-gradients",
        ok as f64 >= 0.95 * total as f64 && secs < 60.0,
        &format!("{ok}/{total} coordinates within 1e-3 relative error, worst {worst:.1e}, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------------------
// Shipped experiments on the public assets

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .ancestors()
        .nth(2)
        .unwrap()
        .to_path_buf()
}

fn assets() -> PathBuf {
    std::env::var_os("PROMPTREC_ASSETS").map_or_else(|| workspace().join("assets"), PathBuf::from)
}

/// Loads a shipped experiment with data and models taken from the asset
/// tree and outputs under the test scratch directory; lists missing assets.
fn shipped(name: &str) -> Result<ExperimentConfig, String> {
    let dir = workspace().join("configs/experiments");
    let text = std::fs::read_to_string(dir.join(format!("{name}.toml"))).map_err(|e| format!("{name}: {e}"))?;
    let mut cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
    let (data, models) = (assets().join("datasets"), assets().join("models"));
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let mut missing = Vec::new();
    let mut need = |p: PathBuf| {
        if !p.exists() {
            missing.push(p.display().to_string());
        }
        p
    };
    let mut datasets = vec![&mut cfg.dataset];
    if let Some(t) = cfg.tppt.as_mut() {
        datasets.extend(t.sources.iter_mut());
    }
    for d in datasets {
        d.source = dir.join(&d.source);
        d.pack = dir.join(&d.pack);
        d.data_dir = need(data.join(&d.data_dir));
    }
    for spec in [&mut cfg.model.scorer, &mut cfg.model.encoder].into_iter().flatten() {
        if !spec.starts_with("random:") {
            *spec = need(models.join(&*spec)).display().to_string();
        }
    }
    if let Some(r) = cfg.rcmp.as_mut() {
        r.corpus = need(data.join(&r.corpus));
    }
    cfg.output_dir = out.join(name);
    cfg.cache_dir = Some(out.join("cache"));
    if missing.is_empty() {
        Ok(cfg)
    } else {
        Err(format!(
            "missing assets under {}: {}",
            assets().display(),
            missing.join(", ")
        ))
    }
}

fn points(report: &ExperimentReport) -> f64 {
    100.0 * report.mean
}

fn run_points(cfg: &ExperimentConfig) -> Result<f64, String> {
    run_experiment(cfg)
        .map(|r| points(&r))
        .map_err(|e| format!("{}: {e}", cfg.name))
}

fn run_with_formula(cfg: &ExperimentConfig, formula: ScoreFormula) -> Result<f64, String> {
    let mut cfg = cfg.clone();
    cfg.formula = formula;
    cfg.output_dir = cfg
        .output_dir
        .with_file_name(format!("{}_{formula:?}", cfg.name).to_lowercase());
    run_points(&cfg)
}

fn small_model_reproduction() -> Result<(bool, String), String> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, target) in [
        ("coupon_promptrec", 47.53),
        ("ml100k_promptrec", 50.72),
        ("coupon_promptrec_base", 62.96),
    ] {
        let cfg = shipped(name)?;
        let softmax = run_with_formula(&cfg, ScoreFormula::Softmax)?;
        let literal = run_with_formula(&cfg, ScoreFormula::Literal)?;
        let (formula, best) = if (softmax - target).abs() <= (literal - target).abs() {
            ("softmax", softmax)
        } else {
            ("literal", literal)
        };
        let ok = (best - target).abs() <= 2.5;
        pass &= ok;
        parts.push(format!(
            "{name} {best:.2} vs {target} via {formula} (softmax {softmax:.2}, literal {literal:.2}) {}",
            if ok { "ok" } else { "off" }
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn gated(n: u32, name: &str, outcome: Result<(bool, String), String>) {
    match outcome {
        Ok((pass, details)) => verdict(n, name, pass, &details),
        Err(why) => verdict(n, name, false, &why),
    }
}

#[test]
fn criterion_5_small_model_numbers() {
    gated(5, "small-model-reproduction", small_model_reproduction());
}

#[test]
fn criterion_6_transferred_task_prompt() {
    let outcome = shipped("coupon_tppt").and_then(|cfg| {
        let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
        let got = points(&report);
        Ok((
            got >= 55.0,
            format!(
                "Coupon {got:.2} ± {:.2} over {} seeds, {}",
                100.0 * report.std,
                report.seeds.len(),
                report.header.notes.join(" ")
            ),
        ))
    });
    gated(6, "tppt-transfer", outcome);
}

/// Masked-token pseudo-perplexity of `texts`.
fn pseudo_perplexity(model: &dyn LanguageModel, texts: &[String]) -> Result<f64, String> {
    let (mut total, mut count) = (0.0, 0usize);
    for t in texts {
        let lp = model.span_logprobs("", t, "").map_err(|e| e.to_string())?;
        total += lp.iter().sum::<f64>();
        count += lp.len();
    }
    Ok((-total / count.max(1) as f64).exp())
}

/// Pseudo-perplexity on held-out target probes of the refined-corpus model
/// and of a control retrained on a same-size random corpus sample.
fn perplexity_fallback(cfg: &ExperimentConfig) -> Result<(f64, f64), String> {
    let err = |e: promptrec::Error| e.to_string();
    let exp = Experiment::prepare(cfg).map_err(err)?;
    let base = exp.load_scorer(&[]).map_err(err)?.ok_or("no scorer")?;
    let refined_model = exp.load_rcmp_model().map_err(err)?.ok_or("no retrained model")?;
    let dir = exp.rcmp_dir();
    let refined = RefinedCorpus::read(&dir).map_err(err)?;
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let section = cfg.rcmp.as_ref().ok_or("no [rcmp]")?;

    let corpus = filter_general_corpus(
        read_raw_corpus(&section.corpus).map_err(err)?,
        "control",
        &section.filter,
    )
    .map_err(err)?;
    let mut control: Vec<&str> = corpus.documents.iter().map(|d| d.text.as_str()).collect();
    control.shuffle(&mut rng(section.seed + 7));
    control.truncate(refined.len());
    let config = RcmpConfig {
        k: section.k,
        probe_sample_size: section.probe_sample_size,
        conditional: section.conditional,
        seed: section.seed,
        pretrain: serde_json::from_value(manifest["pretrain"].clone()).map_err(|e| e.to_string())?,
    };
    let control_model = pretrain_on_refined(&base, &control, &config, &serde_json::json!({ "control": true }), None)
        .map_err(err)?
        .model;

    let seen: HashSet<String> = std::fs::read_to_string(dir.join("probes.jsonl"))
        .map_err(|e| e.to_string())?
        .lines()
        .filter_map(|l| serde_json::from_str::<serde_json::Value>(l).ok())
        .filter_map(|v| v["text"].as_str().map(str::to_string))
        .collect();
    let pack = &exp.target.pack;
    let held_out: Vec<String> = build_probe_set(
        &exp.target.dataset,
        pack.template(TemplateMode::Masked),
        pack.verbalizers(),
        pack.vocab(),
        2000,
        section.seed + 1000,
    )
    .map_err(err)?
    .into_iter()
    .map(|p| p.text)
    .filter(|t| !seen.contains(t))
    .take(500)
    .collect();
    Ok((
        pseudo_perplexity(&refined_model, &held_out)?,
        pseudo_perplexity(&control_model, &held_out)?,
    ))
}

#[test]
fn criterion_7_refined_corpus_pretraining_helps() {
    let outcome = shipped("coupon_rcmp_scaled").and_then(|cfg| {
        let base = run_points(&shipped("coupon_promptrec")?)?;
        let enhanced = run_points(&cfg)?;
        let gain = enhanced - base;
        if gain >= 3.0 {
            return Ok((true, format!("Coupon {base:.2} -> {enhanced:.2}, gain {gain:.2}")));
        }
        let (refined, control) = perplexity_fallback(&cfg)?;
        Ok((
            refined < control,
            format!(
                "GAUC gain {gain:.2} below 3 ({base:.2} -> {enhanced:.2}); held-out probe pseudo-perplexity refined {refined:.3} vs random control {control:.3}"
            ),
        ))
    });
    gated(7, "rcmp-direction", outcome);
}

#[test]
fn criterion_8_baseline_sanity() {
    let outcome = (|| {
        let mut pass = true;
        let mut parts = Vec::new();
        for name in ["coupon_random", "ml100k_random", "restaurant_random"] {
            let got = run_points(&shipped(name)?)?;
            let ok = (48.5..=51.5).contains(&got);
            pass &= ok;
            parts.push(format!("{name} {got:.2}{}", if ok { "" } else { " out of range" }));
        }
        let itemlm = run_points(&shipped("coupon_itemlm")?)?;
        let ok = itemlm < 40.0 && (itemlm - 31.98).abs() <= 5.0;
        pass &= ok;
        parts.push(format!(
            "coupon_itemlm {itemlm:.2} vs 31.98{}",
            if ok { "" } else { " off" }
        ));
        Ok((pass, parts.join("; ")))
    })();
    gated(8, "baseline-sanity", outcome);
}

// ---------------------------------------------------------------------------
// 9. Latency ordering

fn latency_contexts() -> Vec<UserItemContext> {
    let jobs = ["writer", "doctor", "student", "engineer"];
    let genres = ["comedy", "drama", "action", "romance"];
    (0..64)
        .map(|k| {
            let text = format!(
                "The woman is a middle-aged {} living in Michigan. The movie {k} is categorized as a {} movie \
                 released in the nineties. The user is that woman, and the item is that movie. In short, the \
                 user feels [MASK] about the item.",
                jobs[k % 4],
                genres[(k / 4) % 4]
            );
            UserItemContext {
                mask_offset: text.find("[MASK]").unwrap(),
                text,
                provenance: ContextProvenance {
                    user_id: format!("u{}", k % 8),
                    item_id: format!("i{k}"),
                    template_id: "masked".into(),
                },
                spans: vec![],
            }
        })
        .collect()
}

#[test]
fn criterion_9_latency_grows_with_model_size() {
    let contexts = latency_contexts();
    let mut texts: Vec<&str> = contexts.iter().map(|c| c.text.as_str()).collect();
    texts.push("positive negative");
    let vocab = SentimentVocab::new(vec!["positive".into()], vec!["negative".into()]).unwrap();
    let mut timings = Vec::new();
    for preset in ["tiny", "small", "base"] {
        let model = load_model(&format!("random:{preset}"), &LoadOptions::default(), &texts).unwrap();
        let targets = SentimentTargets::resolve(model.tokenizer(), &vocab, MultiTokenPolicy::Reject).unwrap();
        let report = measure_scoring_latency(model.as_ref(), &contexts, &targets, None, 32, 2, 5).unwrap();
        timings.push((preset, model.info().param_count, report.ms_per_interaction));
    }
    let increasing = timings.windows(2).all(|w| w[0].2 < w[1].2);
    let details: Vec<String> = timings
        .iter()
        .map(|(p, n, ms)| format!("{p} {:.1}M {ms:.3} ms", *n as f64 / 1e6))
        .collect();
    verdict(9, "latency-ordering", increasing, &details.join(" < "));
}
