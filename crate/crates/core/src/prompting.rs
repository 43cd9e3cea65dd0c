//! Verbalization of profile features, prompt templates with a single mask
//! slot, and the synthetic probe set used for corpus refinement.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, FeatureValue, ItemProfile, RecDataset, UserProfile};
use crate::util;
use crate::{Error, Result};

pub const MASK_MARKER: &str = "[MASK]";

/// Maps one feature value to a phrase.
///
/// Continuous rules bucket the value into left-open, right-closed intervals
/// `(b[k-1], b[k]]`; values at or below the first breakpoint take the first
/// phrase and values above the last take the last phrase. Discrete rules look
/// the value up; unmapped values pass through unchanged unless `strict`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VerbalizerRule {
    Continuous {
        breakpoints: Vec<f64>,
        phrases: Vec<String>,
        /// Parse only the first N characters as the number (zip-code style).
        #[serde(default, skip_serializing_if = "Option::is_none")]
        numeric_prefix: Option<usize>,
    },
    Discrete {
        #[serde(default)]
        map: BTreeMap<String, String>,
        #[serde(default)]
        strict: bool,
    },
}

impl VerbalizerRule {
    pub fn identity() -> Self {
        VerbalizerRule::Discrete {
            map: BTreeMap::new(),
            strict: false,
        }
    }

    pub fn continuous(breakpoints: &[f64], phrases: &[&str]) -> Result<Self> {
        let rule = VerbalizerRule::Continuous {
            breakpoints: breakpoints.to_vec(),
            phrases: phrases.iter().map(|s| s.to_string()).collect(),
            numeric_prefix: None,
        };
        rule.validate("<anonymous>")?;
        Ok(rule)
    }

    pub fn validate(&self, feature: &str) -> Result<()> {
        if let VerbalizerRule::Continuous {
            breakpoints, phrases, ..
        } = self
        {
            if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Template(format!(
                    "verbalizer `{feature}`: breakpoints must be finite and strictly increasing"
                )));
            }
            if phrases.len() != breakpoints.len() + 1 {
                return Err(Error::Template(format!(
                    "verbalizer `{feature}`: {} breakpoints need {} phrases, got {}",
                    breakpoints.len(),
                    breakpoints.len() + 1,
                    phrases.len()
                )));
            }
        }
        Ok(())
    }

    /// Interval index selected for a continuous value.
    pub fn interval(&self, value: f64) -> Option<usize> {
        match self {
            VerbalizerRule::Continuous { breakpoints, .. } => Some(breakpoints.partition_point(|&b| b < value)),
            VerbalizerRule::Discrete { .. } => None,
        }
    }

    pub fn verbalize(&self, feature: &str, value: &FeatureValue, placeholder: &str) -> Result<String> {
        match value {
            FeatureValue::Missing => Ok(placeholder.to_string()),
            FeatureValue::List(items) => {
                let parts = items
                    .iter()
                    .map(|v| self.verbalize(feature, &FeatureValue::Text(v.clone()), placeholder))
                    .collect::<Result<Vec<_>>>()?;
                Ok(parts.join(", "))
            }
            _ => match self {
                VerbalizerRule::Continuous {
                    phrases,
                    numeric_prefix,
                    ..
                } => {
                    let number = match (value, numeric_prefix) {
                        (FeatureValue::Text(s), Some(n)) => s.trim().chars().take(*n).collect::<String>().parse().ok(),
                        _ => value.as_number(),
                    };
                    Ok(match number.and_then(|v| self.interval(v)) {
                        Some(k) => phrases[k].clone(),
                        None => placeholder.to_string(),
                    })
                }
                VerbalizerRule::Discrete { map, strict } => {
                    let key = plain_text(value);
                    match map.get(&key) {
                        Some(p) => Ok(p.clone()),
                        None if *strict => Err(Error::UnmappedValue {
                            feature: feature.to_string(),
                            value: key,
                        }),
                        None => Ok(key),
                    }
                }
            },
        }
    }
}

fn plain_text(value: &FeatureValue) -> String {
    match value {
        FeatureValue::Missing => String::new(),
        FeatureValue::Number(v) => format!("{v}"),
        FeatureValue::Text(s) => s.clone(),
        FeatureValue::List(l) => l.join(", "),
    }
}

/// Verbalizes one value; features without a rule use the identity mapping.
pub fn verbalize_feature(
    value: &FeatureValue,
    feature: &str,
    rule: Option<&VerbalizerRule>,
    placeholder: &str,
) -> Result<String> {
    match rule {
        Some(r) => r.verbalize(feature, value, placeholder),
        None => VerbalizerRule::identity().verbalize(feature, value, placeholder),
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Verbalizers {
    #[serde(default)]
    pub user: BTreeMap<String, VerbalizerRule>,
    #[serde(default)]
    pub item: BTreeMap<String, VerbalizerRule>,
    #[serde(default = "default_placeholder")]
    pub placeholder: String,
}

fn default_placeholder() -> String {
    "unknown".into()
}

impl Verbalizers {
    pub fn validate(&self, schema: &FeatureSchema) -> Result<()> {
        for (name, rule) in &self.user {
            if schema.user_index(name).is_none() {
                return Err(Error::Template(format!("verbalizer for unknown user feature `{name}`")));
            }
            rule.validate(name)?;
        }
        for (name, rule) in &self.item {
            if schema.item_index(name).is_none() {
                return Err(Error::Template(format!("verbalizer for unknown item feature `{name}`")));
            }
            rule.validate(name)?;
        }
        Ok(())
    }

    fn phrase(&self, side: Side, name: &str, value: &FeatureValue) -> Result<String> {
        let rule = match side {
            Side::User => self.user.get(name),
            Side::Item => self.item.get(name),
        };
        verbalize_feature(value, name, rule, &self.placeholder)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    User,
    Item,
}

#[derive(Clone, Debug, PartialEq)]
enum Segment {
    Text(String),
    Slot { side: Side, index: usize, name: String },
    Mask,
}

/// A parsed template string. Slots are written `{user.<feature>}` or
/// `{item.<feature>}`; the mask slot is written `[MASK]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextTemplate {
    segments: Vec<Segment>,
}

impl TextTemplate {
    pub fn parse(src: &str, schema: &FeatureSchema) -> Result<Self> {
        let mut segments = Vec::new();
        let mut text = String::new();
        let mut rest = src;
        while !rest.is_empty() {
            if let Some(after) = rest.strip_prefix(MASK_MARKER) {
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Mask);
                rest = after;
            } else if let Some(after) = rest.strip_prefix('{') {
                let end = after
                    .find('}')
                    .ok_or_else(|| Error::Template(format!("unclosed slot in `{src}`")))?;
                let slot = &after[..end];
                let (side, name) = match slot.split_once('.') {
                    Some(("user", n)) => (Side::User, n),
                    Some(("item", n)) => (Side::Item, n),
                    _ => {
                        return Err(Error::Template(format!(
                            "slot `{{{slot}}}` must be `{{user.<feature>}}` or `{{item.<feature>}}`"
                        )))
                    }
                };
                let index = match side {
                    Side::User => schema.user_index(name),
                    Side::Item => schema.item_index(name),
                }
                .ok_or_else(|| Error::Template(format!("unresolvable slot `{{{slot}}}`")))?;
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot {
                    side,
                    index,
                    name: name.to_string(),
                });
                rest = &after[end + 1..];
            } else {
                let c = rest.chars().next().unwrap();
                text.push(c);
                rest = &rest[c.len_utf8()..];
            }
        }
        if !text.is_empty() {
            segments.push(Segment::Text(text));
        }
        Ok(Self { segments })
    }

    pub fn mask_count(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Mask)).count()
    }

    pub fn has_slots(&self) -> bool {
        self.segments.iter().any(|s| matches!(s, Segment::Slot { .. }))
    }

    fn render(
        &self,
        user: Option<&UserProfile>,
        item: Option<&ItemProfile>,
        verbalizers: &Verbalizers,
    ) -> Result<Rendered> {
        let mut out = Rendered::default();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.text.push_str(t),
                Segment::Mask => {
                    out.mask_offset = Some(out.text.len());
                    out.text.push_str(MASK_MARKER);
                }
                Segment::Slot { side, index, name } => {
                    let profile = match side {
                        Side::User => user,
                        Side::Item => item,
                    }
                    .ok_or_else(|| Error::Template(format!("slot `{name}` needs a {side:?} profile")))?;
                    let value = profile
                        .values
                        .get(*index)
                        .ok_or_else(|| Error::Template(format!("profile `{}` lacks slot `{name}`", profile.id)))?;
                    let phrase = verbalizers.phrase(*side, name, value)?;
                    let start = out.text.len();
                    out.text.push_str(&phrase);
                    out.spans.push(SlotSpan {
                        side: *side,
                        feature: name.clone(),
                        range: start..out.text.len(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Default)]
struct Rendered {
    text: String,
    mask_offset: Option<usize>,
    spans: Vec<SlotSpan>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateMode {
    #[default]
    Masked,
    Causal,
}

/// A template with exactly one mask slot. Masked templates keep text after
/// the mask; causal templates end with it.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    id: String,
    mode: TemplateMode,
    body: TextTemplate,
}

impl PromptTemplate {
    pub fn compile(id: impl Into<String>, src: &str, mode: TemplateMode, schema: &FeatureSchema) -> Result<Self> {
        let id = id.into();
        let body = TextTemplate::parse(src, schema)?;
        match body.mask_count() {
            1 => {}
            n => {
                return Err(Error::Template(format!(
                    "template `{id}` has {n} mask slots; exactly one is required"
                )))
            }
        }
        let mask_at = body.segments.iter().position(|s| matches!(s, Segment::Mask)).unwrap();
        let trailing: String = body.segments[mask_at + 1..]
            .iter()
            .map(|s| match s {
                Segment::Text(t) => t.as_str(),
                _ => "x",
            })
            .collect();
        match mode {
            TemplateMode::Causal if !trailing.trim().is_empty() => {
                return Err(Error::Template(format!(
                    "causal template `{id}` must end with the mask slot"
                )))
            }
            TemplateMode::Masked if trailing.trim().is_empty() => {
                return Err(Error::Template(format!(
                    "masked template `{id}` needs text after the mask slot"
                )))
            }
            _ => {}
        }
        Ok(Self { id, mode, body })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn mode(&self) -> TemplateMode {
        self.mode
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub side: Side,
    pub feature: String,
    pub range: Range<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextProvenance {
    pub user_id: String,
    pub item_id: String,
    pub template_id: String,
}

/// A rendered prompt with exactly one [`MASK_MARKER`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserItemContext {
    pub text: String,
    /// Byte offset of the mask marker in `text`.
    pub mask_offset: usize,
    pub provenance: ContextProvenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub spans: Vec<SlotSpan>,
}

impl UserItemContext {
    /// Text before the mask marker, without trailing whitespace.
    pub fn before_mask(&self) -> &str {
        self.text[..self.mask_offset].trim_end()
    }

    pub fn with_mask_replaced(&self, word: &str) -> String {
        let mut s = String::with_capacity(self.text.len() + word.len());
        s.push_str(&self.text[..self.mask_offset]);
        s.push_str(word);
        s.push_str(&self.text[self.mask_offset + MASK_MARKER.len()..]);
        s
    }

    pub fn span(&self, side: Side, feature: &str) -> Option<&SlotSpan> {
        self.spans.iter().find(|s| s.side == side && s.feature == feature)
    }
}

pub fn render_context(
    user: &UserProfile,
    item: &ItemProfile,
    template: &PromptTemplate,
    verbalizers: &Verbalizers,
) -> Result<UserItemContext> {
    let r = template.body.render(Some(user), Some(item), verbalizers)?;
    Ok(UserItemContext {
        mask_offset: r.mask_offset.expect("compiled templates carry one mask"),
        text: r.text,
        provenance: ContextProvenance {
            user_id: user.id.clone(),
            item_id: item.id.clone(),
            template_id: template.id.clone(),
        },
        spans: r.spans,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiTokenPolicy {
    #[default]
    Reject,
    /// Score only the first sub-token; flagged in reports.
    FirstSubtoken,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawVocab")]
pub struct SentimentVocab {
    positive: Vec<String>,
    negative: Vec<String>,
}

#[derive(Deserialize)]
struct RawVocab {
    positive: Vec<String>,
    negative: Vec<String>,
}

impl TryFrom<RawVocab> for SentimentVocab {
    type Error = Error;
    fn try_from(raw: RawVocab) -> Result<Self> {
        SentimentVocab::new(raw.positive, raw.negative)
    }
}

impl SentimentVocab {
    pub fn new(positive: Vec<String>, negative: Vec<String>) -> Result<Self> {
        if positive.is_empty() || negative.is_empty() {
            return Err(Error::invalid("sentiment vocabularies must both be nonempty"));
        }
        if let Some(w) = positive.iter().find(|w| negative.contains(w)) {
            return Err(Error::Vocabulary {
                word: w.clone(),
                reason: "appears in both positive and negative sets".into(),
            });
        }
        Ok(Self { positive, negative })
    }

    pub fn pair(positive: &str, negative: &str) -> Result<Self> {
        Self::new(vec![positive.into()], vec![negative.into()])
    }

    pub fn positive(&self) -> &[String] {
        &self.positive
    }

    pub fn negative(&self) -> &[String] {
        &self.negative
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        self.positive.iter().chain(&self.negative)
    }

    pub fn len(&self) -> usize {
        self.positive.len() + self.negative.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn swapped(&self) -> Self {
        Self {
            positive: self.negative.clone(),
            negative: self.positive.clone(),
        }
    }
}

/// A context with its mask replaced by one sentiment word.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeText {
    pub context: UserItemContext,
    pub word: String,
    pub text: String,
}

/// Builds the probe set: every user-item pair when the full product fits in
/// `sample_size`, otherwise a seeded uniform sample of distinct pairs. Each
/// pair is expanded with every sentiment word.
pub fn build_probe_set(
    dataset: &RecDataset,
    template: &PromptTemplate,
    verbalizers: &Verbalizers,
    vocab: &SentimentVocab,
    sample_size: usize,
    seed: u64,
) -> Result<Vec<ProbeText>> {
    let (nu, ni) = (dataset.users().len(), dataset.items().len());
    if nu == 0 || ni == 0 {
        return Err(Error::invalid(format!(
            "dataset `{}` needs both users and items to build probes",
            dataset.name()
        )));
    }
    let words = vocab.len();
    let total_pairs = nu * ni;
    let pairs: Vec<usize> = if total_pairs.saturating_mul(words) <= sample_size {
        (0..total_pairs).collect()
    } else {
        let k = (sample_size / words).max(1);
        let mut picked = rand::seq::index::sample(&mut util::sub_rng(seed, "probe-pairs"), total_pairs, k).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut probes = Vec::with_capacity(pairs.len() * words);
    for p in pairs {
        let (u, i) = (&dataset.users()[p / ni], &dataset.items()[p % ni]);
        let context = render_context(u, i, template, verbalizers)?;
        for w in vocab.words() {
            probes.push(ProbeText {
                text: context.with_mask_replaced(w),
                word: w.clone(),
                context: context.clone(),
            });
        }
    }
    Ok(probes)
}

pub fn write_probe_set(path: &Path, probes: &[ProbeText]) -> Result<()> {
    let mut w = util::create(path)?;
    for p in probes {
        util::write_json_line(
            &mut w,
            path,
            &serde_json::json!({
                "user_id": p.context.provenance.user_id,
                "item_id": p.context.provenance.item_id,
                "template_id": p.context.provenance.template_id,
                "word": p.word,
                "text": p.text,
            }),
        )?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn probe_set_hash(probes: &[ProbeText]) -> String {
    let mut joined = String::new();
    for p in probes {
        joined.push_str(&p.text);
        joined.push('\n');
    }
    util::sha256_hex(joined.as_bytes())
}

// ---------------------------------------------------------------------------
// Prompt packs

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateSources {
    pub masked: String,
    pub causal: String,
    /// Verbalized user profile alone, used by the embedding and
    /// sentence-pair baselines.
    pub user_profile: String,
    pub item_profile: String,
}

/// Human-authored prompting function for one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPack {
    pub name: String,
    pub version: String,
    pub templates: TemplateSources,
    pub vocab: SentimentVocab,
    #[serde(default)]
    pub multi_token: MultiTokenPolicy,
    /// Item feature holding the item's name, for the item-likelihood
    /// baseline.
    #[serde(default)]
    pub item_name: Option<String>,
    #[serde(default)]
    pub verbalizers: Verbalizers,
}

impl PromptPack {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn hash(&self) -> String {
        util::hash_json(self).expect("prompt packs serialize")
    }

    pub fn compile(&self, schema: &FeatureSchema) -> Result<CompiledPack> {
        self.verbalizers.validate(schema)?;
        if let Some(name) = &self.item_name {
            if schema.item_index(name).is_none() {
                return Err(Error::Template(format!("item_name `{name}` is not an item feature")));
            }
        }
        let profile = |id: &str, src: &str| -> Result<TextTemplate> {
            let t = TextTemplate::parse(src, schema)?;
            if t.mask_count() != 0 {
                return Err(Error::Template(format!("{id} template must not contain a mask")));
            }
            Ok(t)
        };
        Ok(CompiledPack {
            hash: self.hash(),
            masked: PromptTemplate::compile(
                format!("{}/masked", self.name),
                &self.templates.masked,
                TemplateMode::Masked,
                schema,
            )?,
            causal: PromptTemplate::compile(
                format!("{}/causal", self.name),
                &self.templates.causal,
                TemplateMode::Causal,
                schema,
            )?,
            user_profile: profile("user_profile", &self.templates.user_profile)?,
            item_profile: profile("item_profile", &self.templates.item_profile)?,
            pack: self.clone(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct CompiledPack {
    pub pack: PromptPack,
    pub hash: String,
    pub masked: PromptTemplate,
    pub causal: PromptTemplate,
    pub user_profile: TextTemplate,
    pub item_profile: TextTemplate,
}

impl CompiledPack {
    pub fn template(&self, mode: TemplateMode) -> &PromptTemplate {
        match mode {
            TemplateMode::Masked => &self.masked,
            TemplateMode::Causal => &self.causal,
        }
    }

    pub fn verbalizers(&self) -> &Verbalizers {
        &self.pack.verbalizers
    }

    pub fn vocab(&self) -> &SentimentVocab {
        &self.pack.vocab
    }

    pub fn render(&self, user: &UserProfile, item: &ItemProfile, mode: TemplateMode) -> Result<UserItemContext> {
        render_context(user, item, self.template(mode), self.verbalizers())
    }

    pub fn user_text(&self, user: &UserProfile) -> Result<String> {
        Ok(self.user_profile.render(Some(user), None, self.verbalizers())?.text)
    }

    pub fn item_text(&self, item: &ItemProfile) -> Result<String> {
        Ok(self.item_profile.render(None, Some(item), self.verbalizers())?.text)
    }

    /// Verifies every strict discrete rule covers the values present in
    /// `dataset`.
    pub fn check_coverage(&self, dataset: &RecDataset) -> Result<()> {
        let v = self.verbalizers();
        for (side, rules, profiles) in [
            (Side::User, &v.user, dataset.users()),
            (Side::Item, &v.item, dataset.items()),
        ] {
            for (name, rule) in rules {
                let idx = match side {
                    Side::User => dataset.schema().user_index(name),
                    Side::Item => dataset.schema().item_index(name),
                }
                .expect("validated at compile time");
                for p in profiles {
                    rule.verbalize(name, &p.values[idx], &v.placeholder)?;
                }
            }
        }
        Ok(())
    }
}
