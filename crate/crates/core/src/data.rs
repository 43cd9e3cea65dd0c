//! Benchmark datasets: ingestion from delimited text, label binarization, the
//! fixed 250/50/rest partition, and line-delimited snapshots.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::util;
use crate::{Error, Result};

pub const TRAIN_SIZE: usize = 250;
pub const VALID_SIZE: usize = 50;

const SNAPSHOT_FORMAT: &str = "promptrec-dataset/1";
const SPLIT_FORMAT: &str = "promptrec-split/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Discrete,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureDef {
    pub fn new(name: impl Into<String>, kind: FeatureKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Ordered user and item feature lists. Both must be nonempty with unique
/// names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct FeatureSchema {
    user_features: Vec<FeatureDef>,
    item_features: Vec<FeatureDef>,
}

#[derive(Deserialize)]
struct RawSchema {
    user_features: Vec<FeatureDef>,
    item_features: Vec<FeatureDef>,
}

impl TryFrom<RawSchema> for FeatureSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        FeatureSchema::new(raw.user_features, raw.item_features)
    }
}

impl FeatureSchema {
    pub fn new(user_features: Vec<FeatureDef>, item_features: Vec<FeatureDef>) -> Result<Self> {
        for (side, list) in [("user", &user_features), ("item", &item_features)] {
            if list.is_empty() {
                return Err(Error::Schema(format!("no {side} features declared")));
            }
            let mut seen = HashSet::new();
            for f in list {
                if !seen.insert(f.name.as_str()) {
                    return Err(Error::Schema(format!("duplicate {side} feature `{}`", f.name)));
                }
            }
        }
        Ok(Self {
            user_features,
            item_features,
        })
    }

    pub fn user_features(&self) -> &[FeatureDef] {
        &self.user_features
    }

    pub fn item_features(&self) -> &[FeatureDef] {
        &self.item_features
    }

    pub fn d_user(&self) -> usize {
        self.user_features.len()
    }

    pub fn d_item(&self) -> usize {
        self.item_features.len()
    }

    pub fn user_index(&self, name: &str) -> Option<usize> {
        self.user_features.iter().position(|f| f.name == name)
    }

    pub fn item_index(&self, name: &str) -> Option<usize> {
        self.item_features.iter().position(|f| f.name == name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureValue {
    Missing,
    Number(f64),
    Text(String),
    List(Vec<String>),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            FeatureValue::Text(s) => s.trim().parse().ok(),
            _ => None,
        }
    }
}

/// A user or item profile: an opaque id plus one value per schema feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub id: String,
    pub values: Vec<FeatureValue>,
}

pub type UserProfile = Profile;
pub type ItemProfile = Profile;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub raw_label: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<bool>,
}

/// One recommendation domain. Immutable once built.
#[derive(Clone, Debug)]
pub struct RecDataset {
    name: String,
    schema: FeatureSchema,
    users: Vec<UserProfile>,
    items: Vec<ItemProfile>,
    interactions: Vec<Interaction>,
    threshold: Option<f64>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl PartialEq for RecDataset {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.schema == other.schema
            && self.users == other.users
            && self.items == other.items
            && self.interactions == other.interactions
            && self.threshold == other.threshold
    }
}

impl RecDataset {
    /// Builds a dataset, deduplicating profiles by id (first occurrence
    /// wins) and checking arities and interaction references.
    pub fn new(
        name: impl Into<String>,
        schema: FeatureSchema,
        users: Vec<UserProfile>,
        items: Vec<ItemProfile>,
        interactions: Vec<Interaction>,
    ) -> Result<Self> {
        let (users, user_index) = dedup_profiles(users, schema.d_user(), "user")?;
        let (items, item_index) = dedup_profiles(items, schema.d_item(), "item")?;
        for (n, it) in interactions.iter().enumerate() {
            if !user_index.contains_key(&it.user_id) {
                return Err(Error::invalid(format!(
                    "interaction {n} references unknown user `{}`",
                    it.user_id
                )));
            }
            if !item_index.contains_key(&it.item_id) {
                return Err(Error::invalid(format!(
                    "interaction {n} references unknown item `{}`",
                    it.item_id
                )));
            }
        }
        Ok(Self {
            name: name.into(),
            schema,
            users,
            items,
            interactions,
            threshold: None,
            user_index,
            item_index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn users(&self) -> &[UserProfile] {
        &self.users
    }

    pub fn items(&self) -> &[ItemProfile] {
        &self.items
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    /// Threshold used by [`binarize_labels`], if it has run.
    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }

    pub fn user(&self, id: &str) -> Option<&UserProfile> {
        self.user_index.get(id).map(|&i| &self.users[i])
    }

    pub fn item(&self, id: &str) -> Option<&ItemProfile> {
        self.item_index.get(id).map(|&i| &self.items[i])
    }

    /// The cold-start view: same profiles, no interactions.
    pub fn without_interactions(&self) -> RecDataset {
        RecDataset {
            interactions: Vec::new(),
            ..self.clone()
        }
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        let mut w = util::create(path)?;
        let header = SnapshotHeader {
            format: SNAPSHOT_FORMAT.into(),
            name: self.name.clone(),
            schema: self.schema.clone(),
            threshold: self.threshold,
            users: self.users.len(),
            items: self.items.len(),
            interactions: self.interactions.len(),
        };
        util::write_json_line(&mut w, path, &header)?;
        for u in &self.users {
            util::write_json_line(&mut w, path, &SnapshotRecord::User(u.clone()))?;
        }
        for i in &self.items {
            util::write_json_line(&mut w, path, &SnapshotRecord::Item(i.clone()))?;
        }
        for it in &self.interactions {
            util::write_json_line(&mut w, path, &SnapshotRecord::Interaction(it.clone()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_snapshot(path: &Path) -> Result<RecDataset> {
        let mut lines = util::read_lines(path)?;
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{}: empty snapshot", path.display())))??;
        let header: SnapshotHeader = serde_json::from_str(&first)?;
        if header.format != SNAPSHOT_FORMAT {
            return Err(Error::invalid(format!(
                "{}: unsupported snapshot format `{}`",
                path.display(),
                header.format
            )));
        }
        let (mut users, mut items, mut interactions) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let (n, line) = line?;
            let record: SnapshotRecord = serde_json::from_str(&line).map_err(|e| Error::Row {
                path: path.into(),
                line: n,
                message: e.to_string(),
            })?;
            match record {
                SnapshotRecord::User(p) => users.push(p),
                SnapshotRecord::Item(p) => items.push(p),
                SnapshotRecord::Interaction(i) => interactions.push(i),
            }
        }
        let mut ds = RecDataset::new(header.name, header.schema, users, items, interactions)?;
        ds.threshold = header.threshold;
        Ok(ds)
    }
}

fn dedup_profiles(profiles: Vec<Profile>, arity: usize, side: &str) -> Result<(Vec<Profile>, HashMap<String, usize>)> {
    let mut index = HashMap::with_capacity(profiles.len());
    let mut out = Vec::with_capacity(profiles.len());
    for p in profiles {
        if p.values.len() != arity {
            return Err(Error::Schema(format!(
                "{side} `{}` has {} values, schema declares {arity}",
                p.id,
                p.values.len()
            )));
        }
        if !index.contains_key(&p.id) {
            index.insert(p.id.clone(), out.len());
            out.push(p);
        }
    }
    Ok((out, index))
}

#[derive(Serialize, Deserialize)]
struct SnapshotHeader {
    format: String,
    name: String,
    schema: FeatureSchema,
    threshold: Option<f64>,
    users: usize,
    items: usize,
    interactions: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum SnapshotRecord {
    User(Profile),
    Item(Profile),
    Interaction(Interaction),
}

// ---------------------------------------------------------------------------
// Source description and ingestion

/// A source column, by header name or zero-based index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnRef {
    Index(usize),
    Name(String),
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ColumnRef::Index(i) => write!(f, "#{i}"),
            ColumnRef::Name(n) => f.write_str(n),
        }
    }
}

/// How a profile id is obtained: from a column, or derived from the
/// profile's own feature cells (for single-table sources without ids).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IdSpec {
    Column(ColumnRef),
    Derived,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorPolicy {
    #[default]
    Fail,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableFormat {
    /// `None` means "read from the interaction table".
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default = "default_true")]
    pub header: bool,
    #[serde(default = "default_true")]
    pub quoting: bool,
}

impl Default for TableFormat {
    fn default() -> Self {
        Self {
            path: None,
            delimiter: default_delimiter(),
            header: true,
            quoting: true,
        }
    }
}

fn default_delimiter() -> char {
    ','
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHot {
    pub columns: Vec<ColumnRef>,
    pub labels: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureColumn {
    pub name: String,
    pub kind: FeatureKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<ColumnRef>,
    /// Several 0/1 columns collapsed into one list-valued feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub multi_hot: Option<MultiHot>,
    /// Splits a single cell into a list-valued feature.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub list_separator: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileTable {
    #[serde(flatten)]
    pub format: TableFormat,
    pub id: IdSpec,
    pub features: Vec<FeatureColumn>,
    /// Side tables with one row per (profile, value), gathered into
    /// list-valued features after the main ones.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub joins: Vec<JoinTable>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JoinTable {
    #[serde(flatten)]
    pub format: TableFormat,
    pub feature: String,
    pub key: ColumnRef,
    pub value: ColumnRef,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTable {
    #[serde(flatten)]
    pub format: TableFormat,
    pub user_id: IdSpec,
    pub item_id: IdSpec,
    pub label: ColumnRef,
}

/// Declarative description of one dataset distribution: where the files
/// are and how their columns map onto the feature schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSource {
    pub name: String,
    /// Binarization threshold shipped with the source.
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_missing")]
    pub missing_values: Vec<String>,
    #[serde(default)]
    pub on_error: ErrorPolicy,
    pub interactions: InteractionTable,
    pub users: ProfileTable,
    pub items: ProfileTable,
}

fn default_missing() -> Vec<String> {
    ["", "?", "NA", "N/A", "nan", "NaN", "None"]
        .into_iter()
        .map(String::from)
        .collect()
}

impl DatasetSource {
    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        let defs = |t: &ProfileTable| {
            t.features
                .iter()
                .map(|f| FeatureDef::new(&f.name, f.kind))
                .chain(
                    t.joins
                        .iter()
                        .map(|j| FeatureDef::new(&j.feature, FeatureKind::Discrete)),
                )
                .collect::<Vec<_>>()
        };
        FeatureSchema::new(defs(&self.users), defs(&self.items))
    }
}

struct Table {
    path: PathBuf,
    headers: Option<Vec<String>>,
    rows: Vec<(u64, Vec<String>)>,
}

impl Table {
    fn read(path: &Path, format: &TableFormat) -> Result<Table> {
        let delimiter = u8::try_from(format.delimiter)
            .map_err(|_| Error::Config(vec![format!("delimiter `{}` is not a single byte", format.delimiter)]))?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(format.header)
            .quoting(format.quoting)
            .flexible(true)
            .from_path(path)
            .map_err(|e| match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                other => Error::invalid(format!("{}: {other:?}", path.display())),
            })?;
        let headers = if format.header {
            Some(
                reader
                    .byte_headers()?
                    .iter()
                    .map(|h| decode(h).trim().to_string())
                    .collect(),
            )
        } else {
            None
        };
        let mut rows = Vec::new();
        let mut record = csv::ByteRecord::new();
        loop {
            match reader.read_byte_record(&mut record) {
                Ok(false) => break,
                Ok(true) => {
                    let line = record.position().map(|p| p.line()).unwrap_or(0);
                    if record.len() == 1 && record[0].is_empty() {
                        continue;
                    }
                    rows.push((line, record.iter().map(decode).collect()));
                }
                Err(e) => {
                    let line = e.position().map(|p| p.line()).unwrap_or(0);
                    return Err(Error::Row {
                        path: path.into(),
                        line,
                        message: e.to_string(),
                    });
                }
            }
        }
        Ok(Table {
            path: path.into(),
            headers,
            rows,
        })
    }

    fn resolve(&self, col: &ColumnRef) -> Result<usize> {
        match col {
            ColumnRef::Index(i) => Ok(*i),
            ColumnRef::Name(name) => self
                .headers
                .as_ref()
                .and_then(|h| h.iter().position(|x| x == name))
                .ok_or_else(|| Error::Schema(format!("column `{name}` not found in {}", self.path.display()))),
        }
    }
}

/// UTF-8 when valid, otherwise Latin-1 (the ML-100K item file is Latin-1).
fn decode(bytes: &[u8]) -> String {
    match std::str::from_utf8(bytes) {
        Ok(s) => s.to_string(),
        Err(_) => bytes.iter().map(|&b| b as char).collect(),
    }
}

enum ResolvedSource {
    Single(usize),
    MultiHot(Vec<usize>, Vec<String>),
}

struct ResolvedFeature {
    name: String,
    kind: FeatureKind,
    source: ResolvedSource,
    list_separator: Option<String>,
}

struct ProfileReader<'a> {
    id: Option<usize>,
    features: Vec<ResolvedFeature>,
    missing: &'a [String],
}

impl<'a> ProfileReader<'a> {
    fn new(spec: &ProfileTable, table: &Table, missing: &'a [String]) -> Result<Self> {
        let id = match &spec.id {
            IdSpec::Column(c) => Some(table.resolve(c)?),
            IdSpec::Derived => None,
        };
        let features = spec
            .features
            .iter()
            .map(|f| {
                let source = match (&f.column, &f.multi_hot) {
                    (Some(c), None) => ResolvedSource::Single(table.resolve(c)?),
                    (None, Some(m)) => {
                        if m.columns.len() != m.labels.len() {
                            return Err(Error::Schema(format!(
                                "feature `{}`: {} multi-hot columns but {} labels",
                                f.name,
                                m.columns.len(),
                                m.labels.len()
                            )));
                        }
                        ResolvedSource::MultiHot(
                            m.columns.iter().map(|c| table.resolve(c)).collect::<Result<_>>()?,
                            m.labels.clone(),
                        )
                    }
                    _ => {
                        return Err(Error::Schema(format!(
                            "feature `{}` needs exactly one of `column` or `multi_hot`",
                            f.name
                        )))
                    }
                };
                Ok(ResolvedFeature {
                    name: f.name.clone(),
                    kind: f.kind,
                    source,
                    list_separator: f.list_separator.clone(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { id, features, missing })
    }

    fn read(&self, row: &[String]) -> std::result::Result<Profile, String> {
        let mut values = Vec::with_capacity(self.features.len());
        let mut raw = Vec::with_capacity(self.features.len());
        for f in &self.features {
            match &f.source {
                ResolvedSource::Single(i) => {
                    let cell = cell(row, *i)?.trim();
                    raw.push(cell.to_string());
                    values.push(self.parse(f, cell)?);
                }
                ResolvedSource::MultiHot(cols, labels) => {
                    let mut list = Vec::new();
                    for (c, label) in cols.iter().zip(labels) {
                        let v = cell(row, *c)?.trim();
                        raw.push(v.to_string());
                        if v == "1" {
                            list.push(label.clone());
                        }
                    }
                    values.push(if list.is_empty() {
                        FeatureValue::Missing
                    } else {
                        FeatureValue::List(list)
                    });
                }
            }
        }
        let id = match self.id {
            Some(i) => cell(row, i)?.trim().to_string(),
            None => raw.join("|"),
        };
        Ok(Profile { id, values })
    }

    fn parse(&self, f: &ResolvedFeature, cell: &str) -> std::result::Result<FeatureValue, String> {
        if self.missing.iter().any(|m| m == cell) {
            return Ok(FeatureValue::Missing);
        }
        Ok(match f.kind {
            FeatureKind::Continuous => match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => FeatureValue::Number(v),
                Ok(_) => FeatureValue::Missing,
                Err(_) => return Err(format!("feature `{}`: cannot parse `{cell}` as a number", f.name)),
            },
            FeatureKind::Discrete => match &f.list_separator {
                Some(sep) => FeatureValue::List(
                    cell.split(sep.as_str())
                        .map(|s| s.trim().to_string())
                        .filter(|s| !s.is_empty())
                        .collect(),
                ),
                None => FeatureValue::Text(cell.to_string()),
            },
        })
    }
}

fn cell(row: &[String], i: usize) -> std::result::Result<&str, String> {
    row.get(i)
        .map(String::as_str)
        .ok_or_else(|| format!("row has {} fields, column #{i} requested", row.len()))
}

/// Reads a dataset distribution described by `source`. Relative paths are
/// resolved against `base_dir`.
pub fn ingest_dataset(source: &DatasetSource, base_dir: &Path) -> Result<RecDataset> {
    let schema = source.schema()?;
    let inter_path = source
        .interactions
        .format
        .path
        .as_ref()
        .map(|p| base_dir.join(p))
        .ok_or_else(|| Error::Config(vec!["interactions.path is required".into()]))?;
    let inter_table = Table::read(&inter_path, &source.interactions.format)?;

    let mut skipped = 0usize;
    let mut on_row_error = |path: &Path, line: u64, message: String| -> Result<()> {
        match source.on_error {
            ErrorPolicy::Fail => Err(Error::Row {
                path: path.into(),
                line,
                message,
            }),
            ErrorPolicy::Skip => {
                log::warn!("{}:{line}: skipped: {message}", path.display());
                skipped += 1;
                Ok(())
            }
        }
    };

    let mut read_profiles = |spec: &ProfileTable| -> Result<(Option<Vec<Profile>>, ProfileOrigin)> {
        match &spec.format.path {
            Some(p) => {
                let path = base_dir.join(p);
                let table = Table::read(&path, &spec.format)?;
                let reader = ProfileReader::new(spec, &table, &source.missing_values)?;
                let mut out = Vec::with_capacity(table.rows.len());
                for (line, row) in &table.rows {
                    match reader.read(row) {
                        Ok(p) => out.push(p),
                        Err(msg) => on_row_error(&table.path, *line, msg)?,
                    }
                }
                if !spec.joins.is_empty() {
                    out = apply_joins(out, spec, base_dir, &source.missing_values)?;
                }
                Ok((Some(out), ProfileOrigin::External))
            }
            None if !spec.joins.is_empty() => Err(Error::Config(vec![
                "joined features need an external profile table".into(),
            ])),
            None => Ok((None, ProfileOrigin::Inline)),
        }
    };
    let (users_ext, user_mode) = read_profiles(&source.users)?;
    let (items_ext, item_mode) = read_profiles(&source.items)?;

    let user_inline = match user_mode {
        ProfileOrigin::Inline => Some(ProfileReader::new(&source.users, &inter_table, &source.missing_values)?),
        ProfileOrigin::External => None,
    };
    let item_inline = match item_mode {
        ProfileOrigin::Inline => Some(ProfileReader::new(&source.items, &inter_table, &source.missing_values)?),
        ProfileOrigin::External => None,
    };
    let id_col = |spec: &IdSpec, inline: bool, side: &str| -> Result<Option<usize>> {
        match spec {
            IdSpec::Column(c) => Ok(Some(inter_table.resolve(c)?)),
            IdSpec::Derived if inline => Ok(None),
            IdSpec::Derived => Err(Error::Config(vec![format!(
                "interactions.{side}_id = \"derived\" requires {side} profiles inline in the interaction table"
            )])),
        }
    };
    let user_col = id_col(&source.interactions.user_id, user_inline.is_some(), "user")?;
    let item_col = id_col(&source.interactions.item_id, item_inline.is_some(), "item")?;
    let label_col = inter_table.resolve(&source.interactions.label)?;

    let known_users: Option<HashSet<String>> = users_ext.as_ref().map(|v| v.iter().map(|p| p.id.clone()).collect());
    let known_items: Option<HashSet<String>> = items_ext.as_ref().map(|v| v.iter().map(|p| p.id.clone()).collect());

    let mut users = users_ext.unwrap_or_default();
    let mut items = items_ext.unwrap_or_default();
    let mut interactions = Vec::with_capacity(inter_table.rows.len());
    for (line, row) in &inter_table.rows {
        let parsed = (|| -> std::result::Result<(Interaction, Option<Profile>, Option<Profile>), String> {
            let user = user_inline.as_ref().map(|r| r.read(row)).transpose()?;
            let item = item_inline.as_ref().map(|r| r.read(row)).transpose()?;
            let user_id = match user_col {
                Some(c) => cell(row, c)?.trim().to_string(),
                None => user.as_ref().map(|p| p.id.clone()).unwrap_or_default(),
            };
            let item_id = match item_col {
                Some(c) => cell(row, c)?.trim().to_string(),
                None => item.as_ref().map(|p| p.id.clone()).unwrap_or_default(),
            };
            let raw = cell(row, label_col)?.trim();
            let raw_label = if source.missing_values.iter().any(|m| m == raw) {
                None
            } else {
                Some(
                    raw.parse::<f64>()
                        .map_err(|_| format!("label `{raw}` is not a number"))?,
                )
            };
            if let Some(known) = &known_users {
                if !known.contains(&user_id) {
                    return Err(format!("unknown user `{user_id}`"));
                }
            }
            if let Some(known) = &known_items {
                if !known.contains(&item_id) {
                    return Err(format!("unknown item `{item_id}`"));
                }
            }
            let user = user.map(|p| Profile {
                id: user_id.clone(),
                ..p
            });
            let item = item.map(|p| Profile {
                id: item_id.clone(),
                ..p
            });
            Ok((
                Interaction {
                    user_id,
                    item_id,
                    raw_label,
                    label: None,
                },
                user,
                item,
            ))
        })();
        match parsed {
            Ok((it, u, i)) => {
                users.extend(u);
                items.extend(i);
                interactions.push(it);
            }
            Err(msg) => on_row_error(&inter_table.path, *line, msg)?,
        }
    }
    if skipped > 0 {
        log::warn!("{}: skipped {skipped} malformed rows", source.name);
    }
    RecDataset::new(&source.name, schema, users, items, interactions)
}

enum ProfileOrigin {
    External,
    Inline,
}

/// Appends one list feature per join. Ids found only in side tables become
/// profiles whose main features are missing, ordered by id after the rest.
fn apply_joins(
    mut profiles: Vec<Profile>,
    spec: &ProfileTable,
    base_dir: &Path,
    missing: &[String],
) -> Result<Vec<Profile>> {
    let mut gathered: Vec<HashMap<String, Vec<String>>> = Vec::with_capacity(spec.joins.len());
    let mut extra: BTreeSet<String> = BTreeSet::new();
    let known: HashSet<String> = profiles.iter().map(|p| p.id.clone()).collect();
    for join in &spec.joins {
        let path = join
            .format
            .path
            .as_ref()
            .map(|p| base_dir.join(p))
            .ok_or_else(|| Error::Config(vec![format!("join `{}` needs a path", join.feature)]))?;
        let table = Table::read(&path, &join.format)?;
        let (k, v) = (table.resolve(&join.key)?, table.resolve(&join.value)?);
        let mut map: HashMap<String, Vec<String>> = HashMap::new();
        for (line, row) in &table.rows {
            let (Some(key), Some(value)) = (row.get(k), row.get(v)) else {
                return Err(Error::Row {
                    path: path.clone(),
                    line: *line,
                    message: format!("row has {} fields", row.len()),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if !known.contains(key) {
                extra.insert(key.to_string());
            }
            let entry = map.entry(key.to_string()).or_default();
            if !missing.iter().any(|m| m == value) && !entry.iter().any(|e| e == value) {
                entry.push(value.to_string());
            }
        }
        gathered.push(map);
    }
    let width = spec.features.len();
    profiles.extend(extra.into_iter().map(|id| Profile {
        id,
        values: vec![FeatureValue::Missing; width],
    }));
    for p in &mut profiles {
        for map in &gathered {
            p.values.push(match map.get(&p.id) {
                Some(v) if !v.is_empty() => FeatureValue::List(v.clone()),
                _ => FeatureValue::Missing,
            });
        }
    }
    Ok(profiles)
}

// ---------------------------------------------------------------------------
// Labels, partition, statistics

/// `label = raw_label >= threshold`.
pub fn binarize_labels(dataset: &RecDataset, threshold: f64) -> Result<RecDataset> {
    let interactions = dataset
        .interactions
        .iter()
        .enumerate()
        .map(|(n, it)| {
            let raw = it.raw_label.ok_or_else(|| {
                Error::invalid(format!(
                    "interaction {n} ({} -> {}) has no raw label",
                    it.user_id, it.item_id
                ))
            })?;
            Ok(Interaction {
                label: Some(raw >= threshold),
                ..it.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RecDataset {
        interactions,
        threshold: Some(threshold),
        ..dataset.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Train,
    Valid,
    Test,
}

/// Indices into the owning dataset's interaction list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub seed: u64,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn part(&self, part: Part) -> &[usize] {
        match part {
            Part::Train => &self.train,
            Part::Valid => &self.valid,
            Part::Test => &self.test,
        }
    }

    pub fn interactions<'a>(
        &'a self,
        dataset: &'a RecDataset,
        part: Part,
    ) -> impl Iterator<Item = &'a Interaction> + 'a {
        self.part(part).iter().map(|&i| &dataset.interactions[i])
    }

    pub fn write(&self, dataset: &RecDataset, path: &Path) -> Result<()> {
        let mut w = util::create(path)?;
        util::write_json_line(
            &mut w,
            path,
            &serde_json::json!({
                "format": SPLIT_FORMAT,
                "dataset": dataset.name(),
                "schema": dataset.schema(),
                "threshold": dataset.threshold(),
                "seed": self.seed,
                "sizes": [self.train.len(), self.valid.len(), self.test.len()],
            }),
        )?;
        for part in [Part::Train, Part::Valid, Part::Test] {
            for &index in self.part(part) {
                let it = &dataset.interactions[index];
                util::write_json_line(
                    &mut w,
                    path,
                    &SplitRecord {
                        part,
                        index,
                        user_id: it.user_id.clone(),
                        item_id: it.item_id.clone(),
                        label: it.label,
                    },
                )?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<DatasetSplit> {
        let mut lines = util::read_lines(path)?;
        let (_, first) = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{}: empty split file", path.display())))??;
        let header: serde_json::Value = serde_json::from_str(&first)?;
        let seed = header["seed"]
            .as_u64()
            .ok_or_else(|| Error::invalid(format!("{}: header lacks seed", path.display())))?;
        let mut split = DatasetSplit {
            seed,
            train: vec![],
            valid: vec![],
            test: vec![],
        };
        for line in lines {
            let (_, line) = line?;
            let r: SplitRecord = serde_json::from_str(&line)?;
            match r.part {
                Part::Train => split.train.push(r.index),
                Part::Valid => split.valid.push(r.index),
                Part::Test => split.test.push(r.index),
            }
        }
        Ok(split)
    }
}

#[derive(Serialize, Deserialize)]
struct SplitRecord {
    part: Part,
    index: usize,
    user_id: String,
    item_id: String,
    label: Option<bool>,
}

/// Seeded shuffle, then 250 train, 50 valid, the rest test.
pub fn partition_dataset(dataset: &RecDataset, seed: u64) -> Result<DatasetSplit> {
    let n = dataset.interactions.len();
    let minimum = TRAIN_SIZE + VALID_SIZE + 1;
    if n < minimum {
        return Err(Error::invalid(format!(
            "dataset `{}` has {n} interactions; partitioning needs at least {minimum}",
            dataset.name
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut util::sub_rng(seed, "partition"));
    let test = order.split_off(TRAIN_SIZE + VALID_SIZE);
    let valid = order.split_off(TRAIN_SIZE);
    Ok(DatasetSplit {
        seed,
        train: order,
        valid,
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    /// `|interactions| / (|users| * |items|)`.
    pub density: f64,
    /// Fraction of positive labels, when binarized.
    pub positive_rate: Option<f64>,
}

pub fn dataset_stats(dataset: &RecDataset) -> DatasetStats {
    let (u, i, n) = (dataset.users.len(), dataset.items.len(), dataset.interactions.len());
    let cells = u as f64 * i as f64;
    let density = if n == 0 || cells == 0.0 {
        0.0
    } else {
        (n as f64 / cells).min(1.0)
    };
    let labeled: Vec<bool> = dataset.interactions.iter().filter_map(|x| x.label).collect();
    let positive_rate =
        (!labeled.is_empty() && labeled.len() == n).then(|| labeled.iter().filter(|&&l| l).count() as f64 / n as f64);
    DatasetStats {
        users: u,
        items: i,
        interactions: n,
        density,
        positive_rate,
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// Two users, three items, a handful of rated interactions.
    pub fn tiny() -> RecDataset {
        let schema = FeatureSchema::new(
            vec![
                FeatureDef::new("age", FeatureKind::Continuous),
                FeatureDef::new("job", FeatureKind::Discrete),
            ],
            vec![FeatureDef::new("title", FeatureKind::Discrete)],
        )
        .unwrap();
        let users = vec![
            Profile {
                id: "u1".into(),
                values: vec![FeatureValue::Number(72.0), FeatureValue::Text("writer".into())],
            },
            Profile {
                id: "u2".into(),
                values: vec![FeatureValue::Number(20.0), FeatureValue::Missing],
            },
        ];
        let items = ["Heat", "Fargo", "Alien"]
            .iter()
            .map(|t| Profile {
                id: t.to_lowercase(),
                values: vec![FeatureValue::Text(t.to_string())],
            })
            .collect();
        let interactions = [("u1", "heat", 5.0), ("u1", "fargo", 2.0), ("u2", "alien", 4.0)]
            .iter()
            .map(|(u, i, r)| Interaction {
                user_id: u.to_string(),
                item_id: i.to_string(),
                raw_label: Some(*r),
                label: None,
            })
            .collect();
        RecDataset::new("tiny", schema, users, items, interactions).unwrap()
    }

    pub fn with_n_interactions(n: usize) -> RecDataset {
        let base = tiny();
        let interactions = (0..n)
            .map(|k| Interaction {
                user_id: if k % 2 == 0 { "u1" } else { "u2" }.into(),
                item_id: ["heat", "fargo", "alien"][k % 3].into(),
                raw_label: Some((k % 5) as f64 + 1.0),
                label: None,
            })
            .collect();
        RecDataset::new(
            "many",
            base.schema.clone(),
            base.users.clone(),
            base.items.clone(),
            interactions,
        )
        .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schema_rejects_duplicates_and_empty_lists() {
        let f = |n: &str| FeatureDef::new(n, FeatureKind::Discrete);
        assert!(FeatureSchema::new(vec![f("a"), f("a")], vec![f("b")]).is_err());
        assert!(FeatureSchema::new(vec![], vec![f("b")]).is_err());
        let s = FeatureSchema::new(vec![f("a")], vec![f("a")]).unwrap();
        assert_eq!((s.d_user(), s.d_item()), (1, 1));
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        let ds = binarize_labels(&tiny(), 4.0).unwrap();
        let labels: Vec<_> = ds.interactions().iter().map(|i| i.label.unwrap()).collect();
        assert_eq!(labels, vec![true, false, true]);
        assert_eq!(ds.interactions()[0].raw_label, Some(5.0));
        assert_eq!(ds.threshold(), Some(4.0));
    }

    #[test]
    fn binarize_negative_infinity_makes_everything_positive() {
        let ds = binarize_labels(&tiny(), f64::NEG_INFINITY).unwrap();
        assert!(ds.interactions().iter().all(|i| i.label == Some(true)));
    }

    #[test]
    fn binarize_reports_missing_raw_label() {
        let base = tiny();
        let mut its = base.interactions().to_vec();
        its[1].raw_label = None;
        let ds = RecDataset::new(
            "x",
            base.schema().clone(),
            base.users().to_vec(),
            base.items().to_vec(),
            its,
        )
        .unwrap();
        let err = binarize_labels(&ds, 1.0).unwrap_err().to_string();
        assert!(err.contains("interaction 1"), "{err}");
    }

    #[test]
    fn restaurant_style_ratings_threshold_two() {
        let base = tiny();
        let its: Vec<_> = [0.0, 1.0, 2.0, 2.0, 1.0, 0.0, 2.0]
            .iter()
            .map(|&r| Interaction {
                user_id: "u1".into(),
                item_id: "heat".into(),
                raw_label: Some(r),
                label: None,
            })
            .collect();
        let expected = its.iter().filter(|i| i.raw_label == Some(2.0)).count();
        let ds = RecDataset::new(
            "r",
            base.schema().clone(),
            base.users().to_vec(),
            base.items().to_vec(),
            its,
        )
        .unwrap();
        let ds = binarize_labels(&ds, 2.0).unwrap();
        let positives = ds.interactions().iter().filter(|i| i.label == Some(true)).count();
        assert_eq!(positives, expected);
        assert_eq!(positives, 3);
    }

    #[test]
    fn partition_sizes_and_determinism() {
        let ds = with_n_interactions(1161);
        let a = partition_dataset(&ds, 7).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (250, 50, 861));
        assert_eq!(a, partition_dataset(&ds, 7).unwrap());
        assert_ne!(a, partition_dataset(&ds, 8).unwrap());
    }

    #[test]
    fn partition_coupon_sized() {
        let ds = with_n_interactions(12_684);
        assert_eq!(partition_dataset(&ds, 1).unwrap().test.len(), 12_384);
    }

    #[test]
    fn partition_requires_minimum() {
        let err = partition_dataset(&with_n_interactions(300), 1).unwrap_err();
        assert!(err.to_string().contains("301"));
        assert!(partition_dataset(&with_n_interactions(301), 1).is_ok());
    }

    #[test]
    fn stats_density_and_empty_case() {
        let ds = tiny();
        let s = dataset_stats(&ds);
        assert_eq!((s.users, s.items, s.interactions), (2, 3, 3));
        assert!((s.density - 0.5).abs() < 1e-12);
        assert_eq!(s.positive_rate, None);
        assert_eq!(dataset_stats(&ds.without_interactions()).density, 0.0);
        let b = dataset_stats(&binarize_labels(&ds, 4.0).unwrap());
        assert!((b.positive_rate.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn table_one_density_arithmetic() {
        let coupon: f64 = 12_684.0 / (8312.0 * 6924.0);
        assert!((coupon - 0.0002).abs() < 0.00005);
        let ml: f64 = 100_000.0 / (943.0 * 1682.0);
        assert!((ml - 0.0630).abs() < 0.0001);
    }

    #[test]
    fn split_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = binarize_labels(&with_n_interactions(400), 3.0).unwrap();
        let split = partition_dataset(&ds, 3).unwrap();
        let path = dir.path().join("split.jsonl");
        split.write(&ds, &path).unwrap();
        assert_eq!(DatasetSplit::read(&path).unwrap(), split);
    }

    proptest! {
        #[test]
        fn binarization_is_monotone(raw in proptest::collection::vec(-10.0f64..10.0, 1..40),
                                    t1 in -10.0f64..10.0, dt in 0.0f64..5.0) {
            let base = tiny();
            let its: Vec<_> = raw.iter().map(|&r| Interaction {
                user_id: "u2".into(), item_id: "alien".into(), raw_label: Some(r), label: None,
            }).collect();
            let ds = RecDataset::new("p", base.schema().clone(), base.users().to_vec(), base.items().to_vec(), its).unwrap();
            let lo = binarize_labels(&ds, t1).unwrap();
            let hi = binarize_labels(&ds, t1 + dt).unwrap();
            for (a, b) in lo.interactions().iter().zip(hi.interactions()) {
                prop_assert!(!(a.label == Some(false) && b.label == Some(true)));
            }
        }

        #[test]
        fn partition_is_exact_cover(n in 301usize..900, seed in any::<u64>()) {
            let ds = with_n_interactions(n);
            let s = partition_dataset(&ds, seed).unwrap();
            prop_assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (250, 50, n - 300));
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn snapshot_round_trip(ages in proptest::collection::vec(proptest::option::of(-1e6f64..1e6), 1..6),
                               labels in proptest::collection::vec(proptest::option::of(-5.0f64..5.0), 0..12)) {
            let schema = FeatureSchema::new(
                vec![FeatureDef::new("age", FeatureKind::Continuous)],
                vec![FeatureDef::new("tags", FeatureKind::Discrete)],
            ).unwrap();
            let users: Vec<_> = ages.iter().enumerate().map(|(k, a)| Profile {
                id: format!("u{k}"),
                values: vec![a.map(FeatureValue::Number).unwrap_or(FeatureValue::Missing)],
            }).collect();
            let items = vec![
                Profile { id: "i0".into(), values: vec![FeatureValue::List(vec!["a b".into(), "ç".into()])] },
                Profile { id: "i1".into(), values: vec![FeatureValue::Text("\"quoted\"".into())] },
            ];
            let its: Vec<_> = labels.iter().enumerate().map(|(k, l)| Interaction {
                user_id: format!("u{}", k % users.len()), item_id: format!("i{}", k % 2), raw_label: *l, label: None,
            }).collect();
            let ds = RecDataset::new("snap", schema, users, items, its).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("ds.jsonl");
            ds.write_snapshot(&path).unwrap();
            prop_assert_eq!(RecDataset::read_snapshot(&path).unwrap(), ds);
        }
    }
}
