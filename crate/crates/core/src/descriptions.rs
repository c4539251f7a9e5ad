//! Per-image description sets: generation through a pluggable provider,
//! coverage checks, and the line-oriented on-disk format.
//!
//! File layout (UTF-8, LF newlines):
//!
//! ```text
//! descset v1 kind=short
//! {"id":"img_00000","text":"A photo of a bako.","provider":"stub"}
//! ...
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::fnv1a;

pub const LONG_PROMPT: &str = "Describe this image in detail.";
pub const SHORT_PROMPT: &str = "Write a one-sentence short description about this image.";

const HEADER_PREFIX: &str = "descset v1 kind=";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PromptKind {
    Short,
    Long,
}

impl PromptKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PromptKind::Short => "short",
            PromptKind::Long => "long",
        }
    }
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "short" => Ok(PromptKind::Short),
            "long" => Ok(PromptKind::Long),
            other => Err(Error::Usage(format!(
                "unknown prompt kind `{other}` (expected short|long)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub kind: PromptKind,
    pub text: String,
}

impl PromptTemplate {
    /// The fixed prompt for `kind`.
    pub fn standard(kind: PromptKind) -> Self {
        let text = match kind {
            PromptKind::Short => SHORT_PROMPT,
            PromptKind::Long => LONG_PROMPT,
        };
        Self {
            kind,
            text: text.to_owned(),
        }
    }

    /// Extension point for experiments with non-standard prompts.
    pub fn custom(kind: PromptKind, text: impl Into<String>) -> Self {
        Self {
            kind,
            text: text.into(),
        }
    }

    pub fn is_standard(&self) -> bool {
        *self == Self::standard(self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionRecord {
    pub image_id: String,
    pub prompt_kind: PromptKind,
    pub text: String,
    pub provider_name: String,
}

/// Descriptions for one prompt kind, keyed (and iterated) by image id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionSet {
    kind: PromptKind,
    records: BTreeMap<String, DescriptionRecord>,
}

impl DescriptionSet {
    pub fn new(kind: PromptKind) -> Self {
        Self {
            kind,
            records: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> PromptKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&DescriptionRecord> {
        self.records.get(image_id)
    }

    /// Records in ascending image-id order.
    pub fn records(&self) -> impl Iterator<Item = &DescriptionRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn insert(&mut self, record: DescriptionRecord) -> Result<()> {
        if record.prompt_kind != self.kind {
            return Err(Error::Validation(format!(
                "record `{}` has kind {} in a {} set",
                record.image_id, record.prompt_kind, self.kind
            )));
        }
        if record.image_id.is_empty() {
            return Err(Error::Validation("empty image id".into()));
        }
        if record.text.trim().is_empty() {
            return Err(Error::Validation(format!(
                "empty description for image `{}`",
                record.image_id
            )));
        }
        if self.records.contains_key(&record.image_id) {
            return Err(Error::DuplicateId(record.image_id));
        }
        self.records.insert(record.image_id.clone(), record);
        Ok(())
    }
}

/// Anything that can describe an image given a prompt: a multimodal model
/// endpoint, or the offline [`StubProvider`].
pub trait DescriptionProvider: Sync {
    fn describe(&self, image_id: &str, prompt: &str) -> std::result::Result<String, String>;

    fn name(&self) -> &str {
        "unknown"
    }
}

/// Calls `provider` once per id with the standard prompt of `kind`.
///
/// Calls run in parallel; the result is ordered by image id regardless of
/// completion order. When several ids fail, the error for the smallest id is
/// returned.
pub fn build_description_set(
    image_ids: &[String],
    provider: &dyn DescriptionProvider,
    kind: PromptKind,
) -> Result<DescriptionSet> {
    build_with_template(image_ids, provider, &PromptTemplate::standard(kind))
}

pub fn build_with_template(
    image_ids: &[String],
    provider: &dyn DescriptionProvider,
    template: &PromptTemplate,
) -> Result<DescriptionSet> {
    if image_ids.is_empty() {
        return Err(Error::Validation("no image ids to describe".into()));
    }
    let mut seen = BTreeSet::new();
    for id in image_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let mut results: Vec<(&String, std::result::Result<String, String>)> = image_ids
        .par_iter()
        .map(|id| (id, provider.describe(id, &template.text)))
        .collect();
    results.sort_by(|a, b| a.0.cmp(b.0));

    let mut set = DescriptionSet::new(template.kind);
    for (id, outcome) in results {
        let text = outcome.map_err(|message| Error::Provider {
            provider: provider.name().to_owned(),
            id: id.clone(),
            message,
        })?;
        set.insert(DescriptionRecord {
            image_id: id.clone(),
            prompt_kind: template.kind,
            text,
            provider_name: provider.name().to_owned(),
        })?;
    }
    Ok(set)
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// Synthetic, single-token class noun; distinct labels give distinct nouns.
pub fn class_noun(label: usize) -> String {
    let base = CONSONANTS.len() * VOWELS.len();
    let mut n = label + base;
    let mut out = String::new();
    while n > 0 {
        let syl = n % base;
        out.push(CONSONANTS[syl / VOWELS.len()] as char);
        out.push(VOWELS[syl % VOWELS.len()] as char);
        n /= base;
    }
    out
}

const SETTINGS: [&str; 8] = [
    "It rests on a plain wooden table with a blurred wall behind it",
    "Tall grass and a few scattered stones fill the background",
    "A gray concrete floor stretches behind it toward a distant doorway",
    "Several leafy branches partly frame the scene on the left side",
    "The background is a soft gradient of pale blue and white",
    "A cluttered shelf with books and boxes is visible in the back",
    "Sand and small shells surround it under an open sky",
    "A patterned rug covers the ground beneath it",
];

const LIGHTING: [&str; 6] = [
    "Warm afternoon light casts long shadows across the frame",
    "The lighting is flat and even, as on an overcast day",
    "A bright lamp on the right creates strong highlights",
    "Dim evening light gives the scene a muted palette",
    "Sunlight from above makes the colors look saturated",
    "Cool fluorescent light gives everything a slight green tint",
];

const POSES: [&str; 5] = [
    "slightly tilted toward the camera",
    "seen from a low angle",
    "in sharp focus against the softer surroundings",
    "partly turned away from the viewer",
    "small relative to the rest of the frame",
];

/// Offline description text for an image of class `label`.
///
/// The short form is one sentence naming the class noun. The long form
/// has four sentences: two mention the class noun and two are filler
/// clauses selected by a stable hash of `image_id`.
pub fn stub_text(image_id: &str, label: usize, kind: PromptKind) -> String {
    let noun = class_noun(label);
    match kind {
        PromptKind::Short => format!("A photo of a {noun}."),
        PromptKind::Long => {
            let h = fnv1a(image_id.as_bytes());
            let setting = SETTINGS[(h % SETTINGS.len() as u64) as usize];
            let light = LIGHTING[((h >> 16) % LIGHTING.len() as u64) as usize];
            let pose = POSES[((h >> 32) % POSES.len() as u64) as usize];
            format!(
                "The image shows a {noun} near the center of the frame. {setting}. {light}. The {noun} appears {pose}."
            )
        }
    }
}

/// Deterministic provider that answers from known class labels.
#[derive(Debug, Clone, Default)]
pub struct StubProvider {
    labels: HashMap<String, usize>,
}

impl StubProvider {
    pub fn new(labels: impl IntoIterator<Item = (String, usize)>) -> Self {
        Self {
            labels: labels.into_iter().collect(),
        }
    }
}

impl DescriptionProvider for StubProvider {
    fn describe(&self, image_id: &str, prompt: &str) -> std::result::Result<String, String> {
        let kind = match prompt {
            SHORT_PROMPT => PromptKind::Short,
            LONG_PROMPT => PromptKind::Long,
            other => return Err(format!("unsupported prompt `{other}`")),
        };
        let label = self
            .labels
            .get(image_id)
            .ok_or_else(|| format!("no class label for `{image_id}`"))?;
        Ok(stub_text(image_id, *label, kind))
    }

    fn name(&self) -> &str {
        "stub"
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    id: String,
    text: String,
    provider: String,
}

pub fn save_set(set: &DescriptionSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("{HEADER_PREFIX}{}\n", set.kind);
    for r in set.records() {
        let line = Line {
            id: r.image_id.clone(),
            text: r.text.clone(),
            provider: r.provider_name.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("string fields serialize"));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_set(path: impl AsRef<Path>) -> Result<DescriptionSet> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_set(&content)
}

fn parse_header(line: &str, lineno: usize) -> Result<PromptKind> {
    let kind = line.strip_prefix(HEADER_PREFIX).ok_or_else(|| Error::Parse {
        line: lineno,
        message: format!("expected header `{HEADER_PREFIX}<short|long>`"),
    })?;
    kind.parse().map_err(|_| Error::Parse {
        line: lineno,
        message: format!("unknown kind `{kind}`"),
    })
}

pub fn parse_set(content: &str) -> Result<DescriptionSet> {
    let body = content.strip_suffix('\n').unwrap_or(content);
    let mut lines = body.split('\n');
    let header = lines.next().unwrap_or("");
    let kind = parse_header(header, 1)?;
    let mut set = DescriptionSet::new(kind);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.starts_with("descset ") {
            let other = parse_header(line, lineno)?;
            return Err(Error::Validation(format!(
                "line {lineno}: mixed prompt kinds ({kind} and {other}) in one file"
            )));
        }
        let parsed: Line = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        set.insert(DescriptionRecord {
            image_id: parsed.id,
            prompt_kind: kind,
            text: parsed.text,
            provider_name: parsed.provider,
        })
        .map_err(|e| match e {
            Error::DuplicateId(_) | Error::Validation(_) => e,
            other => Error::Parse {
                line: lineno,
                message: other.to_string(),
            },
        })?;
    }
    Ok(set)
}

/// Ids the dataset has but the set lacks (`missing`) and the reverse
/// (`orphans`), both sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageReport {
    pub missing: Vec<String>,
    pub orphans: Vec<String>,
}

impl CoverageReport {
    pub fn is_ok(&self) -> bool {
        self.missing.is_empty() && self.orphans.is_empty()
    }
}

pub fn validate_coverage<S: AsRef<str>>(set: &DescriptionSet, dataset_ids: &[S]) -> CoverageReport {
    let dataset: BTreeSet<&str> = dataset_ids.iter().map(AsRef::as_ref).collect();
    let described: BTreeSet<&str> = set.ids().collect();
    CoverageReport {
        missing: dataset.difference(&described).map(|s| s.to_string()).collect(),
        orphans: described.difference(&dataset).map(|s| s.to_string()).collect(),
    }
}
