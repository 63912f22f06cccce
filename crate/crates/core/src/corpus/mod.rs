//! Dialogue data model, JSONL ingestion and context assembly.
//!
//! On disk a dialogue is one JSON object per turn:
//!
//! ```json
//! {"dialogue_id":"d1","turn_index":0,"speaker":"user","utterance":"...",
//!  "grounding_passage_id":"p7","response":"...","language":"fr"}
//! ```
//!
//! `language` is optional and defaults to the grounding passage's language.
//! Every line becomes one [`TrainingExample`] whose input is the line's
//! utterance followed by the most recent earlier turns of the same dialogue.

pub mod synthetic;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tokenizer::TURN_SEPARATOR;

pub const DEFAULT_PRE_K_TURNS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    Vi,
    Fr,
    Zh,
    En,
    Synthetic,
}

impl Language {
    pub fn code(self) -> &'static str {
        match self {
            Language::Vi => "vi",
            Language::Fr => "fr",
            Language::Zh => "zh",
            Language::En => "en",
            Language::Synthetic => "synthetic",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl std::str::FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vi" => Ok(Language::Vi),
            "fr" => Ok(Language::Fr),
            "zh" => Ok(Language::Zh),
            "en" => Ok(Language::En),
            "synthetic" => Ok(Language::Synthetic),
            other => Err(format!("unknown language {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub text: String,
    pub language: Language,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    fn tag(self) -> &'static str {
        match self {
            Speaker::User => "user:",
            Speaker::Agent => "agent:",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub speaker: Speaker,
    pub utterance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Native,
    Translated,
    HighResource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub id: String,
    pub input_x: String,
    pub grounding_passage_id: String,
    pub response_r: String,
    pub language: Language,
    pub origin: Origin,
}

impl TrainingExample {
    /// Content hash used to audit which examples a stage actually consumed.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("example serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusRole {
    /// Original high-resource (e.g. English, Chinese) training data.
    DCrossLingual,
    /// Machine-translated pseudo data.
    DPrimeTranslated,
    /// Downstream low-resource training data.
    DTDownstream,
    /// High-resource source data awaiting translation.
    UHighResource,
}

impl CorpusRole {
    pub fn origin(self) -> Origin {
        match self {
            CorpusRole::DCrossLingual | CorpusRole::UHighResource => Origin::HighResource,
            CorpusRole::DPrimeTranslated => Origin::Translated,
            CorpusRole::DTDownstream => Origin::Native,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CorpusRole::DCrossLingual => "d_cross_lingual",
            CorpusRole::DPrimeTranslated => "d_prime_translated",
            CorpusRole::DTDownstream => "d_t_downstream",
            CorpusRole::UHighResource => "u_high_resource",
        }
    }
}

impl fmt::Display for CorpusRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for CorpusRole {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            CorpusRole::DCrossLingual,
            CorpusRole::DPrimeTranslated,
            CorpusRole::DTDownstream,
            CorpusRole::UHighResource,
        ]
        .into_iter()
        .find(|r| r.name() == s)
        .ok_or_else(|| format!("unknown corpus role {s:?}"))
    }
}

/// An immutable, role-tagged collection of examples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSet {
    role: CorpusRole,
    examples: Vec<TrainingExample>,
}

impl CorpusSet {
    pub fn new(role: CorpusRole, examples: Vec<TrainingExample>) -> Self {
        Self { role, examples }
    }

    pub fn role(&self) -> CorpusRole {
        self.role
    }

    pub fn examples(&self) -> &[TrainingExample] {
        &self.examples
    }

    pub fn size_n(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn counts_by_language(&self) -> BTreeMap<Language, usize> {
        let mut out = BTreeMap::new();
        for e in &self.examples {
            *out.entry(e.language).or_insert(0) += 1;
        }
        out
    }

    /// The same examples under another role.
    pub fn with_role(&self, role: CorpusRole) -> Self {
        Self {
            role,
            examples: self.examples.clone(),
        }
    }
}

/// Passages addressable by id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PassagePool {
    passages: Vec<Passage>,
    index: HashMap<String, usize>,
}

impl PassagePool {
    pub fn new(passages: Vec<Passage>) -> Result<Self, CorpusError> {
        let mut pool = Self::default();
        for p in passages {
            pool.insert(p)?;
        }
        Ok(pool)
    }

    pub fn insert(&mut self, p: Passage) -> Result<(), CorpusError> {
        if p.text.trim().is_empty() {
            return Err(CorpusError::EmptyPassage(p.id));
        }
        if self.index.contains_key(&p.id) {
            return Err(CorpusError::DuplicatePassage(p.id));
        }
        self.index.insert(p.id.clone(), self.passages.len());
        self.passages.push(p);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.index.get(id).map(|&i| &self.passages[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }
}

/// One line of the turn-level JSONL format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub speaker: Speaker,
    pub utterance: String,
    pub grounding_passage_id: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<Language>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field {field}")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: grounding passage {id} not found in the passage pool")]
    DanglingPassage { line: usize, id: String },
    #[error("line {line}: turn_index {turn_index} of dialogue {dialogue_id} is not greater than the previous turn")]
    TurnOrder {
        line: usize,
        dialogue_id: String,
        turn_index: u32,
    },
    #[error("passage {0} appears more than once")]
    DuplicatePassage(String),
    #[error("passage {0} has empty text")]
    EmptyPassage(String),
}

/// How much history goes into an example's input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextOptions {
    pub pre_k_turns: usize,
    /// Prefix each history utterance with `user:` / `agent:`.
    pub speaker_tags: bool,
}

impl Default for ContextOptions {
    fn default() -> Self {
        Self {
            pre_k_turns: DEFAULT_PRE_K_TURNS,
            speaker_tags: true,
        }
    }
}

/// Current utterance followed by up to `pre_k_turns` earlier utterances,
/// most recent first, joined by the turn separator.
pub fn assemble_input(turns: &[DialogueTurn], current_index: usize, pre_k_turns: usize) -> String {
    assemble_context(
        turns,
        current_index,
        ContextOptions {
            pre_k_turns,
            speaker_tags: false,
        },
    )
}

pub fn assemble_context(turns: &[DialogueTurn], current_index: usize, opts: ContextOptions) -> String {
    assert!(current_index < turns.len(), "current_index out of range");
    let mut parts = vec![turns[current_index].utterance.clone()];
    for t in turns[..current_index].iter().rev().take(opts.pre_k_turns) {
        if opts.speaker_tags {
            parts.push(format!("{} {}", t.speaker.tag(), t.utterance));
        } else {
            parts.push(t.utterance.clone());
        }
    }
    parts.join(&format!(" {TURN_SEPARATOR} "))
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

const REQUIRED_FIELDS: [&str; 6] = [
    "dialogue_id",
    "turn_index",
    "speaker",
    "utterance",
    "grounding_passage_id",
    "response",
];

fn parse_turn_line(line_no: usize, text: &str) -> Result<TurnRecord, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| CorpusError::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| CorpusError::Malformed {
        line: line_no,
        message: "expected a JSON object".into(),
    })?;
    for field in REQUIRED_FIELDS {
        if !obj.contains_key(field) {
            return Err(CorpusError::MissingField {
                line: line_no,
                field,
            });
        }
    }
    serde_json::from_value(value).map_err(|e| CorpusError::Malformed {
        line: line_no,
        message: e.to_string(),
    })
}

/// Reads turn records, skipping blank lines. Line numbers are 1-based.
pub fn read_turn_records(path: impl AsRef<Path>) -> Result<Vec<TurnRecord>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_turn_line(i + 1, &line)?);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CorpusError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serialises");
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(&buf).map_err(|e| io_err(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_turn_records(path: impl AsRef<Path>, records: &[TurnRecord]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), records)
}

pub fn read_passages(path: impl AsRef<Path>) -> Result<PassagePool, CorpusError> {
    PassagePool::new(read_jsonl(path.as_ref())?)
}

pub fn write_passages(path: impl AsRef<Path>, passages: &[Passage]) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), passages)
}

/// Example-level JSONL (one [`TrainingExample`] per line).
pub fn read_examples(path: impl AsRef<Path>, role: CorpusRole) -> Result<CorpusSet, CorpusError> {
    Ok(CorpusSet::new(role, read_jsonl(path.as_ref())?))
}

pub fn write_examples(path: impl AsRef<Path>, set: &CorpusSet) -> Result<(), CorpusError> {
    write_jsonl(path.as_ref(), set.examples())
}

/// Turns validated records into examples. `first_line` numbers errors.
pub fn examples_from_records(
    records: &[TurnRecord],
    role: CorpusRole,
    pool: &PassagePool,
    opts: ContextOptions,
) -> Result<CorpusSet, CorpusError> {
    // Per dialogue: history as it grows, last turn index seen.
    let mut history: HashMap<&str, (Vec<DialogueTurn>, u32)> = HashMap::new();
    let mut examples = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let line = i + 1;
        let passage = pool
            .get(&r.grounding_passage_id)
            .ok_or_else(|| CorpusError::DanglingPassage {
                line,
                id: r.grounding_passage_id.clone(),
            })?;
        if r.utterance.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "utterance is empty".into(),
            });
        }
        let entry = history
            .entry(r.dialogue_id.as_str())
            .or_insert_with(|| (Vec::new(), 0));
        if !entry.0.is_empty() && r.turn_index <= entry.1 {
            return Err(CorpusError::TurnOrder {
                line,
                dialogue_id: r.dialogue_id.clone(),
                turn_index: r.turn_index,
            });
        }
        let turns = &mut entry.0;
        turns.push(DialogueTurn {
            dialogue_id: r.dialogue_id.clone(),
            turn_index: r.turn_index,
            speaker: r.speaker,
            utterance: r.utterance.clone(),
        });
        let input_x = assemble_context(turns, turns.len() - 1, opts);
        // The response becomes an agent turn in the history of later lines.
        turns.push(DialogueTurn {
            dialogue_id: r.dialogue_id.clone(),
            turn_index: r.turn_index,
            speaker: Speaker::Agent,
            utterance: r.response.clone(),
        });
        entry.1 = r.turn_index;
        examples.push(TrainingExample {
            id: format!("{}:{}", r.dialogue_id, r.turn_index),
            input_x,
            grounding_passage_id: r.grounding_passage_id.clone(),
            response_r: r.response.clone(),
            language: r.language.unwrap_or(passage.language),
            origin: role.origin(),
        });
    }
    Ok(CorpusSet::new(role, examples))
}

/// A validated corpus plus its per-language counts.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub set: CorpusSet,
    pub counts: BTreeMap<Language, usize>,
}

pub fn ingest_jsonl(
    path: impl AsRef<Path>,
    role: CorpusRole,
    pool: &PassagePool,
    opts: ContextOptions,
) -> Result<Ingested, CorpusError> {
    let records = read_turn_records(path)?;
    let set = examples_from_records(&records, role, pool, opts)?;
    let counts = set.counts_by_language();
    for (lang, n) in &counts {
        log::info!("ingested {n} {lang} examples as {role}");
    }
    Ok(Ingested { set, counts })
}
