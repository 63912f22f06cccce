//! Translated pseudo data: a translation client seam, an offline lexicon
//! stub, quality and length filtering, and pseudo-set assembly.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRole, CorpusSet, Language, Origin, Passage, PassagePool, TrainingExample};
use crate::tokenizer::split_words;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum TranslationError {
    #[error("translation service failed: {0}")]
    Service(String),
    #[error("cannot translate empty text")]
    EmptyText,
}

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum XaugError {
    #[error("pseudo data must come from a u_high_resource set, got {0}")]
    WrongRole(CorpusRole),
    #[error("example {id} is {found}, but the client translates from {expected}")]
    DirectionMismatch {
        id: String,
        found: Language,
        expected: Language,
    },
    #[error("invalid filter policy: {0}")]
    InvalidPolicy(String),
}

/// A translation service for one language direction.
pub trait TranslationClient: Sync {
    fn source_language(&self) -> Language;
    fn target_language(&self) -> Language;
    fn translate(&self, text: &str) -> Result<String, TranslationError>;
}

/// Word-for-word lexicon lookup. Whitespace is preserved exactly. A word
/// missing from the lexicon is retried without surrounding punctuation, and
/// otherwise passes through, wrapped as `⟨word⟩` when `tag_unknown` is set.
pub fn stub_translate(text: &str, lexicon: &BTreeMap<String, String>, tag_unknown: bool) -> String {
    let mut out = String::with_capacity(text.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if word.is_empty() {
            return;
        }
        if let Some(t) = lexicon.get(word.as_str()) {
            out.push_str(t);
        } else {
            let start = word.find(|c: char| c.is_alphanumeric());
            let end = word.rfind(|c: char| c.is_alphanumeric());
            let core = match (start, end) {
                (Some(s), Some(e)) => {
                    let e = e + word[e..].chars().next().map_or(1, char::len_utf8);
                    lexicon.get(&word[s..e]).map(|t| (s, e, t))
                }
                _ => None,
            };
            match core {
                Some((s, e, t)) => {
                    out.push_str(&word[..s]);
                    out.push_str(t);
                    out.push_str(&word[e..]);
                }
                None if tag_unknown => {
                    out.push('⟨');
                    out.push_str(word);
                    out.push('⟩');
                }
                None => out.push_str(word),
            }
        }
        word.clear();
    };
    for ch in text.chars() {
        if ch.is_whitespace() {
            flush(&mut word, &mut out);
            out.push(ch);
        } else {
            word.push(ch);
        }
    }
    flush(&mut word, &mut out);
    out
}

/// Deterministic offline client backed by a bilingual lexicon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StubTranslator {
    pub source: Language,
    pub target: Language,
    pub lexicon: BTreeMap<String, String>,
    #[serde(default)]
    pub tag_unknown: bool,
}

impl StubTranslator {
    pub fn new(source: Language, target: Language, lexicon: BTreeMap<String, String>) -> Self {
        Self {
            source,
            target,
            lexicon,
            tag_unknown: false,
        }
    }

    pub fn identity(language: Language) -> Self {
        Self::new(language, language, BTreeMap::new())
    }
}

impl TranslationClient for StubTranslator {
    fn source_language(&self) -> Language {
        self.source
    }
    fn target_language(&self) -> Language {
        self.target
    }
    fn translate(&self, text: &str) -> Result<String, TranslationError> {
        if text.trim().is_empty() {
            return Err(TranslationError::EmptyText);
        }
        Ok(stub_translate(text, &self.lexicon, self.tag_unknown))
    }
}

/// Bounds a translated example must satisfy. Lengths are in tokens and apply
/// to both sides of every translated field; the ratio band is
/// `[1 / max_length_ratio, max_length_ratio]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterPolicy {
    pub max_length_tokens: usize,
    pub min_length_tokens: usize,
    pub max_length_ratio: f64,
    pub min_alpha_fraction: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            max_length_tokens: 64,
            min_length_tokens: 1,
            max_length_ratio: 2.0,
            min_alpha_fraction: 0.5,
        }
    }
}

impl FilterPolicy {
    /// Accepts everything that is non-empty.
    pub fn permissive() -> Self {
        Self {
            max_length_tokens: usize::MAX,
            min_length_tokens: 0,
            max_length_ratio: f64::INFINITY,
            min_alpha_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), XaugError> {
        if self.min_length_tokens >= self.max_length_tokens {
            return Err(XaugError::InvalidPolicy("min_length_tokens must be below max_length_tokens".into()));
        }
        if !(self.max_length_ratio > 0.0) {
            return Err(XaugError::InvalidPolicy("max_length_ratio must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_alpha_fraction) {
            return Err(XaugError::InvalidPolicy("min_alpha_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn length_ok(&self, n: usize) -> bool {
        n >= self.min_length_tokens && n <= self.max_length_tokens
    }

    /// Checks one (source, translation) field pair.
    pub fn accepts(&self, source: &str, translated: &str) -> bool {
        let s = split_words(source);
        let t = split_words(translated);
        if t.is_empty() || !self.length_ok(s.len()) || !self.length_ok(t.len()) {
            return false;
        }
        let ratio = t.len() as f64 / s.len().max(1) as f64;
        if ratio > self.max_length_ratio || ratio < 1.0 / self.max_length_ratio {
            return false;
        }
        let alpha = t.iter().filter(|w| w.chars().any(char::is_alphabetic)).count();
        alpha as f64 / t.len() as f64 >= self.min_alpha_fraction
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentReport {
    pub source: usize,
    pub kept: usize,
    pub dropped_by_policy: usize,
    pub dropped_by_client: usize,
}

impl AugmentReport {
    pub fn dropped(&self) -> usize {
        self.dropped_by_policy + self.dropped_by_client
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSet {
    pub set: CorpusSet,
    /// Translated grounding passages, ids `{original}#{target code}`.
    pub passages: Vec<Passage>,
    pub report: AugmentReport,
}

pub fn translated_passage_id(original: &str, target: Language) -> String {
    format!("{original}#{}", target.code())
}

enum Outcome {
    Kept(TrainingExample),
    Policy,
    Client,
}

/// Translates query, response and grounding passage of every example and
/// keeps those satisfying `policy`. Client failures drop the item only.
pub fn build_pseudo_set(
    source: &CorpusSet,
    pool: &PassagePool,
    client: &dyn TranslationClient,
    policy: &FilterPolicy,
) -> Result<PseudoSet, XaugError> {
    if source.role() != CorpusRole::UHighResource {
        return Err(XaugError::WrongRole(source.role()));
    }
    policy.validate()?;
    let from = client.source_language();
    let to = client.target_language();
    if let Some(e) = source.examples().iter().find(|e| e.language != from) {
        return Err(XaugError::DirectionMismatch {
            id: e.id.clone(),
            found: e.language,
            expected: from,
        });
    }

    let passage_ids: BTreeSet<&str> = source.examples().iter().map(|e| e.grounding_passage_id.as_str()).collect();
    // Err(true) marks a client failure, Err(false) a policy rejection.
    let translated_passages: HashMap<&str, Result<String, bool>> = passage_ids
        .into_par_iter()
        .map(|id| {
            let t = match pool.get(id).map(|p| p.text.as_str()) {
                None => Err(false),
                Some(t) => match client.translate(t) {
                    Ok(x) if policy.accepts(t, &x) => Ok(x),
                    Ok(_) => Err(false),
                    Err(err) => {
                        log::warn!("passage {id}: {err}; dropping its examples");
                        Err(true)
                    }
                },
            };
            (id, t)
        })
        .collect();

    let outcomes: Vec<Outcome> = source
        .examples()
        .par_iter()
        .map(|e| {
            match translated_passages[e.grounding_passage_id.as_str()] {
                Err(true) => return Outcome::Client,
                Err(false) => return Outcome::Policy,
                Ok(_) => {}
            }
            let (x, r) = match (client.translate(&e.input_x), client.translate(&e.response_r)) {
                (Ok(x), Ok(r)) => (x, r),
                (Err(err), _) | (_, Err(err)) => {
                    log::warn!("example {}: {err}; dropped", e.id);
                    return Outcome::Client;
                }
            };
            if !policy.accepts(&e.input_x, &x) || !policy.accepts(&e.response_r, &r) {
                return Outcome::Policy;
            }
            Outcome::Kept(TrainingExample {
                id: format!("{}#{}", e.id, to.code()),
                input_x: x,
                grounding_passage_id: translated_passage_id(&e.grounding_passage_id, to),
                response_r: r,
                language: to,
                origin: Origin::Translated,
            })
        })
        .collect();

    let mut report = AugmentReport {
        source: source.size_n(),
        ..Default::default()
    };
    let mut kept = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Kept(e) => kept.push(e),
            Outcome::Policy => report.dropped_by_policy += 1,
            Outcome::Client => report.dropped_by_client += 1,
        }
    }
    report.kept = kept.len();
    let used: BTreeSet<&str> = kept
        .iter()
        .map(|e| e.grounding_passage_id.as_str())
        .collect();
    let mut passages: Vec<Passage> = translated_passages
        .into_iter()
        .filter_map(|(id, t)| {
            let pid = translated_passage_id(id, to);
            let text = t.ok()?;
            used.contains(pid.as_str()).then_some(Passage {
                id: pid,
                text,
                language: to,
            })
        })
        .collect();
    passages.sort_by(|a, b| a.id.cmp(&b.id));
    log::info!(
        "pseudo set {}->{}: kept {} of {}, dropped {} by policy, {} by client",
        from,
        to,
        report.kept,
        report.source,
        report.dropped_by_policy,
        report.dropped_by_client
    );
    Ok(PseudoSet {
        set: CorpusSet::new(CorpusRole::DPrimeTranslated, kept),
        passages,
        report,
    })
}

/// Examples of `set` in `language`, same role.
pub fn filter_language(set: &CorpusSet, language: Language) -> CorpusSet {
    CorpusSet::new(
        set.role(),
        set.examples().iter().filter(|e| e.language == language).cloned().collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn stub_examples() {
        assert_eq!(stub_translate("a  b\tc", &BTreeMap::new(), false), "a  b\tc");
        let l = lex(&[("hello", "bonjour")]);
        assert_eq!(stub_translate("hello world", &l, false), "bonjour world");
        assert_eq!(stub_translate("hello, world", &l, false), "bonjour, world");
        assert_eq!(stub_translate("hello world", &l, true), "bonjour ⟨world⟩");
    }

    #[test]
    fn policy_bounds() {
        let p = FilterPolicy::default();
        assert!(p.accepts("a b c", "x y z"));
        assert!(!p.accepts("a b c", "x y z w v u t"));
        assert!(!p.accepts("a b c", "1 2 3"));
        assert!(!p.accepts("a b", ""));
        assert!(FilterPolicy {
            min_length_tokens: 5,
            max_length_tokens: 5,
            ..p
        }
        .validate()
        .is_err());
    }
}
