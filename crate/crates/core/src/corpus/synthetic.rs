//! Seeded synthetic corpora.
//!
//! Passages are random word sequences. A user turn names two adjacent words
//! of its grounding passage and the agent response copies a span starting at
//! those words, so retrieval and generation are both learnable from scratch.
//!
//! The cross-lingual setup renders one concept-level world into four
//! languages (`e12`, `z12`, `f12`, `v12` for concept 12) with a shared set of
//! language-neutral entity words, and exposes the ground-truth bilingual
//! lexicon so the stub translator can build pseudo data from it.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    examples_from_records, ContextOptions, CorpusRole, CorpusSet, Language, Passage, PassagePool,
    Speaker, TurnRecord,
};

const PASSAGE_LEN: usize = 12;

/// Filler words of the templates, indexed by the `F<n>` markers below.
const ENGLISH_FILLERS: [&str; 13] = [
    "tell", "me", "about", "what", "?", "how", "does", "work", "can", "you", "explain", "sure",
    "well",
];
const QUERY_TEMPLATES: [&str; 4] = ["F0 F1 F2 A B", "F3 F2 A B F4", "F5 F6 A B F7 F4", "F8 F9 F10 A B"];
const RESPONSE_PREFIXES: [&str; 3] = ["", "F11 ,", "F12 ,"];

fn fill_template(template: &str, fillers: &[String], a: &str, b: &str) -> Vec<String> {
    template
        .split_whitespace()
        .map(|piece| match piece {
            "A" => a.to_string(),
            "B" => b.to_string(),
            p if p.starts_with('F') => fillers[p[1..].parse::<usize>().expect("filler index")].clone(),
            p => p.to_string(),
        })
        .collect()
}

/// One user turn and its grounded response over `words`.
fn make_turn<R: Rng>(rng: &mut R, words: &[String], fillers: &[String]) -> (String, String) {
    let span_len = rng.random_range(4..=6).min(words.len());
    let start = rng.random_range(0..=words.len() - span_len);
    let span = &words[start..start + span_len];
    let second = span.get(1).unwrap_or(&span[0]);
    let template = QUERY_TEMPLATES.choose(rng).expect("templates");
    let query = fill_template(template, fillers, &span[0], second).join(" ");
    let prefix = RESPONSE_PREFIXES.choose(rng).expect("prefixes");
    let mut response = fill_template(prefix, fillers, "", "");
    response.extend(span.iter().cloned());
    (query, response.join(" "))
}

/// Dialogues of one to three turns, each grounded in one passage.
pub fn generate_dialogues(
    passages: &[Passage],
    fillers: &[String],
    seed: u64,
    n_turns: usize,
    dialogue_prefix: &str,
) -> Vec<TurnRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_turns);
    let mut dialogue = 0;
    while records.len() < n_turns {
        let passage = passages.choose(&mut rng).expect("at least one passage");
        let words: Vec<String> = passage.text.split_whitespace().map(str::to_string).collect();
        let turns = rng.random_range(1..=3).min(n_turns - records.len());
        for t in 0..turns {
            let (utterance, response) = make_turn(&mut rng, &words, fillers);
            records.push(TurnRecord {
                dialogue_id: format!("{dialogue_prefix}{dialogue:05}"),
                turn_index: t as u32,
                speaker: Speaker::User,
                utterance,
                grounding_passage_id: passage.id.clone(),
                response,
                language: Some(passage.language),
            });
        }
        dialogue += 1;
    }
    records
}

/// A monolingual synthetic corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticCorpus {
    pub passages: Vec<Passage>,
    pub records: Vec<TurnRecord>,
    pub set: CorpusSet,
}

impl SyntheticCorpus {
    pub fn pool(&self) -> PassagePool {
        PassagePool::new(self.passages.clone()).expect("synthetic ids are unique")
    }

    /// Fresh dialogues over the same passages, e.g. a development split.
    pub fn more_dialogues(&self, seed: u64, n_turns: usize, prefix: &str) -> (Vec<TurnRecord>, CorpusSet) {
        let fillers = english_fillers();
        let records = generate_dialogues(&self.passages, &fillers, seed, n_turns, prefix);
        let set = examples_from_records(&records, CorpusRole::DTDownstream, &self.pool(), ContextOptions::default())
            .expect("synthetic records are valid");
        (records, set)
    }
}

fn english_fillers() -> Vec<String> {
    ENGLISH_FILLERS.iter().map(|s| s.to_string()).collect()
}

/// Deterministic passage pool plus `n_turns` grounded dialogue turns over a
/// vocabulary of `vocab_size` content words.
pub fn generate_synthetic_corpus(seed: u64, n_passages: usize, n_turns: usize, vocab_size: usize) -> SyntheticCorpus {
    assert!(n_passages >= 1 && n_turns >= 1 && vocab_size >= 1, "sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let passages: Vec<Passage> = (0..n_passages)
        .map(|i| {
            let words: Vec<String> = (0..PASSAGE_LEN)
                .map(|_| format!("w{}", rng.random_range(0..vocab_size)))
                .collect();
            Passage {
                id: format!("p{i:04}"),
                text: words.join(" "),
                language: Language::Synthetic,
            }
        })
        .collect();
    let records = generate_dialogues(&passages, &english_fillers(), rng.random(), n_turns, "d");
    let pool = PassagePool::new(passages.clone()).expect("unique ids");
    let set = examples_from_records(&records, CorpusRole::DTDownstream, &pool, ContextOptions::default())
        .expect("synthetic records are valid");
    SyntheticCorpus {
        passages,
        records,
        set,
    }
}

/// Sizes of the cross-lingual synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossLingualConfig {
    pub n_topics: usize,
    pub n_concepts: usize,
    /// Fraction of concepts rendered identically in every language.
    pub shared_fraction: f64,
    pub high_resource_turns_per_language: usize,
    pub downstream_train_turns_per_language: usize,
    pub dev_turns_per_language: usize,
    /// Topics the downstream training split may use; dev uses all topics.
    pub downstream_topic_fraction: f64,
    /// Fraction of high-resource turns padded to excessive length.
    pub overlong_fraction: f64,
}

impl Default for CrossLingualConfig {
    fn default() -> Self {
        Self {
            n_topics: 24,
            n_concepts: 200,
            shared_fraction: 0.2,
            high_resource_turns_per_language: 120,
            downstream_train_turns_per_language: 24,
            dev_turns_per_language: 24,
            downstream_topic_fraction: 0.5,
            overlong_fraction: 0.03,
        }
    }
}

/// Pairs of (high-resource source, low-resource target) languages.
pub const PSEUDO_PAIRS: [(Language, Language); 2] = [(Language::En, Language::Fr), (Language::Zh, Language::Vi)];

fn prefix(lang: Language) -> &'static str {
    match lang {
        Language::En => "e",
        Language::Zh => "z",
        Language::Fr => "f",
        Language::Vi => "v",
        Language::Synthetic => "w",
    }
}

/// Four-language synthetic world for translated-training experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossLingualSetup {
    pub config: CrossLingualConfig,
    /// Every rendered passage, all languages.
    pub passages: Vec<Passage>,
    pub d_cross_lingual: CorpusSet,
    pub u_high_resource: CorpusSet,
    pub dt_train: CorpusSet,
    pub dt_dev: CorpusSet,
    shared: Vec<bool>,
}

impl CrossLingualSetup {
    pub fn generate(seed: u64, config: &CrossLingualConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared: Vec<bool> = (0..config.n_concepts)
            .map(|_| rng.random::<f64>() < config.shared_fraction)
            .collect();
        let topics: Vec<Vec<usize>> = (0..config.n_topics)
            .map(|_| (0..PASSAGE_LEN).map(|_| rng.random_range(0..config.n_concepts)).collect())
            .collect();
        let render = |lang: Language, c: usize| -> String {
            if shared[c] {
                format!("n{c}")
            } else {
                format!("{}{c}", prefix(lang))
            }
        };
        let languages = [Language::En, Language::Zh, Language::Fr, Language::Vi];
        let mut passages = Vec::new();
        let mut by_lang: BTreeMap<Language, Vec<Passage>> = BTreeMap::new();
        for lang in languages {
            for (t, concepts) in topics.iter().enumerate() {
                let p = Passage {
                    id: format!("{}-t{t:03}", lang.code()),
                    text: concepts.iter().map(|&c| render(lang, c)).collect::<Vec<_>>().join(" "),
                    language: lang,
                };
                by_lang.entry(lang).or_default().push(p.clone());
                passages.push(p);
            }
        }
        let pool = PassagePool::new(passages.clone()).expect("unique ids");
        let opts = ContextOptions::default();
        let fillers_for = |lang: Language| -> Vec<String> {
            ENGLISH_FILLERS
                .iter()
                .enumerate()
                .map(|(i, w)| match (lang, *w) {
                    (Language::En, w) => w.to_string(),
                    (_, "?") => "?".to_string(),
                    (l, _) => format!("{}x{i}", prefix(l)),
                })
                .collect()
        };

        let mut high = Vec::new();
        for lang in [Language::En, Language::Zh] {
            let mut recs = generate_dialogues(
                &by_lang[&lang],
                &fillers_for(lang),
                rng.random(),
                config.high_resource_turns_per_language,
                &format!("{}-hr-", lang.code()),
            );
            let filler = fillers_for(lang);
            for r in &mut recs {
                if rng.random::<f64>() < config.overlong_fraction {
                    let pad = vec![filler[3].as_str(); 80].join(" ");
                    r.utterance = format!("{} {pad}", r.utterance);
                }
            }
            high.extend(recs);
        }
        let d_cross_lingual =
            examples_from_records(&high, CorpusRole::DCrossLingual, &pool, opts).expect("valid records");
        let u_high_resource = d_cross_lingual.with_role(CorpusRole::UHighResource);

        let n_train_topics = ((config.n_topics as f64 * config.downstream_topic_fraction).ceil() as usize)
            .clamp(1, config.n_topics);
        let mut topic_order: Vec<usize> = (0..config.n_topics).collect();
        topic_order.shuffle(&mut rng);
        let train_topics = &topic_order[..n_train_topics];
        let mut train = Vec::new();
        let mut dev = Vec::new();
        for lang in [Language::Fr, Language::Vi] {
            let all = &by_lang[&lang];
            let train_pool: Vec<Passage> = train_topics.iter().map(|&t| all[t].clone()).collect();
            train.extend(generate_dialogues(
                &train_pool,
                &fillers_for(lang),
                rng.random(),
                config.downstream_train_turns_per_language,
                &format!("{}-train-", lang.code()),
            ));
            dev.extend(generate_dialogues(
                all,
                &fillers_for(lang),
                rng.random(),
                config.dev_turns_per_language,
                &format!("{}-dev-", lang.code()),
            ));
        }
        let dt_train = examples_from_records(&train, CorpusRole::DTDownstream, &pool, opts).expect("valid records");
        let dt_dev = examples_from_records(&dev, CorpusRole::DTDownstream, &pool, opts).expect("valid records");
        Self {
            config: config.clone(),
            passages,
            d_cross_lingual,
            u_high_resource,
            dt_train,
            dt_dev,
            shared,
        }
    }

    pub fn pool(&self) -> PassagePool {
        PassagePool::new(self.passages.clone()).expect("unique ids")
    }

    /// Word-level bilingual lexicon from `source` to `target`. A `noise`
    /// fraction of entries (chosen by `seed`) map to a wrong target word.
    pub fn lexicon(&self, source: Language, target: Language, noise: f64, seed: u64) -> BTreeMap<String, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.config.n_concepts;
        let mut lex = BTreeMap::new();
        for c in 0..n {
            if self.shared[c] {
                continue;
            }
            let wrong = rng.random::<f64>() < noise;
            let other = rng.random_range(0..n);
            let tc = if wrong { other } else { c };
            let tw = if self.shared[tc] {
                format!("n{tc}")
            } else {
                format!("{}{tc}", prefix(target))
            };
            lex.insert(format!("{}{c}", prefix(source)), tw);
        }
        for (i, w) in ENGLISH_FILLERS.iter().enumerate() {
            if *w == "?" {
                continue;
            }
            let s = match source {
                Language::En => w.to_string(),
                l => format!("{}x{i}", prefix(l)),
            };
            let t = match target {
                Language::En => w.to_string(),
                l => format!("{}x{i}", prefix(l)),
            };
            lex.insert(s, t);
        }
        // Speaker tags of the assembled context translate too.
        for tag in ["user", "agent"] {
            lex.insert(format!("{tag}:"), format!("{tag}:"));
        }
        lex
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::split_words;
    use std::collections::HashMap;

    fn overlap_fraction(response: &str, passage: &str) -> f64 {
        let p: std::collections::HashSet<String> = split_words(passage).into_iter().collect();
        let r = split_words(response);
        r.iter().filter(|t| p.contains(*t)).count() as f64 / r.len() as f64
    }

    #[test]
    fn same_seed_is_identical() {
        let a = generate_synthetic_corpus(7, 30, 50, 100);
        let b = generate_synthetic_corpus(7, 30, 50, 100);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = generate_synthetic_corpus(7, 30, 50, 100);
        let b = generate_synthetic_corpus(8, 30, 50, 100);
        assert_ne!(serde_json::to_string(&a.records).unwrap(), serde_json::to_string(&b.records).unwrap());
    }

    #[test]
    fn sizes_and_grounding_ids() {
        let c = generate_synthetic_corpus(1, 100, 200, 400);
        assert_eq!(c.passages.len(), 100);
        assert_eq!(c.set.size_n(), 200);
        let pool = c.pool();
        assert!(c.set.examples().iter().all(|e| pool.contains(&e.grounding_passage_id)));
    }

    #[test]
    fn responses_overlap_their_passage() {
        let c = generate_synthetic_corpus(3, 100, 200, 400);
        let pool = c.pool();
        for e in c.set.examples() {
            let p = &pool.get(&e.grounding_passage_id).unwrap().text;
            assert!(overlap_fraction(&e.response_r, p) >= 0.3, "{e:?}");
        }
    }

    #[test]
    fn cross_lingual_world_is_consistent() {
        let s = CrossLingualSetup::generate(5, &CrossLingualConfig::default());
        let pool = s.pool();
        for set in [&s.d_cross_lingual, &s.dt_train, &s.dt_dev] {
            for e in set.examples() {
                let p = pool.get(&e.grounding_passage_id).unwrap();
                assert_eq!(p.language, e.language);
                assert!(overlap_fraction(&e.response_r, &p.text) >= 0.3);
            }
        }
        let hr: HashMap<Language, usize> = s.d_cross_lingual.counts_by_language().into_iter().collect();
        assert_eq!(hr[&Language::En], 120);
        assert_eq!(hr[&Language::Zh], 120);
        assert_eq!(s.u_high_resource.role(), CorpusRole::UHighResource);
    }

    #[test]
    fn noiseless_lexicon_maps_passages_onto_target_rendering() {
        let s = CrossLingualSetup::generate(5, &CrossLingualConfig::default());
        let lex = s.lexicon(Language::En, Language::Fr, 0.0, 1);
        let pool = s.pool();
        let en = pool.get("en-t003").unwrap();
        let fr = pool.get("fr-t003").unwrap();
        let translated: Vec<String> = en
            .text
            .split_whitespace()
            .map(|w| lex.get(w).cloned().unwrap_or_else(|| w.to_string()))
            .collect();
        assert_eq!(translated.join(" "), fr.text);
    }
}
