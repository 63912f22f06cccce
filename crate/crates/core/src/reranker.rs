//! Cross-encoder reranking of retrieved shortlists.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PassagePool, TrainingExample};
use crate::nn::{checkpoint_id, Checkpoint, Encoder, Lineage, Linear, ModelDims, NnError, NodeId, ParamStore, Pooling, Tape};
use crate::retriever::{CandidateList, RetrievalScore};
use crate::tokenizer::{Tokenizer, PASSAGE_MARK, QUERY_MARK, SEP};
use crate::train::{run_epochs, LoopConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "reranker";

#[derive(Debug, thiserror::Error)]
pub enum RerankerError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("passage {0} is not in the passage pool")]
    UnknownPassage(String),
    #[error("{lists} candidate lists for {examples} examples")]
    ListCount { lists: usize, examples: usize },
    #[error("checkpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairOrder {
    /// `<passage> p [SEP] <query> q`
    #[default]
    PassageFirst,
    /// `<query> q [SEP] <passage> p`
    QueryFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RerankerArch {
    pub dims: ModelDims,
    pub max_input_length: usize,
    pub order: PairOrder,
    #[serde(default)]
    pub pooling: Pooling,
    /// Start every attention layer with key weights equal to query weights,
    /// so a token initially attends most to copies of itself. Only affects
    /// initialization.
    #[serde(default)]
    pub shared_qk_init: bool,
}

/// Builds the joint input, dropping passage tokens first when it is too long.
pub fn pair_token_ids(tok: &Tokenizer, passage: &str, query: &str, max_len: usize, order: PairOrder) -> Vec<usize> {
    let max_len = max_len.max(4);
    let mut q = tok.encode_turns(query, max_len);
    let mut p = tok.tokenize(passage, max_len);
    let budget = max_len - 3;
    if p.len() + q.len() > budget {
        let keep_p = budget.saturating_sub(q.len());
        p.truncate(keep_p);
        q.truncate(budget - p.len());
    }
    let mut out = Vec::with_capacity(p.len() + q.len() + 3);
    match order {
        PairOrder::PassageFirst => {
            out.push(PASSAGE_MARK);
            out.extend(p);
            out.push(SEP);
            out.push(QUERY_MARK);
            out.extend(q);
        }
        PairOrder::QueryFirst => {
            out.push(QUERY_MARK);
            out.extend(q);
            out.push(SEP);
            out.push(PASSAGE_MARK);
            out.extend(p);
        }
    }
    out
}

/// Anything that can score a (passage, query) pair.
pub trait PairScorer: Sync {
    fn score_pair(&self, passage: &str, query: &str) -> Result<f64, NnError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    pub store: ParamStore,
    pub encoder: Encoder,
    pub pooler: Linear,
    pub head: Linear,
    pub tokenizer: Tokenizer,
    pub arch: RerankerArch,
    pub lineage: Lineage,
}

impl CrossEncoder {
    pub fn new(tokenizer: Tokenizer, mut arch: RerankerArch, seed: u64) -> Self {
        arch.dims.vocab_size = tokenizer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, "encoder", &arch.dims, arch.pooling, &mut rng);
        if arch.shared_qk_init {
            tie_query_key_init(&mut store);
        }
        let d = arch.dims.d_model;
        let pooler = Linear::init(&mut store, "pooler", d, d, &mut rng);
        let head = Linear::init(&mut store, "head", d, 1, &mut rng);
        Self {
            store,
            encoder,
            pooler,
            head,
            tokenizer,
            arch,
            lineage: Lineage::default(),
        }
    }

    pub fn pair_ids(&self, passage: &str, query: &str) -> Vec<usize> {
        pair_token_ids(&self.tokenizer, passage, query, self.arch.max_input_length, self.arch.order)
    }

    /// Scalar logit node for one tokenized pair.
    pub fn logit_node(&self, tape: &mut Tape, ids: &[usize]) -> Result<NodeId, NnError> {
        forward_logit(&self.encoder, &self.pooler, &self.head, tape, ids)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(self.arch).expect("arch serializes"),
            self.tokenizer.tokens().to_vec(),
            self.lineage.clone(),
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RerankerError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: RerankerArch =
            serde_json::from_value(ck.config.clone()).map_err(|e| RerankerError::Config(e.to_string()))?;
        let tok = Tokenizer::from_tokens(ck.vocab.clone()).map_err(|e| RerankerError::Config(e.to_string()))?;
        let mut m = Self::new(tok, arch, 0);
        ck.restore_into(&mut m.store)?;
        m.lineage = ck.lineage.clone();
        Ok(m)
    }

    pub fn seal(&mut self, stage: Option<&str>, parents: Vec<String>) {
        let id = checkpoint_id(CHECKPOINT_KIND, stage, &parents, &self.store);
        self.lineage = Lineage {
            checkpoint_id: id,
            stage: stage.map(str::to_string),
            parents,
        };
    }
}

fn tie_query_key_init(store: &mut ParamStore) {
    let pairs: Vec<_> = store
        .iter()
        .filter_map(|(id, name, _)| {
            let stem = name.strip_suffix(".q.weight")?;
            Some((id, format!("{stem}.k.weight")))
        })
        .collect();
    for (q, k) in pairs {
        let k = store.find(&k).expect("attention layers have key weights");
        let w = store.get(q).clone();
        *store.get_mut(k) = w;
    }
}

fn forward_logit(encoder: &Encoder, pooler: &Linear, head: &Linear, tape: &mut Tape, ids: &[usize]) -> Result<NodeId, NnError> {
    let out = encoder.forward(tape, ids)?;
    let h = pooler.forward(tape, out.pooled);
    let h = tape.tanh(h);
    Ok(head.forward(tape, h))
}

impl PairScorer for CrossEncoder {
    fn score_pair(&self, passage: &str, query: &str) -> Result<f64, NnError> {
        let mut tape = Tape::new(&self.store);
        let l = self.logit_node(&mut tape, &self.pair_ids(passage, query))?;
        Ok(tape.value(l).item())
    }
}

/// Listwise loss: cross-entropy of the softmax over the list's logits.
pub fn listwise_loss(tape: &mut Tape, logits: &[NodeId], gold: usize) -> NodeId {
    let row = tape.concat_cols(logits);
    tape.cross_entropy(row, &[gold])
}

/// Re-sorts `list` by scorer logit, descending; ties keep the prior order.
pub fn rerank(
    list: &CandidateList,
    query: &str,
    pool: &PassagePool,
    scorer: &dyn PairScorer,
) -> Result<CandidateList, RerankerError> {
    let scored: Vec<RetrievalScore> = list
        .candidates
        .par_iter()
        .map(|c| {
            let p = pool
                .get(&c.passage_id)
                .ok_or_else(|| RerankerError::UnknownPassage(c.passage_id.clone()))?;
            Ok(RetrievalScore {
                passage_id: c.passage_id.clone(),
                score: scorer.score_pair(&p.text, query)?,
            })
        })
        .collect::<Result<_, RerankerError>>()?;
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .score
            .partial_cmp(&scored[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(CandidateList {
        query_id: list.query_id.clone(),
        candidates: order.into_iter().map(|i| scored[i].clone()).collect(),
    })
}

pub fn rerank_all(
    lists: &[CandidateList],
    examples: &[TrainingExample],
    pool: &PassagePool,
    scorer: &dyn PairScorer,
) -> Result<Vec<CandidateList>, RerankerError> {
    if lists.len() != examples.len() {
        return Err(RerankerError::ListCount {
            lists: lists.len(),
            examples: examples.len(),
        });
    }
    lists
        .iter()
        .zip(examples)
        .map(|(l, e)| rerank(l, &e.input_x, pool, scorer))
        .collect()
}

/// Training shortlist: the first `n` retrieved ids with the gold passage
/// put in the last slot when retrieval missed it.
pub fn training_shortlist(list: &CandidateList, gold: &str, n: usize) -> (Vec<String>, usize) {
    let mut ids: Vec<String> = list.candidates.iter().take(n.max(1)).map(|c| c.passage_id.clone()).collect();
    if let Some(pos) = ids.iter().position(|id| id == gold) {
        return (ids, pos);
    }
    if ids.len() == n.max(1) {
        ids.pop();
    }
    ids.push(gold.to_string());
    let pos = ids.len() - 1;
    (ids, pos)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RerankerTrainReport {
    pub log: TrainLog,
    pub injected_gold: usize,
    pub skipped: usize,
}

/// Listwise training over retrieved shortlists of `passages` candidates.
pub fn train_reranker(
    model: &mut CrossEncoder,
    examples: &[TrainingExample],
    lists: &[CandidateList],
    pool: &PassagePool,
    passages: usize,
    cfg: &LoopConfig,
) -> Result<RerankerTrainReport, RerankerError> {
    if lists.len() != examples.len() {
        return Err(RerankerError::ListCount {
            lists: lists.len(),
            examples: examples.len(),
        });
    }
    let mut items: Vec<(Vec<Vec<usize>>, usize)> = Vec::new();
    let mut injected = 0;
    let mut skipped = 0;
    for (e, l) in examples.iter().zip(lists) {
        let (ids, gold) = training_shortlist(l, &e.grounding_passage_id, passages);
        if !l.candidates.iter().take(passages).any(|c| c.passage_id == e.grounding_passage_id) {
            injected += 1;
        }
        let texts: Option<Vec<Vec<usize>>> = ids
            .iter()
            .map(|id| pool.get(id).map(|p| model.pair_ids(&p.text, &e.input_x)))
            .collect();
        match texts {
            Some(t) => items.push((t, gold)),
            None => skipped += 1,
        }
    }
    if skipped > 0 {
        log::warn!("reranker: skipped {skipped} lists whose passages are missing from the pool");
    }
    let CrossEncoder {
        store,
        encoder,
        pooler,
        head,
        ..
    } = model;
    let log = run_epochs(
        store,
        items.len(),
        cfg,
        |tape, batch| {
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (seqs, gold) = &items[i];
                let logits = seqs
                    .iter()
                    .map(|s| forward_logit(encoder, pooler, head, tape, s))
                    .collect::<Result<Vec<_>, _>>()?;
                losses.push(listwise_loss(tape, &logits, *gold));
            }
            let total = tape.sum(&losses);
            Ok(tape.scale(total, 1.0 / batch.len() as f64))
        },
        |stats, _| {
            log::info!("reranker epoch {}: loss {:.4}", stats.epoch, stats.mean_loss);
            true
        },
    )?;
    Ok(RerankerTrainReport {
        log,
        injected_gold: injected,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;

    fn tok() -> Tokenizer {
        Tokenizer::build(["a b c d e f g h"])
    }

    #[test]
    fn pair_layout_and_truncation() {
        let t = tok();
        let ids = pair_token_ids(&t, "a b c d", "e f", 100, PairOrder::PassageFirst);
        assert_eq!(ids[0], PASSAGE_MARK);
        assert_eq!(ids[5], SEP);
        assert_eq!(ids[6], QUERY_MARK);
        assert_eq!(ids.len(), 9);
        let cut = pair_token_ids(&t, "a b c d", "e f", 7, PairOrder::PassageFirst);
        assert_eq!(cut, vec![PASSAGE_MARK, t.id("a").unwrap(), t.id("b").unwrap(), SEP, QUERY_MARK, t.id("e").unwrap(), t.id("f").unwrap()]);
    }

    #[test]
    fn shared_qk_init_copies_query_weights_once() {
        let arch = RerankerArch {
            dims: ModelDims {
                vocab_size: 0,
                d_model: 8,
                n_layers: 2,
                n_heads: 2,
                d_ff: 16,
            },
            max_input_length: 16,
            order: PairOrder::PassageFirst,
            pooling: Pooling::Mean,
            shared_qk_init: true,
        };
        let m = CrossEncoder::new(tok(), arch, 3);
        let w = |n: &str| m.store.get(m.store.find(n).unwrap()).clone();
        let qs: Vec<String> = m.store.iter().filter(|(_, n, _)| n.ends_with(".q.weight")).map(|(_, n, _)| n.to_string()).collect();
        assert_eq!(qs.len(), 2);
        for q in qs {
            assert_eq!(w(&q), w(&q.replace(".q.", ".k.")));
        }
        let plain = CrossEncoder::new(tok(), RerankerArch { shared_qk_init: false, ..arch }, 3);
        let (q, _, wq) = plain.store.iter().find(|(_, n, _)| n.ends_with(".q.weight")).unwrap();
        let k = plain.store.find(&plain.store.name(q).replace(".q.", ".k.")).unwrap();
        assert_ne!(wq, plain.store.get(k));
    }

    #[test]
    fn single_candidate_loss_is_zero_and_uniform_is_log_n() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let one = tape.input(Matrix::scalar(3.0));
        let l = listwise_loss(&mut tape, &[one], 0);
        assert_eq!(tape.value(l).item(), 0.0);
        let many: Vec<NodeId> = (0..20).map(|_| tape.input(Matrix::scalar(0.7))).collect();
        let l = listwise_loss(&mut tape, &many, 13);
        assert!((tape.value(l).item() - 20f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shortlist_injects_missing_gold() {
        let list = CandidateList {
            query_id: "q".into(),
            candidates: ["x", "y", "z"]
                .iter()
                .map(|id| RetrievalScore {
                    passage_id: id.to_string(),
                    score: 0.0,
                })
                .collect(),
        };
        assert_eq!(training_shortlist(&list, "y", 3), (vec!["x".into(), "y".into(), "z".into()], 1));
        assert_eq!(training_shortlist(&list, "g", 2), (vec!["x".into(), "g".into()], 1));
    }
}
