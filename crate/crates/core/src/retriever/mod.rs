//! Dual-encoder passage retrieval: separate query and passage encoders
//! scored by inner product, trained with in-batch negatives.

pub mod index;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use index::{rank_order, CandidateList, IndexError, IndexMode, MipsIndex, RetrievalScore};

use crate::corpus::{Passage, PassagePool, TrainingExample};
use crate::nn::{
    checkpoint_id, dot, Checkpoint, Encoder, Lineage, Matrix, ModelDims, NnError, NodeId, ParamStore, Pooling,
    Tape,
};
use crate::tokenizer::{Tokenizer, UNK};
use crate::train::{run_epochs, EpochStats, LoopConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "retriever";

#[derive(Debug, thiserror::Error)]
pub enum RetrieverError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("train_batch_size is {0}; in-batch negatives need a batch of at least 2")]
    BatchTooSmall(usize),
    #[error("grounding passage {0} is not in the passage pool")]
    UnknownPassage(String),
    #[error("checkpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub dims: ModelDims,
    pub pooling: Pooling,
    pub max_input_length: usize,
    /// Both towers read one word-embedding table.
    #[serde(default)]
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub store: ParamStore,
    pub query_encoder: Encoder,
    pub passage_encoder: Encoder,
    pub tokenizer: Tokenizer,
    pub arch: EncoderArch,
    pub lineage: Lineage,
}

/// Token ids of a (context-assembled) query; never empty.
pub fn query_token_ids(tok: &Tokenizer, text: &str, max_len: usize) -> Vec<usize> {
    let ids = tok.encode_turns(text, max_len.max(1));
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

pub fn passage_token_ids(tok: &Tokenizer, text: &str, max_len: usize) -> Vec<usize> {
    let ids = tok.tokenize(text, max_len.max(1));
    if ids.is_empty() {
        vec![UNK]
    } else {
        ids
    }
}

/// Mean negative log-softmax of each query's gold column in the query by
/// passage score matrix.
pub fn in_batch_loss(tape: &mut Tape, queries: &[NodeId], passages: &[NodeId], gold: &[usize]) -> NodeId {
    let q = tape.concat_rows(queries);
    let p = tape.concat_rows(passages);
    let scores = tape.matmul_t(q, p);
    tape.cross_entropy(scores, gold)
}

impl DualEncoder {
    pub fn new(tokenizer: Tokenizer, mut arch: EncoderArch, seed: u64) -> Self {
        arch.dims.vocab_size = tokenizer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let query_encoder = Encoder::init(&mut store, "query", &arch.dims, arch.pooling, &mut rng);
        let passage_encoder = if arch.tie_embeddings {
            let table = query_encoder.embedding();
            Encoder::with_embedding(&mut store, "passage", &arch.dims, arch.pooling, table, &mut rng)
        } else {
            Encoder::init(&mut store, "passage", &arch.dims, arch.pooling, &mut rng)
        };
        Self {
            store,
            query_encoder,
            passage_encoder,
            tokenizer,
            arch,
            lineage: Lineage::default(),
        }
    }

    fn pooled(&self, enc: &Encoder, ids: &[usize]) -> Result<Vec<f64>, NnError> {
        let mut tape = Tape::new(&self.store);
        let out = enc.forward(&mut tape, ids)?;
        Ok(tape.value(out.pooled).data().to_vec())
    }

    /// s(q): pooled query-encoder output.
    pub fn embed_query(&self, text: &str) -> Result<Vec<f64>, NnError> {
        self.pooled(&self.query_encoder, &query_token_ids(&self.tokenizer, text, self.arch.max_input_length))
    }

    /// s(z): pooled passage-encoder output.
    pub fn embed_passage(&self, text: &str) -> Result<Vec<f64>, NnError> {
        self.pooled(
            &self.passage_encoder,
            &passage_token_ids(&self.tokenizer, text, self.arch.max_input_length),
        )
    }

    pub fn score(&self, query: &str, passage: &str) -> Result<f64, NnError> {
        Ok(dot(&self.embed_query(query)?, &self.embed_passage(passage)?))
    }

    pub fn embed_passages(&self, passages: &[Passage]) -> Result<Matrix, NnError> {
        let rows: Vec<Vec<f64>> = passages
            .par_iter()
            .map(|p| self.embed_passage(&p.text))
            .collect::<Result<_, _>>()?;
        let d = self.arch.dims.d_model;
        Ok(Matrix::from_vec(rows.len(), d, rows.concat()))
    }

    pub fn build_index(&self, passages: &[Passage], mode: IndexMode, seed: u64) -> Result<MipsIndex, RetrieverError> {
        let ids = passages.iter().map(|p| p.id.clone()).collect();
        let vectors = self.embed_passages(passages)?;
        let idx = match mode {
            IndexMode::Exact => MipsIndex::exact(ids, vectors)?,
            IndexMode::Approximate { n_clusters, n_probe } => {
                MipsIndex::approximate(ids, vectors, n_clusters, n_probe, seed)?
            }
        };
        Ok(idx.with_encoder_checkpoint(self.lineage.checkpoint_id.clone()))
    }

    pub fn retrieve(&self, index: &MipsIndex, query_id: &str, text: &str, k: usize) -> Result<CandidateList, RetrieverError> {
        Ok(index.search(query_id, &self.embed_query(text)?, k)?)
    }

    /// Candidate lists for every example, in order.
    pub fn retrieve_all(
        &self,
        index: &MipsIndex,
        examples: &[TrainingExample],
        k: usize,
    ) -> Result<Vec<CandidateList>, RetrieverError> {
        examples
            .par_iter()
            .map(|e| self.retrieve(index, &e.id, &e.input_x, k))
            .collect()
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

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, RetrieverError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: EncoderArch =
            serde_json::from_value(ck.config.clone()).map_err(|e| RetrieverError::Config(e.to_string()))?;
        let tokenizer =
            Tokenizer::from_tokens(ck.vocab.clone()).map_err(|e| RetrieverError::Config(e.to_string()))?;
        let mut model = Self::new(tokenizer, arch, 0);
        ck.restore_into(&mut model.store)?;
        model.lineage = ck.lineage.clone();
        Ok(model)
    }

    /// Stamps a content-derived checkpoint id for `stage`, with `parents`.
    pub fn seal(&mut self, stage: Option<&str>, parents: Vec<String>) {
        let id = checkpoint_id(CHECKPOINT_KIND, stage, &parents, &self.store);
        self.lineage = Lineage {
            checkpoint_id: id,
            stage: stage.map(str::to_string),
            parents,
        };
    }
}

/// Fraction of examples whose gold passage is ranked first in `pool`.
pub fn recall_at_1(model: &DualEncoder, examples: &[TrainingExample], pool: &[Passage]) -> Result<f64, RetrieverError> {
    let index = model.build_index(pool, IndexMode::Exact, 0)?;
    let lists = model.retrieve_all(&index, examples, 1)?;
    let hits = lists
        .iter()
        .zip(examples)
        .filter(|(l, e)| l.candidates.first().is_some_and(|c| c.passage_id == e.grounding_passage_id))
        .count();
    Ok(hits as f64 / examples.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct EarlyStop<'a> {
    /// Stop once train R@1 against `passages` reaches this value.
    pub train_r1: f64,
    pub passages: &'a [Passage],
}

/// In-batch-negative training of both encoders on `examples`.
pub fn train_retriever(
    model: &mut DualEncoder,
    examples: &[TrainingExample],
    pool: &PassagePool,
    cfg: &LoopConfig,
    early_stop: Option<EarlyStop<'_>>,
) -> Result<TrainLog, RetrieverError> {
    if cfg.batch_size < 2 {
        return Err(RetrieverError::BatchTooSmall(cfg.batch_size));
    }
    let max_len = model.arch.max_input_length;
    let mut q_ids = Vec::with_capacity(examples.len());
    let mut p_ids = Vec::with_capacity(examples.len());
    for e in examples {
        let p = pool
            .get(&e.grounding_passage_id)
            .ok_or_else(|| RetrieverError::UnknownPassage(e.grounding_passage_id.clone()))?;
        q_ids.push(query_token_ids(&model.tokenizer, &e.input_x, max_len));
        p_ids.push(passage_token_ids(&model.tokenizer, &p.text, max_len));
    }
    let mut probe = early_stop.map(|_| model.clone());
    let mut probe_err = None;
    let DualEncoder {
        store,
        query_encoder,
        passage_encoder,
        ..
    } = model;
    let log = run_epochs(
        store,
        examples.len(),
        cfg,
        |tape, batch| {
            let mut slot: HashMap<&str, usize> = HashMap::new();
            let mut passages = Vec::new();
            let mut gold = Vec::with_capacity(batch.len());
            let mut queries = Vec::with_capacity(batch.len());
            for &i in batch {
                queries.push(query_encoder.forward(tape, &q_ids[i])?.pooled);
            }
            for &i in batch {
                let next = slot.len();
                let s = *slot.entry(examples[i].grounding_passage_id.as_str()).or_insert(next);
                if s == passages.len() {
                    passages.push(passage_encoder.forward(tape, &p_ids[i])?.pooled);
                }
                gold.push(s);
            }
            Ok(in_batch_loss(tape, &queries, &passages, &gold))
        },
        |stats: &EpochStats, store: &ParamStore| {
            let (Some(stop), Some(probe)) = (early_stop, probe.as_mut()) else {
                return true;
            };
            probe.store = store.clone();
            match recall_at_1(probe, examples, stop.passages) {
                Ok(r1) => {
                    log::info!("retriever epoch {}: loss {:.4}, train R@1 {r1:.3}", stats.epoch, stats.mean_loss);
                    r1 < stop.train_r1
                }
                Err(e) => {
                    probe_err = Some(e);
                    false
                }
            }
        },
    )?;
    if let Some(e) = probe_err {
        return Err(e);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DualEncoder {
        let tok = Tokenizer::build(["a b c d e f g"]);
        let arch = EncoderArch {
            dims: ModelDims {
                vocab_size: 0,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
            },
            pooling: Pooling::FirstToken,
            max_input_length: 16,
            tie_embeddings: false,
        };
        DualEncoder::new(tok, arch, 3)
    }

    #[test]
    fn score_is_dot_of_embeddings() {
        let m = tiny();
        let s = m.score("a b c", "d e f").unwrap();
        let manual = dot(&m.embed_query("a b c").unwrap(), &m.embed_passage("d e f").unwrap());
        assert!((s - manual).abs() < 1e-6);
    }

    #[test]
    fn uniform_two_way_loss_is_ln2() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q: Vec<NodeId> = (0..2).map(|_| tape.input(Matrix::row_vector(&[1.0, 1.0]))).collect();
        let p: Vec<NodeId> = (0..2).map(|_| tape.input(Matrix::row_vector(&[0.5, 0.5]))).collect();
        let l = in_batch_loss(&mut tape, &q, &p, &[0, 1]);
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin_has_zero_loss() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let q = vec![tape.input(Matrix::row_vector(&[100.0, 0.0])), tape.input(Matrix::row_vector(&[0.0, 100.0]))];
        let p = vec![tape.input(Matrix::row_vector(&[10.0, 0.0])), tape.input(Matrix::row_vector(&[0.0, 10.0]))];
        let l = in_batch_loss(&mut tape, &q, &p, &[0, 1]);
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut m = tiny();
        let pool = PassagePool::new(vec![]).unwrap();
        let cfg = LoopConfig {
            epochs: 1,
            batch_size: 1,
            step: Default::default(),
            fgm: None,
        };
        let err = train_retriever(&mut m, &[], &pool, &cfg, None).unwrap_err();
        assert!(err.to_string().contains("in-batch negatives"));
    }

    #[test]
    fn checkpoint_round_trip_keeps_scores() {
        let mut m = tiny();
        m.seal(Some("s1"), vec![]);
        let back = DualEncoder::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.score("a b", "c d").unwrap(), m.score("a b", "c d").unwrap());
        assert_eq!(back.lineage, m.lineage);
    }
}
