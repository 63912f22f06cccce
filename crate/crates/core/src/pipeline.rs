//! Retriever, reranker and generator bundled: one training round over a set
//! of examples, and evaluation on held-out dialogue turns.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{Passage, PassagePool, TrainingExample};
use crate::generator::{generate_all, FidGenerator, GeneratorArch, GeneratorError, GeneratorTrainReport};
use crate::metrics::{gold_rank, GenerationScores, RetrievalScores};
use crate::nn::{Checkpoint, NnError};
use crate::reranker::{rerank_all, train_reranker, CrossEncoder, RerankerArch, RerankerError, RerankerTrainReport};
use crate::retriever::{train_retriever, CandidateList, DualEncoder, EarlyStop, EncoderArch, RetrieverError};
use crate::tokenizer::Tokenizer;
use crate::train::{derive_seed, TrainLog};

/// Cut-offs reported for retrieval.
pub const RECALL_KS: [usize; 3] = [1, 5, 20];

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("retriever: {0}")]
    Retriever(#[from] RetrieverError),
    #[error("reranker: {0}")]
    Reranker(#[from] RerankerError),
    #[error("generator: {0}")]
    Generator(#[from] GeneratorError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
}

/// Vocabulary over every passage and example text plus the prompt.
pub fn build_tokenizer<'a>(
    pool: &'a PassagePool,
    examples: impl IntoIterator<Item = &'a TrainingExample>,
    prompt: &'a str,
) -> Tokenizer {
    let texts = pool
        .passages()
        .iter()
        .map(|p| p.text.as_str())
        .chain(examples.into_iter().flat_map(|e| [e.input_x.as_str(), e.response_r.as_str()]))
        .chain(std::iter::once(prompt));
    Tokenizer::build(texts)
}

/// Distinct grounding passages of `examples`, ordered by id.
pub fn gold_passages(examples: &[TrainingExample], pool: &PassagePool) -> Vec<Passage> {
    let ids: BTreeSet<&str> = examples.iter().map(|e| e.grounding_passage_id.as_str()).collect();
    ids.into_iter().filter_map(|id| pool.get(id).cloned()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    pub retriever: DualEncoder,
    pub reranker: CrossEncoder,
    pub generator: FidGenerator,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub retriever: TrainLog,
    pub reranker: RerankerTrainReport,
    pub generator: GeneratorTrainReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalScores,
    pub rerank: RetrievalScores,
    pub generation: GenerationScores,
    pub predictions: Vec<String>,
}

impl Pipeline {
    pub fn new(tokenizer: Tokenizer, cfg: &RunConfig, seed: u64) -> Self {
        let dims = cfg.model.dims();
        let retriever = DualEncoder::new(
            tokenizer.clone(),
            EncoderArch {
                dims,
                pooling: cfg.model.pooling,
                max_input_length: cfg.retriever.max_input_length,
                tie_embeddings: cfg.model.tie_embeddings,
            },
            derive_seed(seed, &[1]),
        );
        let reranker = CrossEncoder::new(
            tokenizer.clone(),
            RerankerArch {
                dims,
                max_input_length: cfg.reranker.max_input_length,
                order: cfg.reranker.order,
                pooling: cfg.reranker.pooling,
                shared_qk_init: cfg.reranker.shared_qk_init,
            },
            derive_seed(seed, &[2]),
        );
        let generator = FidGenerator::new(
            tokenizer,
            GeneratorArch {
                dims,
                max_input_length: cfg.generator.max_input_length,
                max_output_length: cfg.generator.max_output_length,
                max_memory_tokens: cfg.generator.max_input_length * cfg.generator.passages4gen.max(1),
                prompt: cfg.generator.prompt.clone(),
            },
            derive_seed(seed, &[3]),
        );
        Self {
            retriever,
            reranker,
            generator,
        }
    }

    /// Trains retriever, then reranker on its shortlists, then generator on
    /// the reranked lists. `index_passages` is the retrieval pool.
    pub fn train_round(
        &mut self,
        examples: &[TrainingExample],
        pool: &PassagePool,
        index_passages: &[Passage],
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<RoundReport, PipelineError> {
        let early = cfg.retriever.early_stop_train_r1.map(|r| EarlyStop {
            train_r1: r,
            passages: index_passages,
        });
        let retriever = train_retriever(
            &mut self.retriever,
            examples,
            pool,
            &cfg.retriever_loop(derive_seed(seed, &[1])),
            early,
        )?;
        let index = self
            .retriever
            .build_index(index_passages, cfg.index.mode()?, derive_seed(seed, &[4]))?;
        let lists = self.retriever.retrieve_all(&index, examples, cfg.reranker.passages)?;
        let reranker = train_reranker(
            &mut self.reranker,
            examples,
            &lists,
            pool,
            cfg.reranker.passages,
            &cfg.reranker_loop(derive_seed(seed, &[2])),
        )?;
        let reranked = rerank_all(&lists, examples, pool, &self.reranker)?;
        let generator = crate::generator::train_generator(
            &mut self.generator,
            examples,
            Some(&reranked),
            pool,
            cfg.generator.passages4gen,
            &cfg.generator_loop(derive_seed(seed, &[3])),
        )?;
        Ok(RoundReport {
            retriever,
            reranker,
            generator,
        })
    }

    /// Retrieved lists (length `max(passages, 20)`), and the same lists with
    /// the first `passages` entries reordered by the reranker.
    pub fn shortlists(
        &self,
        examples: &[TrainingExample],
        pool: &PassagePool,
        index_passages: &[Passage],
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<(Vec<CandidateList>, Vec<CandidateList>), PipelineError> {
        let index = self
            .retriever
            .build_index(index_passages, cfg.index.mode()?, derive_seed(seed, &[4]))?;
        let k = cfg.reranker.passages.max(RECALL_KS[2]);
        let lists = self.retriever.retrieve_all(&index, examples, k)?;
        let heads: Vec<CandidateList> = lists
            .iter()
            .map(|l| CandidateList {
                query_id: l.query_id.clone(),
                candidates: l.candidates.iter().take(cfg.reranker.passages).cloned().collect(),
            })
            .collect();
        let mut reranked = rerank_all(&heads, examples, pool, &self.reranker)?;
        for (r, l) in reranked.iter_mut().zip(&lists) {
            r.candidates.extend(l.candidates.iter().skip(cfg.reranker.passages).cloned());
        }
        Ok((lists, reranked))
    }

    pub fn evaluate(
        &self,
        examples: &[TrainingExample],
        pool: &PassagePool,
        index_passages: &[Passage],
        cfg: &RunConfig,
        seed: u64,
    ) -> Result<EvalReport, PipelineError> {
        let (lists, reranked) = self.shortlists(examples, pool, index_passages, cfg, seed)?;
        let ranks = |ls: &[CandidateList]| -> Vec<Option<usize>> {
            ls.iter()
                .zip(examples)
                .map(|(l, e)| gold_rank(&l.ids(), &e.grounding_passage_id))
                .collect()
        };
        let outputs = generate_all(
            &self.generator,
            examples,
            &reranked,
            pool,
            cfg.generator.passages4gen,
            cfg.generator.beam_size,
        )?;
        let predictions: Vec<String> = outputs.into_iter().map(|o| o.response).collect();
        let references: Vec<String> = examples.iter().map(|e| e.response_r.clone()).collect();
        Ok(EvalReport {
            retrieval: RetrievalScores::compute(&ranks(&lists), &RECALL_KS),
            rerank: RetrievalScores::compute(&ranks(&reranked), &RECALL_KS),
            generation: GenerationScores::compute(&predictions, &references),
            predictions,
        })
    }

    /// Stamps checkpoint ids; each component's parent is the matching entry
    /// of `parents` (empty for none).
    pub fn seal(&mut self, stage: Option<&str>, parents: &[String; 3]) {
        let p = |id: &String| if id.is_empty() { vec![] } else { vec![id.clone()] };
        self.retriever.seal(stage, p(&parents[0]));
        self.reranker.seal(stage, p(&parents[1]));
        self.generator.seal(stage, p(&parents[2]));
    }

    pub fn checkpoint_ids(&self) -> [String; 3] {
        [
            self.retriever.lineage.checkpoint_id.clone(),
            self.reranker.lineage.checkpoint_id.clone(),
            self.generator.lineage.checkpoint_id.clone(),
        ]
    }

    /// Writes `retriever.ckpt`, `reranker.ckpt` and `generator.ckpt`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir).map_err(NnError::from)?;
        self.retriever.to_checkpoint().save(dir.join("retriever.ckpt"))?;
        self.reranker.to_checkpoint().save(dir.join("reranker.ckpt"))?;
        self.generator.to_checkpoint().save(dir.join("generator.ckpt"))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            retriever: DualEncoder::from_checkpoint(&Checkpoint::load(dir.join("retriever.ckpt"))?)?,
            reranker: CrossEncoder::from_checkpoint(&Checkpoint::load(dir.join("reranker.ckpt"))?)?,
            generator: FidGenerator::from_checkpoint(&Checkpoint::load(dir.join("generator.ckpt"))?)?,
        })
    }
}
