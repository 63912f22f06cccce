//! Fusion-in-decoder response generation.
//!
//! Each passage is encoded on its own together with the prompt and query;
//! the encoder states are concatenated along the token axis and the decoder
//! cross-attends over the fused memory.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{PassagePool, TrainingExample};
use crate::nn::{checkpoint_id, Checkpoint, Lineage, Matrix, ModelDims, NnError, NodeId, ParamStore, Seq2Seq, Tape};
use crate::retriever::CandidateList;
use crate::tokenizer::{split_words, Tokenizer, BOS, EOS, PASSAGE_MARK, QUERY_MARK};
use crate::train::{derive_seed, run_epochs, LoopConfig, TrainLog};

pub const CHECKPOINT_KIND: &str = "generator";
pub const DEFAULT_PROMPT: &str = "please generate the response:";

#[derive(Debug, thiserror::Error)]
pub enum GeneratorError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("fused memory of {n} passages with lengths {lengths:?} exceeds the cap of {cap} tokens")]
    MemoryTooLong { n: usize, lengths: Vec<usize>, cap: usize },
    #[error("at least one passage is required")]
    NoPassages,
    #[error("beam_size must be at least 1")]
    ZeroBeam,
    #[error("passage {0} is not in the passage pool")]
    UnknownPassage(String),
    #[error("{lists} candidate lists for {examples} examples")]
    ListCount { lists: usize, examples: usize },
    #[error("checkpoint config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub dims: ModelDims,
    pub max_input_length: usize,
    pub max_output_length: usize,
    /// Cap on the total fused memory length.
    pub max_memory_tokens: usize,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FidInput {
    pub query: String,
    pub passages: Vec<String>,
    pub prompt: String,
}

/// `prompt <query> query <passage> passage_i` for every passage, truncated
/// at the end (so the passage loses tokens first).
pub fn assemble_fid_inputs(tok: &Tokenizer, input: &FidInput, max_input_length: usize) -> Vec<Vec<usize>> {
    let mut prefix = tok.tokenize(&input.prompt, usize::MAX);
    prefix.push(QUERY_MARK);
    prefix.extend(tok.encode_turns(&input.query, usize::MAX));
    prefix.push(PASSAGE_MARK);
    input
        .passages
        .iter()
        .map(|p| {
            let mut s = prefix.clone();
            s.extend(tok.tokenize(p, usize::MAX));
            s.truncate(max_input_length.max(1));
            s
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub response: String,
    /// Generated ids without BOS/EOS.
    pub token_ids: Vec<usize>,
    /// Length-normalised log probability of the returned hypothesis.
    pub score: f64,
    /// Scores of all final hypotheses, best first.
    pub beam_scores: Vec<f64>,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidGenerator {
    pub store: ParamStore,
    pub net: Seq2Seq,
    pub tokenizer: Tokenizer,
    pub arch: GeneratorArch,
    pub lineage: Lineage,
}

fn fuse(net: &Seq2Seq, tape: &mut Tape, seqs: &[Vec<usize>], cap: usize) -> Result<NodeId, GeneratorError> {
    if seqs.is_empty() {
        return Err(GeneratorError::NoPassages);
    }
    let total: usize = seqs.iter().map(Vec::len).sum();
    if total > cap {
        return Err(GeneratorError::MemoryTooLong {
            n: seqs.len(),
            lengths: seqs.iter().map(Vec::len).collect(),
            cap,
        });
    }
    let parts = seqs.iter().map(|s| net.encode(tape, s)).collect::<Result<Vec<_>, _>>()?;
    Ok(if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)
    })
}

impl FidGenerator {
    pub fn new(tokenizer: Tokenizer, mut arch: GeneratorArch, seed: u64) -> Self {
        arch.dims.vocab_size = tokenizer.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Seq2Seq::init(&mut store, &arch.dims, &mut rng);
        Self {
            store,
            net,
            tokenizer,
            arch,
            lineage: Lineage::default(),
        }
    }

    pub fn fid_input(&self, query: &str, passages: Vec<String>) -> FidInput {
        FidInput {
            query: query.to_string(),
            passages,
            prompt: self.arch.prompt.clone(),
        }
    }

    pub fn assemble(&self, input: &FidInput) -> Vec<Vec<usize>> {
        assemble_fid_inputs(&self.tokenizer, input, self.arch.max_input_length)
    }

    /// Evaluation-mode fused memory.
    pub fn memory(&self, seqs: &[Vec<usize>]) -> Result<Matrix, GeneratorError> {
        let mut tape = Tape::new(&self.store);
        let m = fuse(&self.net, &mut tape, seqs, self.arch.max_memory_tokens)?;
        Ok(tape.value(m).clone())
    }

    /// Teacher-forced logits for `decoder_input` against the fused memory.
    pub fn logits(&self, seqs: &[Vec<usize>], decoder_input: &[usize]) -> Result<Matrix, GeneratorError> {
        let mut tape = Tape::new(&self.store);
        let m = fuse(&self.net, &mut tape, seqs, self.arch.max_memory_tokens)?;
        let l = self.net.decode(&mut tape, m, decoder_input)?;
        Ok(tape.value(l).clone())
    }

    fn next_log_probs(&self, memory: &Matrix, prefix: &[usize]) -> Result<Vec<f64>, GeneratorError> {
        let mut tape = Tape::new(&self.store);
        let m = tape.input(memory.clone());
        let l = self.net.decode(&mut tape, m, prefix)?;
        let v = tape.value(l);
        Ok(log_softmax_row(v.row(v.rows() - 1)))
    }

    fn finish(&self, ids: Vec<usize>, score: f64, beam_scores: Vec<f64>) -> GenerationOutput {
        let token_ids: Vec<usize> = ids.into_iter().filter(|&t| t != BOS && t != EOS).collect();
        GenerationOutput {
            response: self.tokenizer.decode(&token_ids),
            token_ids,
            score,
            beam_scores,
        }
    }

    /// Argmax decoding; ties go to the lowest token id.
    pub fn greedy(&self, input: &FidInput) -> Result<GenerationOutput, GeneratorError> {
        let memory = self.memory(&self.assemble(input))?;
        let mut ids = vec![BOS];
        let mut logp = 0.0;
        for _ in 0..self.arch.max_output_length {
            let lp = self.next_log_probs(&memory, &ids)?;
            let (best, v) = lp
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            ids.push(best);
            logp += v;
            if best == EOS {
                break;
            }
        }
        let score = logp / (ids.len() - 1) as f64;
        Ok(self.finish(ids, score, vec![score]))
    }

    /// Beam search over length-normalised log probability (exponent 1).
    pub fn generate(&self, input: &FidInput, beam_size: usize) -> Result<GenerationOutput, GeneratorError> {
        if beam_size == 0 {
            return Err(GeneratorError::ZeroBeam);
        }
        let memory = self.memory(&self.assemble(input))?;
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(vec![BOS], 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..self.arch.max_output_length {
            let mut cands: Vec<(Vec<usize>, f64)> = Vec::new();
            for (ids, score) in &beams {
                let lp = self.next_log_probs(&memory, ids)?;
                let mut order: Vec<usize> = (0..lp.len()).collect();
                order.sort_by(|&a, &b| lp[b].partial_cmp(&lp[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
                for &t in order.iter().take(beam_size) {
                    let mut next = ids.clone();
                    next.push(t);
                    cands.push((next, score + lp[t]));
                }
            }
            cands.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
            beams.clear();
            for c in cands.into_iter().take(beam_size) {
                if c.0.last() == Some(&EOS) {
                    finished.push(c);
                } else {
                    beams.push(c);
                }
            }
            if finished.len() >= beam_size || beams.is_empty() {
                break;
            }
        }
        if finished.is_empty() {
            finished = beams;
        }
        let mut scored: Vec<(Vec<usize>, f64)> = finished
            .into_iter()
            .map(|(ids, s)| {
                let n = (ids.len() - 1).max(1) as f64;
                (ids, s / n)
            })
            .collect();
        scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
        let beam_scores = scored.iter().map(|s| s.1).collect();
        let (ids, score) = scored.into_iter().next().expect("at least one hypothesis");
        Ok(self.finish(ids, score, beam_scores))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            CHECKPOINT_KIND,
            serde_json::to_value(&self.arch).expect("arch serializes"),
            self.tokenizer.tokens().to_vec(),
            self.lineage.clone(),
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, GeneratorError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: GeneratorArch =
            serde_json::from_value(ck.config.clone()).map_err(|e| GeneratorError::Config(e.to_string()))?;
        let tok = Tokenizer::from_tokens(ck.vocab.clone()).map_err(|e| GeneratorError::Config(e.to_string()))?;
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

/// Decoder input `[BOS] r` and targets `r [EOS]`, with `r` cut so the
/// target fits `max_output_length`. The flag reports truncation.
pub fn teacher_forcing(tok: &Tokenizer, response: &str, max_output_length: usize) -> (Vec<usize>, Vec<usize>, bool) {
    let keep = max_output_length.saturating_sub(1);
    let truncated = split_words(response).len() > keep;
    let r = tok.tokenize(response, keep);
    let mut dec_in = vec![BOS];
    dec_in.extend(&r);
    let mut targets = r;
    targets.push(EOS);
    (dec_in, targets, truncated)
}

/// Top `n` candidate ids with the gold passage placed at a random slot.
pub fn generation_passages<R: Rng>(list: Option<&CandidateList>, gold: &str, n: usize, rng: &mut R) -> Vec<String> {
    let mut others: Vec<String> = list
        .map(|l| {
            l.candidates
                .iter()
                .filter(|c| c.passage_id != gold)
                .take(n.saturating_sub(1))
                .map(|c| c.passage_id.clone())
                .collect()
        })
        .unwrap_or_default();
    let pos = rng.random_range(0..=others.len());
    others.insert(pos, gold.to_string());
    others
}

/// Top `n` ids of a list, as used at inference time.
pub fn inference_passages(list: &CandidateList, n: usize) -> Vec<String> {
    list.candidates.iter().take(n).map(|c| c.passage_id.clone()).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainReport {
    pub log: TrainLog,
    pub truncated_responses: usize,
    pub first_batch_loss: Option<f64>,
}

/// Teacher-forced cross-entropy training. Without candidate lists every
/// example sees only its gold passage.
pub fn train_generator(
    model: &mut FidGenerator,
    examples: &[TrainingExample],
    lists: Option<&[CandidateList]>,
    pool: &PassagePool,
    passages4gen: usize,
    cfg: &LoopConfig,
) -> Result<GeneratorTrainReport, GeneratorError> {
    if let Some(l) = lists {
        if l.len() != examples.len() {
            return Err(GeneratorError::ListCount {
                lists: l.len(),
                examples: examples.len(),
            });
        }
    }
    let mut truncated = 0;
    let mut items = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.step.seed, &[i as u64]));
        let ids = generation_passages(lists.map(|l| &l[i]), &e.grounding_passage_id, passages4gen, &mut rng);
        let texts = ids
            .iter()
            .map(|id| pool.get(id).map(|p| p.text.clone()).ok_or_else(|| GeneratorError::UnknownPassage(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let seqs = model.assemble(&model.fid_input(&e.input_x, texts));
        let (dec_in, targets, cut) = teacher_forcing(&model.tokenizer, &e.response_r, model.arch.max_output_length);
        truncated += usize::from(cut);
        items.push((seqs, dec_in, targets));
    }
    if truncated > 0 {
        log::warn!("generator: truncated {truncated} responses to max_output_length");
    }
    let cap = model.arch.max_memory_tokens;
    let FidGenerator { store, net, .. } = model;
    let first = std::cell::Cell::new(None);
    let log = run_epochs(
        store,
        items.len(),
        cfg,
        |tape, batch| {
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                let (seqs, dec_in, targets) = &items[i];
                let m = fuse(net, tape, seqs, cap).map_err(|e| match e {
                    GeneratorError::Nn(n) => n,
                    other => NnError::InvalidConfig(other.to_string()),
                })?;
                let logits = net.decode(tape, m, dec_in)?;
                losses.push(tape.cross_entropy(logits, targets));
            }
            let total = tape.sum(&losses);
            let mean = tape.scale(total, 1.0 / batch.len() as f64);
            if first.get().is_none() {
                first.set(Some(tape.value(mean).item()));
            }
            Ok(mean)
        },
        |stats, _| {
            log::info!("generator epoch {}: loss {:.4}", stats.epoch, stats.mean_loss);
            true
        },
    )?;
    Ok(GeneratorTrainReport {
        log,
        truncated_responses: truncated,
        first_batch_loss: first.get(),
    })
}

/// Beam-search responses for every example from its candidate list.
pub fn generate_all(
    model: &FidGenerator,
    examples: &[TrainingExample],
    lists: &[CandidateList],
    pool: &PassagePool,
    passages4gen: usize,
    beam_size: usize,
) -> Result<Vec<GenerationOutput>, GeneratorError> {
    if lists.len() != examples.len() {
        return Err(GeneratorError::ListCount {
            lists: lists.len(),
            examples: examples.len(),
        });
    }
    examples
        .par_iter()
        .zip(lists)
        .map(|(e, l)| {
            let texts = inference_passages(l, passages4gen)
                .iter()
                .map(|id| pool.get(id).map(|p| p.text.clone()).ok_or_else(|| GeneratorError::UnknownPassage(id.clone())))
                .collect::<Result<Vec<_>, _>>()?;
            if texts.is_empty() {
                return Err(GeneratorError::NoPassages);
            }
            model.generate(&model.fid_input(&e.input_x, texts), beam_size)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::build([DEFAULT_PROMPT, "a b c d e f"])
    }

    fn input(passages: &[&str]) -> FidInput {
        FidInput {
            query: "a b".into(),
            passages: passages.iter().map(|s| s.to_string()).collect(),
            prompt: DEFAULT_PROMPT.into(),
        }
    }

    #[test]
    fn empty_passage_gives_prompt_and_query_only() {
        let t = tok();
        let seqs = assemble_fid_inputs(&t, &input(&[""]), 100);
        assert_eq!(seqs.len(), 1);
        assert_eq!(*seqs[0].last().unwrap(), PASSAGE_MARK);
        assert_eq!(seqs[0].len(), t.tokenize(DEFAULT_PROMPT, 100).len() + 4);
    }

    #[test]
    fn shared_prefix_across_passages() {
        let t = tok();
        let seqs = assemble_fid_inputs(&t, &input(&["c", "d e", "f", "a", "b c d"]), 100);
        assert_eq!(seqs.len(), 5);
        let cut = seqs[0].iter().position(|&x| x == PASSAGE_MARK).unwrap();
        for s in &seqs {
            assert_eq!(&s[..=cut], &seqs[0][..=cut]);
        }
    }

    #[test]
    fn teacher_forcing_shapes() {
        let t = tok();
        let (i, o, cut) = teacher_forcing(&t, "a b c", 3);
        assert_eq!(i, vec![BOS, t.id("a").unwrap(), t.id("b").unwrap()]);
        assert_eq!(o, vec![t.id("a").unwrap(), t.id("b").unwrap(), EOS]);
        assert!(cut);
    }

    #[test]
    fn gold_is_always_included() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = generation_passages(None, "g", 5, &mut rng);
        assert_eq!(p, vec!["g".to_string()]);
    }
}
