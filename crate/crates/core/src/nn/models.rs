//! Encoder and encoder-decoder networks over a [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{embed_tokens, DecoderStack, EncoderStack, Linear, ModelDims};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};
use super::tape::{NodeId, Tape};
use super::NnError;

/// How an encoder summarises its output states into one vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    FirstToken,
    Mean,
}

/// Tape nodes produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncodedNodes {
    /// Word embeddings of the input, before positions are added.
    pub embedded: NodeId,
    pub states: NodeId,
    pub pooled: NodeId,
}

/// Embedding table, transformer stack and pooling, addressed inside a
/// (possibly shared) parameter store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    embedding: ParamId,
    stack: EncoderStack,
    pooling: Pooling,
    dims: ModelDims,
}

impl Encoder {
    pub fn init<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &ModelDims,
        pooling: Pooling,
        rng: &mut R,
    ) -> Self {
        let embedding = store.normal(
            format!("{name}.embedding"),
            dims.vocab_size,
            dims.d_model,
            1.0,
            rng,
        );
        Self::with_embedding(store, name, dims, pooling, embedding, rng)
    }

    /// An encoder reading its word vectors from an existing table.
    pub fn with_embedding<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: &ModelDims,
        pooling: Pooling,
        embedding: ParamId,
        rng: &mut R,
    ) -> Self {
        let stack = EncoderStack::init(store, name, dims, rng);
        Self {
            embedding,
            stack,
            pooling,
            dims: *dims,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn pooling(&self) -> Pooling {
        self.pooling
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[usize]) -> Result<EncodedNodes, NnError> {
        if ids.is_empty() {
            return Err(NnError::EmptyInput);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.dims.vocab_size) {
            return Err(NnError::TokenOutOfRange(bad, self.dims.vocab_size));
        }
        let x = embed_tokens(tape, self.embedding, ids);
        let embedded = tape.embedded_inputs()[tape.embedded_inputs().len() - 1];
        let states = self.stack.forward(tape, x);
        let pooled = match self.pooling {
            Pooling::FirstToken => tape.slice_rows(states, 0, 1),
            Pooling::Mean => tape.mean_rows(states),
        };
        Ok(EncodedNodes {
            embedded,
            states,
            pooled,
        })
    }
}

/// Result of an evaluation-mode encoder pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub pooled: Vec<f64>,
    pub states: Matrix,
}

/// A standalone encoder owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub store: ParamStore,
    pub encoder: Encoder,
}

impl EncoderModel {
    pub fn new(dims: ModelDims, pooling: Pooling, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::init(&mut store, "encoder", &dims, pooling, &mut rng);
        Self { store, encoder }
    }

    /// Deterministic evaluation-mode pass.
    pub fn encode(&self, ids: &[usize]) -> Result<Encoding, NnError> {
        let mut tape = Tape::new(&self.store);
        let out = self.encoder.forward(&mut tape, ids)?;
        Ok(Encoding {
            pooled: tape.value(out.pooled).data().to_vec(),
            states: tape.value(out.states).clone(),
        })
    }
}

/// Shared-embedding encoder-decoder with a vocabulary projection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Seq2Seq {
    embedding: ParamId,
    encoder: EncoderStack,
    decoder: DecoderStack,
    output: Linear,
    dims: ModelDims,
}

impl Seq2Seq {
    pub fn init<R: rand::Rng>(store: &mut ParamStore, dims: &ModelDims, rng: &mut R) -> Self {
        let embedding = store.normal("embedding", dims.vocab_size, dims.d_model, 1.0, rng);
        let encoder = EncoderStack::init(store, "encoder", dims, rng);
        let decoder = DecoderStack::init(store, "decoder", dims, rng);
        // Small output weights keep initial logits near uniform.
        let output = Linear {
            weight: store.normal("output.weight", dims.d_model, dims.vocab_size, 0.02, rng),
            bias: store.zeros("output.bias", 1, dims.vocab_size),
        };
        Self {
            embedding,
            encoder,
            decoder,
            output,
            dims: *dims,
        }
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), NnError> {
        if ids.is_empty() {
            return Err(NnError::EmptyInput);
        }
        match ids.iter().find(|&&i| i >= self.dims.vocab_size) {
            Some(&bad) => Err(NnError::TokenOutOfRange(bad, self.dims.vocab_size)),
            None => Ok(()),
        }
    }

    /// Encoder states for one source sequence (positions start at 0).
    pub fn encode(&self, tape: &mut Tape, src: &[usize]) -> Result<NodeId, NnError> {
        self.check_ids(src)?;
        let x = embed_tokens(tape, self.embedding, src);
        Ok(self.encoder.forward(tape, x))
    }

    /// Next-token logits (one row per decoder input position).
    pub fn decode(
        &self,
        tape: &mut Tape,
        memory: NodeId,
        decoder_input: &[usize],
    ) -> Result<NodeId, NnError> {
        self.check_ids(decoder_input)?;
        let x = embed_tokens(tape, self.embedding, decoder_input);
        let h = self.decoder.forward(tape, x, memory);
        Ok(self.output.forward(tape, h))
    }
}

/// A standalone encoder-decoder owning its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    pub store: ParamStore,
    pub net: Seq2Seq,
}

impl Seq2SeqModel {
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Seq2Seq::init(&mut store, &dims, &mut rng);
        Self { store, net }
    }

    /// Plain encoder-decoder logits for one source sequence.
    pub fn logits(&self, src: &[usize], decoder_input: &[usize]) -> Result<Matrix, NnError> {
        let mut tape = Tape::new(&self.store);
        let memory = self.net.encode(&mut tape, src)?;
        let logits = self.net.decode(&mut tape, memory, decoder_input)?;
        Ok(tape.value(logits).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab_size: 20,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            d_ff: 32,
        }
    }

    #[test]
    fn single_pad_token_gives_finite_vector() {
        let m = EncoderModel::new(dims(), Pooling::FirstToken, 1);
        let e = m.encode(&[0]).unwrap();
        assert_eq!(e.pooled.len(), 16);
        assert!(e.pooled.iter().all(|v| v.is_finite()));
        assert_eq!(e.states.shape(), (1, 16));
    }

    #[test]
    fn eval_encoding_is_bitwise_deterministic() {
        let m = EncoderModel::new(dims(), Pooling::FirstToken, 2);
        let a = m.encode(&[3, 4, 5, 6]).unwrap();
        let b = m.encode(&[3, 4, 5, 6]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn swapping_tokens_changes_pooled_output() {
        for pooling in [Pooling::FirstToken, Pooling::Mean] {
            let m = EncoderModel::new(dims(), pooling, 3);
            let a = m.encode(&[3, 4, 5]).unwrap();
            let b = m.encode(&[3, 5, 4]).unwrap();
            assert_ne!(a.pooled, b.pooled);
        }
    }

    #[test]
    fn empty_input_is_rejected() {
        let m = EncoderModel::new(dims(), Pooling::FirstToken, 4);
        assert!(matches!(m.encode(&[]), Err(NnError::EmptyInput)));
        assert!(matches!(
            m.encode(&[25]),
            Err(NnError::TokenOutOfRange(25, 20))
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let m = Seq2SeqModel::new(dims(), 5);
        let a = m.logits(&[4, 5, 6], &[2, 7, 8, 9]).unwrap();
        let b = m.logits(&[4, 5, 6], &[2, 7, 11, 12]).unwrap();
        for c in 0..20 {
            assert_eq!(a.get(0, c), b.get(0, c));
            assert_eq!(a.get(1, c), b.get(1, c));
        }
        assert_ne!(a.row(2), b.row(2));
    }
}
