//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` header length, a JSON header
//! (model kind and config, vocabulary, lineage, tensor table), then every
//! tensor as raw little-endian `f32` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::matrix::Matrix;
use super::params::ParamStore;
use super::NnError;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GDIALCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Lineage {
    pub checkpoint_id: String,
    /// Name of the training stage that produced the weights, if any.
    pub stage: Option<String>,
    /// Checkpoint ids this one was initialised from.
    pub parents: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: String,
    config: serde_json::Value,
    vocab: Vec<String>,
    vocab_hash: String,
    lineage: Lineage,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub lineage: Lineage,
    pub tensors: Vec<(String, Matrix)>,
}

pub fn vocab_hash(vocab: &[String]) -> String {
    let mut h = Sha256::new();
    for t in vocab {
        h.update(t.as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

/// Content-derived identifier: hashes kind, stage, parents and weights.
pub fn checkpoint_id(kind: &str, stage: Option<&str>, parents: &[String], store: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(stage.unwrap_or("").as_bytes());
    for p in parents {
        h.update([0u8]);
        h.update(p.as_bytes());
    }
    for (_, name, t) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update((*v as f32).to_le_bytes());
        }
    }
    hex::encode(&h.finalize()[..8])
}

impl Checkpoint {
    pub fn from_store(
        kind: &str,
        config: serde_json::Value,
        vocab: Vec<String>,
        lineage: Lineage,
        store: &ParamStore,
    ) -> Self {
        Self {
            kind: kind.to_string(),
            config,
            vocab,
            lineage,
            tensors: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            config: self.config.clone(),
            vocab_hash: vocab_hash(&self.vocab),
            vocab: self.vocab.clone(),
            lineage: self.lineage.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        if bytes.len() < 12 {
            return Err(NnError::Truncated("checkpoint preamble".into()));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(NnError::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(NnError::Truncated("checkpoint header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| NnError::CorruptHeader(e.to_string()))?;
        if header.format_version != CHECKPOINT_VERSION {
            return Err(NnError::VersionMismatch {
                found: header.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if vocab_hash(&header.vocab) != header.vocab_hash {
            return Err(NnError::CorruptHeader("vocabulary hash mismatch".into()));
        }
        let mut data = &body[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            if data.len() < n * 4 {
                return Err(NnError::Truncated(format!("tensor {}", e.name)));
            }
            let vals = data[..n * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            data = &data[n * 4..];
            tensors.push((e.name.clone(), Matrix::from_vec(e.rows, e.cols, vals)));
        }
        if !data.is_empty() {
            return Err(NnError::CorruptHeader(format!(
                "{} trailing bytes after tensors",
                data.len()
            )));
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            vocab: header.vocab,
            lineage: header.lineage,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NnError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NnError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), NnError> {
        if self.kind != kind {
            return Err(NnError::WrongKind {
                found: self.kind.clone(),
                expected: kind.to_string(),
            });
        }
        Ok(())
    }

    /// Copies the tensors into a store whose layout was rebuilt from the
    /// checkpoint's config; names and shapes must match one-to-one.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<(), NnError> {
        if store.len() != self.tensors.len() {
            return Err(NnError::LayoutMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for ((name, t), (_, sname, st)) in self.tensors.iter().zip(store.iter()) {
            if name != sname || t.shape() != st.shape() {
                return Err(NnError::LayoutMismatch(format!(
                    "tensor {name} {:?} does not match {sname} {:?}",
                    t.shape(),
                    st.shape()
                )));
            }
        }
        store.replace_all(self.tensors.iter().map(|(_, t)| t.clone()).collect());
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut store = ParamStore::new();
        store.add("a", Matrix::from_rows(&[vec![1.5, -2.25], vec![0.1, 3.0]]));
        store.add("b", Matrix::from_vec(1, 3, vec![0.0, 1.0, 2.0]));
        Checkpoint::from_store(
            "test",
            serde_json::json!({"d": 2}),
            vec!["<pad>".into(), "x".into()],
            Lineage {
                checkpoint_id: "abc".into(),
                stage: Some("s1".into()),
                parents: vec![],
            },
            &store,
        )
    }

    #[test]
    fn bytes_round_trip() {
        let c = sample();
        assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 11, 20, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, NnError::Truncated(_) | NnError::CorruptHeader(_)),
                "cut {cut}: {err:?}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let bytes = sample().to_bytes();
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[12..12 + hlen]).unwrap();
        let patched = header.replace("\"format_version\":1", "\"format_version\":7");
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(patched.as_bytes());
        out.extend_from_slice(&bytes[12 + hlen..]);
        let err = Checkpoint::from_bytes(&out).unwrap_err();
        assert!(matches!(
            err,
            NnError::VersionMismatch {
                found: 7,
                expected: 1
            }
        ));
    }
}
