//! Maximum inner product search over passage embeddings.
//!
//! Exact mode scores every row. Approximate mode clusters the rows with
//! k-means and only scores the members of the `n_probe` clusters whose
//! centroids have the largest inner product with the query.

use std::cmp::Ordering;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{dot, round_f32, Matrix};

pub const INDEX_MAGIC: &[u8; 8] = b"GDIALIX\0";
pub const INDEX_VERSION: u32 = 1;
const KMEANS_ITERS: usize = 25;

#[derive(Debug, thiserror::Error)]
pub enum IndexError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("query has dimension {found}, index has {expected}")]
    Dimension { found: usize, expected: usize },
    #[error("{ids} ids for {rows} vectors")]
    RowMismatch { ids: usize, rows: usize },
    #[error("duplicate passage id {0} in index")]
    DuplicateId(String),
    #[error("n_clusters and n_probe must be at least 1")]
    BadClusters,
    #[error("index io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an index file (bad magic)")]
    BadMagic,
    #[error("corrupt index file: {0}")]
    Corrupt(String),
    #[error("index format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IndexMode {
    Exact,
    Approximate { n_clusters: usize, n_probe: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScore {
    pub passage_id: String,
    pub score: f64,
}

/// Ranked passages for one query: scores non-increasing, ids distinct.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub query_id: String,
    pub candidates: Vec<RetrievalScore>,
}

impl CandidateList {
    pub fn ids(&self) -> Vec<&str> {
        self.candidates.iter().map(|c| c.passage_id.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

/// Higher score first, then ascending id.
pub fn rank_order(a: &RetrievalScore, b: &RetrievalScore) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.passage_id.cmp(&b.passage_id))
}

#[derive(Debug, Clone, PartialEq)]
struct Clusters {
    centroids: Matrix,
    members: Vec<Vec<usize>>,
    n_probe: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MipsIndex {
    ids: Vec<String>,
    vectors: Matrix,
    clusters: Option<Clusters>,
    /// Identifies the encoder checkpoint the rows came from.
    pub encoder_checkpoint: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    n: usize,
    d: usize,
    mode: IndexMode,
    encoder_checkpoint: String,
    ids: Vec<String>,
    members: Vec<Vec<usize>>,
}

impl MipsIndex {
    /// Rows are rounded to `f32` so a saved index reloads bit-identically.
    pub fn exact(ids: Vec<String>, vectors: Matrix) -> Result<Self, IndexError> {
        if ids.len() != vectors.rows() {
            return Err(IndexError::RowMismatch {
                ids: ids.len(),
                rows: vectors.rows(),
            });
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(IndexError::DuplicateId(dup.clone()));
        }
        Ok(Self {
            ids,
            vectors: vectors.map(round_f32),
            clusters: None,
            encoder_checkpoint: String::new(),
        })
    }

    pub fn approximate(
        ids: Vec<String>,
        vectors: Matrix,
        n_clusters: usize,
        n_probe: usize,
        seed: u64,
    ) -> Result<Self, IndexError> {
        if n_clusters == 0 || n_probe == 0 {
            return Err(IndexError::BadClusters);
        }
        let mut index = Self::exact(ids, vectors)?;
        let (centroids, members) = kmeans(&index.vectors, n_clusters, seed);
        index.clusters = Some(Clusters {
            centroids,
            members,
            n_probe,
        });
        Ok(index)
    }

    pub fn with_encoder_checkpoint(mut self, id: impl Into<String>) -> Self {
        self.encoder_checkpoint = id.into();
        self
    }

    pub fn mode(&self) -> IndexMode {
        match &self.clusters {
            None => IndexMode::Exact,
            Some(c) => IndexMode::Approximate {
                n_clusters: c.centroids.rows(),
                n_probe: c.n_probe,
            },
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &Matrix {
        &self.vectors
    }

    fn score_rows(&self, query: &[f64], rows: impl Iterator<Item = usize>) -> Vec<RetrievalScore> {
        rows.map(|r| RetrievalScore {
            passage_id: self.ids[r].clone(),
            score: dot(query, self.vectors.row(r)),
        })
        .collect()
    }

    /// Top `k` rows by inner product. Asking for more rows than exist
    /// returns all of them.
    pub fn search(&self, query_id: &str, query: &[f64], k: usize) -> Result<CandidateList, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if self.is_empty() {
            return Ok(CandidateList {
                query_id: query_id.to_string(),
                candidates: Vec::new(),
            });
        }
        if query.len() != self.dim() {
            return Err(IndexError::Dimension {
                found: query.len(),
                expected: self.dim(),
            });
        }
        if k > self.len() {
            log::warn!("k = {k} exceeds index size {}; returning {}", self.len(), self.len());
        }
        let k = k.min(self.len());
        let mut scored = match &self.clusters {
            None => self.score_rows(query, 0..self.len()),
            Some(c) => {
                let mut order: Vec<(usize, f64)> = (0..c.centroids.rows())
                    .map(|i| (i, dot(query, c.centroids.row(i))))
                    .collect();
                order.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
                let mut rows = Vec::new();
                for (probed, (ci, _)) in order.iter().enumerate() {
                    if probed >= c.n_probe && rows.len() >= k {
                        break;
                    }
                    rows.extend_from_slice(&c.members[*ci]);
                }
                self.score_rows(query, rows.into_iter())
            }
        };
        scored.sort_by(rank_order);
        scored.truncate(k);
        Ok(CandidateList {
            query_id: query_id.to_string(),
            candidates: scored,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            format_version: INDEX_VERSION,
            n: self.len(),
            d: self.dim(),
            mode: self.mode(),
            encoder_checkpoint: self.encoder_checkpoint.clone(),
            ids: self.ids.clone(),
            members: self.clusters.as_ref().map(|c| c.members.clone()).unwrap_or_default(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let mut put = |m: &Matrix| {
            for &x in m.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        };
        put(&self.vectors);
        if let Some(c) = &self.clusters {
            put(&c.centroids);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        if bytes.len() < 12 {
            return Err(IndexError::Corrupt("file shorter than its preamble".into()));
        }
        if &bytes[..8] != INDEX_MAGIC {
            return Err(IndexError::BadMagic);
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err(IndexError::Corrupt("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| IndexError::Corrupt(e.to_string()))?;
        if header.format_version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch {
                found: header.format_version,
                expected: INDEX_VERSION,
            });
        }
        let mut data = &body[hlen..];
        let mut take = |rows: usize, cols: usize| -> Result<Matrix, IndexError> {
            let n = rows * cols * 4;
            if data.len() < n {
                return Err(IndexError::Corrupt("truncated vectors".into()));
            }
            let v = data[..n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            data = &data[n..];
            Ok(Matrix::from_vec(rows, cols, v))
        };
        let vectors = take(header.n, header.d)?;
        let clusters = match header.mode {
            IndexMode::Exact => None,
            IndexMode::Approximate { n_clusters, n_probe } => Some(Clusters {
                centroids: take(n_clusters, header.d)?,
                members: header.members,
                n_probe,
            }),
        };
        if !data.is_empty() {
            return Err(IndexError::Corrupt("trailing bytes".into()));
        }
        if header.ids.len() != header.n {
            return Err(IndexError::Corrupt("id table length differs from n".into()));
        }
        Ok(Self {
            ids: header.ids,
            vectors,
            clusters,
            encoder_checkpoint: header.encoder_checkpoint,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IndexError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, IndexError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

/// Lloyd's k-means with distinct random rows as initial centroids. Returns
/// centroids (rounded to `f32`) and the member rows of each cluster.
fn kmeans(x: &Matrix, k: usize, seed: u64) -> (Matrix, Vec<Vec<usize>>) {
    let n = x.rows();
    let d = x.cols();
    let k = k.min(n).max(1);
    if n == 0 {
        return (Matrix::zeros(0, d), Vec::new());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(k, d);
    for (i, r) in sample(&mut rng, n, k).into_iter().enumerate() {
        centroids.row_mut(i).copy_from_slice(x.row(r));
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_ITERS {
        let mut changed = false;
        for (r, a) in assign.iter_mut().enumerate() {
            let row = x.row(r);
            let best = (0..k)
                .map(|c| {
                    let dist: f64 = row.iter().zip(centroids.row(c)).map(|(p, q)| (p - q).powi(2)).sum();
                    (c, dist)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal))
                .map(|(c, _)| c)
                .expect("k >= 1");
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (r, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut members = vec![Vec::new(); k];
    for (r, &a) in assign.iter().enumerate() {
        members[a].push(r);
    }
    (centroids.map(round_f32), members)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i:03}")).collect()
    }

    #[test]
    fn empty_index_returns_nothing() {
        let idx = MipsIndex::exact(vec![], Matrix::zeros(0, 4)).unwrap();
        assert!(idx.search("q", &[1.0, 0.0, 0.0, 0.0], 3).unwrap().is_empty());
    }

    #[test]
    fn single_row_always_returned() {
        let idx = MipsIndex::exact(ids(1), Matrix::from_vec(1, 2, vec![0.3, -1.0])).unwrap();
        let r = idx.search("q", &[5.0, 5.0], 4).unwrap();
        assert_eq!(r.ids(), vec!["p000"]);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = MipsIndex::exact(
            vec!["b".into(), "a".into(), "c".into()],
            Matrix::from_vec(3, 1, vec![1.0, 1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(idx.search("q", &[1.0], 3).unwrap().ids(), vec!["c", "a", "b"]);
    }

    #[test]
    fn round_trip_bytes() {
        let v = Matrix::from_vec(6, 2, (0..12).map(|i| (i as f64 * 0.7).cos()).collect());
        let idx = MipsIndex::approximate(ids(6), v, 2, 1, 3).unwrap().with_encoder_checkpoint("abc");
        let back = MipsIndex::from_bytes(&idx.to_bytes()).unwrap();
        assert_eq!(back, idx);
        let mut bytes = idx.to_bytes();
        bytes.truncate(bytes.len() - 3);
        assert!(MipsIndex::from_bytes(&bytes).is_err());
    }

    #[test]
    fn zero_k_is_an_error() {
        let idx = MipsIndex::exact(ids(1), Matrix::zeros(1, 2)).unwrap();
        assert!(matches!(idx.search("q", &[0.0, 0.0], 0), Err(IndexError::ZeroK)));
    }
}
