//! Text embedding providers: a file-backed table for precomputed encoder
//! outputs and a deterministic hash-based provider for offline runs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fixed-dimension, deterministic text embedding.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// True for id-only labels with no lexical content ("m.0jz0c4", "g.112yfy2").
/// Such entities embed to the zero vector; triple-level features carry the
/// semantics through the relation and the other endpoint.
pub fn is_opaque_label(label: &str) -> bool {
    let Some((prefix, rest)) = label.split_once('.') else {
        return false;
    };
    matches!(prefix, "m" | "g")
        && !rest.is_empty()
        && rest
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Hash-based pseudo-embeddings: each token maps to a fixed pseudo-random
/// unit-scale vector (SHA-256 in counter mode); a text embeds to the mean of
/// its token vectors. Deterministic across platforms.
pub struct HashEmbedding {
    dim: usize,
}

impl HashEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        Self { dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        let mut counter = 0u32;
        while out.len() < self.dim {
            let mut hasher = Sha256::new();
            hasher.update(token.as_bytes());
            hasher.update(counter.to_le_bytes());
            let digest = hasher.finalize();
            for chunk in digest.chunks_exact(8) {
                if out.len() == self.dim {
                    break;
                }
                let bits = u64::from_le_bytes(chunk.try_into().unwrap());
                // uniform in [-1, 1)
                let unit = (bits >> 11) as f64 / (1u64 << 53) as f64;
                out.push(2.0 * unit - 1.0);
            }
            counter += 1;
        }
        out
    }
}

impl EmbeddingProvider for HashEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        if is_opaque_label(text) {
            return vec![0.0; self.dim];
        }
        let tokens = tokenize(text);
        let mut acc = vec![0.0; self.dim];
        if tokens.is_empty() {
            return acc;
        }
        for tok in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(tok)) {
                *a += v;
            }
        }
        let scale = 1.0 / tokens.len() as f64;
        for a in &mut acc {
            *a *= scale;
        }
        acc
    }
}

/// File-backed table of precomputed vectors. Format: one entry per line,
/// "label<TAB>v1 v2 v3 ...". Missing labels embed to the zero vector.
pub struct TableEmbedding {
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbedding {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        let mut table = HashMap::new();
        let mut dim = 0usize;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let (label, rest) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected 'label<TAB>values'".into(),
            })?;
            let vec: Vec<f64> = rest
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>().map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        msg: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            if dim == 0 {
                dim = vec.len();
            } else if vec.len() != dim {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    msg: format!("inconsistent dimension {} (expected {dim})", vec.len()),
                });
            }
            table.insert(label.to_string(), vec);
        }
        if dim == 0 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                msg: "empty embedding table".into(),
            });
        }
        Ok(Self { dim, table })
    }
}

impl EmbeddingProvider for TableEmbedding {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        self.table
            .get(text)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dim])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn opaque_labels() {
        assert!(is_opaque_label("m.0jz0c4"));
        assert!(is_opaque_label("g.112yfy2"));
        assert!(!is_opaque_label("Tupac"));
        assert!(!is_opaque_label("film.actor.film"));
        assert!(!is_opaque_label("m."));
    }

    #[test]
    fn hash_embedding_is_deterministic_and_opaque_is_zero() {
        let e = HashEmbedding::new(16);
        assert_eq!(e.embed("who directed the film"), e.embed("who directed the film"));
        assert_eq!(e.embed("m.0jz0c4"), vec![0.0; 16]);
        assert_ne!(e.embed("directed"), vec![0.0; 16]);
    }

    #[test]
    fn hash_embedding_token_overlap_moves_vectors_closer() {
        let e = HashEmbedding::new(64);
        let q = e.embed("who directed film one");
        let near = e.embed("directed_by");
        let far = e.embed("born_in");
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        assert!(dot(&q, &near) > dot(&q, &far));
    }

    #[test]
    fn table_embedding_round_trip_and_missing_label() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("emb.tsv");
        std::fs::write(&p, "alpha\t1.0 2.0 3.0\nbeta\t0.5 -0.5 0.0\n").unwrap();
        let t = TableEmbedding::load(&p).unwrap();
        assert_eq!(t.dim(), 3);
        assert_eq!(t.embed("alpha"), vec![1.0, 2.0, 3.0]);
        assert_eq!(t.embed("missing"), vec![0.0; 3]);
    }
}
