use std::collections::HashMap;
use std::fs;
use std::path::Path;

use log::warn;

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{fill_uniform, Matrix, Rng};

pub const EMBEDDING_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `vocab_size × embed_dim`
    pub matrix: Matrix,
    pub trainable: bool,
    /// Rows filled from the pretrained file.
    pub covered: usize,
}

impl EmbeddingTable {
    pub fn embed_dim(&self) -> usize {
        self.matrix.cols()
    }
}

pub fn random_embeddings(vocab: &Vocabulary, embed_dim: usize, rng: &mut Rng) -> EmbeddingTable {
    let mut matrix = Matrix::zeros(vocab.len(), embed_dim);
    fill_uniform(matrix.data_mut(), EMBEDDING_INIT_SCALE, rng);
    EmbeddingTable {
        matrix,
        trainable: true,
        covered: 0,
    }
}

/// Parses `token v1 ... vD` lines and fills rows of in-vocabulary tokens.
///
/// Every row is first drawn uniformly in ±0.1 from `rng`, so rows the file
/// does not cover (and UNK) stay random, and a file covering nothing yields
/// exactly the random table. Duplicate tokens: the last line wins.
pub fn parse_embeddings(text: &str, vocab: &Vocabulary, rng: &mut Rng) -> Result<EmbeddingTable> {
    let mut dim: Option<usize> = None;
    let mut rows: HashMap<usize, Vec<f64>> = HashMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let mut parts = raw.split(' ').filter(|s| !s.is_empty());
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|e| Error::Parse {
                    line,
                    message: format!("bad embedding value {p:?}: {e}"),
                })
            })
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Parse {
                line,
                message: format!("token {token:?} has no vector"),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("inconsistent embedding dimension: expected {d}, found {}", values.len()),
                })
            }
            _ => {}
        }
        if let Some(id) = vocab.get(token) {
            if id == crate::data::UNK_ID {
                continue;
            }
            if rows.insert(id, values).is_some() {
                warn!("embedding line {line}: duplicate token {token:?}, keeping the later vector");
            }
        }
    }
    let dim = dim.ok_or_else(|| Error::InvalidArgument("embedding file has no vectors".into()))?;
    let mut table = random_embeddings(vocab, dim, rng);
    for (id, values) in &rows {
        table.matrix.row_mut(*id).copy_from_slice(values);
    }
    table.covered = rows.len();
    Ok(table)
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &Vocabulary, rng: &mut Rng) -> Result<EmbeddingTable> {
    parse_embeddings(&fs::read_to_string(path)?, vocab, rng)
}
