//! Finished embedding tables: text import/export, distances and neighbor
//! queries.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::corpus::{self, normalize_token, CoverageStats, RawSentence, TokenId, Vocabulary, NUM_SPECIALS};
use crate::model::RankingParams;
use crate::tensor::Matrix;

#[derive(Debug, Error)]
pub enum EmbeddingsError {
    #[error("token {token:?} (looked up as {normalized:?}) is not in the vocabulary")]
    OutOfVocabulary { token: String, normalized: String },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("bad header {0:?}, expected `<rows> <dim>`")]
    Header(String),
    #[error("expected {expected} values, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("non-numeric field {0:?}")]
    NonNumeric(String),
    #[error("non-finite value {0:?}")]
    NonFinite(String),
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("reserved token {expected} must be at this line, found {found:?}")]
    MissingReserved { expected: &'static str, found: String },
}

pub type Result<T> = std::result::Result<T, EmbeddingsError>;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    vocab: Vocabulary,
    matrix: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeighborList {
    pub query: String,
    pub neighbors: Vec<(String, f64)>,
}

impl EmbeddingStore {
    pub fn new(vocab: Vocabulary, matrix: Matrix) -> Result<Self> {
        if matrix.rows() != vocab.len() {
            return Err(EmbeddingsError::InvalidArgument(format!(
                "{} matrix rows for {} vocabulary entries",
                matrix.rows(),
                vocab.len()
            )));
        }
        if !matrix.is_finite() {
            return Err(EmbeddingsError::InvalidArgument("non-finite embedding value".into()));
        }
        Ok(EmbeddingStore { vocab, matrix })
    }

    pub fn from_params(vocab: Vocabulary, params: &RankingParams) -> Result<Self> {
        Self::new(vocab, params.embeddings.clone())
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.matrix
    }

    pub fn into_parts(self) -> (Vocabulary, Matrix) {
        (self.vocab, self.matrix)
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    /// Id of a token after normalization.
    pub fn lookup(&self, token: &str) -> Result<TokenId> {
        let normalized = normalize_token(token).map_err(|e| EmbeddingsError::InvalidArgument(e.to_string()))?;
        self.vocab
            .id(&normalized)
            .ok_or_else(|| EmbeddingsError::OutOfVocabulary {
                token: token.to_string(),
                normalized,
            })
    }

    pub fn vector(&self, token: &str) -> Result<&[f64]> {
        Ok(self.matrix.row(self.lookup(token)? as usize))
    }

    fn row_distance(&self, a: usize, b: usize) -> f64 {
        euclidean(self.matrix.row(a), self.matrix.row(b))
    }

    pub fn distance(&self, t1: &str, t2: &str) -> Result<f64> {
        let a = self.lookup(t1)?;
        let b = self.lookup(t2)?;
        Ok(self.row_distance(a as usize, b as usize))
    }

    /// The `k` closest regular tokens to `query`, nearest first. Equal
    /// distances are ordered by id.
    pub fn nearest_neighbors(&self, query: &str, k: usize) -> Result<NeighborList> {
        if k == 0 {
            return Err(EmbeddingsError::InvalidArgument("k must be ≥ 1".into()));
        }
        let q = self.lookup(query)? as usize;
        let mut scored: Vec<(f64, usize)> = (NUM_SPECIALS..self.vocab.len())
            .filter(|&id| id != q)
            .map(|id| (self.row_distance(q, id), id))
            .collect();
        let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, by_distance);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance);
        Ok(NeighborList {
            query: self.vocab.token(q as TokenId).unwrap_or_default().to_string(),
            neighbors: scored
                .into_iter()
                .map(|(d, id)| (self.vocab.token(id as TokenId).unwrap_or_default().to_string(), d))
                .collect(),
        })
    }

    pub fn coverage<'a, I>(&self, sentences: I) -> CoverageStats
    where
        I: IntoIterator<Item = &'a RawSentence>,
    {
        corpus::coverage_stats(sentences, &self.vocab)
    }

    /// `<rows> <dim>` header, then one `token v1 … vM` line per id.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.matrix.rows(), self.matrix.cols())?;
        for (id, (token, _)) in self.vocab.entries().iter().enumerate() {
            w.write_all(token.as_bytes())?;
            for v in self.matrix.row(id) {
                // `Display` for f64 is the shortest string that parses back
                // to the same value.
                write!(w, " {v}")?;
            }
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let err = |line: usize, kind| EmbeddingsError::Parse { line, kind };
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| err(1, ParseErrorKind::Header(String::new())))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(1, ParseErrorKind::Header(header.clone())))?;
        let [rows, dim] = dims[..] else {
            return Err(err(1, ParseErrorKind::Header(header)));
        };

        let mut entries = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows.saturating_mul(dim).min(1 << 24));
        let mut seen = HashSet::with_capacity(rows);
        for (i, line) in lines.enumerate() {
            let line = line?;
            let lineno = i + 2;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(' ');
            let token = fields.next().unwrap_or_default().to_string();
            let row = entries.len();
            if row < NUM_SPECIALS && token != corpus::SPECIALS[row] {
                return Err(err(
                    lineno,
                    ParseErrorKind::MissingReserved {
                        expected: corpus::SPECIALS[row],
                        found: token,
                    },
                ));
            }
            if !seen.insert(token.clone()) {
                return Err(err(lineno, ParseErrorKind::DuplicateToken(token)));
            }
            let values: Vec<&str> = fields.collect();
            if values.len() != dim {
                return Err(err(
                    lineno,
                    ParseErrorKind::DimensionMismatch {
                        expected: dim,
                        found: values.len(),
                    },
                ));
            }
            for f in values {
                let v: f64 = f.parse().map_err(|_| err(lineno, ParseErrorKind::NonNumeric(f.into())))?;
                if !v.is_finite() {
                    return Err(err(lineno, ParseErrorKind::NonFinite(f.into())));
                }
                data.push(v);
            }
            entries.push((token, 0));
        }
        if entries.len() != rows {
            return Err(err(
                1,
                ParseErrorKind::RowCount {
                    expected: rows,
                    found: entries.len(),
                },
            ));
        }
        if rows < NUM_SPECIALS {
            return Err(err(
                1,
                ParseErrorKind::RowCount {
                    expected: NUM_SPECIALS,
                    found: rows,
                },
            ));
        }
        let vocab = Vocabulary::from_entries(entries).map_err(|e| EmbeddingsError::InvalidArgument(e.to_string()))?;
        Self::new(vocab, Matrix::from_vec(rows, dim, data))
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl NeighborList {
    /// Rank, token and distance columns.
    pub fn to_table(&self) -> String {
        let width = self
            .neighbors
            .iter()
            .map(|(t, _)| t.chars().count())
            .chain(std::iter::once(self.query.chars().count()))
            .max()
            .unwrap_or(0);
        let mut out = format!("{:>4}  {:<width$}  distance\n", "rank", self.query);
        for (i, (t, d)) in self.neighbors.iter().enumerate() {
            out.push_str(&format!("{:>4}  {:<width$}  {d:.6}\n", i + 1, t));
        }
        out
    }

    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.neighbors.iter().map(|(t, _)| t.as_str())
    }
}
