//! Finite tables of next-token predictors: embeddings f(x) for a sample of
//! sequences, unembeddings g(y) for every token, and the softmax conditional
//! p(y | x) ∝ exp(f(x)ᵀ g(y)).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("shape error at `{path}`: {message}")]
    Shape { path: String, message: String },
    #[error("non-finite value at `{path}`")]
    NonFinite { path: String },
    #[error("invalid alphabet: {0}")]
    Alphabet(String),
    #[error("invalid sequence sample: {0}")]
    Sample(String),
    #[error("{what} index {index} out of range (size {len})")]
    Index { what: &'static str, index: usize, len: usize },
    #[error("invalid corpus entry {entry}: {reason}")]
    CorpusEntry { entry: usize, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ordered, duplicate-free token list with at least two entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alphabet {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Alphabet {
    pub fn new(tokens: Vec<String>) -> Result<Self, ModelError> {
        if tokens.len() < 2 {
            return Err(ModelError::Alphabet(format!("need at least 2 tokens, got {}", tokens.len())));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(ModelError::Alphabet(format!("token {i} is the empty string")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(ModelError::Alphabet(format!("duplicate token {t:?}")));
            }
        }
        Ok(Alphabet { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whether `s` splits into a concatenation of tokens (the empty string does).
    pub fn segments(&self, s: &str) -> bool {
        let mut reachable = vec![false; s.len() + 1];
        reachable[0] = true;
        for start in 0..s.len() {
            if !reachable[start] || !s.is_char_boundary(start) {
                continue;
            }
            for t in &self.tokens {
                if s[start..].starts_with(t.as_str()) {
                    reachable[start + t.len()] = true;
                }
            }
        }
        reachable[s.len()]
    }
}

/// Ordered, duplicate-free list of sequence identifiers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceSample {
    sequences: Vec<String>,
    index: HashMap<String, usize>,
}

impl SequenceSample {
    pub fn new(sequences: Vec<String>) -> Result<Self, ModelError> {
        if sequences.is_empty() {
            return Err(ModelError::Sample("at least one sequence is required".into()));
        }
        let mut index = HashMap::with_capacity(sequences.len());
        for (i, s) in sequences.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(ModelError::Sample(format!("duplicate sequence {s:?}")));
            }
        }
        Ok(SequenceSample { sequences, index })
    }

    pub fn sequences(&self) -> &[String] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn index_of(&self, sequence: &str) -> Option<usize> {
        self.index.get(sequence).copied()
    }
}

/// Unembeddings with the pivot row subtracted: row j = g(y_j) − g(y_pivot).
#[derive(Debug, Clone, PartialEq)]
pub struct PivotedUnembeddings {
    rows: DMatrix<f64>,
}

impl PivotedUnembeddings {
    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn into_rows(self) -> DMatrix<f64> {
        self.rows
    }
}

/// One weighted next-token observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusEntry {
    pub sequence: usize,
    pub next_token: usize,
    pub weight: f64,
}

/// Embeddings (S×d) and unembeddings (K×d) over a fixed alphabet and sequence sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorTable {
    alphabet: Alphabet,
    sample: SequenceSample,
    embeddings: DMatrix<f64>,
    unembeddings: DMatrix<f64>,
    pivot: usize,
}

fn check_finite(m: &DMatrix<f64>, field: &str) -> Result<(), ModelError> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(ModelError::NonFinite { path: format!("{field}[{i}][{j}]") });
            }
        }
    }
    Ok(())
}

impl PredictorTable {
    pub fn new(
        alphabet: Alphabet,
        sample: SequenceSample,
        embeddings: DMatrix<f64>,
        unembeddings: DMatrix<f64>,
        pivot: usize,
    ) -> Result<Self, ModelError> {
        let d = embeddings.ncols();
        if d == 0 {
            return Err(ModelError::Shape { path: "dim".into(), message: "dimension must be positive".into() });
        }
        if embeddings.nrows() != sample.len() {
            return Err(ModelError::Shape {
                path: "embeddings".into(),
                message: format!("{} rows for {} sequences", embeddings.nrows(), sample.len()),
            });
        }
        if unembeddings.shape() != (alphabet.len(), d) {
            return Err(ModelError::Shape {
                path: "unembeddings".into(),
                message: format!("shape {:?}, expected {:?}", unembeddings.shape(), (alphabet.len(), d)),
            });
        }
        if pivot >= alphabet.len() {
            return Err(ModelError::Index { what: "pivot", index: pivot, len: alphabet.len() });
        }
        check_finite(&embeddings, "embeddings")?;
        check_finite(&unembeddings, "unembeddings")?;
        if let Some(bad) = sample.sequences().iter().find(|s| !alphabet.segments(s)) {
            return Err(ModelError::Sample(format!("{bad:?} is not a concatenation of alphabet tokens")));
        }
        Ok(PredictorTable { alphabet, sample, embeddings, unembeddings, pivot })
    }

    /// Convenience constructor from plain token and sequence lists.
    pub fn from_parts(
        tokens: Vec<String>,
        sequences: Vec<String>,
        embeddings: DMatrix<f64>,
        unembeddings: DMatrix<f64>,
        pivot: usize,
    ) -> Result<Self, ModelError> {
        Self::new(Alphabet::new(tokens)?, SequenceSample::new(sequences)?, embeddings, unembeddings, pivot)
    }

    /// Logits head `W h + b` rewritten as f = (1, h), g_j = (b_j, W_j).
    pub fn from_logits_head(
        hidden: &DMatrix<f64>,
        weights: &DMatrix<f64>,
        bias: &DVector<f64>,
        alphabet: Alphabet,
        sample: SequenceSample,
        pivot: usize,
    ) -> Result<Self, ModelError> {
        let h = hidden.ncols();
        if weights.ncols() != h {
            return Err(ModelError::Shape {
                path: "head_weights".into(),
                message: format!("{} columns, hidden width is {h}", weights.ncols()),
            });
        }
        if bias.len() != weights.nrows() {
            return Err(ModelError::Shape {
                path: "head_bias".into(),
                message: format!("length {}, head has {} rows", bias.len(), weights.nrows()),
            });
        }
        let mut embeddings = DMatrix::from_element(hidden.nrows(), h + 1, 1.0);
        embeddings.columns_mut(1, h).copy_from(hidden);
        let mut unembeddings = DMatrix::zeros(weights.nrows(), h + 1);
        unembeddings.set_column(0, bias);
        unembeddings.columns_mut(1, h).copy_from(weights);
        Self::new(alphabet, sample, embeddings, unembeddings, pivot)
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn alphabet(&self) -> &Alphabet {
        &self.alphabet
    }

    pub fn sample(&self) -> &SequenceSample {
        &self.sample
    }

    pub fn tokens(&self) -> &[String] {
        self.alphabet.tokens()
    }

    pub fn sequences(&self) -> &[String] {
        self.sample.sequences()
    }

    pub fn num_tokens(&self) -> usize {
        self.alphabet.len()
    }

    pub fn num_sequences(&self) -> usize {
        self.sample.len()
    }

    pub fn embeddings(&self) -> &DMatrix<f64> {
        &self.embeddings
    }

    pub fn unembeddings(&self) -> &DMatrix<f64> {
        &self.unembeddings
    }

    pub fn pivot(&self) -> usize {
        self.pivot
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.alphabet.index_of(token)
    }

    pub fn sequence_index(&self, sequence: &str) -> Option<usize> {
        self.sample.index_of(sequence)
    }

    /// f(x_i) as a column vector.
    pub fn embedding(&self, i: usize) -> DVector<f64> {
        self.embeddings.row(i).transpose()
    }

    /// g(y_j) as a column vector.
    pub fn unembedding(&self, j: usize) -> DVector<f64> {
        self.unembeddings.row(j).transpose()
    }

    pub fn pivot_differences(&self) -> PivotedUnembeddings {
        let mut rows = self.unembeddings.clone();
        let pivot_row = self.unembeddings.row(self.pivot).into_owned();
        for mut r in rows.row_iter_mut() {
            r -= &pivot_row;
        }
        PivotedUnembeddings { rows }
    }

    /// S×K matrix of f(x)ᵀ g0(y).
    pub fn pivoted_logits(&self) -> DMatrix<f64> {
        &self.embeddings * self.pivot_differences().rows.transpose()
    }

    fn check_sequence(&self, i: usize) -> Result<(), ModelError> {
        if i >= self.num_sequences() {
            return Err(ModelError::Index { what: "sequence", index: i, len: self.num_sequences() });
        }
        Ok(())
    }

    /// Logits f(x_i)ᵀ g(y_j) over all tokens.
    pub fn logits(&self, i: usize) -> Result<DVector<f64>, ModelError> {
        self.check_sequence(i)?;
        Ok(&self.unembeddings * self.embedding(i))
    }

    pub fn conditional_distribution(&self, i: usize) -> Result<DVector<f64>, ModelError> {
        Ok(softmax(&self.logits(i)?))
    }

    /// log p(y_j | x_i) over all tokens.
    pub fn log_conditional(&self, i: usize) -> Result<DVector<f64>, ModelError> {
        Ok(log_softmax(&self.logits(i)?))
    }

    /// Σ w · log p(next | prefix) over the corpus.
    pub fn log_likelihood(&self, corpus: &[CorpusEntry]) -> Result<f64, ModelError> {
        let mut total = 0.0;
        for (n, entry) in corpus.iter().enumerate() {
            let bad = |reason: String| ModelError::CorpusEntry { entry: n, reason };
            if entry.sequence >= self.num_sequences() {
                return Err(bad(format!("sequence index {} out of range", entry.sequence)));
            }
            if entry.next_token >= self.num_tokens() {
                return Err(bad(format!("token index {} out of range", entry.next_token)));
            }
            if !(entry.weight.is_finite() && entry.weight >= 0.0) {
                return Err(bad(format!("weight {} is not a nonnegative finite number", entry.weight)));
            }
            if entry.weight > 0.0 {
                total += entry.weight * self.log_conditional(entry.sequence)?[entry.next_token];
            }
        }
        Ok(total)
    }

    /// Serializes to the model JSON format.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            dim: usize,
            tokens: &'a [String],
            pivot: usize,
            sequences: &'a [String],
            embeddings: Vec<Vec<f64>>,
            unembeddings: Vec<Vec<f64>>,
        }
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        let out = Out {
            dim: self.dim(),
            tokens: self.tokens(),
            pivot: self.pivot,
            sequences: self.sequences(),
            embeddings: rows(&self.embeddings),
            unembeddings: rows(&self.unembeddings),
        };
        let mut s = serde_json::to_string(&out).expect("finite table always serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let root: Value = serde_json::from_str(text)?;
        let obj = root.as_object().ok_or_else(|| schema("", "expected a JSON object"))?;
        let field = |name: &str| obj.get(name).ok_or_else(|| schema(name, "missing field"));
        let dim = as_index(field("dim")?, "dim")?;
        let pivot = as_index(field("pivot")?, "pivot")?;
        let tokens = as_strings(field("tokens")?, "tokens")?;
        let sequences = as_strings(field("sequences")?, "sequences")?;
        let embeddings = as_matrix(field("embeddings")?, "embeddings", dim)?;
        let unembeddings = as_matrix(field("unembeddings")?, "unembeddings", dim)?;
        if dim == 0 {
            return Err(schema("dim", "must be positive"));
        }
        Self::from_parts(tokens, sequences, embeddings, unembeddings, pivot)
    }
}

fn schema(path: &str, message: &str) -> ModelError {
    ModelError::Schema { path: path.to_string(), message: message.to_string() }
}

fn as_index(v: &Value, path: &str) -> Result<usize, ModelError> {
    v.as_u64()
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| schema(path, "expected a nonnegative integer"))
}

fn as_strings(v: &Value, path: &str) -> Result<Vec<String>, ModelError> {
    let arr = v.as_array().ok_or_else(|| schema(path, "expected an array of strings"))?;
    arr.iter()
        .enumerate()
        .map(|(i, s)| s.as_str().map(str::to_string).ok_or_else(|| schema(&format!("{path}[{i}]"), "expected a string")))
        .collect()
}

fn as_matrix(v: &Value, path: &str, dim: usize) -> Result<DMatrix<f64>, ModelError> {
    let rows = v.as_array().ok_or_else(|| schema(path, "expected an array of rows"))?;
    let mut out = DMatrix::zeros(rows.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        let row_path = format!("{path}[{i}]");
        let cells = row.as_array().ok_or_else(|| schema(&row_path, "expected an array of numbers"))?;
        if cells.len() != dim {
            return Err(ModelError::Shape {
                path: row_path,
                message: format!("row length {} differs from dim {dim}", cells.len()),
            });
        }
        for (j, c) in cells.iter().enumerate() {
            out[(i, j)] = c.as_f64().ok_or_else(|| schema(&format!("{row_path}[{j}]"), "expected a number"))?;
        }
    }
    Ok(out)
}

pub fn save_model(table: &PredictorTable, path: impl AsRef<Path>) -> Result<(), ModelError> {
    let path = path.as_ref();
    fs::write(path, table.to_json()).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_model(path: impl AsRef<Path>) -> Result<PredictorTable, ModelError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.display().to_string(), source })?;
    PredictorTable::from_json(&text)
}

/// Numerically stable softmax.
pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let exp = logits.map(|l| (l - max).exp());
    let total = exp.sum();
    exp / total
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let log_total = logits.map(|l| (l - max).exp()).sum().ln();
    logits.map(|l| l - max - log_total)
}
