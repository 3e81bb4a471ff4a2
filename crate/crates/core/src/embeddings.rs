//! Vocabulary management and the shared word-embedding matrix `E`.
//!
//! One `E` (d_emb x V, column per token) serves the decoder's word inputs,
//! the soft-embedding generation `s_t = E p_t`, and the sentence encoder's
//! ground-truth caption inputs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::CaptionRecord;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Learned stand-in for frames where the detector found nothing.
pub const NOOBJ: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<noobj>"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from a full token list (reserved tokens first). Also used to
    /// rebuild the lookup index after deserialization.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*reserved) {
                return Err(Error::Vocab(format!(
                    "token list must start with the reserved tokens, missing `{reserved}`"
                )));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id for a token, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn ids(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// BOS ids EOS, the decoder's teacher-forcing frame.
    pub fn wrap(&self, tokens: &[String]) -> Vec<usize> {
        let mut out = Vec::with_capacity(tokens.len() + 2);
        out.push(BOS);
        out.extend(self.ids(tokens));
        out.push(EOS);
        out
    }
}

/// Tokens with corpus frequency >= `min_count` join the vocabulary; rarer
/// ones fall back to UNK at lookup time. Reserved tokens are always present.
/// Token order is deterministic: reserved first, then sorted.
pub fn build_vocabulary(captions: &[CaptionRecord], min_count: usize) -> Result<Vocabulary> {
    if captions.is_empty() {
        return Err(Error::Input("build_vocabulary: no captions".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for record in captions {
        for token in &record.tokens {
            *counts.entry(token).or_default() += 1;
        }
    }
    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend(
        counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(t))
            .map(|(t, _)| t.to_string()),
    );
    Vocabulary::from_tokens(tokens)
}

/// The shared embedding matrix E (d_emb x V), column i = embedding of
/// token i.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub e: Array2<f64>,
    pub trainable: bool,
}

impl EmbeddingMatrix {
    pub fn d_emb(&self) -> usize {
        self.e.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.e.ncols()
    }

    pub fn column(&self, id: usize) -> Array1<f64> {
        self.e.column(id).to_owned()
    }

    /// Uniform init in [-0.1, 0.1].
    pub fn random(d_emb: usize, vocab_size: usize, rng: &mut ChaCha20Rng) -> Self {
        let e = Array2::from_shape_fn((d_emb, vocab_size), |_| rng.random_range(-0.1..0.1));
        EmbeddingMatrix { e, trainable: true }
    }
}

/// Embedding column for a token; unknown tokens use the UNK column and a
/// missing dominant object (`None`) uses the NOOBJ column.
pub fn embed_token(
    vocab: &Vocabulary,
    embeddings: &EmbeddingMatrix,
    token: Option<&str>,
) -> Array1<f64> {
    let id = match token {
        Some(t) => vocab.id(t),
        None => NOOBJ,
    };
    embeddings.column(id)
}

/// Initialize E from pretrained vectors where available; remaining columns
/// are uniform in [-0.1, 0.1] from `rng`. The matrix stays trainable.
pub fn import_pretrained(
    vocab: &Vocabulary,
    vectors: &HashMap<String, Vec<f64>>,
    d_emb: usize,
    rng: &mut ChaCha20Rng,
) -> Result<EmbeddingMatrix> {
    for (token, v) in vectors {
        if v.len() != d_emb {
            return Err(Error::Input(format!(
                "pretrained vector for `{token}` has length {}, expected {d_emb}",
                v.len()
            )));
        }
    }
    let mut matrix = EmbeddingMatrix::random(d_emb, vocab.len(), rng);
    for (id, token) in vocab.tokens().iter().enumerate() {
        if let Some(v) = vectors.get(token) {
            for (row, &x) in v.iter().enumerate() {
                matrix.e[(row, id)] = x;
            }
        }
    }
    Ok(matrix)
}

/// Text format: one line per token, `token v1 v2 ... vD`, space-separated
/// decimal reals.
pub fn read_word_vectors(path: &Path, d_emb: usize) -> Result<HashMap<String, Vec<f64>>> {
    let reader = BufReader::new(fs::File::open(path).map_err(|e| Error::io(path, e))?);
    let mut out = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .ok_or_else(|| Error::format(path, format!("token: missing at line {}", lineno + 1)))?
            .to_string();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("vector: bad number `{p}` at line {}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != d_emb {
            return Err(Error::format(
                path,
                format!(
                    "vector: {} values at line {}, expected {d_emb}",
                    values.len(),
                    lineno + 1
                ),
            ));
        }
        out.insert(token, values);
    }
    Ok(out)
}
