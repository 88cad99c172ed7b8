//! Text conditioning states.
//!
//! A prompt arrives as two embeddings: a long-context sequence (up to 256
//! tokens) and a short-context sequence (up to 77 tokens). The long one goes
//! through an affine + GELU projection, the short one through an affine
//! projection, each is zero-padded to its full length, and the two are
//! concatenated along the sequence axis into a 333-row state.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fixture::{read_fixture, FixtureError};
use crate::par;
use crate::rng::{NormalStream, RngSeed, SplitMix64};
use crate::tensor::{self, normal_from_stream, Tensor, TensorError};

pub const LONG_LEN: usize = 256;
pub const SHORT_LEN: usize = 77;
pub const STATE_LEN: usize = LONG_LEN + SHORT_LEN;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("expected a {expected} embedding, got {got}")]
    WrongSource {
        expected: EmbeddingSource,
        got: EmbeddingSource,
    },
    #[error("{source_kind} embedding has {len} tokens, limit is {max}")]
    TooLong {
        source_kind: EmbeddingSource,
        len: usize,
        max: usize,
    },
    #[error("embedding has no tokens")]
    Empty,
    #[error("{what}: expected dimension {expected}, got {got}")]
    Dim {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("text state must have {STATE_LEN} rows, got shape {0:?}")]
    StateShape(Vec<usize>),
    #[error("a prompt set needs at least one positive prompt")]
    NoPositives,
    #[error("prompt {index}: {source}")]
    Prompt {
        index: usize,
        #[source]
        source: Box<TextError>,
    },
    #[error("unknown embedding source `{0}` (expected `long` or `short`)")]
    BadSource(String),
    #[error("embedding fixture lacks a `source:` header")]
    MissingSource,
    #[error(transparent)]
    Fixture(#[from] FixtureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, TextError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    #[serde(rename = "long")]
    LongCtx,
    #[serde(rename = "short")]
    ShortCtx,
}

impl EmbeddingSource {
    pub fn max_len(self) -> usize {
        match self {
            EmbeddingSource::LongCtx => LONG_LEN,
            EmbeddingSource::ShortCtx => SHORT_LEN,
        }
    }

    fn tag(self) -> u64 {
        match self {
            EmbeddingSource::LongCtx => 0x4c4f_4e47,
            EmbeddingSource::ShortCtx => 0x5348_5254,
        }
    }
}

impl fmt::Display for EmbeddingSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingSource::LongCtx => "long",
            EmbeddingSource::ShortCtx => "short",
        })
    }
}

impl std::str::FromStr for EmbeddingSource {
    type Err = TextError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "long" => Ok(EmbeddingSource::LongCtx),
            "short" => Ok(EmbeddingSource::ShortCtx),
            other => Err(TextError::BadSource(other.to_string())),
        }
    }
}

/// Encoder output for one prompt: `seq_len × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawEmbedding {
    source: EmbeddingSource,
    values: Tensor,
}

impl RawEmbedding {
    pub fn new(source: EmbeddingSource, values: Tensor) -> Result<Self> {
        let (len, _) = values.dims2("embedding")?;
        if len == 0 {
            return Err(TextError::Empty);
        }
        if len > source.max_len() {
            return Err(TextError::TooLong {
                source_kind: source,
                len,
                max: source.max_len(),
            });
        }
        Ok(RawEmbedding { source, values })
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn seq_len(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }
}

/// A 333 × d_model conditioning sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TextState(Tensor);

impl TextState {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [STATE_LEN, d] if *d > 0 => Ok(TextState(values)),
            other => Err(TextError::StateShape(other.to_vec())),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.0
    }

    pub fn seq_len(&self) -> usize {
        self.0.rows()
    }

    pub fn d_model(&self) -> usize {
        self.0.cols()
    }
}

impl AsRef<Tensor> for TextState {
    fn as_ref(&self) -> &Tensor {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptRecord {
    pub text: String,
    pub long: RawEmbedding,
    pub short: RawEmbedding,
}

/// N positive prompts (one per region, in region order) and one negative.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    positives: Vec<PromptRecord>,
    negative: PromptRecord,
}

impl PromptSet {
    pub fn new(positives: Vec<PromptRecord>, negative: PromptRecord) -> Result<Self> {
        if positives.is_empty() {
            return Err(TextError::NoPositives);
        }
        Ok(PromptSet {
            positives,
            negative,
        })
    }

    pub fn positives(&self) -> &[PromptRecord] {
        &self.positives
    }

    pub fn negative(&self) -> &PromptRecord {
        &self.negative
    }

    pub fn region_count(&self) -> usize {
        self.positives.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingDims {
    pub d_long: usize,
    pub d_short: usize,
}

impl Default for EmbeddingDims {
    fn default() -> Self {
        EmbeddingDims {
            d_long: 32,
            d_short: 24,
        }
    }
}

/// Projection of both embedding streams into model space.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl ProjectionMlp {
    pub fn new(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Result<Self> {
        let (_, d_model) = w1.dims2("projection w1")?;
        let (_, d2) = w2.dims2("projection w2")?;
        for (what, got) in [("w2 output", d2), ("b1", b1.len()), ("b2", b2.len())] {
            if got != d_model {
                return Err(TextError::Dim {
                    what,
                    expected: d_model,
                    got,
                });
            }
        }
        Ok(ProjectionMlp { w1, b1, w2, b2 })
    }

    /// Seeded weights with standard deviation `1/sqrt(fan_in)` and zero biases.
    pub fn seeded(dims: EmbeddingDims, d_model: usize, seed: RngSeed) -> Result<Self> {
        let mut stream = NormalStream::new(seed);
        let w1 = normal_from_stream(vec![dims.d_long, d_model], &mut stream, (dims.d_long as f32).sqrt().recip())?;
        let w2 = normal_from_stream(vec![dims.d_short, d_model], &mut stream, (dims.d_short as f32).sqrt().recip())?;
        Self::new(w1, Tensor::zeros(vec![d_model]), w2, Tensor::zeros(vec![d_model]))
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols()
    }

    pub fn d_long(&self) -> usize {
        self.w1.rows()
    }

    pub fn d_short(&self) -> usize {
        self.w2.rows()
    }
}

fn pad_rows(t: &Tensor, rows: usize) -> Tensor {
    let mut data = t.data().to_vec();
    data.resize(rows * t.cols(), 0.0);
    Tensor::new(vec![rows, t.cols()], data).expect("zero padding keeps values finite")
}

/// Affine + GELU on the long-context embedding, then zero padding to 256 rows.
pub fn project_long(emb: &RawEmbedding, mlp: &ProjectionMlp) -> Result<Tensor> {
    if emb.source != EmbeddingSource::LongCtx {
        return Err(TextError::WrongSource {
            expected: EmbeddingSource::LongCtx,
            got: emb.source,
        });
    }
    if emb.dim() != mlp.d_long() {
        return Err(TextError::Dim {
            what: "long embedding",
            expected: mlp.d_long(),
            got: emb.dim(),
        });
    }
    let h = tensor::gelu(&tensor::linear(&emb.values, &mlp.w1, &mlp.b1)?)?;
    Ok(pad_rows(&h, LONG_LEN))
}

/// Project a short-context sequence (≤ 77 × d_short) to d_model, pad to 77
/// rows and append it below the 256 long-context rows.
pub fn build_text_state(long_proj: &Tensor, short: &Tensor, mlp: &ProjectionMlp) -> Result<TextState> {
    let (long_rows, long_dim) = long_proj.dims2("long projection")?;
    if long_rows != LONG_LEN || long_dim != mlp.d_model() {
        return Err(TextError::StateShape(long_proj.shape().to_vec()));
    }
    let (short_rows, short_dim) = short.dims2("short embedding")?;
    if short_rows > SHORT_LEN {
        return Err(TextError::TooLong {
            source_kind: EmbeddingSource::ShortCtx,
            len: short_rows,
            max: SHORT_LEN,
        });
    }
    if short_dim != mlp.d_short() {
        return Err(TextError::Dim {
            what: "short embedding",
            expected: mlp.d_short(),
            got: short_dim,
        });
    }
    let short_proj = if short_rows == 0 {
        Tensor::zeros(vec![SHORT_LEN, mlp.d_model()])
    } else {
        pad_rows(&tensor::linear(short, &mlp.w2, &mlp.b2)?, SHORT_LEN)
    };
    let mut data = long_proj.data().to_vec();
    data.extend_from_slice(short_proj.data());
    TextState::new(Tensor::new(vec![STATE_LEN, mlp.d_model()], data)?)
}

pub fn encode_prompt(record: &PromptRecord, mlp: &ProjectionMlp) -> Result<TextState> {
    if record.short.source != EmbeddingSource::ShortCtx {
        return Err(TextError::WrongSource {
            expected: EmbeddingSource::ShortCtx,
            got: record.short.source,
        });
    }
    let long = project_long(&record.long, mlp)?;
    build_text_state(&long, record.short.values(), mlp)
}

/// States for all prompts of a set in one pass: positives in region order,
/// then the negative as the last entry.
pub fn batch_prompt_states(set: &PromptSet, mlp: &ProjectionMlp) -> Result<Vec<TextState>> {
    let records: Vec<&PromptRecord> = set.positives.iter().chain(std::iter::once(&set.negative)).collect();
    par::map_range(records.len(), |i| {
        encode_prompt(records[i], mlp).map_err(|e| TextError::Prompt {
            index: i,
            source: Box::new(e),
        })
    })
    .into_iter()
    .collect()
}

/// Read an embedding fixture: the tensor fixture format with a `source:`
/// header (`long` or `short`).
pub fn load_embedding_fixture(path: impl AsRef<Path>) -> Result<RawEmbedding> {
    let fx = read_fixture(path)?;
    let source: EmbeddingSource = fx.header("source").ok_or(TextError::MissingSource)?.parse()?;
    RawEmbedding::new(source, fx.tensor)
}

/// Whitespace token count, clamped to at least one token.
pub fn token_count(text: &str) -> usize {
    text.split_whitespace().count().max(1)
}

fn text_seed(text: &str, source: EmbeddingSource, seed: RngSeed) -> RngSeed {
    let digest = Sha256::digest(text.as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    let h = u64::from_le_bytes(bytes) ^ source.tag().rotate_left(32);
    // one SplitMix64 round so nearby seeds do not give correlated streams
    SplitMix64::new(RngSeed(h ^ seed.0)).fork()
}

/// Deterministic stand-in for a real encoder: the text is hashed into a seed
/// and the embedding is unit-variance noise with one row per whitespace token
/// (truncated to the source's maximum length).
pub fn synthesize(text: &str, source: EmbeddingSource, dim: usize, seed: RngSeed) -> Result<RawEmbedding> {
    let len = token_count(text).min(source.max_len());
    let mut stream = NormalStream::new(text_seed(text, source, seed));
    RawEmbedding::new(source, normal_from_stream(vec![len, dim], &mut stream, 1.0)?)
}

pub fn synthesize_record(text: &str, dims: EmbeddingDims, seed: RngSeed) -> Result<PromptRecord> {
    Ok(PromptRecord {
        text: text.to_string(),
        long: synthesize(text, EmbeddingSource::LongCtx, dims.d_long, seed)?,
        short: synthesize(text, EmbeddingSource::ShortCtx, dims.d_short, seed)?,
    })
}
