//! Byte-level corpus pipeline: tokenization, fixed-length chunking, prompt
//! pools and re-assembly of generated text into the next training set.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::matrix_text;
use crate::model::{TokenBatch, TokenId};

/// Padding and end-of-sequence id; bytes occupy `0..=255`.
pub const PAD_ID: TokenId = 256;
/// Vocabulary of the byte tokenizer including [`PAD_ID`].
pub const BYTE_VOCAB: usize = 257;
/// Placed between documents when several are joined into one stream.
pub const DOCUMENT_SEPARATOR: &[u8] = b"\n\n";

/// Where a token stream or dataset came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Real,
    /// Generated by the model trained in the given generation.
    Synthetic(usize),
}

pub fn tokenize(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|&b| TokenId::from(b)).collect()
}

/// Inverse of [`tokenize`]; padding and any id outside the byte range are dropped.
pub fn detokenize(ids: &[TokenId]) -> Vec<u8> {
    ids.iter().filter_map(|&t| u8::try_from(t).ok()).collect()
}

/// [`detokenize`] rendered as text, replacing invalid UTF-8.
pub fn decode_lossy(ids: &[TokenId]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenStream {
    ids: Vec<TokenId>,
    source: Source,
}

impl TokenStream {
    pub fn new(ids: Vec<TokenId>, source: Source) -> Self {
        TokenStream { ids, source }
    }

    /// Documents joined with [`DOCUMENT_SEPARATOR`].
    pub fn from_documents<D: AsRef<[u8]>>(docs: &[D]) -> Self {
        let bytes = docs.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(DOCUMENT_SEPARATOR);
        TokenStream::new(tokenize(&bytes), Source::Real)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn source(&self) -> Source {
        self.source
    }
}

/// Reads a text file as one real document.
pub fn load_corpus(path: &Path) -> Result<TokenStream> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::data(format!("corpus {} is empty", path.display())));
    }
    Ok(TokenStream::new(tokenize(&bytes), Source::Real))
}

/// Rows of exactly `seq_len` tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkedDataset {
    flat: Vec<TokenId>,
    seq_len: usize,
    source: Source,
}

impl ChunkedDataset {
    pub fn from_flat(flat: Vec<TokenId>, seq_len: usize, source: Source) -> Result<Self> {
        if seq_len == 0 || flat.is_empty() || !flat.len().is_multiple_of(seq_len) {
            return Err(Error::data(format!(
                "{} tokens do not form non-empty rows of {seq_len}",
                flat.len()
            )));
        }
        Ok(ChunkedDataset { flat, seq_len, source })
    }

    pub fn len(&self) -> usize {
        self.flat.len() / self.seq_len
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn source(&self) -> Source {
        self.source
    }

    pub fn flat(&self) -> &[TokenId] {
        &self.flat
    }

    pub fn row(&self, i: usize) -> &[TokenId] {
        &self.flat[i * self.seq_len..(i + 1) * self.seq_len]
    }

    pub fn rows(&self) -> Vec<Vec<TokenId>> {
        self.flat.chunks(self.seq_len).map(<[_]>::to_vec).collect()
    }

    /// Attention mask of row `i`: 1 for tokens other than [`PAD_ID`].
    pub fn row_mask(&self, i: usize) -> Vec<u8> {
        self.row(i).iter().map(|&t| u8::from(t != PAD_ID)).collect()
    }

    /// Batch of the given rows, masking padding.
    pub fn batch(&self, indices: &[usize]) -> Result<TokenBatch> {
        let rows: Vec<Vec<TokenId>> = indices.iter().map(|&i| self.row(i).to_vec()).collect();
        TokenBatch::from_rows(&rows, Some(PAD_ID))
    }

    /// Seeded permutation of row indices; one fixed order per `(seed, epoch)`.
    pub fn shuffled_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_TAG, epoch])));
        order
    }

    /// One row per line, ids separated by commas.
    pub fn to_token_csv(&self) -> String {
        let mut s = String::new();
        for row in self.flat.chunks(self.seq_len) {
            for (j, t) in row.iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                write!(s, "{t}").expect("writing to a String");
            }
            s.push('\n');
        }
        s
    }

    /// The ids as a real-valued matrix in the hidden-state matrix format.
    pub fn to_matrix_text(&self) -> String {
        let data: Vec<f64> = self.flat.iter().map(|&t| f64::from(t)).collect();
        matrix_text(self.len(), self.seq_len, &data)
    }
}

const SHUFFLE_TAG: u64 = 0x5348_5546;

/// Mixes `seed` with `parts` into an independent 64-bit seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

/// Non-overlapping rows of `seq_len` tokens from the start of `stream`,
/// dropping the tail remainder and keeping at most `subset_cap` rows.
pub fn chunk(stream: &TokenStream, seq_len: usize, subset_cap: usize) -> Result<ChunkedDataset> {
    if seq_len == 0 || subset_cap == 0 {
        return Err(Error::config("seq_len and subset_cap must be positive"));
    }
    let rows = (stream.len() / seq_len).min(subset_cap);
    if rows == 0 {
        return Err(Error::data(format!(
            "stream of {} tokens is shorter than one row of {seq_len}",
            stream.len()
        )));
    }
    ChunkedDataset::from_flat(stream.ids[..rows * seq_len].to_vec(), seq_len, stream.source)
}

/// Rows of the first `min(target_tokens, available)` tokens of `stream`,
/// rounded down to whole rows.
pub fn build_prompt_pool(stream: &TokenStream, seq_len: usize, target_tokens: usize) -> Result<ChunkedDataset> {
    let take = target_tokens.min(stream.len());
    chunk(
        &TokenStream::new(stream.ids[..take].to_vec(), stream.source),
        seq_len,
        usize::MAX,
    )
}

/// `count` prompts: the first `prompt_len` tokens of pool rows drawn
/// uniformly with replacement.
pub fn sample_prompts<R: Rng + ?Sized>(
    pool: &ChunkedDataset,
    count: usize,
    prompt_len: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    if prompt_len == 0 || prompt_len > pool.seq_len {
        return Err(Error::config(format!(
            "prompt_len {prompt_len} must be in 1..={}",
            pool.seq_len
        )));
    }
    Ok((0..count)
        .map(|_| pool.row(rng.random_range(0..pool.len()))[..prompt_len].to_vec())
        .collect())
}

/// Number of sequences generated per generation: the largest multiple of 8
/// not above `subset_cap`.
pub fn synthetic_row_count(subset_cap: usize) -> usize {
    subset_cap / 8 * 8
}

/// Flattens generated rows and re-chunks them into the next training set.
pub fn assemble_synthetic(
    rows: &[Vec<TokenId>],
    seq_len: usize,
    subset_cap: usize,
    generation: usize,
) -> Result<ChunkedDataset> {
    let stream = TokenStream::new(rows.concat(), Source::Synthetic(generation));
    chunk(&stream, seq_len, subset_cap)
}
