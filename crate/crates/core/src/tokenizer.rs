//! Byte-level BPE tokenizer with four reserved special ids.
//!
//! Ids `0..4` are the specials (`PAD`, `BOS`, `SEP`, `EOS`), ids `4..260` are
//! the 256 raw bytes, and every id from 260 upward is a learned merge. `SEP` is
//! the input/output separator of a packed training sequence and never comes out
//! of [`TokenizerModel::encode`].

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const SEP: u32 = 2;
pub const EOS: u32 = 3;

pub const NUM_SPECIALS: u32 = 4;
pub const BYTE_OFFSET: u32 = NUM_SPECIALS;
/// Smallest legal vocabulary: specials plus one id per byte value.
pub const BASE_VOCAB: usize = 256 + NUM_SPECIALS as usize;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocab_size {0} is below the byte-level minimum of {BASE_VOCAB}")]
    VocabTooSmall(usize),
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("corpus ran out of mergeable pairs after reaching {reached} of {requested} entries")]
    CorpusExhausted { reached: usize, requested: usize },
    #[error("token id {id} is outside the vocabulary of {vocab_size}")]
    InvalidId { id: u32, vocab_size: usize },
    #[error("tokenizer file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    merges: Vec<(u32, u32)>,
    /// Byte expansion per id; specials expand to nothing.
    pieces: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIALS
}

fn byte_id(b: u8) -> u32 {
    BYTE_OFFSET + u32::from(b)
}

fn base_pieces() -> Vec<Vec<u8>> {
    let mut pieces = vec![Vec::new(); NUM_SPECIALS as usize];
    pieces.extend((0..=255u8).map(|b| vec![b]));
    pieces
}

/// Learns merge rules over `corpus` until the vocabulary holds `vocab_size`
/// entries.
///
/// Pairs are counted inside each text only. Among pairs of equal frequency the
/// one with the lexicographically smallest `(left bytes, right bytes)` wins, and
/// a pair whose concatenation already names a token is never merged, so every
/// token has a distinct byte string.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<TokenizerModel, TokenizerError> {
    if vocab_size < BASE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    if corpus.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|s| s.as_ref().bytes().map(byte_id).collect())
        .collect();
    let mut pieces = base_pieces();
    let mut known: HashSet<Vec<u8>> = pieces.iter().skip(NUM_SPECIALS as usize).cloned().collect();
    let mut merges = Vec::with_capacity(vocab_size - BASE_VOCAB);

    while pieces.len() < vocab_size {
        let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
        for seq in &seqs {
            for w in seq.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|&((l, r), _)| {
                let mut joined = pieces[l as usize].clone();
                joined.extend_from_slice(&pieces[r as usize]);
                !known.contains(&joined)
            })
            .min_by(|&(pa, ca), &(pb, cb)| {
                cb.cmp(&ca)
                    .then_with(|| pieces[pa.0 as usize].cmp(&pieces[pb.0 as usize]))
                    .then_with(|| pieces[pa.1 as usize].cmp(&pieces[pb.1 as usize]))
            });
        let Some(((left, right), _)) = best else {
            return Err(TokenizerError::CorpusExhausted { reached: pieces.len(), requested: vocab_size });
        };
        let new_id = pieces.len() as u32;
        let mut joined = pieces[left as usize].clone();
        joined.extend_from_slice(&pieces[right as usize]);
        known.insert(joined.clone());
        pieces.push(joined);
        merges.push((left, right));
        for seq in &mut seqs {
            apply_merge(seq, left, right, new_id);
        }
    }
    Ok(TokenizerModel::from_parts(merges, pieces))
}

fn apply_merge(seq: &mut Vec<u32>, left: u32, right: u32, new_id: u32) {
    if seq.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(seq.len());
    let mut i = 0;
    while i < seq.len() {
        if i + 1 < seq.len() && seq[i] == left && seq[i + 1] == right {
            out.push(new_id);
            i += 2;
        } else {
            out.push(seq[i]);
            i += 1;
        }
    }
    *seq = out;
}

impl TokenizerModel {
    /// Byte-level model with no merges.
    pub fn byte_level() -> Self {
        Self::from_parts(Vec::new(), base_pieces())
    }

    fn from_parts(merges: Vec<(u32, u32)>, pieces: Vec<Vec<u8>>) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(rank, &pair)| (pair, rank as u32))
            .collect();
        Self { merges, pieces, ranks }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Raw bytes of a token id (empty for specials).
    pub fn piece(&self, id: u32) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Encodes text by repeatedly merging the lowest-ranked adjacent pair.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(byte_id).collect();
        if self.merges.is_empty() {
            return ids;
        }
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&r| (r, w[0], w[1])))
                .min();
            match best {
                Some((rank, left, right)) => {
                    apply_merge(&mut ids, left, right, BASE_VOCAB as u32 + rank);
                }
                None => return ids,
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in ids {
            let piece = self.pieces.get(id as usize).ok_or(TokenizerError::InvalidId {
                id,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Decodes ids to text, dropping specials. Byte sequences that are not
    /// valid UTF-8 (possible for sampled ids) are replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let bytes = self.decode_bytes(ids)?;
        Ok(match String::from_utf8(bytes) {
            Ok(s) => s,
            Err(e) => String::from_utf8_lossy(e.as_bytes()).into_owned(),
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("vocab_size={}\n", self.vocab_size());
        for &(l, r) in &self.merges {
            let _ = writeln!(out, "{}\t{}", escape(&self.pieces[l as usize]), escape(&self.pieces[r as usize]));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(TokenizerError::Parse { line: 1, msg: "empty file".into() })?;
        let vocab_size: usize = header
            .strip_prefix("vocab_size=")
            .and_then(|v| v.trim().parse().ok())
            .ok_or(TokenizerError::Parse { line: 1, msg: format!("expected `vocab_size=<n>`, got {header:?}") })?;
        if vocab_size < BASE_VOCAB {
            return Err(TokenizerError::VocabTooSmall(vocab_size));
        }
        let mut pieces = base_pieces();
        let mut by_bytes: HashMap<Vec<u8>, u32> = pieces
            .iter()
            .enumerate()
            .skip(NUM_SPECIALS as usize)
            .map(|(id, p)| (p.clone(), id as u32))
            .collect();
        let mut merges = Vec::new();
        for (idx, line) in lines.enumerate() {
            let lineno = idx + 2;
            if line.is_empty() {
                continue;
            }
            let parse_err = |msg: String| TokenizerError::Parse { line: lineno, msg };
            let (l, r) = line.split_once('\t').ok_or_else(|| parse_err("missing tab separator".into()))?;
            let (l, r) = (unescape(l).map_err(&parse_err)?, unescape(r).map_err(&parse_err)?);
            let left = *by_bytes.get(&l).ok_or_else(|| parse_err("left part not yet derived".into()))?;
            let right = *by_bytes.get(&r).ok_or_else(|| parse_err("right part not yet derived".into()))?;
            let mut joined = l;
            joined.extend_from_slice(&r);
            if by_bytes.contains_key(&joined) {
                return Err(parse_err("merge produces a duplicate token".into()));
            }
            by_bytes.insert(joined.clone(), pieces.len() as u32);
            pieces.push(joined);
            merges.push((left, right));
        }
        if pieces.len() != vocab_size {
            return Err(TokenizerError::Parse {
                line: 1,
                msg: format!("header declares {vocab_size} entries but merges yield {}", pieces.len()),
            });
        }
        Ok(Self::from_parts(merges, pieces))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn escape(bytes: &[u8]) -> String {
    let mut out = String::with_capacity(bytes.len());
    for &b in bytes {
        if b.is_ascii_graphic() && b != b'\\' {
            out.push(b as char);
        } else {
            let _ = write!(out, "\\x{b:02x}");
        }
    }
    out
}

fn unescape(s: &str) -> Result<Vec<u8>, String> {
    let raw = s.as_bytes();
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'\\' {
            let hex = raw
                .get(i + 1..i + 4)
                .filter(|h| h[0] == b'x')
                .and_then(|h| std::str::from_utf8(&h[1..]).ok())
                .and_then(|h| u8::from_str_radix(h, 16).ok())
                .ok_or_else(|| format!("bad escape in {s:?}"))?;
            out.push(hex);
            i += 4;
        } else {
            out.push(raw[i]);
            i += 1;
        }
    }
    if out.is_empty() {
        return Err("empty merge part".into());
    }
    Ok(out)
}
