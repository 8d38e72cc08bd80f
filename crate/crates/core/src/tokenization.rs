//! Nucleotide k-mer and amino-acid tokenizers.
//!
//! Nucleotide vocabularies hold every k-mer plus the four single bases, so a
//! sequence is chunked greedily into k-mers from the left and any remainder
//! shorter than `k` becomes single-base tokens. A chunk containing `N`
//! becomes UNK. There is no CLS/BOS token.

use std::collections::HashMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::modality::Modality;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const MASK_TOKEN: &str = "<mask>";
pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MAX_K: usize = 8;

pub const NUCLEOTIDES: [char; 4] = ['A', 'C', 'G', 'T'];
pub const AMINO_ACIDS: [char; 20] = [
    'A', 'C', 'D', 'E', 'F', 'G', 'H', 'I', 'K', 'L', 'M', 'N', 'P', 'Q', 'R', 'S', 'T', 'V', 'W', 'Y',
];
/// Letters accepted in protein input that map to UNK.
pub const NON_CANONICAL_AMINO_ACIDS: [char; 6] = ['B', 'J', 'O', 'U', 'X', 'Z'];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizeError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("illegal character {character:?} at position {position}")]
    IllegalCharacter { position: usize, character: char },
    #[error("k-mer size {0} exceeds the maximum of {MAX_K}")]
    KTooLarge(usize),
    #[error("invalid k-mer size {0}")]
    InvalidK(usize),
    #[error("sequence contains an unknown or special token at position {0}")]
    ContainsUnknown(usize),
    #[error("token id {0} is outside the vocabulary")]
    IdOutOfRange(u32),
    #[error("vocabulary is for {found:?} sequences, expected {expected:?}")]
    WrongVocabulary { expected: AlphabetKind, found: AlphabetKind },
    #[error("malformed vocabulary dump at line {line}: {reason}")]
    MalformedDump { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AlphabetKind {
    Nucleotide,
    AminoAcid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Alphabet {
    pub kind: AlphabetKind,
    pub symbols: Vec<char>,
}

impl Alphabet {
    pub fn new(kind: AlphabetKind) -> Self {
        let symbols = match kind {
            AlphabetKind::Nucleotide => NUCLEOTIDES.to_vec(),
            AlphabetKind::AminoAcid => AMINO_ACIDS.to_vec(),
        };
        Self { kind, symbols }
    }
}

/// Token-string ↔ id table. Ids are contiguous from 0: PAD, UNK, then the
/// entries in lexicographic order, then MASK if one was added.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    kind: AlphabetKind,
    k: usize,
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
    mask_id: Option<u32>,
}

impl Vocabulary {
    pub fn build(kind: AlphabetKind, k: usize) -> Result<Self, TokenizeError> {
        if k == 0 {
            return Err(TokenizeError::InvalidK(k));
        }
        if k > MAX_K {
            return Err(TokenizeError::KTooLarge(k));
        }
        let mut entries: Vec<String> = match kind {
            AlphabetKind::AminoAcid => {
                if k != 1 {
                    return Err(TokenizeError::InvalidK(k));
                }
                AMINO_ACIDS.iter().map(|c| c.to_string()).collect()
            }
            AlphabetKind::Nucleotide => {
                let mut all = all_kmers(k);
                if k > 1 {
                    all.extend(NUCLEOTIDES.iter().map(|c| c.to_string()));
                }
                all
            }
        };
        entries.sort();
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(entries);
        Ok(Self::from_tokens(kind, k, tokens, None))
    }

    fn from_tokens(kind: AlphabetKind, k: usize, tokens: Vec<String>, mask_id: Option<u32>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            kind,
            k,
            tokens,
            ids,
            mask_id,
        }
    }

    /// A copy with a trailing MASK token (used by masked-token warm-up).
    pub fn with_mask_token(&self) -> Self {
        if self.mask_id.is_some() {
            return self.clone();
        }
        let mut tokens = self.tokens.clone();
        let id = tokens.len() as u32;
        tokens.push(MASK_TOKEN.to_string());
        Self::from_tokens(self.kind, self.k, tokens, Some(id))
    }

    pub fn kind(&self) -> AlphabetKind {
        self.kind
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn unk_id(&self) -> u32 {
        UNK_ID
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.mask_id
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == PAD_ID || id == UNK_ID || Some(id) == self.mask_id
    }

    /// `<id>\t<token>` per line, specials first.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{i}\t{t}");
        }
        out
    }

    /// Parses a dump back into a vocabulary, inferring `k` from the longest entry.
    pub fn parse_dump(text: &str, kind: AlphabetKind) -> Result<Self, TokenizeError> {
        let bad = |line: usize, reason: &str| TokenizeError::MalformedDump {
            line,
            reason: reason.to_string(),
        };
        let mut tokens = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (n, line) in text.lines().enumerate() {
            let lineno = n + 1;
            if line.is_empty() {
                continue;
            }
            let (id, token) = line.split_once('\t').ok_or_else(|| bad(lineno, "missing tab"))?;
            let id: usize = id.parse().map_err(|_| bad(lineno, "id is not an integer"))?;
            if id != tokens.len() {
                return Err(bad(lineno, "ids are not contiguous from 0"));
            }
            if token.is_empty() || !seen.insert(token.to_string()) {
                return Err(bad(lineno, "empty or duplicate token"));
            }
            tokens.push(token.to_string());
        }
        if tokens.len() < 2 || tokens[0] != PAD_TOKEN || tokens[1] != UNK_TOKEN {
            return Err(bad(1, "PAD and UNK must be ids 0 and 1"));
        }
        let mask_id = tokens.iter().position(|t| t == MASK_TOKEN).map(|i| i as u32);
        let k = tokens
            .iter()
            .filter(|t| !t.starts_with('<'))
            .map(|t| t.chars().count())
            .max()
            .ok_or_else(|| bad(1, "no entries"))?;
        if k > MAX_K {
            return Err(TokenizeError::KTooLarge(k));
        }
        Ok(Self::from_tokens(kind, k, tokens, mask_id))
    }
}

fn all_kmers(k: usize) -> Vec<String> {
    let mut out = vec![String::new()];
    for _ in 0..k {
        out = out
            .iter()
            .flat_map(|p| NUCLEOTIDES.iter().map(move |c| format!("{p}{c}")))
            .collect();
    }
    out
}

/// Token ids for one sequence of one modality.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub modality: Modality,
    /// Character count of the sequence before tokenization.
    pub source_length: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Right-pads with PAD up to `len` (no-op if already that long).
    pub fn padded(&self, len: usize) -> Self {
        let mut ids = self.ids.clone();
        if ids.len() < len {
            ids.resize(len, PAD_ID);
        }
        Self { ids, ..self.clone() }
    }

    /// Keeps the first `max_tokens` tokens.
    pub fn truncated(&self, max_tokens: usize) -> Self {
        let ids: Vec<u32> = self.ids.iter().copied().take(max_tokens).collect();
        Self { ids, ..self.clone() }
    }

    /// `true` for real tokens, `false` for PAD.
    pub fn attention_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&id| id != PAD_ID).collect()
    }
}

/// Character spans `[start, end)` of each token produced by chunking a
/// sequence of `len` characters with k-mer size `k`.
pub fn chunk_spans(len: usize, k: usize) -> Vec<(usize, usize)> {
    let k = k.max(1);
    let full = len / k;
    let mut spans: Vec<(usize, usize)> = (0..full).map(|i| (i * k, (i + 1) * k)).collect();
    spans.extend((full * k..len).map(|i| (i, i + 1)));
    spans
}

/// Canonical form of a nucleotide string: uppercase, `U→T` when `is_rna`.
pub fn normalize_nucleotides(seq: &str, is_rna: bool) -> Result<String, TokenizeError> {
    if seq.is_empty() {
        return Err(TokenizeError::EmptySequence);
    }
    seq.chars()
        .enumerate()
        .map(|(position, c)| match c.to_ascii_uppercase() {
            b @ ('A' | 'C' | 'G' | 'T' | 'N') => Ok(b),
            'U' if is_rna => Ok('T'),
            _ => Err(TokenizeError::IllegalCharacter { position, character: c }),
        })
        .collect()
}

pub fn tokenize_nucleotide(seq: &str, vocab: &Vocabulary, is_rna: bool) -> Result<TokenSequence, TokenizeError> {
    if vocab.kind() != AlphabetKind::Nucleotide {
        return Err(TokenizeError::WrongVocabulary {
            expected: AlphabetKind::Nucleotide,
            found: vocab.kind(),
        });
    }
    let norm = normalize_nucleotides(seq, is_rna)?;
    let ids = chunk_spans(norm.len(), vocab.k())
        .into_iter()
        .map(|(s, e)| {
            let chunk = &norm[s..e];
            if chunk.contains('N') {
                UNK_ID
            } else {
                vocab.id(chunk).unwrap_or(UNK_ID)
            }
        })
        .collect();
    Ok(TokenSequence {
        ids,
        modality: if is_rna { Modality::Rna } else { Modality::Dna },
        source_length: norm.len(),
    })
}

pub fn tokenize_protein(seq: &str, vocab: &Vocabulary) -> Result<TokenSequence, TokenizeError> {
    if vocab.kind() != AlphabetKind::AminoAcid {
        return Err(TokenizeError::WrongVocabulary {
            expected: AlphabetKind::AminoAcid,
            found: vocab.kind(),
        });
    }
    if seq.is_empty() {
        return Err(TokenizeError::EmptySequence);
    }
    let mut ids = Vec::with_capacity(seq.len());
    for (position, c) in seq.chars().enumerate() {
        let up = c.to_ascii_uppercase();
        if !up.is_ascii_uppercase() {
            return Err(TokenizeError::IllegalCharacter { position, character: c });
        }
        let mut buf = [0u8; 4];
        ids.push(vocab.id(up.encode_utf8(&mut buf)).unwrap_or(UNK_ID));
    }
    Ok(TokenSequence {
        source_length: ids.len(),
        ids,
        modality: Modality::Protein,
    })
}

/// Inverse of tokenization. Trailing PAD is ignored; UNK or MASK is an error.
pub fn detokenize(tokens: &TokenSequence, vocab: &Vocabulary) -> Result<String, TokenizeError> {
    let mut out = String::new();
    for (pos, &id) in tokens.ids.iter().enumerate() {
        if id == PAD_ID {
            continue;
        }
        if vocab.is_special(id) {
            return Err(TokenizeError::ContainsUnknown(pos));
        }
        out.push_str(vocab.token(id).ok_or(TokenizeError::IdOutOfRange(id))?);
    }
    Ok(out)
}
