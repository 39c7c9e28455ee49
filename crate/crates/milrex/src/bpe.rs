//! Byte pair encoding: vocabulary learning, encoding, decoding.
//!
//! The base alphabet is byte-level: every one of the 256 byte values is a
//! base token (rendered through a bijective byte-to-char map so tokens
//! are always printable, single-line strings), plus one word-end marker
//! token. Words are delimited by the space byte only, each word ends with
//! the marker, and merges never cross it, so `decode(encode(text))`
//! reproduces any input exactly and no unknown token is ever needed.
//!
//! Task-specific special tokens (`<start>`, `<delim>`, `<clf>`, `<pad>`)
//! are appended after the learned tokens; they are never produced by a
//! merge and never split.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Word-end marker symbol. Outside the byte-to-char image, so it cannot
/// collide with any token built from corpus bytes.
pub const WORD_END: char = '\u{2581}';

pub const SPECIAL_NAMES: [&str; 4] = ["<start>", "<delim>", "<clf>", "<pad>"];

const VOCAB_MAGIC: &str = "milrex-bpe-v1";

/// Ids of the four task-specific tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub start: usize,
    pub delim: usize,
    pub clf: usize,
    pub pad: usize,
}

/// Bijective byte -> printable char map (printable bytes map to
/// themselves, the rest are relocated above U+0100).
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut next_private = 256u32;
    for b in 0..=255u8 {
        let printable = (33..=126).contains(&b) || (161..=172).contains(&b) || b >= 174;
        table[b as usize] = if printable {
            char::from_u32(b as u32).unwrap()
        } else {
            let c = char::from_u32(next_private).unwrap();
            next_private += 1;
            c
        };
    }
    table
}

fn char_to_byte_table() -> HashMap<char, u8> {
    byte_to_char_table()
        .iter()
        .enumerate()
        .map(|(b, &c)| (c, b as u8))
        .collect()
}

/// A learned byte-pair-encoding vocabulary. Immutable once built.
#[derive(Debug, Clone)]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    specials: SpecialTokens,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
}

impl PartialEq for Vocab {
    fn eq(&self, other: &Self) -> bool {
        self.id_to_token == other.id_to_token && self.merges == other.merges
    }
}

impl Vocab {
    /// Base vocabulary: 256 byte tokens, the word-end marker, no merges,
    /// specials appended.
    fn base() -> Self {
        let byte_to_char = byte_to_char_table();
        let mut id_to_token: Vec<String> =
            byte_to_char.iter().map(|c| c.to_string()).collect();
        id_to_token.push(WORD_END.to_string());
        let mut vocab = Vocab {
            id_to_token,
            token_to_id: HashMap::new(),
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            specials: SpecialTokens {
                start: 0,
                delim: 0,
                clf: 0,
                pad: 0,
            },
            byte_to_char,
            char_to_byte: char_to_byte_table(),
        };
        vocab.reindex();
        vocab
    }

    /// Number of always-present tokens: 256 bytes plus the word-end marker.
    pub fn base_symbol_count() -> usize {
        257
    }

    fn reindex(&mut self) {
        self.token_to_id = self
            .id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        self.merge_rank = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
    }

    fn push_token(&mut self, token: String) {
        let id = self.id_to_token.len();
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
    }

    fn append_specials(&mut self) {
        let first = self.id_to_token.len();
        for name in SPECIAL_NAMES {
            self.push_token(name.to_string());
        }
        self.specials = SpecialTokens {
            start: first,
            delim: first + 1,
            clf: first + 2,
            pad: first + 3,
        };
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn specials(&self) -> SpecialTokens {
        self.specials
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(|s| s.as_str())
    }

    pub fn id_of(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.specials.start
    }

    /// Split a word into base symbols: one per byte, then the marker.
    fn base_symbols(&self, word: &str) -> Vec<String> {
        let mut symbols: Vec<String> = word
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        symbols.push(WORD_END.to_string());
        symbols
    }

    fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
        let mut i = 0;
        while i + 1 < symbols.len() {
            if symbols[i] == left && symbols[i + 1] == right {
                let joined = format!("{}{}", symbols[i], symbols[i + 1]);
                symbols[i] = joined;
                symbols.remove(i + 1);
            } else {
                i += 1;
            }
        }
    }

    fn encode_word(&self, word: &str) -> Vec<usize> {
        let mut symbols = self.base_symbols(word);
        loop {
            let mut best: Option<(usize, usize)> = None; // (rank, position)
            for i in 0..symbols.len() - 1 {
                let key = (symbols[i].clone(), symbols[i + 1].clone());
                if let Some(&rank) = self.merge_rank.get(&key) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            match best {
                None => break,
                Some((rank, _)) => {
                    let (left, right) = self.merges[rank].clone();
                    Self::merge_in_place(&mut symbols, &left, &right);
                }
            }
        }
        symbols
            .iter()
            .map(|s| self.token_to_id[s])
            .collect()
    }

    /// Encode one line of text. Total: every byte is representable, so no
    /// unknown token exists. Deterministic; merges apply in learned order
    /// within space-delimited words.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        if text.is_empty() {
            return Vec::new();
        }
        let mut ids = Vec::new();
        for word in text.split(' ') {
            ids.extend(self.encode_word(word));
        }
        ids
    }

    /// Decode ids back to text. Special tokens render as their
    /// placeholder names; the word-end marker renders as the word
    /// boundary.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes: Vec<u8> = Vec::new();
        let mut last_was_marker = false;
        for &id in ids {
            let token = self.id_to_token.get(id).ok_or_else(|| {
                Error::Data(format!("token id {id} out of range (vocab size {})", self.size()))
            })?;
            if self.is_special(id) {
                bytes.extend_from_slice(token.as_bytes());
                last_was_marker = false;
                continue;
            }
            for c in token.chars() {
                if c == WORD_END {
                    bytes.push(b' ');
                    last_was_marker = true;
                } else {
                    bytes.push(self.char_to_byte[&c]);
                    last_was_marker = false;
                }
            }
        }
        if last_was_marker {
            bytes.pop();
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Serialize: a header line with version and special-token names,
    /// then one merge per line as "left right". Base tokens are implied.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        write!(out, "{VOCAB_MAGIC}").unwrap();
        for name in SPECIAL_NAMES {
            write!(out, " {name}").unwrap();
        }
        out.push('\n');
        for (left, right) in &self.merges {
            writeln!(out, "{left} {right}").unwrap();
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data(format!("{}: empty vocab file", path.display())))?;
        let mut fields = header.split(' ');
        if fields.next() != Some(VOCAB_MAGIC) {
            return Err(Error::Data(format!(
                "{}: not a vocab file (bad header)",
                path.display()
            )));
        }
        let names: Vec<&str> = fields.collect();
        if names != SPECIAL_NAMES {
            return Err(Error::Data(format!(
                "{}: unexpected special tokens {names:?}",
                path.display()
            )));
        }
        let mut vocab = Vocab::base();
        for (lineno, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let (left, right) = line.split_once(' ').ok_or_else(|| {
                Error::Data(format!(
                    "{}: line {}: malformed merge {line:?}",
                    path.display(),
                    lineno + 2
                ))
            })?;
            for piece in [left, right] {
                if !vocab.token_to_id.contains_key(piece) {
                    return Err(Error::Data(format!(
                        "{}: line {}: merge references unknown token {piece:?}",
                        path.display(),
                        lineno + 2
                    )));
                }
            }
            vocab.merges.push((left.to_string(), right.to_string()));
            vocab
                .merge_rank
                .insert((left.to_string(), right.to_string()), vocab.merges.len() - 1);
            vocab.push_token(format!("{left}{right}"));
        }
        vocab.append_specials();
        Ok(vocab)
    }
}

/// Pre-merge symbolization of one word: one symbol per byte (through
/// the byte-to-char map) plus the trailing word-end marker. This is the
/// starting point every merge sequence applies to.
pub fn base_symbols(word: &str) -> Vec<String> {
    Vocab::base().base_symbols(word)
}

/// Learn a byte-pair vocabulary of (up to) `target_vocab_size` tokens by
/// repeatedly merging the most frequent adjacent symbol pair. Ties break
/// lexicographically on (left, right). Merging stops early if no pair
/// occurs anymore.
pub fn learn_bpe(corpus: &[String], target_vocab_size: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Config("learn_bpe: empty corpus".into()));
    }
    let floor = Vocab::base_symbol_count() + SPECIAL_NAMES.len();
    if target_vocab_size < floor {
        return Err(Error::Config(format!(
            "target vocab size {target_vocab_size} below base symbols plus specials ({floor})"
        )));
    }

    let mut vocab = Vocab::base();

    // Collapse the corpus to word types with counts; sorted order keeps
    // everything deterministic.
    let mut word_freq: std::collections::BTreeMap<&str, u64> = Default::default();
    for line in corpus {
        for word in line.split(' ') {
            *word_freq.entry(word).or_insert(0) += 1;
        }
    }
    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &n)| (vocab.base_symbols(w), n))
        .collect();

    let max_merges = target_vocab_size - floor;
    for _ in 0..max_merges {
        let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (symbols, n) in &words {
            for window in symbols.windows(2) {
                *pair_counts
                    .entry((window[0].as_str(), window[1].as_str()))
                    .or_insert(0) += n;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|((l, r), _)| {
                let joined = format!("{l}{r}");
                !SPECIAL_NAMES.contains(&joined.as_str())
            })
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else {
            break;
        };
        for (symbols, _) in words.iter_mut() {
            Vocab::merge_in_place(symbols, &left, &right);
        }
        vocab.push_token(format!("{left}{right}"));
        vocab
            .merge_rank
            .insert((left.clone(), right.clone()), vocab.merges.len());
        vocab.merges.push((left, right));
    }

    vocab.append_specials();
    Ok(vocab)
}
