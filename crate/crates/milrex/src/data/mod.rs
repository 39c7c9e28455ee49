//! Distantly supervised data plumbing: JSON-lines ingestion, bag
//! grouping, structured input formatting, and deterministic batching.
//!
//! Dataset files are UTF-8 JSON lines with fields `text`, `head`,
//! `tail`, `relation` (strings) and optional `head_id`/`tail_id`. The
//! label table is a text file with one relation name per line; the line
//! number is the id and line 0 is always `NA`.

pub mod synthetic;

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bpe::Vocab;
use crate::error::{Error, Result};
use crate::mil::EncodedBag;
use crate::rng::Rng;

pub const NA_NAME: &str = "NA";
pub const NA_ID: usize = 0;

/// Relation name <-> id mapping. NA is always id 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTable {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for LabelTable {
    fn default() -> Self {
        Self::new()
    }
}

impl LabelTable {
    pub fn new() -> Self {
        let mut table = LabelTable {
            names: Vec::new(),
            ids: HashMap::new(),
        };
        table.intern(NA_NAME);
        table
    }

    pub fn from_names<I: IntoIterator<Item = S>, S: AsRef<str>>(names: I) -> Result<Self> {
        let mut table = LabelTable::new();
        for name in names {
            let name = name.as_ref();
            if name != NA_NAME && table.ids.contains_key(name) {
                return Err(Error::Data(format!("duplicate relation name {name:?}")));
            }
            table.intern(name);
        }
        Ok(table)
    }

    /// Id of `name`, inserting it at the next free id if new.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false // NA is always present
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for name in &self.names {
            out.push_str(name);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let names: Vec<&str> = text.lines().collect();
        if names.first() != Some(&NA_NAME) {
            return Err(Error::Data(format!(
                "{}: first label must be {NA_NAME}",
                path.display()
            )));
        }
        Self::from_names(names)
    }
}

/// One distantly labeled relation mention.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentenceExample {
    pub text: String,
    pub head: String,
    pub tail: String,
    pub relation: usize,
    pub head_id: Option<String>,
    pub tail_id: Option<String>,
}

/// On-disk record shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawExample {
    pub text: String,
    pub head: String,
    pub tail: String,
    pub relation: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub head_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tail_id: Option<String>,
}

/// Load a JSON-lines dataset, mapping relation strings through the label
/// table. Unknown relation names are an error unless `allow_new_labels`.
pub fn load_jsonl(
    path: &Path,
    labels: &mut LabelTable,
    allow_new_labels: bool,
) -> Result<Vec<SentenceExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let raw: RawExample = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}: line {lineno}: {e}", path.display()))
        })?;
        if raw.head.is_empty() || raw.tail.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {lineno}: empty head or tail entity",
                path.display()
            )));
        }
        let relation = match labels.id(&raw.relation) {
            Some(id) => id,
            None if allow_new_labels => labels.intern(&raw.relation),
            None => {
                return Err(Error::Data(format!(
                    "{}: line {lineno}: unknown relation {:?} (pass --allow-new-labels to extend the table)",
                    path.display(),
                    raw.relation
                )));
            }
        };
        out.push(SentenceExample {
            text: raw.text,
            head: raw.head,
            tail: raw.tail,
            relation,
            head_id: raw.head_id,
            tail_id: raw.tail_id,
        });
    }
    Ok(out)
}

/// Bag label: the gold relation in training mode, the set of relations
/// the pair was labeled with in test mode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BagLabel {
    Train(usize),
    Test(BTreeSet<usize>),
}

/// All sentences sharing an entity pair (and, in training mode, a
/// relation).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bag {
    pub head: String,
    pub tail: String,
    pub sentences: Vec<SentenceExample>,
    pub label: BagLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupMode {
    /// Group by (head, tail, relation).
    Train,
    /// Group by (head, tail), collecting the gold relation set.
    Test,
}

/// Group examples into bags. Grouping is order-stable: bags appear in
/// first-mention order and sentences keep file order. Every example
/// lands in exactly one bag.
pub fn build_bags(examples: Vec<SentenceExample>, mode: GroupMode) -> Vec<Bag> {
    let mut bags: Vec<Bag> = Vec::new();
    let mut index: HashMap<(String, String, Option<usize>), usize> = HashMap::new();
    for example in examples {
        let key = (
            example.head.clone(),
            example.tail.clone(),
            match mode {
                GroupMode::Train => Some(example.relation),
                GroupMode::Test => None,
            },
        );
        let slot = *index.entry(key).or_insert_with(|| {
            bags.push(Bag {
                head: example.head.clone(),
                tail: example.tail.clone(),
                sentences: Vec::new(),
                label: match mode {
                    GroupMode::Train => BagLabel::Train(example.relation),
                    GroupMode::Test => BagLabel::Test(BTreeSet::new()),
                },
            });
            bags.len() - 1
        });
        if let BagLabel::Test(facts) = &mut bags[slot].label {
            facts.insert(example.relation);
        }
        bags[slot].sentences.push(example);
    }
    bags
}

/// Build the structured model input for one mention:
/// START, head tokens, DELIM, tail tokens, DELIM, sentence tokens, CLF.
/// Only the sentence portion is truncated (from the right) to honor
/// `max_len`; an over-long entity prefix is an error.
pub fn format_input(vocab: &Vocab, example: &SentenceExample, max_len: usize) -> Result<Vec<usize>> {
    let specials = vocab.specials();
    let mut out = vec![specials.start];
    out.extend(vocab.encode(&example.head));
    out.push(specials.delim);
    out.extend(vocab.encode(&example.tail));
    out.push(specials.delim);
    let prefix_len = out.len();
    if prefix_len + 1 > max_len {
        return Err(Error::Data(format!(
            "entity prefix for ({}, {}) needs {} tokens, max_len is {max_len}",
            example.head,
            example.tail,
            prefix_len + 1
        )));
    }
    let body = vocab.encode(&example.text);
    let budget = max_len - prefix_len - 1;
    out.extend(body.into_iter().take(budget));
    out.push(specials.clf);
    Ok(out)
}

/// Formatted token sequences for every sentence of a bag.
pub fn encode_sequences(vocab: &Vocab, bag: &Bag, max_len: usize) -> Result<Vec<Vec<usize>>> {
    bag.sentences
        .iter()
        .map(|s| format_input(vocab, s, max_len))
        .collect()
}

/// Maximum sentences kept per bag; larger bags are truncated
/// deterministically in input order.
pub const BAG_SENTENCE_CAP: usize = 64;

/// Formatted training bag: sentences capped, label attached.
pub fn encode_bag(vocab: &Vocab, bag: &Bag, max_len: usize) -> Result<EncodedBag> {
    let BagLabel::Train(label) = bag.label else {
        return Err(Error::Usage(
            "encode_bag expects a training bag with a single gold label".into(),
        ));
    };
    let mut sequences = encode_sequences(vocab, bag, max_len)?;
    sequences.truncate(BAG_SENTENCE_CAP);
    Ok(EncodedBag { sequences, label })
}

/// One bag inside a padded batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    /// Sequences padded to the batch-wide maximum length.
    pub sequences: Vec<Vec<usize>>,
    /// Per position: does this position's next-token prediction count?
    /// False at and before PAD positions.
    pub loss_masks: Vec<Vec<bool>>,
    /// Original (unpadded) sequence lengths.
    pub lengths: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub items: Vec<BatchItem>,
}

/// Shuffle bags deterministically by seed, split into batches, and pad
/// every sequence in a batch to the batch maximum with `pad_id`.
pub fn batch_bags(
    bags: &[EncodedBag],
    batch_size: usize,
    pad_id: usize,
    seed: u64,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Usage("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..bags.len()).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut batches = Vec::new();
    for chunk in order.chunks(batch_size) {
        let max_len = chunk
            .iter()
            .flat_map(|&i| bags[i].sequences.iter().map(Vec::len))
            .max()
            .unwrap_or(0);
        let items = chunk
            .iter()
            .map(|&i| {
                let bag = &bags[i];
                let lengths: Vec<usize> = bag.sequences.iter().map(Vec::len).collect();
                let sequences: Vec<Vec<usize>> = bag
                    .sequences
                    .iter()
                    .map(|s| {
                        let mut padded = s.clone();
                        padded.resize(max_len, pad_id);
                        padded
                    })
                    .collect();
                let loss_masks = sequences
                    .iter()
                    .map(|s| {
                        (0..s.len())
                            .map(|i| {
                                i + 1 < s.len() && s[i] != pad_id && s[i + 1] != pad_id
                            })
                            .collect()
                    })
                    .collect();
                BatchItem {
                    sequences,
                    loss_masks,
                    lengths,
                    label: bag.label,
                }
            })
            .collect();
        batches.push(Batch { items });
    }
    Ok(batches)
}
