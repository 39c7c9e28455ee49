//! Synthetic distantly supervised corpora.
//!
//! A generation spec declares relations with indicative sentence
//! templates (HEAD/TAIL slots), entity pools, distractor templates that
//! mention a pair without expressing any relation, a noise rate, bag
//! counts, and a seed. Generation is a pure function of the spec, so the
//! same spec always produces byte-identical files.
//!
//! Every positive bag starts with one sentence instantiating an
//! indicative template of its relation; each further sentence is a
//! distractor with probability `noise_rate`. NA bags contain only
//! distractors. Train and test bags use disjoint entity pairs.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{LabelTable, RawExample, NA_NAME};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRelation {
    pub name: String,
    /// Sentence templates with literal HEAD and TAIL slots.
    pub templates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub relations: Vec<SyntheticRelation>,
    pub heads: Vec<String>,
    pub tails: Vec<String>,
    /// Pair-mentioning sentences that express no relation.
    pub distractors: Vec<String>,
    /// Probability that a non-guaranteed sentence in a positive bag is a
    /// distractor.
    pub noise_rate: f64,
    /// Fraction of bags labeled NA.
    pub na_fraction: f64,
    pub train_bags: usize,
    pub test_bags: usize,
    pub min_sentences: usize,
    pub max_sentences: usize,
}

fn instantiate(template: &str, head: &str, tail: &str) -> String {
    template.replace("HEAD", head).replace("TAIL", tail)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.relations.len() < 2 {
            return Err(Error::Config(
                "synthetic spec needs at least two relations besides NA".into(),
            ));
        }
        if self.heads.is_empty() || self.tails.is_empty() {
            return Err(Error::Config("synthetic spec has empty entity pools".into()));
        }
        if self.distractors.is_empty() {
            return Err(Error::Config("synthetic spec has no distractor templates".into()));
        }
        for r in &self.relations {
            if r.name == NA_NAME {
                return Err(Error::Config("NA is implicit and cannot be a relation".into()));
            }
            if r.templates.is_empty() {
                return Err(Error::Config(format!("relation {} has no templates", r.name)));
            }
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::Config(format!(
                "noise rate {} not in [0, 1)",
                self.noise_rate
            )));
        }
        if !(0.0..1.0).contains(&self.na_fraction) {
            return Err(Error::Config(format!(
                "na fraction {} not in [0, 1)",
                self.na_fraction
            )));
        }
        if self.min_sentences == 0 || self.max_sentences < self.min_sentences {
            return Err(Error::Config("bad sentence count range".into()));
        }
        let pairs = self.heads.len() * self.tails.len();
        if self.train_bags + self.test_bags > pairs {
            return Err(Error::Config(format!(
                "{} bags requested but only {pairs} distinct entity pairs exist",
                self.train_bags + self.test_bags
            )));
        }
        Ok(())
    }

    pub fn label_table(&self) -> LabelTable {
        let mut table = LabelTable::new();
        for r in &self.relations {
            table.intern(&r.name);
        }
        table
    }

    /// Does this sentence instantiate one of the distractor templates
    /// for the given pair?
    pub fn is_distractor(&self, head: &str, tail: &str, text: &str) -> bool {
        self.distractors
            .iter()
            .any(|t| instantiate(t, head, tail) == text)
    }

    /// Does this sentence instantiate an indicative template of the
    /// given relation for the given pair?
    pub fn is_indicative(&self, relation: &str, head: &str, tail: &str, text: &str) -> bool {
        self.relations
            .iter()
            .filter(|r| r.name == relation)
            .flat_map(|r| r.templates.iter())
            .any(|t| instantiate(t, head, tail) == text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: SyntheticSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("spec serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The spec bundled for the end-to-end suite: six relations plus NA,
    /// 30% in-bag noise, 2000 train and 500 test bags.
    pub fn bundled() -> Self {
        let name_pool = |prefixes: &[&str], suffixes: &[&str]| -> Vec<String> {
            let mut out = Vec::new();
            for p in prefixes {
                for s in suffixes {
                    out.push(format!("{p}{s}"));
                }
            }
            out
        };
        let heads = name_pool(
            &["bal", "cor", "dag", "el", "fen", "gor", "hal", "ir", "jor", "kel"],
            &["a", "en", "im", "or", "us", "ett"],
        );
        let tails = name_pool(
            &["ald", "bren", "cas", "dor", "ev", "fal", "gil", "hem", "is", "lun"],
            &["ia", "on", "er", "um", "yn", "ost"],
        );
        SyntheticSpec {
            seed: 2024,
            relations: vec![
                SyntheticRelation {
                    name: "born_in".into(),
                    templates: vec![
                        "HEAD was born in TAIL .".into(),
                        "HEAD , born in TAIL , grew famous .".into(),
                        "records show HEAD was born in TAIL long ago .".into(),
                    ],
                },
                SyntheticRelation {
                    name: "works_for".into(),
                    templates: vec![
                        "HEAD works for TAIL .".into(),
                        "HEAD joined TAIL as an engineer .".into(),
                        "HEAD is employed by TAIL these days .".into(),
                    ],
                },
                SyntheticRelation {
                    name: "capital_of".into(),
                    templates: vec![
                        "HEAD is the capital of TAIL .".into(),
                        "the government of TAIL sits in HEAD .".into(),
                        "HEAD serves as the capital city of TAIL .".into(),
                    ],
                },
                SyntheticRelation {
                    name: "founded".into(),
                    templates: vec![
                        "HEAD founded TAIL .".into(),
                        "TAIL was founded by HEAD decades ago .".into(),
                        "HEAD started TAIL from nothing .".into(),
                    ],
                },
                SyntheticRelation {
                    name: "located_in".into(),
                    templates: vec![
                        "HEAD is located in TAIL .".into(),
                        "HEAD lies in the heart of TAIL .".into(),
                        "travelers find HEAD inside TAIL .".into(),
                    ],
                },
                SyntheticRelation {
                    name: "married_to".into(),
                    templates: vec![
                        "HEAD is married to TAIL .".into(),
                        "HEAD and TAIL celebrated their wedding .".into(),
                        "the spouse of HEAD is TAIL .".into(),
                    ],
                },
            ],
            heads,
            tails,
            distractors: vec![
                "HEAD and TAIL appeared in the same report .".into(),
                "analysts mentioned HEAD alongside TAIL yesterday .".into(),
                "the article compared HEAD with TAIL .".into(),
                "HEAD was photographed near TAIL last week .".into(),
                "a panel discussed HEAD and TAIL at length .".into(),
            ],
            noise_rate: 0.3,
            na_fraction: 0.25,
            train_bags: 2000,
            test_bags: 500,
            min_sentences: 1,
            max_sentences: 4,
        }
    }
}

/// In-memory generation result: JSON-lines content for both splits plus
/// the label table.
pub struct SyntheticData {
    pub train: String,
    pub test: String,
    pub labels: LabelTable,
}

impl SyntheticData {
    /// Plain-text pretraining corpus: one train sentence per line.
    pub fn corpus(&self) -> String {
        self.train
            .lines()
            .filter_map(|l| serde_json::from_str::<RawExample>(l).ok())
            .map(|r| format!("{}\n", r.text))
            .collect()
    }
}

/// Generate both splits. Deterministic in the spec (including its seed).
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mut used_pairs: HashSet<(usize, usize)> = HashSet::new();
    let mut fresh_pair = |rng: &mut Rng| loop {
        let pair = (rng.below(spec.heads.len()), rng.below(spec.tails.len()));
        if used_pairs.insert(pair) {
            return pair;
        }
    };

    let mut split = |rng: &mut Rng, n_bags: usize| -> String {
        let mut out = String::new();
        for _ in 0..n_bags {
            let (hi, ti) = fresh_pair(rng);
            let head = &spec.heads[hi];
            let tail = &spec.tails[ti];
            let n_sentences =
                spec.min_sentences + rng.below(spec.max_sentences - spec.min_sentences + 1);
            let is_na = rng.bernoulli(spec.na_fraction);
            let relation_name: String;
            let mut texts = Vec::with_capacity(n_sentences);
            if is_na {
                relation_name = NA_NAME.into();
                for _ in 0..n_sentences {
                    texts.push(instantiate(rng.choose(&spec.distractors), head, tail));
                }
            } else {
                let relation = &spec.relations[rng.below(spec.relations.len())];
                relation_name = relation.name.clone();
                texts.push(instantiate(rng.choose(&relation.templates), head, tail));
                for _ in 1..n_sentences {
                    let template = if rng.bernoulli(spec.noise_rate) {
                        rng.choose(&spec.distractors)
                    } else {
                        rng.choose(&relation.templates)
                    };
                    texts.push(instantiate(template, head, tail));
                }
            }
            for text in texts {
                let record = RawExample {
                    text,
                    head: head.clone(),
                    tail: tail.clone(),
                    relation: relation_name.clone(),
                    head_id: None,
                    tail_id: None,
                };
                out.push_str(&serde_json::to_string(&record).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    };

    let train = split(&mut rng, spec.train_bags);
    let test = split(&mut rng, spec.test_bags);
    Ok(SyntheticData {
        train,
        test,
        labels: spec.label_table(),
    })
}

/// Generate and write `train.jsonl`, `test.jsonl`, `labels.txt`, and
/// `corpus.txt` (train sentence texts for LM pretraining) into a
/// directory. Returns the three dataset paths.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<(PathBuf, PathBuf, PathBuf)> {
    let data = generate(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let train = out_dir.join("train.jsonl");
    let test = out_dir.join("test.jsonl");
    let labels = out_dir.join("labels.txt");
    let corpus = out_dir.join("corpus.txt");
    std::fs::write(&train, &data.train).map_err(|e| Error::io(&train, e))?;
    std::fs::write(&test, &data.test).map_err(|e| Error::io(&test, e))?;
    data.labels.save(&labels)?;
    std::fs::write(&corpus, data.corpus()).map_err(|e| Error::io(&corpus, e))?;
    Ok((train, test, labels))
}
