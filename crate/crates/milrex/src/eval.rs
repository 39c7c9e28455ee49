//! Held-out evaluation: ranked precision-recall, AUC, Precision@N, and
//! export of top predictions for manual rating.
//!
//! A prediction names an entity pair and a non-NA relation with a
//! confidence score; it is correct iff that (pair, relation) triple is a
//! gold fact of the test split. NA never participates: NA predictions
//! are dropped on ingestion and NA labels never become gold facts, so
//! removing NA rows from the input changes nothing.
//!
//! AUC is the average-precision summation (sum of delta-recall times
//! precision at each rank where recall rises); a trapezoidal variant is
//! available for comparison.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Bag, LabelTable, SentenceExample, NA_NAME};
use crate::error::{Error, Result};

/// Ns reported by default, following the usual held-out convention.
pub const DEFAULT_P_AT: [usize; 6] = [100, 200, 300, 500, 1000, 2000];

/// One predicted relation instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BagPrediction {
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub score: f64,
    /// Per-sentence attention weights under this relation's query.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
}

/// Gold (head, tail, relation) triples, NA excluded.
pub type GoldFacts = BTreeSet<(String, String, String)>;

#[derive(Debug, Clone, PartialEq)]
pub struct PrPoint {
    pub rank: usize,
    pub precision: f64,
    pub recall: f64,
    pub score: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pr_points: Vec<PrPoint>,
    pub auc: f64,
    pub auc_trapezoid: f64,
    /// N -> precision over the top min(N, len) predictions, as a fraction.
    pub p_at: BTreeMap<usize, f64>,
    pub total_facts: usize,
}

/// Derive the gold fact set from test examples: every distinct
/// (head, tail, relation) with a non-NA relation.
pub fn collect_gold_facts(examples: &[SentenceExample], labels: &LabelTable) -> GoldFacts {
    examples
        .iter()
        .filter(|e| e.relation != crate::data::NA_ID)
        .filter_map(|e| {
            labels
                .name(e.relation)
                .map(|r| (e.head.clone(), e.tail.clone(), r.to_string()))
        })
        .collect()
}

/// Drop NA rows; evaluation never consults them.
pub fn drop_na_predictions(predictions: Vec<BagPrediction>) -> Vec<BagPrediction> {
    predictions
        .into_iter()
        .filter(|p| p.relation != NA_NAME)
        .collect()
}

/// Sort predictions by descending score, breaking ties lexicographically
/// on (head, tail, relation) so reports are reproducible. Duplicate
/// (pair, relation) entries and non-finite scores are data errors.
pub fn rank_predictions(mut predictions: Vec<BagPrediction>) -> Result<Vec<BagPrediction>> {
    let mut seen: HashSet<(String, String, String)> = HashSet::new();
    for p in &predictions {
        if !p.score.is_finite() {
            return Err(Error::Data(format!(
                "prediction ({}, {}, {}) has non-finite score {}",
                p.head, p.tail, p.relation, p.score
            )));
        }
        if !seen.insert((p.head.clone(), p.tail.clone(), p.relation.clone())) {
            return Err(Error::Data(format!(
                "duplicate prediction for ({}, {}, {})",
                p.head, p.tail, p.relation
            )));
        }
    }
    predictions.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("scores are finite")
            .then_with(|| (&a.head, &a.tail, &a.relation).cmp(&(&b.head, &b.tail, &b.relation)))
    });
    Ok(predictions)
}

fn is_correct(p: &BagPrediction, gold: &GoldFacts) -> bool {
    gold.contains(&(p.head.clone(), p.tail.clone(), p.relation.clone()))
}

/// Precision/recall at every rank of an already-ranked prediction list.
pub fn pr_curve(ranked: &[BagPrediction], gold: &GoldFacts) -> Result<Vec<PrPoint>> {
    if gold.is_empty() {
        return Err(Error::Config("pr_curve: empty gold fact set".into()));
    }
    let total = gold.len() as f64;
    let mut correct_so_far = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (i, p) in ranked.iter().enumerate() {
        let correct = is_correct(p, gold);
        if correct {
            correct_so_far += 1;
        }
        points.push(PrPoint {
            rank: i + 1,
            precision: correct_so_far as f64 / (i + 1) as f64,
            recall: correct_so_far as f64 / total,
            score: p.score,
            correct,
        });
    }
    Ok(points)
}

/// Average-precision-style area: sum of (recall increase x precision)
/// over the ranks where recall rises.
pub fn auc(pr_points: &[PrPoint]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for p in pr_points {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * p.precision;
            prev_recall = p.recall;
        }
    }
    area
}

/// Trapezoidal area under the same points, for comparison.
pub fn auc_trapezoid(pr_points: &[PrPoint]) -> f64 {
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut prev_precision = 1.0;
    for p in pr_points {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * (p.precision + prev_precision) / 2.0;
            prev_recall = p.recall;
            prev_precision = p.precision;
        }
    }
    area
}

/// Precision over the top min(N, len) predictions for each requested N.
pub fn p_at_n(
    ranked: &[BagPrediction],
    gold: &GoldFacts,
    ns: &[usize],
) -> Result<BTreeMap<usize, f64>> {
    if let Some(&bad) = ns.iter().find(|&&n| n == 0) {
        return Err(Error::Usage(format!("p_at_n: N must be positive, got {bad}")));
    }
    let mut out = BTreeMap::new();
    for &n in ns {
        let take = n.min(ranked.len());
        let correct = ranked[..take].iter().filter(|p| is_correct(p, gold)).count();
        let precision = if take == 0 {
            0.0
        } else {
            correct as f64 / take as f64
        };
        out.insert(n, precision);
    }
    Ok(out)
}

/// Full evaluation of a prediction set against gold facts.
pub fn evaluate(
    predictions: Vec<BagPrediction>,
    gold: &GoldFacts,
    ns: &[usize],
) -> Result<EvalReport> {
    let ranked = rank_predictions(drop_na_predictions(predictions))?;
    let pr_points = pr_curve(&ranked, gold)?;
    let p_at = p_at_n(&ranked, gold, ns)?;
    Ok(EvalReport {
        auc: auc(&pr_points),
        auc_trapezoid: auc_trapezoid(&pr_points),
        p_at,
        total_facts: gold.len(),
        pr_points,
    })
}

pub fn write_predictions(path: &Path, predictions: &[BagPrediction]) -> Result<()> {
    let mut out = String::new();
    for p in predictions {
        out.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<BagPrediction>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: BagPrediction = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), idx + 1)))?;
        out.push(p);
    }
    Ok(out)
}

/// Write `pr_curve.csv` and `summary.json` under `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = String::from("rank,score,correct,precision,recall\n");
    for p in &report.pr_points {
        writeln!(
            csv,
            "{},{},{},{},{}",
            p.rank, p.score, p.correct, p.precision, p.recall
        )
        .unwrap();
    }
    let csv_path = dir.join("pr_curve.csv");
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    let summary = serde_json::json!({
        "auc": report.auc,
        "auc_trapezoid": report.auc_trapezoid,
        "total_facts": report.total_facts,
        "p_at": report
            .p_at
            .iter()
            .map(|(n, p)| (n.to_string(), *p))
            .collect::<BTreeMap<String, f64>>(),
    });
    let json_path = dir.join("summary.json");
    std::fs::write(
        &json_path,
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )
    .map_err(|e| Error::io(&json_path, e))
}

fn csv_field(raw: &str) -> String {
    if raw.contains([',', '"', '\n']) {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Export the top N ranked predictions for manual rating: `topn.csv`
/// holds one row per prediction followed by one row per supporting
/// sentence (with its attention weight when available), and
/// `distribution.csv` counts relations over those N rows.
pub fn export_topn(
    ranked: &[BagPrediction],
    bags: &[Bag],
    n: usize,
    dir: &Path,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Usage("export_topn: N must be positive".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut by_pair: BTreeMap<(&str, &str), &Bag> = BTreeMap::new();
    for bag in bags {
        by_pair.insert((bag.head.as_str(), bag.tail.as_str()), bag);
    }
    let top = &ranked[..n.min(ranked.len())];
    let mut csv = String::from("rank,head,tail,relation,score,sentence_index,sentence,alpha\n");
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, p) in top.iter().enumerate() {
        *counts.entry(p.relation.as_str()).or_insert(0) += 1;
        writeln!(
            csv,
            "{},{},{},{},{},,,",
            i + 1,
            csv_field(&p.head),
            csv_field(&p.tail),
            csv_field(&p.relation),
            p.score
        )
        .unwrap();
        if let Some(bag) = by_pair.get(&(p.head.as_str(), p.tail.as_str())) {
            for (j, sentence) in bag.sentences.iter().enumerate() {
                let alpha = p
                    .alphas
                    .as_ref()
                    .and_then(|a| a.get(j))
                    .map(|a| a.to_string())
                    .unwrap_or_default();
                writeln!(
                    csv,
                    "{},,,,,{},{},{}",
                    i + 1,
                    j,
                    csv_field(&sentence.text),
                    alpha
                )
                .unwrap();
            }
        }
    }
    let topn_path = dir.join("topn.csv");
    std::fs::write(&topn_path, csv).map_err(|e| Error::io(&topn_path, e))?;

    let mut dist: Vec<(&str, usize)> = counts.into_iter().collect();
    dist.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let mut dist_csv = String::from("relation,count\n");
    for (relation, count) in dist {
        writeln!(dist_csv, "{},{count}", csv_field(relation)).unwrap();
    }
    let dist_path = dir.join("distribution.csv");
    std::fs::write(&dist_path, dist_csv).map_err(|e| Error::io(&dist_path, e))
}
