//! Scoring predictions and comparing failure patterns between models.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasets::{strip_bio, Bio, Example, LabeledDataset, LabeledExample, NliDataset, Task};
use crate::error::{Error, Result};
use crate::lang::Lang;

pub const IC_ACCURACY: &str = "IC%";
pub const SL_F1: &str = "SL-F1";
pub const NER_F1: &str = "NER-F1";
pub const NLI_ACCURACY: &str = "NLI%";

const OUTSIDE: &str = "O";

/// One model output for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub example_id: String,
    #[serde(rename = "slots", default, skip_serializing_if = "Option::is_none")]
    pub predicted_slot_labels: Option<Vec<String>>,
    #[serde(rename = "label", default, skip_serializing_if = "Option::is_none")]
    pub predicted_utterance_label: Option<String>,
}

/// Reads predictions as JSONL: `{"id": .., "slots": [..], "label": ..}`.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |m: String| Error::parse(path, idx + 1, m);
        let p: Prediction = serde_json::from_str(&line).map_err(|e| at(e.to_string()))?;
        if p.predicted_slot_labels.is_none() && p.predicted_utterance_label.is_none() {
            return Err(at("prediction has neither `slots` nor `label`".into()));
        }
        if !ids.insert(p.example_id.clone()) {
            return Err(at(format!("duplicate prediction for `{}`", p.example_id)));
        }
        out.push(p);
    }
    Ok(out)
}

fn index(predictions: &[Prediction]) -> BTreeMap<&str, &Prediction> {
    predictions.iter().map(|p| (p.example_id.as_str(), p)).collect()
}

/// Pairs every example with its predicted slot sequence.
fn slot_pairs<'a>(
    examples: &'a [LabeledExample],
    predictions: &'a [Prediction],
) -> Result<Vec<(&'a LabeledExample, &'a [String])>> {
    let by_id = index(predictions);
    examples
        .iter()
        .map(|e| {
            let slots = by_id
                .get(e.id.as_str())
                .and_then(|p| p.predicted_slot_labels.as_deref())
                .ok_or_else(|| Error::MissingPrediction(e.id.clone()))?;
            if slots.len() != e.slot_labels.len() {
                return Err(Error::InvalidExample {
                    id: e.id.clone(),
                    message: format!(
                        "prediction has {} slot labels, example has {}",
                        slots.len(),
                        e.slot_labels.len()
                    ),
                });
            }
            Ok((e, slots))
        })
        .collect()
}

/// Percentage of examples whose predicted class equals the gold class.
pub fn utterance_accuracy<E: Example>(examples: &[E], predictions: &[Prediction]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Invalid("accuracy of an empty dataset".into()));
    }
    let by_id = index(predictions);
    let mut correct = 0usize;
    for e in examples {
        let predicted = by_id
            .get(e.id())
            .and_then(|p| p.predicted_utterance_label.as_deref())
            .ok_or_else(|| Error::MissingPrediction(e.id().to_string()))?;
        correct += usize::from(e.utterance_label() == Some(predicted));
    }
    Ok(100.0 * correct as f64 / examples.len() as f64)
}

/// A labeled span, `start..=end` in token positions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

/// Maximal spans of a tag sequence. `I-X` that does not continue an `X` span
/// opens a new one, so malformed model output still scores.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Span>> {
    let mut spans: Vec<Span> = Vec::new();
    let mut open: Option<Span> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let bio = Bio::parse(tag).ok_or_else(|| Error::Invalid(format!("malformed BIO tag `{tag}`")))?;
        let continues = matches!((bio, &open), (Bio::Inside(k), Some(s)) if s.kind == k);
        if continues {
            open.as_mut().unwrap().end = i;
            continue;
        }
        spans.extend(open.take());
        if let Some(kind) = bio.kind() {
            open = Some(Span {
                kind: kind.to_string(),
                start: i,
                end: i,
            });
        }
    }
    spans.extend(open);
    Ok(spans)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Micro-averaged exact-match span precision, recall and F1, in percent.
pub fn span_f1(examples: &[LabeledExample], predictions: &[Prediction]) -> Result<SpanScores> {
    let (mut gold_n, mut pred_n, mut hit) = (0usize, 0usize, 0usize);
    for (e, pred) in slot_pairs(examples, predictions)? {
        let gold: BTreeSet<Span> = extract_spans(&e.slot_labels)?.into_iter().collect();
        let guess: BTreeSet<Span> = extract_spans(pred)?.into_iter().collect();
        gold_n += gold.len();
        pred_n += guess.len();
        hit += gold.intersection(&guess).count();
    }
    Ok(scores(hit, gold_n, pred_n))
}

fn scores(hit: usize, gold: usize, pred: usize) -> SpanScores {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { 100.0 * a as f64 / b as f64 };
    let precision = ratio(hit, pred);
    let recall = ratio(hit, gold);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    SpanScores {
        precision,
        recall,
        f1,
    }
}

/// Tokens outside every gold span that the model tagged as a slot.
pub fn hallucination_count(examples: &[LabeledExample], predictions: &[Prediction]) -> Result<usize> {
    Ok(slot_pairs(examples, predictions)?
        .into_iter()
        .map(|(e, pred)| {
            e.slot_labels
                .iter()
                .zip(pred)
                .filter(|(g, p)| g.as_str() == OUTSIDE && p.as_str() != OUTSIDE)
                .count()
        })
        .sum())
}

/// Token-level (gold, predicted) counts over slot types with BIO prefixes
/// stripped.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: BTreeMap<(String, String), u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCell {
    pub gold: String,
    pub predicted: String,
    pub count: u64,
}

impl ConfusionMatrix {
    pub fn from_predictions(examples: &[LabeledExample], predictions: &[Prediction]) -> Result<Self> {
        let mut cm = ConfusionMatrix::default();
        for (e, pred) in slot_pairs(examples, predictions)? {
            for (g, p) in e.slot_labels.iter().zip(pred) {
                cm.add(strip_bio(g), strip_bio(p), 1);
            }
        }
        Ok(cm)
    }

    pub fn add(&mut self, gold: &str, predicted: &str, count: u64) {
        *self
            .counts
            .entry((gold.to_string(), predicted.to_string()))
            .or_default() += count;
    }

    pub fn get(&self, gold: &str, predicted: &str) -> u64 {
        self.counts
            .get(&(gold.to_string(), predicted.to_string()))
            .copied()
            .unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    pub fn gold_labels(&self) -> BTreeSet<&str> {
        self.counts.keys().map(|(g, _)| g.as_str()).collect()
    }

    pub fn cells(&self) -> Vec<ConfusionCell> {
        self.counts
            .iter()
            .map(|((gold, predicted), count)| ConfusionCell {
                gold: gold.clone(),
                predicted: predicted.clone(),
                count: *count,
            })
            .collect()
    }

    /// Misclassification count for a gold label.
    pub fn errors(&self, gold: &str) -> u64 {
        self.counts
            .iter()
            .filter(|((g, p), _)| g == gold && p != gold)
            .map(|(_, n)| n)
            .sum()
    }
}

/// The label `gold` is most often mistaken for; ties go to the
/// lexicographically smallest label. `None` when `gold` is never wrong.
pub fn top_confusion(cm: &ConfusionMatrix, gold: &str) -> Option<String> {
    let mut best: Option<(&str, u64)> = None;
    for ((g, p), &n) in &cm.counts {
        if g != gold || p == gold || n == 0 {
            continue;
        }
        // BTreeMap order visits predicted labels ascending, so `>` keeps
        // the smallest label on ties.
        if best.map_or(true, |(_, m)| n > m) {
            best = Some((p, n));
        }
    }
    best.map(|(p, _)| p.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionChange {
    /// The candidate's top confusion became "no slot".
    ToNoLabel,
    /// The candidate's top confusion moved to a related label.
    MoreExplicable,
    Other,
}

impl ConfusionChange {
    pub fn as_str(self) -> &'static str {
        match self {
            ConfusionChange::ToNoLabel => "to_no_label",
            ConfusionChange::MoreExplicable => "more_explicable",
            ConfusionChange::Other => "other",
        }
    }
}

pub type Relatedness = BTreeMap<String, BTreeSet<String>>;

/// Example relatedness map for an ATIS-style slot ontology.
pub fn bundled_relatedness() -> Relatedness {
    serde_json::from_str(include_str!("../data/relatedness.json")).expect("bundled relatedness map")
}

pub fn classify_confusion_change(
    gold: &str,
    baseline_top: &str,
    candidate_top: &str,
    relatedness: &Relatedness,
) -> ConfusionChange {
    if candidate_top == OUTSIDE && baseline_top != OUTSIDE {
        return ConfusionChange::ToNoLabel;
    }
    match relatedness.get(gold) {
        Some(related) if related.contains(candidate_top) && !related.contains(baseline_top) => {
            ConfusionChange::MoreExplicable
        }
        _ => ConfusionChange::Other,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelComparison {
    pub a_better: usize,
    pub b_better: usize,
    pub tie: usize,
    /// Gold slot type → (errors of A, errors of B).
    pub per_label: BTreeMap<String, (u64, u64)>,
}

/// For each gold slot type, which prediction set misclassifies fewer of its
/// tokens.
pub fn per_label_comparison(
    examples: &[LabeledExample],
    pred_a: &[Prediction],
    pred_b: &[Prediction],
) -> Result<LabelComparison> {
    let a = ConfusionMatrix::from_predictions(examples, pred_a)?;
    let b = ConfusionMatrix::from_predictions(examples, pred_b)?;
    let mut out = LabelComparison::default();
    for label in a.gold_labels() {
        if label == OUTSIDE {
            continue;
        }
        let (ea, eb) = (a.errors(label), b.errors(label));
        match ea.cmp(&eb) {
            std::cmp::Ordering::Less => out.a_better += 1,
            std::cmp::Ordering::Greater => out.b_better += 1,
            std::cmp::Ordering::Equal => out.tie += 1,
        }
        out.per_label.insert(label.to_string(), (ea, eb));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Noisy,
}

/// Metric values for one (task, language, condition, seed) run. Accuracies
/// and F1 are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task: Task,
    pub lang: Option<Lang>,
    pub clean_or_noisy: Condition,
    pub seed: Option<u64>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvaluationReport {
    pub fn new(task: Task, lang: Option<Lang>, condition: Condition, seed: Option<u64>) -> Self {
        EvaluationReport {
            task,
            lang,
            clean_or_noisy: condition,
            seed,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with(mut self, metric: &str, value: f64) -> Self {
        self.metrics.insert(metric.to_string(), value);
        self
    }
}

pub fn evaluate_labeled(
    dataset: &LabeledDataset,
    predictions: &[Prediction],
    condition: Condition,
    seed: Option<u64>,
) -> Result<EvaluationReport> {
    let report = EvaluationReport::new(dataset.task, dataset.lang.clone(), condition, seed);
    let f1 = span_f1(&dataset.examples, predictions)?.f1;
    Ok(match dataset.task {
        Task::IcSl => report
            .with(IC_ACCURACY, utterance_accuracy(&dataset.examples, predictions)?)
            .with(SL_F1, f1),
        Task::Ner => report.with(NER_F1, f1),
        Task::Nli => return Err(Error::Invalid("NLI data is scored with evaluate_nli".into())),
    })
}

pub fn evaluate_nli(
    dataset: &NliDataset,
    predictions: &[Prediction],
    condition: Condition,
    seed: Option<u64>,
) -> Result<EvaluationReport> {
    Ok(EvaluationReport::new(Task::Nli, dataset.lang.clone(), condition, seed)
        .with(NLI_ACCURACY, utterance_accuracy(&dataset.examples, predictions)?))
}

fn key_set(r: &EvaluationReport) -> BTreeSet<&str> {
    r.metrics.keys().map(String::as_str).collect()
}

fn same_or_none<T: PartialEq + Clone>(values: impl Iterator<Item = T>) -> Option<T> {
    let mut values = values.peekable();
    let first = values.next()?;
    values.all(|v| v == first).then_some(first)
}

/// Per-metric arithmetic mean. Language and seed survive only when every
/// report agrees on them.
pub fn average_report(reports: &[EvaluationReport]) -> Result<EvaluationReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Invalid("cannot average zero reports".into()))?;
    let keys = key_set(first);
    for r in reports {
        if key_set(r) != keys {
            return Err(Error::MetricKeys(format!("{:?} vs {:?}", keys, key_set(r))));
        }
        if r.task != first.task || r.clean_or_noisy != first.clean_or_noisy {
            return Err(Error::Invalid("reports mix tasks or clean/noisy conditions".into()));
        }
    }
    let mut out = EvaluationReport::new(
        first.task,
        same_or_none(reports.iter().map(|r| r.lang.clone())).flatten(),
        first.clean_or_noisy,
        same_or_none(reports.iter().map(|r| r.seed)).flatten(),
    );
    for key in keys {
        // Running mean: identical inputs give back the input exactly.
        let mut mean = 0.0;
        for (k, r) in reports.iter().enumerate() {
            mean += (r.metrics[key] - mean) / (k + 1) as f64;
        }
        out.metrics.insert(key.to_string(), mean);
    }
    Ok(out)
}

/// Clean minus noisy, per metric.
pub fn disparity(clean: &EvaluationReport, noisy: &EvaluationReport) -> Result<BTreeMap<String, f64>> {
    if key_set(clean) != key_set(noisy) {
        return Err(Error::MetricKeys(format!("{:?} vs {:?}", key_set(clean), key_set(noisy))));
    }
    Ok(clean
        .metrics
        .iter()
        .map(|(k, v)| (k.clone(), v - noisy.metrics[k]))
        .collect())
}

/// Plain-text table of reports, one row per report.
pub fn render_reports(reports: &[EvaluationReport]) -> String {
    let metrics: BTreeSet<&str> = reports.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<6} {:<5} {:<6} {:>6}", "task", "lang", "cond", "seed");
    for m in &metrics {
        let _ = write!(out, " {m:>8}");
    }
    out.push('\n');
    for r in reports {
        let lang = r.lang.as_ref().map_or("-".to_string(), Lang::to_string);
        let seed = r.seed.map_or("-".to_string(), |s| s.to_string());
        let cond = match r.clean_or_noisy {
            Condition::Clean => "clean",
            Condition::Noisy => "noisy",
        };
        let _ = write!(out, "{:<6} {:<5} {:<6} {:>6}", r.task, lang, cond, seed);
        for m in &metrics {
            match r.metrics.get(*m) {
                Some(v) => {
                    let _ = write!(out, " {v:>8.2}");
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Failure analysis

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopConfusion {
    pub gold: String,
    pub a: Option<String>,
    pub b: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub change: Option<ConfusionChange>,
}

/// Hallucination and confusion breakdown for one or two prediction sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Analysis {
    pub gold_outside_tokens: usize,
    pub hallucinations_a: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hallucinations_b: Option<usize>,
    pub confusion_a: Vec<ConfusionCell>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confusion_b: Option<Vec<ConfusionCell>>,
    pub top_confusions: Vec<TopConfusion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub comparison: Option<LabelComparison>,
    /// Count of gold labels per confusion change, when B is given.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub change_counts: BTreeMap<String, usize>,
}

/// `pred_a` is the baseline, `pred_b` the candidate.
pub fn analyze(
    dataset: &LabeledDataset,
    pred_a: &[Prediction],
    pred_b: Option<&[Prediction]>,
    relatedness: &Relatedness,
) -> Result<Analysis> {
    let examples = &dataset.examples;
    let cm_a = ConfusionMatrix::from_predictions(examples, pred_a)?;
    let cm_b = pred_b
        .map(|p| ConfusionMatrix::from_predictions(examples, p))
        .transpose()?;
    let gold_outside_tokens = examples
        .iter()
        .flat_map(|e| &e.slot_labels)
        .filter(|t| t.as_str() == OUTSIDE)
        .count();

    let mut top_confusions = Vec::new();
    let mut change_counts = BTreeMap::new();
    for gold in cm_a.gold_labels() {
        if gold == OUTSIDE {
            continue;
        }
        let a = top_confusion(&cm_a, gold);
        let b = cm_b.as_ref().and_then(|cm| top_confusion(cm, gold));
        let change = match (&a, &b) {
            (Some(x), Some(y)) if x != y => Some(classify_confusion_change(gold, x, y, relatedness)),
            _ => None,
        };
        if let Some(c) = change {
            *change_counts.entry(c.as_str().to_string()).or_insert(0) += 1;
        }
        if a.is_some() || b.is_some() {
            top_confusions.push(TopConfusion {
                gold: gold.to_string(),
                a,
                b,
                change,
            });
        }
    }
    Ok(Analysis {
        gold_outside_tokens,
        hallucinations_a: hallucination_count(examples, pred_a)?,
        hallucinations_b: pred_b.map(|p| hallucination_count(examples, p)).transpose()?,
        confusion_a: cm_a.cells(),
        confusion_b: cm_b.map(|cm| cm.cells()),
        top_confusions,
        comparison: pred_b
            .map(|p| per_label_comparison(examples, pred_a, p))
            .transpose()?,
        change_counts,
    })
}

pub fn render_analysis(a: &Analysis) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "gold O tokens: {}", a.gold_outside_tokens);
    let _ = write!(out, "hallucinations: A={}", a.hallucinations_a);
    if let Some(b) = a.hallucinations_b {
        let _ = write!(out, " B={b}");
    }
    out.push('\n');
    if let Some(c) = &a.comparison {
        let _ = writeln!(
            out,
            "slot labels: A better {}, B better {}, tie {}",
            c.a_better, c.b_better, c.tie
        );
    }
    let _ = writeln!(out, "{:<28} {:<24} {:<24} change", "gold", "top confusion A", "top confusion B");
    for t in &a.top_confusions {
        let change = t.change.map_or("-", ConfusionChange::as_str);
        let _ = writeln!(
            out,
            "{:<28} {:<24} {:<24} {}",
            t.gold,
            t.a.as_deref().unwrap_or("-"),
            t.b.as_deref().unwrap_or("-"),
            change
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn en() -> Lang {
        Lang::parse("en").unwrap()
    }

    fn ex(id: &str, tags: &[&str], intent: &str) -> LabeledExample {
        LabeledExample {
            id: id.into(),
            lang: en(),
            tokens: (0..tags.len()).map(|i| format!("w{i}")).collect(),
            slot_labels: tags.iter().map(|s| s.to_string()).collect(),
            utterance_label: Some(intent.into()),
        }
    }

    fn pred(id: &str, tags: &[&str], intent: &str) -> Prediction {
        Prediction {
            example_id: id.into(),
            predicted_slot_labels: Some(tags.iter().map(|s| s.to_string()).collect()),
            predicted_utterance_label: Some(intent.into()),
        }
    }

    #[test]
    fn accuracy() {
        let e: Vec<_> = (0..4).map(|i| ex(&format!("{i}"), &["O"], "a")).collect();
        let all: Vec<_> = (0..4).map(|i| pred(&format!("{i}"), &["O"], "a")).collect();
        assert_eq!(utterance_accuracy(&e, &all).unwrap(), 100.0);
        let none: Vec<_> = (0..4).map(|i| pred(&format!("{i}"), &["O"], "b")).collect();
        assert_eq!(utterance_accuracy(&e, &none).unwrap(), 0.0);
        let mut three = all.clone();
        three[2].predicted_utterance_label = Some("z".into());
        assert_eq!(utterance_accuracy(&e, &three).unwrap(), 75.0);
        assert!(matches!(
            utterance_accuracy(&e, &all[..3]),
            Err(Error::MissingPrediction(id)) if id == "3"
        ));
        let mut rev = e.clone();
        rev.reverse();
        assert_eq!(utterance_accuracy(&rev, &three).unwrap(), 75.0);
    }

    #[test]
    fn spans() {
        let s = extract_spans(&["B-a", "I-a", "O", "I-b", "I-b", "B-b", "I-a"]).unwrap();
        let got: Vec<_> = s.iter().map(|s| (s.kind.as_str(), s.start, s.end)).collect();
        assert_eq!(got, vec![("a", 0, 1), ("b", 3, 4), ("b", 5, 5), ("a", 6, 6)]);
        assert!(extract_spans(&["X"]).is_err());
    }

    #[test]
    fn f1_examples() {
        let e = vec![ex("1", &["B-city", "I-city", "O", "B-date"], "x")];
        let same = vec![pred("1", &["B-city", "I-city", "O", "B-date"], "x")];
        let s = span_f1(&e, &same).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (100.0, 100.0, 100.0));

        let empty = vec![pred("1", &["O", "O", "O", "O"], "x")];
        let s = span_f1(&e, &empty).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));

        // One exact match plus one spurious span against two gold spans.
        let half = vec![pred("1", &["B-city", "I-city", "B-x", "O"], "x")];
        let s = span_f1(&e, &half).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (50.0, 50.0, 50.0));

        let short = vec![pred("1", &["O"], "x")];
        assert!(span_f1(&e, &short).is_err());
    }

    #[test]
    fn hallucinations() {
        let e = vec![ex("1", &["O", "O", "B-city"], "x")];
        assert_eq!(hallucination_count(&e, &[pred("1", &["B-airline", "O", "B-city"], "x")]).unwrap(), 1);
        assert_eq!(hallucination_count(&e, &[pred("1", &["O", "O", "B-city"], "x")]).unwrap(), 0);
        let e = vec![ex("1", &["O"; 7], "x")];
        assert_eq!(hallucination_count(&e, &[pred("1", &["B-x"; 7], "x")]).unwrap(), 7);
    }

    #[test]
    fn top_confusion_rules() {
        let mut cm = ConfusionMatrix::default();
        cm.add("city", "airport", 5);
        cm.add("city", "O", 3);
        cm.add("city", "city", 9);
        assert_eq!(top_confusion(&cm, "city").as_deref(), Some("airport"));
        let mut tie = ConfusionMatrix::default();
        tie.add("city", "airport", 2);
        tie.add("city", "O", 2);
        assert_eq!(top_confusion(&tie, "city").as_deref(), Some("O"));
        let mut clean = ConfusionMatrix::default();
        clean.add("city", "city", 4);
        assert_eq!(top_confusion(&clean, "city"), None);
    }

    #[test]
    fn confusion_matrix_strips_prefixes() {
        let e = vec![ex("1", &["B-city", "I-city", "O"], "x")];
        let cm = ConfusionMatrix::from_predictions(&e, &[pred("1", &["B-city", "B-state", "O"], "x")]).unwrap();
        assert_eq!(cm.get("city", "city"), 1);
        assert_eq!(cm.get("city", "state"), 1);
        assert_eq!(cm.get("O", "O"), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn confusion_changes() {
        let rel = bundled_relatedness();
        assert_eq!(
            classify_confusion_change("meal_code", "airline_code", "O", &rel),
            ConfusionChange::ToNoLabel
        );
        assert_eq!(
            classify_confusion_change("state_code", "transport_type", "state_name", &rel),
            ConfusionChange::MoreExplicable
        );
        assert_eq!(
            classify_confusion_change("state_code", "state_name", "state_name", &rel),
            ConfusionChange::Other
        );
        assert_eq!(
            classify_confusion_change("unknown_slot", "a", "b", &rel),
            ConfusionChange::Other
        );
    }

    #[test]
    fn label_comparison() {
        let e = vec![
            ex("1", &["B-city", "O", "B-date"], "x"),
            ex("2", &["B-city", "I-city", "B-time"], "x"),
        ];
        let gold: Vec<_> = e
            .iter()
            .map(|x| Prediction {
                example_id: x.id.clone(),
                predicted_slot_labels: Some(x.slot_labels.clone()),
                predicted_utterance_label: None,
            })
            .collect();
        let c = per_label_comparison(&e, &gold, &gold).unwrap();
        assert_eq!((c.a_better, c.b_better, c.tie), (0, 0, 3));
        let mut b = gold.clone();
        b[0].predicted_slot_labels = Some(vec!["B-city".into(), "O".into(), "O".into()]);
        let c = per_label_comparison(&e, &gold, &b).unwrap();
        assert_eq!((c.a_better, c.b_better, c.tie), (1, 0, 2));
        assert_eq!(c.per_label["date"], (0, 1));
    }

    #[test]
    fn label_comparison_matches_enumeration() {
        // Hand enumeration: A errs on city twice and date never; B errs on
        // city once and date once; time is perfect in both.
        let e = vec![
            ex("1", &["B-city", "I-city", "B-date"], "x"),
            ex("2", &["B-time", "B-city", "O"], "x"),
        ];
        let a = vec![
            pred("1", &["O", "B-state", "B-date"], "x"),
            pred("2", &["B-time", "B-city", "B-x"], "x"),
        ];
        let b = vec![
            pred("1", &["B-city", "I-city", "O"], "x"),
            pred("2", &["B-time", "B-state", "O"], "x"),
        ];
        let c = per_label_comparison(&e, &a, &b).unwrap();
        assert_eq!(c.per_label["city"], (2, 1));
        assert_eq!(c.per_label["date"], (0, 1));
        assert_eq!(c.per_label["time"], (0, 0));
        assert_eq!((c.a_better, c.b_better, c.tie), (1, 1, 1));
    }

    fn report(values: &[(&str, f64)]) -> EvaluationReport {
        let mut r = EvaluationReport::new(Task::IcSl, Some(en()), Condition::Clean, Some(1));
        for (k, v) in values {
            r = r.with(k, *v);
        }
        r
    }

    #[test]
    fn averaging() {
        let langs = [92.4, 98.7, 92.0, 90.6, 79.6];
        let reports: Vec<_> = langs.iter().map(|v| report(&[(IC_ACCURACY, *v)])).collect();
        let avg = average_report(&reports).unwrap();
        assert!((avg.metrics[IC_ACCURACY] - 90.66).abs() < 1e-9);
        assert_eq!(average_report(&reports[..1]).unwrap(), reports[0]);
        let same = vec![report(&[(SL_F1, 0.1)]); 3];
        assert_eq!(average_report(&same).unwrap().metrics[SL_F1], 0.1);
        assert!(average_report(&[]).is_err());
        let mixed = [report(&[(SL_F1, 1.0)]), report(&[(IC_ACCURACY, 1.0)])];
        assert!(matches!(average_report(&mixed), Err(Error::MetricKeys(_))));
    }

    #[test]
    fn averaging_drops_disagreeing_lang() {
        let mut a = report(&[(SL_F1, 1.0)]);
        let b = report(&[(SL_F1, 3.0)]);
        a.lang = Some(Lang::parse("de").unwrap());
        let avg = average_report(&[a, b]).unwrap();
        assert_eq!(avg.lang, None);
        assert_eq!(avg.seed, Some(1));
        assert_eq!(avg.metrics[SL_F1], 2.0);
    }

    #[test]
    fn disparities() {
        let clean = report(&[(IC_ACCURACY, 90.68), (SL_F1, 71.45)]);
        let noisy = report(&[(IC_ACCURACY, 89.65), (SL_F1, 62.30)]);
        let gap = disparity(&clean, &noisy).unwrap();
        assert!((gap[IC_ACCURACY] - 1.03).abs() < 1e-9);
        assert!((gap[SL_F1] - 9.15).abs() < 1e-9);
        assert!(disparity(&clean, &clean).unwrap().values().all(|v| *v == 0.0));
        assert!(disparity(&clean, &report(&[(IC_ACCURACY, 1.0)])).is_err());
    }

    #[test]
    fn report_json_shape() {
        let r = report(&[(IC_ACCURACY, 50.0)]);
        let v = serde_json::to_value(&r).unwrap();
        assert_eq!(v["clean_or_noisy"], "clean");
        assert_eq!(v["task"], "ic_sl");
        assert_eq!(v["metrics"]["IC%"], 50.0);
        let back: EvaluationReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
        assert!(render_reports(&[r]).contains("50.00"));
    }

    #[test]
    fn analysis_end_to_end() {
        let d = LabeledDataset::new(
            Task::IcSl,
            Some(en()),
            vec![ex("1", &["O", "B-state_code", "O"], "x"), ex("2", &["B-meal_code", "O"], "x")],
        )
        .unwrap();
        let a = vec![
            pred("1", &["B-fare", "B-transport_type", "O"], "x"),
            pred("2", &["B-airline_code", "O"], "x"),
        ];
        let b = vec![
            pred("1", &["O", "B-state_name", "O"], "x"),
            pred("2", &["O", "O"], "x"),
        ];
        let r = analyze(&d, &a, Some(&b), &bundled_relatedness()).unwrap();
        assert_eq!(r.hallucinations_a, 1);
        assert_eq!(r.hallucinations_b, Some(0));
        assert_eq!(r.change_counts["to_no_label"], 1);
        assert_eq!(r.change_counts["more_explicable"], 1);
        assert!(render_analysis(&r).contains("state_code"));
    }

    /// Enumerates every interval and keeps the ones that form a maximal
    /// span, written without reference to the scanning extractor.
    fn oracle_spans(tags: &[String]) -> BTreeSet<(String, usize, usize)> {
        let parse = |t: &str| -> (char, String) {
            if t == "O" {
                ('O', String::new())
            } else {
                (t.chars().next().unwrap(), t[2..].to_string())
            }
        };
        let mut out = BTreeSet::new();
        for s in 0..tags.len() {
            let (p, kind) = parse(&tags[s]);
            if p == 'O' {
                continue;
            }
            if p == 'I' && s > 0 {
                let (pp, pk) = parse(&tags[s - 1]);
                if pp != 'O' && pk == kind {
                    continue;
                }
            }
            for e in s..tags.len() {
                let inner_ok = (s + 1..=e).all(|t| parse(&tags[t]) == ('I', kind.clone()));
                if !inner_ok {
                    break;
                }
                let closes = e + 1 == tags.len() || parse(&tags[e + 1]) != ('I', kind.clone());
                if closes {
                    out.insert((kind.clone(), s, e));
                }
            }
        }
        out
    }

    fn oracle_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> (f64, f64, f64) {
        let (mut g, mut p, mut h) = (0, 0, 0);
        for (a, b) in gold.iter().zip(pred) {
            let (ga, pb) = (oracle_spans(a), oracle_spans(b));
            g += ga.len();
            p += pb.len();
            h += ga.intersection(&pb).count();
        }
        let s = scores(h, g, p);
        (s.precision, s.recall, s.f1)
    }

    fn tag_seq(valid: bool) -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec((0u8..3, 0u8..4), 1..=12).prop_map(move |raw| {
            let mut prev: Option<u8> = None;
            raw.into_iter()
                .map(|(p, k)| {
                    let tag = match p {
                        0 => "O".to_string(),
                        1 => format!("B-t{k}"),
                        _ if !valid || prev == Some(k) => format!("I-t{k}"),
                        _ => format!("B-t{k}"),
                    };
                    prev = (p != 0).then_some(k);
                    tag
                })
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn span_f1_matches_oracle(rows in proptest::collection::vec((tag_seq(true), tag_seq(false)), 1..4)) {
            let mut examples = Vec::new();
            let mut preds = Vec::new();
            let mut golds = Vec::new();
            let mut guesses = Vec::new();
            for (i, (g, p)) in rows.into_iter().enumerate() {
                let len = g.len().min(p.len());
                let (g, p) = (g[..len].to_vec(), p[..len].to_vec());
                if crate::datasets::validate_bio(&g).is_err() {
                    continue;
                }
                let id = i.to_string();
                examples.push(LabeledExample {
                    id: id.clone(),
                    lang: en(),
                    tokens: vec!["w".into(); len],
                    slot_labels: g.clone(),
                    utterance_label: None,
                });
                preds.push(Prediction { example_id: id, predicted_slot_labels: Some(p.clone()), predicted_utterance_label: None });
                golds.push(g);
                guesses.push(p);
            }
            let s = span_f1(&examples, &preds).unwrap();
            prop_assert_eq!((s.precision, s.recall, s.f1), oracle_f1(&golds, &guesses));
        }

        #[test]
        fn hallucinations_bounded(g in tag_seq(true), p in tag_seq(false)) {
            let len = g.len().min(p.len());
            let e = vec![LabeledExample { id: "1".into(), lang: en(), tokens: vec!["w".into(); len], slot_labels: g[..len].to_vec(), utterance_label: None }];
            let pr = vec![Prediction { example_id: "1".into(), predicted_slot_labels: Some(p[..len].to_vec()), predicted_utterance_label: None }];
            let outside = e[0].slot_labels.iter().filter(|t| *t == "O").count();
            prop_assert!(hallucination_count(&e, &pr).unwrap() <= outside);
        }

        #[test]
        fn label_comparison_matches_count_oracle(
            rows in proptest::collection::vec((tag_seq(true), tag_seq(false), tag_seq(false)), 1..4)
        ) {
            let mut examples = Vec::new();
            let (mut pa, mut pb) = (Vec::new(), Vec::new());
            for (i, (g, a, b)) in rows.into_iter().enumerate() {
                let len = g.len().min(a.len()).min(b.len());
                let id = i.to_string();
                examples.push(LabeledExample { id: id.clone(), lang: en(), tokens: vec!["w".into(); len], slot_labels: g[..len].to_vec(), utterance_label: None });
                pa.push(Prediction { example_id: id.clone(), predicted_slot_labels: Some(a[..len].to_vec()), predicted_utterance_label: None });
                pb.push(Prediction { example_id: id, predicted_slot_labels: Some(b[..len].to_vec()), predicted_utterance_label: None });
            }
            let strip = |t: &str| if t == "O" { t.to_string() } else { t[2..].to_string() };
            let mut errs: BTreeMap<String, (u64, u64)> = BTreeMap::new();
            for (k, e) in examples.iter().enumerate() {
                for (j, g) in e.slot_labels.iter().enumerate() {
                    let g = strip(g);
                    let slot = errs.entry(g.clone()).or_default();
                    slot.0 += u64::from(strip(&pa[k].predicted_slot_labels.as_ref().unwrap()[j]) != g);
                    slot.1 += u64::from(strip(&pb[k].predicted_slot_labels.as_ref().unwrap()[j]) != g);
                }
            }
            errs.remove("O");
            let a_better = errs.values().filter(|(a, b)| a < b).count();
            let b_better = errs.values().filter(|(a, b)| a > b).count();
            let c = per_label_comparison(&examples, &pa, &pb).unwrap();
            prop_assert_eq!((c.a_better, c.b_better, c.tie), (a_better, b_better, errs.len() - a_better - b_better));
            prop_assert_eq!(c.per_label, errs);
        }

        #[test]
        fn accuracy_ignores_order(labels in proptest::collection::vec((0u8..3, 0u8..3), 1..30), rot in 0usize..30) {
            let mut examples: Vec<_> = labels.iter().enumerate().map(|(i, (g, _))| ex(&i.to_string(), &["O"], &g.to_string())).collect();
            let preds: Vec<_> = labels.iter().enumerate().map(|(i, (_, p))| pred(&i.to_string(), &["O"], &p.to_string())).collect();
            let before = utterance_accuracy(&examples, &preds).unwrap();
            let n = examples.len();
            examples.rotate_left(rot % n);
            examples.reverse();
            prop_assert_eq!(utterance_accuracy(&examples, &preds).unwrap(), before);
        }

        #[test]
        fn average_of_copies_is_exact(v in -1e6f64..1e6, k in 1usize..20) {
            let r = report(&[(SL_F1, v)]);
            prop_assert_eq!(average_report(&vec![r.clone(); k]).unwrap(), r);
        }
    }
}
