//! Dictionary-driven noise injection into labeled test sets.
//!
//! For a sentence of `L` tokens, a budget `n` is drawn uniformly from
//! `1..=max(1, min(floor(p·L), max_tokens))`. Positions are then sampled
//! uniformly among tokens not yet noised; a token with a dictionary entry is
//! replaced by a variant drawn by probability. Sampling stops after `n`
//! replacements or `max_attempts_factor · L` draws, so the budget is a cap.
//! Token count, order and all labels are never touched.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{Dataset, Example, LabeledDataset, LabeledExample, NliExample, Task};
use crate::error::{Error, Result};
use crate::noisedict::FrozenNoiseDictionary;
use crate::tsv;

/// Default fraction for NLI premises/hypotheses.
pub const DEFAULT_NLI_RATIO: f64 = 0.05;
/// Default fraction for everything else.
pub const DEFAULT_RATIO: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InjectionConfig {
    pub p: f64,
    pub max_tokens: usize,
    pub seed: u64,
    pub max_attempts_factor: usize,
}

impl InjectionConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        let cfg = InjectionConfig {
            p,
            max_tokens: 4,
            seed,
            max_attempts_factor: 10,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn for_task(task: Task, seed: u64) -> Self {
        let p = if task == Task::Nli {
            DEFAULT_NLI_RATIO
        } else {
            DEFAULT_RATIO
        };
        InjectionConfig::new(p, seed).expect("default ratios are valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Config {
                field: "p",
                message: format!("{} is outside (0, 1]", self.p),
            });
        }
        if self.max_tokens == 0 {
            return Err(Error::Config {
                field: "max_tokens",
                message: "must be at least 1".into(),
            });
        }
        if self.max_attempts_factor == 0 {
            return Err(Error::Config {
                field: "max_attempts_factor",
                message: "must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// Largest budget for a sentence of `len` tokens.
pub fn budget_upper(len: usize, cfg: &InjectionConfig) -> usize {
    // The epsilon keeps products like 0.29 * 100 from flooring to 28.
    let scaled = (cfg.p * len as f64 + 1e-9).floor() as usize;
    scaled.min(cfg.max_tokens).max(1)
}

pub fn noised_token_budget<R: Rng + ?Sized>(len: usize, cfg: &InjectionConfig, rng: &mut R) -> usize {
    rng.gen_range(1..=budget_upper(len, cfg))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementRecord {
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisedExample {
    pub base: LabeledExample,
    pub noised_tokens: Vec<String>,
    pub replacements: Vec<ReplacementRecord>,
}

impl NoisedExample {
    /// The base example with its tokens swapped for the noised ones.
    pub fn to_example(&self) -> LabeledExample {
        LabeledExample {
            tokens: self.noised_tokens.clone(),
            ..self.base.clone()
        }
    }
}

/// Injects noise into one token sequence.
pub fn noise_tokens<R: Rng + ?Sized>(
    tokens: &[String],
    dict: &FrozenNoiseDictionary,
    cfg: &InjectionConfig,
    rng: &mut R,
) -> (Vec<String>, Vec<ReplacementRecord>) {
    let mut out = tokens.to_vec();
    let mut records = Vec::new();
    if tokens.is_empty() {
        return (out, records);
    }
    let budget = noised_token_budget(tokens.len(), cfg, rng);
    let mut open: Vec<usize> = (0..tokens.len()).collect();
    let max_draws = cfg.max_attempts_factor * tokens.len();
    let mut draws = 0;
    while records.len() < budget && draws < max_draws && !open.is_empty() {
        draws += 1;
        let slot = rng.gen_range(0..open.len());
        let pos = open[slot];
        let original = &tokens[pos];
        let Some(variant) = dict.sample(original, rng) else {
            continue;
        };
        if variant == original {
            continue;
        }
        out[pos] = variant.to_string();
        records.push(ReplacementRecord {
            position: pos,
            original: original.clone(),
            replacement: variant.to_string(),
        });
        open.swap_remove(slot);
    }
    records.sort_by_key(|r| r.position);
    (out, records)
}

fn check_lang(expected: Option<&crate::Lang>, dict: &FrozenNoiseDictionary) -> Result<()> {
    match expected {
        Some(l) if l != dict.lang() => Err(Error::LangMismatch {
            expected: dict.lang().to_string(),
            found: l.to_string(),
        }),
        _ => Ok(()),
    }
}

pub fn inject<R: Rng + ?Sized>(
    example: &LabeledExample,
    dict: &FrozenNoiseDictionary,
    cfg: &InjectionConfig,
    rng: &mut R,
) -> Result<NoisedExample> {
    check_lang(Some(&example.lang), dict)?;
    let (noised_tokens, replacements) = noise_tokens(&example.tokens, dict, cfg, rng);
    Ok(NoisedExample {
        base: example.clone(),
        noised_tokens,
        replacements,
    })
}

/// Per-example generator: SHA-256 of the seed and the example id, so the
/// stream for an example does not depend on where it sits in the dataset.
pub fn example_rng(seed: u64, id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// One row of the replacement log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementLogRow {
    pub example_id: String,
    pub position: usize,
    pub original: String,
    pub replacement: String,
}

/// Examples that can carry injected noise.
pub trait Noisable: Example + Clone {
    fn noised<R: Rng + ?Sized>(
        &self,
        dict: &FrozenNoiseDictionary,
        cfg: &InjectionConfig,
        rng: &mut R,
    ) -> (Self, Vec<ReplacementLogRow>);

    fn with_id(&self, id: String) -> Self;
}

fn log_rows(id: &str, records: Vec<ReplacementRecord>) -> impl Iterator<Item = ReplacementLogRow> + '_ {
    records.into_iter().map(move |r| ReplacementLogRow {
        example_id: id.to_string(),
        position: r.position,
        original: r.original,
        replacement: r.replacement,
    })
}

impl Noisable for LabeledExample {
    fn noised<R: Rng + ?Sized>(
        &self,
        dict: &FrozenNoiseDictionary,
        cfg: &InjectionConfig,
        rng: &mut R,
    ) -> (Self, Vec<ReplacementLogRow>) {
        let (tokens, records) = noise_tokens(&self.tokens, dict, cfg, rng);
        let rows = log_rows(&self.id, records).collect();
        (
            LabeledExample {
                tokens,
                ..self.clone()
            },
            rows,
        )
    }

    fn with_id(&self, id: String) -> Self {
        LabeledExample {
            id,
            ..self.clone()
        }
    }
}

/// Premise and hypothesis are noised independently, each with its own
/// budget. Log ids are `<id>/premise` and `<id>/hypothesis`.
impl Noisable for NliExample {
    fn noised<R: Rng + ?Sized>(
        &self,
        dict: &FrozenNoiseDictionary,
        cfg: &InjectionConfig,
        rng: &mut R,
    ) -> (Self, Vec<ReplacementLogRow>) {
        let (premise, p_rec) = noise_tokens(&self.premise, dict, cfg, rng);
        let (hypothesis, h_rec) = noise_tokens(&self.hypothesis, dict, cfg, rng);
        let p_id = format!("{}/premise", self.id);
        let h_id = format!("{}/hypothesis", self.id);
        let rows = log_rows(&p_id, p_rec).chain(log_rows(&h_id, h_rec)).collect();
        (
            NliExample {
                premise,
                hypothesis,
                ..self.clone()
            },
            rows,
        )
    }

    fn with_id(&self, id: String) -> Self {
        NliExample {
            id,
            ..self.clone()
        }
    }
}

/// Noises every example with a generator keyed on `(cfg.seed, id)`.
pub fn inject_dataset<E: Noisable>(
    dataset: &Dataset<E>,
    dict: &FrozenNoiseDictionary,
    cfg: &InjectionConfig,
) -> Result<(Dataset<E>, Vec<ReplacementLogRow>)> {
    cfg.validate()?;
    check_lang(dataset.lang.as_ref(), dict)?;
    let mut log = Vec::new();
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let mut rng = example_rng(cfg.seed, e.id());
            let (noised, rows) = e.noised(dict, cfg, &mut rng);
            log.extend(rows);
            noised
        })
        .collect();
    Ok((
        Dataset {
            task: dataset.task,
            lang: dataset.lang.clone(),
            examples,
        },
        log,
    ))
}

/// Convenience wrapper returning full [`NoisedExample`] records.
pub fn inject_labeled(
    dataset: &LabeledDataset,
    dict: &FrozenNoiseDictionary,
    cfg: &InjectionConfig,
) -> Result<Vec<NoisedExample>> {
    cfg.validate()?;
    check_lang(dataset.lang.as_ref(), dict)?;
    dataset
        .examples
        .iter()
        .map(|e| inject(e, dict, cfg, &mut example_rng(cfg.seed, &e.id)))
        .collect()
}

pub fn write_replacement_log(path: impl AsRef<Path>, rows: &[ReplacementLogRow]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in rows {
        let pos = r.position.to_string();
        writeln!(
            w,
            "{}",
            tsv::join_row(&[r.example_id.as_str(), &pos, &r.original, &r.replacement])
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Human review sampling

/// Ratios shown to reviewers in the first round.
pub const REVIEW_RATIOS: [f64; 3] = [0.05, 0.10, 0.20];
pub const REVIEW_PER_RATIO: usize = 15;
/// Minimum share of realistic utterances, in percent.
pub const REALISM_CUTOFF_PCT: f64 = 95.0;

/// A shuffled review set. Review ids are opaque; the ratio behind each id is
/// only in `ratios` (the sidecar), and `sources` maps back to the input ids.
#[derive(Debug, Clone, PartialEq)]
pub struct ReviewSample<E> {
    pub dataset: Dataset<E>,
    pub ratios: BTreeMap<String, f64>,
    pub sources: BTreeMap<String, String>,
    pub log: Vec<ReplacementLogRow>,
}

/// Draws `per_ratio` distinct examples for each ratio (an example may recur
/// under different ratios), noises each at its ratio, and shuffles.
pub fn make_review_sample<E: Noisable>(
    dataset: &Dataset<E>,
    dict: &FrozenNoiseDictionary,
    ratios: &[f64],
    per_ratio: usize,
    seed: u64,
) -> Result<ReviewSample<E>> {
    check_lang(dataset.lang.as_ref(), dict)?;
    if dataset.len() < per_ratio {
        return Err(Error::Invalid(format!(
            "review sampling needs at least {per_ratio} examples, dataset has {}",
            dataset.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(ratios.len() * per_ratio);
    for (k, &ratio) in ratios.iter().enumerate() {
        let cfg = InjectionConfig::new(ratio, seed)?;
        for idx in rand::seq::index::sample(&mut rng, dataset.len(), per_ratio) {
            let source = &dataset.examples[idx];
            let mut item_rng = example_rng(seed, &format!("review:{k}:{}", source.id()));
            let (noised, rows) = source.noised(dict, &cfg, &mut item_rng);
            items.push((ratio, source.id().to_string(), noised, rows));
        }
    }
    items.shuffle(&mut rng);

    let width = items.len().to_string().len().max(3);
    let mut out = ReviewSample {
        dataset: Dataset {
            task: dataset.task,
            lang: dataset.lang.clone(),
            examples: Vec::with_capacity(items.len()),
        },
        ratios: BTreeMap::new(),
        sources: BTreeMap::new(),
        log: Vec::new(),
    };
    for (i, (ratio, source, noised, rows)) in items.into_iter().enumerate() {
        let id = format!("review-{:0width$}", i + 1);
        out.ratios.insert(id.clone(), ratio);
        out.sources.insert(id.clone(), source);
        out.log.extend(rows.into_iter().map(|r| ReplacementLogRow {
            example_id: r.example_id.replacen(noised.id(), &id, 1),
            ..r
        }));
        out.dataset.examples.push(noised.with_id(id));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Realism {
    Realistic,
    Moderate,
    Unrealistic,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealismTally {
    pub realistic: usize,
    pub total: usize,
}

impl RealismTally {
    pub fn from_marks<'a>(marks: impl IntoIterator<Item = &'a Realism>) -> Self {
        let mut t = RealismTally::default();
        for m in marks {
            t.total += 1;
            t.realistic += usize::from(*m == Realism::Realistic);
        }
        t
    }

    pub fn percent(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            100.0 * self.realistic as f64 / self.total as f64
        }
    }

    pub fn passes(&self, cutoff_pct: f64) -> bool {
        self.total > 0 && self.percent() >= cutoff_pct
    }
}

/// Groups reviewer marks by the hidden ratio recorded in the sidecar.
/// Returns tallies in ascending ratio order.
pub fn tally_by_ratio(
    marks: &BTreeMap<String, Realism>,
    sidecar: &BTreeMap<String, f64>,
) -> Result<Vec<(f64, RealismTally)>> {
    let mut groups: Vec<(f64, RealismTally)> = Vec::new();
    for (id, mark) in marks {
        let ratio = *sidecar
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("review id `{id}` is not in the sidecar")))?;
        let slot = match groups.iter_mut().find(|(r, _)| *r == ratio) {
            Some(slot) => slot,
            None => {
                groups.push((ratio, RealismTally::default()));
                groups.last_mut().unwrap()
            }
        };
        slot.1.total += 1;
        slot.1.realistic += usize::from(*mark == Realism::Realistic);
    }
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(groups)
}

/// Highest ratio whose realism clears the cutoff.
pub fn select_ratio(tallies: &[(f64, RealismTally)], cutoff_pct: f64) -> Option<f64> {
    tallies
        .iter()
        .filter(|(_, t)| t.passes(cutoff_pct))
        .map(|(r, _)| *r)
        .max_by(f64::total_cmp)
}

// ---------------------------------------------------------------------------
// Synthetic English augmentation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Allcaps,
    KeyboardTypo,
}

/// Key → physically adjacent keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyboardLayout {
    adjacent: BTreeMap<char, Vec<char>>,
}

impl KeyboardLayout {
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut adjacent = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || Error::Invalid(format!("keyboard layout line {}: expected `key\\tneighbors`", idx + 1));
            let (key, neighbors) = line.split_once('\t').ok_or_else(bad)?;
            let mut chars = key.chars();
            let (Some(k), None) = (chars.next(), chars.next()) else {
                return Err(bad());
            };
            let n: Vec<char> = neighbors.trim().chars().filter(|c| *c != k).collect();
            if n.is_empty() {
                return Err(bad());
            }
            adjacent.insert(k, n);
        }
        Ok(KeyboardLayout { adjacent })
    }

    pub fn qwerty() -> Self {
        Self::from_tsv(include_str!("../data/qwerty.tsv")).expect("bundled QWERTY layout")
    }

    fn neighbors(&self, c: char) -> Option<&[char]> {
        self.adjacent.get(&c.to_ascii_lowercase()).map(Vec::as_slice)
    }
}

/// Returns a copy of `example` with one synthetic edit. Labels are kept.
/// `Allcaps` uppercases one token; `KeyboardTypo` swaps one character of a
/// multi-character token for an adjacent key. With no eligible token the
/// example comes back unchanged.
pub fn synthetic_augment<R: Rng + ?Sized>(
    example: &LabeledExample,
    kind: AugmentKind,
    layout: &KeyboardLayout,
    rng: &mut R,
) -> LabeledExample {
    let mut out = example.clone();
    if out.tokens.is_empty() {
        return out;
    }
    match kind {
        AugmentKind::Allcaps => {
            let i = rng.gen_range(0..out.tokens.len());
            out.tokens[i] = out.tokens[i].to_uppercase();
        }
        AugmentKind::KeyboardTypo => {
            let eligible: Vec<usize> = (0..out.tokens.len())
                .filter(|&i| {
                    let t = &out.tokens[i];
                    t.chars().count() > 1 && t.chars().any(|c| layout.neighbors(c).is_some())
                })
                .collect();
            let Some(&i) = eligible.choose(rng) else {
                return out;
            };
            let mut chars: Vec<char> = out.tokens[i].chars().collect();
            let positions: Vec<usize> = (0..chars.len())
                .filter(|&j| layout.neighbors(chars[j]).is_some())
                .collect();
            let j = *positions.choose(rng).expect("token was eligible");
            let original = chars[j];
            let mut replacement = *layout
                .neighbors(original)
                .and_then(|n| n.choose(rng))
                .expect("eligible position has neighbors");
            if original.is_uppercase() {
                replacement = replacement.to_ascii_uppercase();
            }
            chars[j] = replacement;
            out.tokens[i] = chars.into_iter().collect();
        }
    }
    out
}
