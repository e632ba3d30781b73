//! Error-correction dictionaries: word-pair filtering, frequency counting,
//! normalization to probabilities and JSON persistence.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{is_punct, Decision, WordDelta};
use crate::error::{Error, Result};
use crate::lang::Lang;

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordReject {
    /// Chinese and Japanese pairs only enter through the reading predicates.
    Cjk,
    Numeric,
    EditDistance,
}

fn numeric_or_punct(word: &str) -> bool {
    word.chars().all(|c| c.is_numeric() || is_punct(c))
}

/// Keeps typo-like word edits: edit distance 1 or 2, and neither word made
/// only of digits and punctuation.
pub fn word_pair_filter(d: &WordDelta) -> Decision<WordReject> {
    if d.lang.is_cjk() {
        return Decision::Reject(WordReject::Cjk);
    }
    if numeric_or_punct(&d.original) || numeric_or_punct(&d.edited) {
        return Decision::Reject(WordReject::Numeric);
    }
    match levenshtein(&d.original, &d.edited) {
        1 | 2 => Decision::Accept,
        _ => Decision::Reject(WordReject::EditDistance),
    }
}

// ---------------------------------------------------------------------------
// Lookup tables for CJK predicates

/// A `key ⇥ value` table. Lines starting with `#` are comments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LookupTable {
    map: BTreeMap<String, String>,
}

impl LookupTable {
    pub fn from_tsv(text: &str) -> std::result::Result<Self, String> {
        let mut map = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('\t')
                .ok_or_else(|| format!("line {}: expected `key\\tvalue`", idx + 1))?;
            if map.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(format!("line {}: duplicate key `{k}`", idx + 1));
            }
        }
        Ok(LookupTable { map })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        LookupTable::from_tsv(&text).map_err(|m| Error::parse(path, 0, m))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.map.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn bundled_pinyin() -> Self {
        Self::from_tsv(include_str!("../data/pinyin.tsv")).expect("bundled pinyin table")
    }

    pub fn bundled_pos() -> Self {
        Self::from_tsv(include_str!("../data/pos.tsv")).expect("bundled POS table")
    }

    pub fn bundled_readings() -> Self {
        Self::from_tsv(include_str!("../data/readings.tsv")).expect("bundled reading table")
    }
}

/// Character → toneless pinyin, counting lookups that hit an unknown
/// character.
#[derive(Debug, Default)]
pub struct PinyinTable {
    table: LookupTable,
    misses: AtomicUsize,
}

impl PinyinTable {
    pub fn new(table: LookupTable) -> Self {
        PinyinTable {
            table,
            misses: AtomicUsize::new(0),
        }
    }

    pub fn bundled() -> Self {
        Self::new(LookupTable::bundled_pinyin())
    }

    /// Number of comparisons abandoned because a character had no entry.
    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn syllables(&self, word: &str) -> Option<Vec<&str>> {
        word.chars()
            .map(|c| self.table.get(c.encode_utf8(&mut [0; 4])))
            .collect()
    }
}

/// Same toneless pinyin, different characters.
pub fn is_homophone_pair(a: &str, b: &str, pinyin: &PinyinTable) -> bool {
    if a == b {
        return false;
    }
    match (pinyin.syllables(a), pinyin.syllables(b)) {
        (Some(x), Some(y)) => x == y,
        _ => {
            pinyin.misses.fetch_add(1, Ordering::Relaxed);
            false
        }
    }
}

const CONTENT_TAGS: [&str; 3] = ["noun", "verb", "adverb"];

/// A word with a known tag outside {noun, verb, adverb}.
pub fn is_function_word_synonym_candidate(word: &str, pos: &LookupTable) -> bool {
    pos.get(word)
        .is_some_and(|tag| !CONTENT_TAGS.contains(&tag.to_lowercase().as_str()))
}

fn is_kanji(c: char) -> bool {
    matches!(c, '\u{4E00}'..='\u{9FFF}' | '\u{3400}'..='\u{4DBF}' | '\u{F900}'..='\u{FAFF}')
}

/// Token-aligned sentences whose readings agree while at least one
/// kanji-bearing token differs in surface form. Tokens without kanji read as
/// themselves; a kanji token missing from the table fails the check.
pub fn kanji_same_reading<S: AsRef<str>>(a: &[S], b: &[S], readings: &LookupTable) -> bool {
    if a.len() != b.len() {
        return false;
    }
    let reading = |t: &str| -> Option<String> {
        if t.chars().any(is_kanji) {
            readings.get(t).map(String::from)
        } else {
            Some(readings.get(t).unwrap_or(t).to_string())
        }
    };
    let mut kanji_differs = false;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.as_ref(), y.as_ref());
        match (reading(x), reading(y)) {
            (Some(rx), Some(ry)) if rx == ry => {}
            _ => return false,
        }
        if x != y && (x.chars().any(is_kanji) || y.chars().any(is_kanji)) {
            kanji_differs = true;
        }
    }
    kanji_differs
}

/// Bundled resources for admitting Chinese and Japanese word pairs.
#[derive(Debug)]
pub struct CjkResources {
    pub pinyin: PinyinTable,
    pub pos: LookupTable,
    pub readings: LookupTable,
}

impl Default for CjkResources {
    fn default() -> Self {
        CjkResources {
            pinyin: PinyinTable::bundled(),
            pos: LookupTable::bundled_pos(),
            readings: LookupTable::bundled_readings(),
        }
    }
}

impl CjkResources {
    /// Chinese: homophones, or a swap between two function words.
    /// Japanese: same reading with a different kanji spelling.
    /// Other languages: never.
    pub fn admits(&self, d: &WordDelta) -> bool {
        match d.lang.as_str() {
            "zh" => {
                is_homophone_pair(&d.original, &d.edited, &self.pinyin)
                    || (d.original != d.edited
                        && is_function_word_synonym_candidate(&d.original, &self.pos)
                        && is_function_word_synonym_candidate(&d.edited, &self.pos))
            }
            "ja" => kanji_same_reading(&[&d.original], &[&d.edited], &self.readings),
            _ => false,
        }
    }
}

/// Noise categories observed by annotators.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    Typo,
    Misspelling,
    Preposition,
    Diacritic,
    KanjiConversion,
    Homophone,
    Synonym,
    Anglicized,
    Other(String),
}

// ---------------------------------------------------------------------------
// Dictionaries

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn is_latin_letter(c: char) -> bool {
    c.is_ascii_alphabetic()
        || matches!(c, '\u{00C0}'..='\u{024F}' | '\u{1E00}'..='\u{1EFF}')
}

/// Lookup key for a surface token: NFC, and lowercased when every letter
/// is Latin.
pub fn lookup_key(token: &str) -> String {
    let n = nfc(token);
    let mut letters = n.chars().filter(|c| c.is_alphabetic()).peekable();
    if letters.peek().is_some() && letters.all(is_latin_letter) {
        n.to_lowercase()
    } else {
        n
    }
}

/// Counts of observed (correct → noisy) word pairs for one language.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoiseDictionaryBuilder {
    lang: Lang,
    counts: BTreeMap<String, BTreeMap<String, u64>>,
}

impl NoiseDictionaryBuilder {
    pub fn new(lang: Lang) -> Self {
        NoiseDictionaryBuilder {
            lang,
            counts: BTreeMap::new(),
        }
    }

    pub fn lang(&self) -> &Lang {
        &self.lang
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn counts(&self) -> &BTreeMap<String, BTreeMap<String, u64>> {
        &self.counts
    }

    /// Records one occurrence of `noisy` written where `correct` was meant.
    pub fn add_pair(&mut self, correct: &str, noisy: &str) -> Result<()> {
        self.add_count(correct, noisy, 1)
    }

    pub fn add_count(&mut self, correct: &str, noisy: &str, count: u64) -> Result<()> {
        let (correct, noisy) = (nfc(correct), nfc(noisy));
        if correct.is_empty() || noisy.is_empty() || correct == noisy {
            return Err(Error::DictionarySchema {
                key: correct,
                message: format!("variant `{noisy}` must be non-empty and differ from its key"),
            });
        }
        if count == 0 {
            return Ok(());
        }
        *self
            .counts
            .entry(correct)
            .or_default()
            .entry(noisy)
            .or_default() += count;
        Ok(())
    }

    /// A revision turned `original` into `edited`, so `edited` is the
    /// correct form and `original` the noisy one.
    pub fn add_delta(&mut self, d: &WordDelta) -> Result<()> {
        self.check_lang(&d.lang)?;
        self.add_pair(&d.edited, &d.original)
    }

    fn check_lang(&self, other: &Lang) -> Result<()> {
        if *other != self.lang {
            return Err(Error::LangMismatch {
                expected: self.lang.to_string(),
                found: other.to_string(),
            });
        }
        Ok(())
    }

    /// Pointwise sum of counts.
    pub fn merge(mut self, other: &NoiseDictionaryBuilder) -> Result<Self> {
        self.check_lang(&other.lang)?;
        for (correct, variants) in &other.counts {
            let entry = self.counts.entry(correct.clone()).or_default();
            for (noisy, n) in variants {
                *entry.entry(noisy.clone()).or_default() += n;
            }
        }
        Ok(self)
    }

    pub fn freeze(&self) -> Result<FrozenNoiseDictionary> {
        if self.counts.is_empty() {
            return Err(Error::EmptyDictionary);
        }
        let entries = self
            .counts
            .iter()
            .map(|(correct, variants)| {
                let total: u64 = variants.values().sum();
                let mut probs: Vec<(String, f64)> = variants
                    .iter()
                    .map(|(v, n)| (v.clone(), *n as f64 / total as f64))
                    .collect();
                sort_variants(&mut probs);
                (correct.clone(), probs)
            })
            .collect();
        Ok(FrozenNoiseDictionary::from_entries(self.lang.clone(), entries))
    }
}

fn sort_variants(v: &mut [(String, f64)]) {
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

/// Immutable correct-word → weighted noisy variants map.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenNoiseDictionary {
    lang: Lang,
    entries: BTreeMap<String, Vec<(String, f64)>>,
    folded: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct DictionaryFile {
    lang: Lang,
    entries: BTreeMap<String, Vec<(String, f64)>>,
}

const SUM_TOLERANCE: f64 = 1e-9;

impl FrozenNoiseDictionary {
    fn from_entries(lang: Lang, entries: BTreeMap<String, Vec<(String, f64)>>) -> Self {
        let mut folded = BTreeMap::new();
        for key in entries.keys() {
            folded.entry(lookup_key(key)).or_insert_with(|| key.clone());
        }
        FrozenNoiseDictionary {
            lang,
            entries,
            folded,
        }
    }

    /// Validates and normalizes entries read from an external source.
    pub fn from_raw(lang: Lang, entries: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        let mut clean = BTreeMap::new();
        for (key, mut variants) in entries {
            let fail = |message: String| Error::DictionarySchema {
                key: key.clone(),
                message,
            };
            if key.is_empty() {
                return Err(fail("empty key".into()));
            }
            if variants.is_empty() {
                return Err(fail("no variants".into()));
            }
            let mut sum = 0.0;
            for (v, p) in &variants {
                if v.is_empty() || *v == key {
                    return Err(fail(format!("invalid variant `{v}`")));
                }
                if !(p.is_finite() && *p > 0.0) {
                    return Err(fail(format!("probability {p} of `{v}` is not positive")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SUM_TOLERANCE {
                return Err(fail(format!("probabilities sum to {sum}, not 1")));
            }
            sort_variants(&mut variants);
            if variants.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(fail("duplicate variant".into()));
            }
            clean.insert(key, variants);
        }
        Ok(Self::from_entries(lang, clean))
    }

    pub fn lang(&self) -> &Lang {
        &self.lang
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &BTreeMap<String, Vec<(String, f64)>> {
        &self.entries
    }

    /// Finds the entry for a surface token: exact NFC match first, then the
    /// case-folded key for Latin-script tokens.
    pub fn lookup(&self, token: &str) -> Option<(&str, &[(String, f64)])> {
        let exact = nfc(token);
        let key = if self.entries.contains_key(&exact) {
            exact
        } else {
            self.folded.get(&lookup_key(token))?.clone()
        };
        self.entries
            .get_key_value(&key)
            .map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Draws a variant of `token` in proportion to its probability.
    pub fn sample<R: Rng + ?Sized>(&self, token: &str, rng: &mut R) -> Option<&str> {
        let (_, variants) = self.lookup(token)?;
        Some(sample_weighted(variants, rng.gen::<f64>()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, &self.to_file())?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let raw: DictionaryFile = serde_json::from_reader(BufReader::new(file))?;
        Self::from_raw(raw.lang, raw.entries)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: DictionaryFile = serde_json::from_str(text)?;
        Self::from_raw(raw.lang, raw.entries)
    }

    fn to_file(&self) -> DictionaryFile {
        DictionaryFile {
            lang: self.lang.clone(),
            entries: self.entries.clone(),
        }
    }
}

/// Inverse-CDF pick with `u ∈ [0, 1)`; rounding slack falls to the last
/// variant.
fn sample_weighted(variants: &[(String, f64)], u: f64) -> &str {
    let mut acc = 0.0;
    for (v, p) in variants {
        acc += p;
        if u < acc {
            return v;
        }
    }
    &variants[variants.len() - 1].0
}
