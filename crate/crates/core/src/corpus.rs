//! Revision-pair ingestion and word-level edit mining.
//!
//! A revision pair is two consecutive versions of the same text. Both sides
//! are split into sentences, the sentence lists are aligned, and each aligned
//! pair that survives [`pair_filter`] is diffed at token level. Single-token
//! substitutions become [`WordDelta`]s, the raw material for noise
//! dictionaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Lang;
use crate::noisedict::levenshtein;
use crate::tsv;

/// Two consecutive versions of a text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionPair {
    pub old_text: String,
    pub new_text: String,
    pub lang: Lang,
}

/// A line the revision reader skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineWarning {
    pub line: usize,
    pub message: String,
}

#[derive(Deserialize)]
struct RawRevision {
    old: String,
    new: String,
    lang: String,
}

/// Streaming reader over a revision-pairs JSONL file.
///
/// Malformed lines are skipped and recorded in [`RevisionReader::warnings`];
/// only I/O failures surface as `Err` items.
pub struct RevisionReader {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
    line_no: usize,
    custom_langs: BTreeSet<String>,
    warnings: Vec<LineWarning>,
}

pub fn read_revision_stream(path: impl AsRef<Path>) -> Result<RevisionReader> {
    RevisionReader::open(path, std::iter::empty::<&str>())
}

impl RevisionReader {
    /// Opens `path`; `custom_langs` are accepted in addition to the
    /// supported language set.
    pub fn open<I, S>(path: impl AsRef<Path>, custom_langs: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Ok(RevisionReader {
            path,
            lines: BufReader::new(file).lines(),
            line_no: 0,
            custom_langs: custom_langs.into_iter().map(Into::into).collect(),
            warnings: Vec::new(),
        })
    }

    pub fn warnings(&self) -> &[LineWarning] {
        &self.warnings
    }

    fn parse_line(&self, line: &str) -> std::result::Result<RevisionPair, String> {
        let raw: RawRevision = serde_json::from_str(line).map_err(|e| e.to_string())?;
        if raw.old.trim().is_empty() || raw.new.trim().is_empty() {
            return Err("empty `old` or `new` text".into());
        }
        let lang = match Lang::parse(&raw.lang) {
            Ok(l) => l,
            Err(_) if self.custom_langs.contains(&raw.lang) => Lang::custom(&raw.lang)
                .map_err(|_| format!("invalid custom language `{}`", raw.lang))?,
            Err(_) => return Err(format!("unsupported language `{}`", raw.lang)),
        };
        Ok(RevisionPair {
            old_text: raw.old,
            new_text: raw.new,
            lang,
        })
    }
}

impl Iterator for RevisionReader {
    type Item = Result<RevisionPair>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(Error::io(&self.path, e))),
            };
            self.line_no += 1;
            if line.trim().is_empty() {
                continue;
            }
            match self.parse_line(&line) {
                Ok(pair) => return Some(Ok(pair)),
                Err(message) => self.warnings.push(LineWarning {
                    line: self.line_no,
                    message,
                }),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sentence splitting

/// Splits running text into sentences.
pub trait SentenceSplitter: Send + Sync {
    fn split(&self, text: &str) -> Vec<String>;
}

const ABBREVIATIONS_FIXTURE: &str = include_str!("../data/abbreviations.txt");

fn bundled_abbreviations() -> &'static BTreeSet<String> {
    static ABBR: OnceLock<BTreeSet<String>> = OnceLock::new();
    ABBR.get_or_init(|| {
        ABBREVIATIONS_FIXTURE
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect()
    })
}

/// Rule-based splitter: a sentence ends at `.`, `!`, `?` followed by
/// whitespace or an uppercase letter, or right after `。`, `！`, `？`.
/// A period after a listed abbreviation or a single capital initial does not
/// end a sentence.
#[derive(Debug, Clone)]
pub struct RuleSplitter {
    abbreviations: BTreeSet<String>,
}

impl Default for RuleSplitter {
    fn default() -> Self {
        RuleSplitter {
            abbreviations: bundled_abbreviations().clone(),
        }
    }
}

impl RuleSplitter {
    pub fn with_abbreviations<I, S>(abbreviations: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        RuleSplitter {
            abbreviations: abbreviations
                .into_iter()
                .map(|s| s.as_ref().to_lowercase())
                .collect(),
        }
    }

    fn is_abbreviation(&self, chars: &[char], period: usize) -> bool {
        let start = chars[..period]
            .iter()
            .rposition(|c| c.is_whitespace())
            .map_or(0, |p| p + 1);
        let word: String = chars[start..period]
            .iter()
            .skip_while(|c| is_punct(**c) && **c != '.')
            .collect();
        let mut letters = word.chars().filter(|c| c.is_alphabetic());
        let initial = letters.next().is_some_and(char::is_uppercase)
            && letters.next().is_none()
            && !word.contains('.');
        initial || self.abbreviations.contains(&word.to_lowercase())
    }
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '}' | '”' | '’' | '»' | '」' | '』' | '）')
}

impl SentenceSplitter for RuleSplitter {
    fn split(&self, text: &str) -> Vec<String> {
        let chars: Vec<char> = text.chars().collect();
        let mut sentences = Vec::new();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            let wide = matches!(c, '。' | '！' | '？');
            if !(wide || matches!(c, '.' | '!' | '?')) {
                i += 1;
                continue;
            }
            let mut end = i + 1;
            while end < chars.len()
                && (matches!(chars[end], '.' | '!' | '?' | '。' | '！' | '？') || is_closer(chars[end]))
            {
                end += 1;
            }
            let boundary = if wide || end == chars.len() {
                true
            } else {
                let next = chars[end];
                let follows = next.is_whitespace() || next.is_uppercase();
                follows && !(c == '.' && self.is_abbreviation(&chars, i))
            };
            if boundary {
                push_trimmed(&mut sentences, &chars[start..end]);
                start = end;
            }
            i = end;
        }
        push_trimmed(&mut sentences, &chars[start..]);
        sentences
    }
}

fn push_trimmed(out: &mut Vec<String>, chars: &[char]) {
    let s: String = chars.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

// ---------------------------------------------------------------------------
// Tokenization

/// Splits a sentence into tokens.
pub trait Tokenizer: Send + Sync {
    fn tokenize(&self, sentence: &str) -> Vec<String>;
}

/// Whitespace split, then leading and trailing punctuation detached one
/// character per token. Word-internal punctuation (`don't`, `e-mail`) stays.
#[derive(Debug, Clone, Copy, Default)]
pub struct DefaultTokenizer;

pub(crate) fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '。' | '、'
                | '，'
                | '！'
                | '？'
                | '：'
                | '；'
                | '「'
                | '」'
                | '『'
                | '』'
                | '（'
                | '）'
                | '《'
                | '》'
                | '“'
                | '”'
                | '‘'
                | '’'
                | '«'
                | '»'
                | '¿'
                | '¡'
                | '…'
                | '–'
                | '—'
                | '·'
                | '।'
        )
}

impl Tokenizer for DefaultTokenizer {
    fn tokenize(&self, sentence: &str) -> Vec<String> {
        let mut tokens = Vec::new();
        for word in sentence.split_whitespace() {
            let chars: Vec<char> = word.chars().collect();
            let lead = chars.iter().take_while(|c| is_punct(**c)).count();
            if lead == chars.len() {
                tokens.extend(chars.iter().map(|c| c.to_string()));
                continue;
            }
            let trail = chars.iter().rev().take_while(|c| is_punct(**c)).count();
            tokens.extend(chars[..lead].iter().map(|c| c.to_string()));
            tokens.push(chars[lead..chars.len() - trail].iter().collect());
            tokens.extend(chars[chars.len() - trail..].iter().map(|c| c.to_string()));
        }
        tokens
    }
}

/// Tokenizes with the default rule. See [`TextTools`] for per-language
/// overrides.
pub fn tokenize(sentence: &str, lang: &Lang) -> Vec<String> {
    TextTools::default().tokenize(sentence, lang)
}

pub fn split_sentences(text: &str, lang: &Lang) -> Vec<String> {
    TextTools::default().split_sentences(text, lang)
}

/// Per-language splitter and tokenizer registry.
pub struct TextTools {
    splitter: Box<dyn SentenceSplitter>,
    tokenizer: Box<dyn Tokenizer>,
    splitters: BTreeMap<Lang, Box<dyn SentenceSplitter>>,
    tokenizers: BTreeMap<Lang, Box<dyn Tokenizer>>,
}

impl Default for TextTools {
    fn default() -> Self {
        TextTools {
            splitter: Box::new(RuleSplitter::default()),
            tokenizer: Box::new(DefaultTokenizer),
            splitters: BTreeMap::new(),
            tokenizers: BTreeMap::new(),
        }
    }
}

impl TextTools {
    pub fn with_tokenizer(mut self, lang: Lang, t: impl Tokenizer + 'static) -> Self {
        self.tokenizers.insert(lang, Box::new(t));
        self
    }

    pub fn with_splitter(mut self, lang: Lang, s: impl SentenceSplitter + 'static) -> Self {
        self.splitters.insert(lang, Box::new(s));
        self
    }

    pub fn tokenize(&self, sentence: &str, lang: &Lang) -> Vec<String> {
        self.tokenizers
            .get(lang)
            .unwrap_or(&self.tokenizer)
            .tokenize(sentence)
    }

    pub fn split_sentences(&self, text: &str, lang: &Lang) -> Vec<String> {
        self.splitters
            .get(lang)
            .unwrap_or(&self.splitter)
            .split(text)
    }
}

// ---------------------------------------------------------------------------
// Sentence pairs and filtering

/// A before/after sentence pair, kept both raw and tokenized.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub before: Vec<String>,
    pub after: Vec<String>,
    pub before_text: String,
    pub after_text: String,
    pub lang: Lang,
}

impl SentencePair {
    /// Tokenizes both sides. Returns `None` when either side has no tokens.
    pub fn from_raw(before: &str, after: &str, lang: Lang, tools: &TextTools) -> Option<Self> {
        let b = tools.tokenize(before, &lang);
        let a = tools.tokenize(after, &lang);
        if b.is_empty() || a.is_empty() {
            return None;
        }
        Some(SentencePair {
            before: b,
            after: a,
            before_text: before.to_string(),
            after_text: after.to_string(),
            lang,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairReject {
    Length,
    TokenDiff,
    RelEditDistance,
}

/// Outcome of a filter: accept, or reject with a reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision<R> {
    Accept,
    Reject(R),
}

impl<R> Decision<R> {
    pub fn is_accept(&self) -> bool {
        matches!(self, Decision::Accept)
    }
}

/// Thresholds for [`pair_filter`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairFilter {
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Token-count difference must be strictly below this.
    pub token_diff_below: usize,
    /// Character edit distance may be at most this percentage of the shorter
    /// sentence's character length.
    pub max_rel_edit_percent: usize,
}

impl Default for PairFilter {
    fn default() -> Self {
        PairFilter {
            min_tokens: 2,
            max_tokens: 120,
            token_diff_below: 5,
            max_rel_edit_percent: 30,
        }
    }
}

impl PairFilter {
    pub fn check(&self, p: &SentencePair) -> Decision<PairReject> {
        let range = self.min_tokens..=self.max_tokens;
        if !range.contains(&p.before.len()) || !range.contains(&p.after.len()) {
            return Decision::Reject(PairReject::Length);
        }
        if p.before.len().abs_diff(p.after.len()) >= self.token_diff_below {
            return Decision::Reject(PairReject::TokenDiff);
        }
        let shorter = p
            .before_text
            .chars()
            .count()
            .min(p.after_text.chars().count());
        let distance = levenshtein(&p.before_text, &p.after_text);
        if distance * 100 > self.max_rel_edit_percent * shorter {
            return Decision::Reject(PairReject::RelEditDistance);
        }
        Decision::Accept
    }
}

pub fn pair_filter(p: &SentencePair) -> Decision<PairReject> {
    PairFilter::default().check(p)
}

// ---------------------------------------------------------------------------
// Alignment and delta extraction

/// A single-word edit observed between two revisions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WordDelta {
    pub original: String,
    pub edited: String,
    pub lang: Lang,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Keep,
    Delete,
    Insert,
}

/// LCS edit script: `Keep` consumes one item from each side, `Delete` one
/// from `a`, `Insert` one from `b`.
fn lcs_script<T: PartialEq>(a: &[T], b: &[T]) -> Vec<Op> {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..] and b[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                suffix[i + 1][j + 1] + 1
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut ops = Vec::with_capacity(n + m);
    let (mut i, mut j) = (0, 0);
    while i < n || j < m {
        if i < n && j < m && a[i] == b[j] {
            ops.push(Op::Keep);
            i += 1;
            j += 1;
        } else if j == m || (i < n && suffix[i + 1][j] >= suffix[i][j + 1]) {
            ops.push(Op::Delete);
            i += 1;
        } else {
            ops.push(Op::Insert);
            j += 1;
        }
    }
    ops
}

/// Maximal runs of non-`Keep` ops as `(a_range, b_range)`.
fn changed_segments(ops: &[Op]) -> Vec<(std::ops::Range<usize>, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let (mut i, mut j) = (0, 0);
    let mut k = 0;
    while k < ops.len() {
        if ops[k] == Op::Keep {
            i += 1;
            j += 1;
            k += 1;
            continue;
        }
        let (si, sj) = (i, j);
        while k < ops.len() && ops[k] != Op::Keep {
            match ops[k] {
                Op::Delete => i += 1,
                Op::Insert => j += 1,
                Op::Keep => unreachable!(),
            }
            k += 1;
        }
        out.push((si..i, sj..j));
    }
    out
}

/// Token-level LCS diff of an accepted pair. Only one-token-for-one-token
/// replacements are returned; insertions, deletions and longer replaced
/// segments are dropped.
pub fn extract_word_deltas(p: &SentencePair) -> Vec<WordDelta> {
    let ops = lcs_script(&p.before, &p.after);
    changed_segments(&ops)
        .into_iter()
        .filter(|(a, b)| a.len() == 1 && b.len() == 1)
        .map(|(a, b)| WordDelta {
            original: p.before[a.start].clone(),
            edited: p.after[b.start].clone(),
            lang: p.lang.clone(),
        })
        .collect()
}

/// Pairs changed sentences across two versions. Sentences shared verbatim
/// anchor an LCS alignment; inside each gap between anchors, sentences are
/// paired by position when both sides have the same count and skipped
/// otherwise.
pub fn align_sentences(old: &[String], new: &[String]) -> Vec<(String, String)> {
    let ops = lcs_script(old, new);
    changed_segments(&ops)
        .into_iter()
        .filter(|(a, b)| a.len() == b.len())
        .flat_map(|(a, b)| a.zip(b).map(|(i, j)| (old[i].clone(), new[j].clone())))
        .collect()
}

// ---------------------------------------------------------------------------
// Mining driver

/// Counters accumulated while mining.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub revisions: u64,
    pub sentence_pairs: u64,
    pub accepted: u64,
    pub rejected_length: u64,
    pub rejected_token_diff: u64,
    pub rejected_rel_edit_distance: u64,
    pub deltas: u64,
}

impl MiningStats {
    pub fn absorb(&mut self, other: &MiningStats) {
        self.revisions += other.revisions;
        self.sentence_pairs += other.sentence_pairs;
        self.accepted += other.accepted;
        self.rejected_length += other.rejected_length;
        self.rejected_token_diff += other.rejected_token_diff;
        self.rejected_rel_edit_distance += other.rejected_rel_edit_distance;
        self.deltas += other.deltas;
    }
}

#[derive(Default)]
pub struct Miner {
    pub tools: TextTools,
    pub filter: PairFilter,
}

impl Miner {
    /// Mines one revision pair. Pure: the result depends only on `rev`.
    pub fn mine_revision(&self, rev: &RevisionPair) -> (Vec<WordDelta>, MiningStats) {
        let mut stats = MiningStats {
            revisions: 1,
            ..MiningStats::default()
        };
        let old = self.tools.split_sentences(&rev.old_text, &rev.lang);
        let new = self.tools.split_sentences(&rev.new_text, &rev.lang);
        let mut deltas = Vec::new();
        for (before, after) in align_sentences(&old, &new) {
            let Some(pair) = SentencePair::from_raw(&before, &after, rev.lang.clone(), &self.tools)
            else {
                continue;
            };
            stats.sentence_pairs += 1;
            match self.filter.check(&pair) {
                Decision::Accept => {
                    stats.accepted += 1;
                    deltas.extend(extract_word_deltas(&pair));
                }
                Decision::Reject(PairReject::Length) => stats.rejected_length += 1,
                Decision::Reject(PairReject::TokenDiff) => stats.rejected_token_diff += 1,
                Decision::Reject(PairReject::RelEditDistance) => {
                    stats.rejected_rel_edit_distance += 1
                }
            }
        }
        stats.deltas = deltas.len() as u64;
        (deltas, stats)
    }

    pub fn mine<'a, I>(&self, revisions: I) -> (Vec<WordDelta>, MiningStats)
    where
        I: IntoIterator<Item = &'a RevisionPair>,
    {
        let mut all = Vec::new();
        let mut stats = MiningStats::default();
        for rev in revisions {
            let (d, s) = self.mine_revision(rev);
            all.extend(d);
            stats.absorb(&s);
        }
        (all, stats)
    }
}

// ---------------------------------------------------------------------------
// Delta TSV

pub fn write_deltas(path: impl AsRef<Path>, deltas: &[WordDelta]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for d in deltas {
        writeln!(w, "{}", tsv::join_row(&[&d.original, &d.edited, d.lang.as_str()]))
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_deltas(path: impl AsRef<Path>) -> Result<Vec<WordDelta>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let fields = tsv::split_row(&line)
            .ok_or_else(|| Error::parse(path, idx + 1, "bad escape sequence"))?;
        let [original, edited, lang]: [String; 3] = fields
            .try_into()
            .map_err(|_| Error::parse(path, idx + 1, "expected 3 tab-separated fields"))?;
        if original.is_empty() || edited.is_empty() || original == edited {
            return Err(Error::parse(path, idx + 1, "delta words must be non-empty and differ"));
        }
        let lang = Lang::try_from(lang).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?;
        out.push(WordDelta {
            original,
            edited,
            lang,
        });
    }
    Ok(out)
}
