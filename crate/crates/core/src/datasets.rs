//! Labeled task data: slot-filling / intent (IC-SL), NER and NLI.
//!
//! Sequence-labeling data uses a CoNLL-style block format:
//!
//! ```text
//! # task: ic_sl
//! # lang: en
//!
//! # id: atis-1
//! # intent: flight
//! show	O
//! flights	O
//! to	O
//! boston	B-toloc.city_name
//! ```
//!
//! Lines containing a tab are `token ⇥ tag`; other non-blank lines are
//! `# key: value` metadata. `task` and `lang` belong to the file header, `id`
//! and `intent` to the block that follows. Blocks end at a blank line. A
//! block without `# id:` gets its 1-based block number as id. Fields use the
//! backslash escapes from [`crate::tsv`].
//!
//! NLI data is a TSV with an optional `# lang: xx` first line, a fixed
//! header row, and columns `id ⇥ premise ⇥ hypothesis ⇥ label`, where premise
//! and hypothesis are space-joined tokens.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lang::Lang;
use crate::tsv;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    IcSl,
    Ner,
    Nli,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::IcSl => "ic_sl",
            Task::Ner => "ner",
            Task::Nli => "nli",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ic_sl" => Ok(Task::IcSl),
            "ner" => Ok(Task::Ner),
            "nli" => Ok(Task::Nli),
            other => Err(Error::Invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Tagging scheme element: `O`, `B-type` or `I-type`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Bio<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == "O" {
            return Some(Bio::Outside);
        }
        let (prefix, kind) = tag.split_once('-')?;
        if kind.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Bio::Begin(kind)),
            "I" => Some(Bio::Inside(kind)),
            _ => None,
        }
    }

    pub fn kind(self) -> Option<&'a str> {
        match self {
            Bio::Outside => None,
            Bio::Begin(k) | Bio::Inside(k) => Some(k),
        }
    }
}

/// Tag with its `B-`/`I-` prefix removed; `O` stays `O`.
pub fn strip_bio(tag: &str) -> &str {
    Bio::parse(tag).and_then(Bio::kind).unwrap_or(tag)
}

/// Checks a tag sequence; on failure returns the offending index.
pub fn validate_bio<S: AsRef<str>>(tags: &[S]) -> std::result::Result<(), (usize, String)> {
    let mut prev: Option<&str> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        let bio = Bio::parse(tag).ok_or_else(|| (i, format!("malformed BIO tag `{tag}`")))?;
        if let Bio::Inside(kind) = bio {
            if prev != Some(kind) {
                return Err((i, format!("malformed BIO: `{tag}` does not continue a `{kind}` span")));
            }
        }
        prev = bio.kind();
    }
    Ok(())
}

/// Common view over dataset rows.
pub trait Example {
    fn id(&self) -> &str;
    fn lang(&self) -> &Lang;
    /// Intent or NLI class, when the task has one.
    fn utterance_label(&self) -> Option<&str>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub lang: Lang,
    pub tokens: Vec<String>,
    pub slot_labels: Vec<String>,
    pub utterance_label: Option<String>,
}

impl LabeledExample {
    pub fn validate(&self, task: Task) -> Result<()> {
        let fail = |message: String| Error::InvalidExample {
            id: self.id.clone(),
            message,
        };
        if self.id.is_empty() {
            return Err(fail("empty id".into()));
        }
        if self.tokens.is_empty() {
            return Err(fail("no tokens".into()));
        }
        if self.tokens.iter().any(String::is_empty) {
            return Err(fail("empty token".into()));
        }
        if self.tokens.len() != self.slot_labels.len() {
            return Err(fail(format!(
                "{} tokens but {} slot labels",
                self.tokens.len(),
                self.slot_labels.len()
            )));
        }
        validate_bio(&self.slot_labels).map_err(|(i, m)| fail(format!("position {i}: {m}")))?;
        match (task, &self.utterance_label) {
            (Task::IcSl, None) => Err(fail("missing intent".into())),
            (Task::IcSl, Some(l)) if l.is_empty() => Err(fail("empty intent".into())),
            (Task::Ner, Some(_)) => Err(fail("NER examples carry no intent".into())),
            (Task::Nli, _) => Err(fail("NLI data uses NliExample".into())),
            _ => Ok(()),
        }
    }
}

impl Example for LabeledExample {
    fn id(&self) -> &str {
        &self.id
    }
    fn lang(&self) -> &Lang {
        &self.lang
    }
    fn utterance_label(&self) -> Option<&str> {
        self.utterance_label.as_deref()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl FromStr for NliLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entailment" => Ok(NliLabel::Entailment),
            "neutral" => Ok(NliLabel::Neutral),
            "contradiction" => Ok(NliLabel::Contradiction),
            other => Err(Error::Invalid(format!("unknown label `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub id: String,
    pub lang: Lang,
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub label: NliLabel,
}

impl NliExample {
    pub fn validate(&self) -> Result<()> {
        let fail = |message: &str| Error::InvalidExample {
            id: self.id.clone(),
            message: message.into(),
        };
        if self.id.is_empty() {
            return Err(fail("empty id"));
        }
        for side in [&self.premise, &self.hypothesis] {
            if side.is_empty() {
                return Err(fail("empty premise or hypothesis"));
            }
            if side.iter().any(|t| t.is_empty() || t.chars().any(char::is_whitespace)) {
                return Err(fail("tokens must be non-empty and free of whitespace"));
            }
        }
        Ok(())
    }
}

impl Example for NliExample {
    fn id(&self) -> &str {
        &self.id
    }
    fn lang(&self) -> &Lang {
        &self.lang
    }
    fn utterance_label(&self) -> Option<&str> {
        Some(self.label.as_str())
    }
}

/// An ordered, validated collection of examples of one task and language.
/// `lang` is `None` only for an empty dataset read from a headerless file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset<E> {
    pub task: Task,
    pub lang: Option<Lang>,
    pub examples: Vec<E>,
}

pub type LabeledDataset = Dataset<LabeledExample>;
pub type NliDataset = Dataset<NliExample>;

impl<E: Example> Dataset<E> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn check_common(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.examples {
            if !ids.insert(e.id()) {
                return Err(Error::InvalidExample {
                    id: e.id().to_string(),
                    message: "duplicate id".into(),
                });
            }
            if self.lang.as_ref() != Some(e.lang()) {
                return Err(Error::LangMismatch {
                    expected: self.lang.as_ref().map_or("<none>".into(), Lang::to_string),
                    found: e.lang().to_string(),
                });
            }
        }
        Ok(())
    }
}

impl LabeledDataset {
    pub fn new(task: Task, lang: Option<Lang>, examples: Vec<LabeledExample>) -> Result<Self> {
        let d = Dataset {
            task,
            lang,
            examples,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        for e in &self.examples {
            e.validate(self.task)?;
        }
        self.check_common()
    }
}

impl NliDataset {
    pub fn new(lang: Option<Lang>, examples: Vec<NliExample>) -> Result<Self> {
        let d = Dataset {
            task: Task::Nli,
            lang,
            examples,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.task != Task::Nli {
            return Err(Error::Invalid("NLI dataset with non-NLI task".into()));
        }
        for e in &self.examples {
            e.validate()?;
        }
        self.check_common()
    }
}

// ---------------------------------------------------------------------------
// CoNLL-style block format

struct Block {
    start_line: usize,
    id: Option<String>,
    intent: Option<String>,
    tokens: Vec<String>,
    tags: Vec<String>,
    tag_lines: Vec<usize>,
}

impl Block {
    fn new(line: usize) -> Self {
        Block {
            start_line: line,
            id: None,
            intent: None,
            tokens: Vec::new(),
            tags: Vec::new(),
            tag_lines: Vec::new(),
        }
    }

    fn is_empty(&self) -> bool {
        self.id.is_none() && self.intent.is_none() && self.tokens.is_empty()
    }
}

/// Reads the `# task:` header of a CoNLL-style file, if present.
pub fn conll_header_task(path: impl AsRef<Path>) -> Result<Option<Task>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.contains('\t') {
            break;
        }
        if let Some(value) = line.strip_prefix("# task:") {
            return value
                .trim()
                .parse()
                .map(Some)
                .map_err(|e: Error| Error::parse(path, idx + 1, e.to_string()));
        }
    }
    Ok(None)
}

pub fn read_conll(path: impl AsRef<Path>, task: Task) -> Result<LabeledDataset> {
    let path = path.as_ref();
    if task == Task::Nli {
        return Err(Error::Invalid("NLI data is read with read_nli_tsv".into()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lang: Option<Lang> = None;
    let mut header_done = false;
    let mut examples = Vec::new();
    let mut ids = BTreeSet::new();
    let mut block = Block::new(1);
    let mut block_no = 0usize;

    let mut finish = |block: Block,
                      lang: &Option<Lang>,
                      examples: &mut Vec<LabeledExample>|
     -> Result<()> {
        if block.is_empty() {
            return Ok(());
        }
        block_no += 1;
        let at = |line: usize, m: String| Error::parse(path, line, m);
        if block.tokens.is_empty() {
            return Err(at(block.start_line, "example without tokens".into()));
        }
        let lang = lang
            .clone()
            .ok_or_else(|| at(block.start_line, "missing `# lang:` header".into()))?;
        validate_bio(&block.tags).map_err(|(i, m)| at(block.tag_lines[i], m))?;
        match (task, &block.intent) {
            (Task::IcSl, None) => return Err(at(block.start_line, "missing `# intent:`".into())),
            (Task::Ner, Some(_)) => {
                return Err(at(block.start_line, "`# intent:` in NER data".into()))
            }
            _ => {}
        }
        let id = block.id.unwrap_or_else(|| block_no.to_string());
        if !ids.insert(id.clone()) {
            return Err(at(block.start_line, format!("duplicate id `{id}`")));
        }
        examples.push(LabeledExample {
            id,
            lang,
            tokens: block.tokens,
            slot_labels: block.tags,
            utterance_label: block.intent,
        });
        Ok(())
    };

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |m: String| Error::parse(path, line_no, m);
        if line.trim().is_empty() {
            let done = std::mem::replace(&mut block, Block::new(line_no + 1));
            if !done.is_empty() {
                header_done = true;
            }
            finish(done, &lang, &mut examples)?;
            continue;
        }
        if line.contains('\t') {
            let fields = tsv::split_row(&line).ok_or_else(|| at("bad escape sequence".into()))?;
            let [token, tag]: [String; 2] = fields
                .try_into()
                .map_err(|_| at("expected `token<TAB>tag`".into()))?;
            if token.is_empty() {
                return Err(at("empty token".into()));
            }
            block.tokens.push(token);
            block.tags.push(tag);
            block.tag_lines.push(line_no);
            continue;
        }
        let Some((key, value)) = line.strip_prefix('#').and_then(|r| r.split_once(':')) else {
            return Err(at(format!("expected `token<TAB>tag` or `# key: value`, got `{line}`")));
        };
        let value = tsv::unescape(value.trim()).ok_or_else(|| at("bad escape sequence".into()))?;
        match key.trim() {
            "task" | "lang" if header_done || !block.tokens.is_empty() => {
                return Err(at(format!("`{}` must appear in the file header", key.trim())));
            }
            "task" => {
                let t: Task = value.parse().map_err(|e: Error| at(e.to_string()))?;
                if t != task {
                    return Err(at(format!("file declares task `{t}`, expected `{task}`")));
                }
            }
            "lang" => lang = Some(Lang::try_from(value).map_err(|e| at(e.to_string()))?),
            "id" if block.id.is_none() && block.tokens.is_empty() => block.id = Some(value),
            "intent" if block.intent.is_none() && block.tokens.is_empty() => {
                block.intent = Some(value)
            }
            other => return Err(at(format!("unexpected metadata key `{other}`"))),
        }
    }
    finish(block, &lang, &mut examples)?;
    Ok(Dataset {
        task,
        lang,
        examples,
    })
}

pub fn write_conll(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# task: {}", dataset.task).map_err(io)?;
    if let Some(lang) = &dataset.lang {
        writeln!(w, "# lang: {lang}").map_err(io)?;
    }
    for e in &dataset.examples {
        writeln!(w).map_err(io)?;
        writeln!(w, "# id: {}", tsv::escape(&e.id)).map_err(io)?;
        if let Some(intent) = &e.utterance_label {
            writeln!(w, "# intent: {}", tsv::escape(intent)).map_err(io)?;
        }
        for (tok, tag) in e.tokens.iter().zip(&e.slot_labels) {
            writeln!(w, "{}", tsv::join_row(&[tok, tag])).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// NLI TSV

const NLI_HEADER: &str = "id\tpremise\thypothesis\tlabel";

pub fn read_nli_tsv(path: impl AsRef<Path>) -> Result<NliDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lang = None;
    let mut seen_header = false;
    let mut ids = BTreeSet::new();
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let at = |m: String| Error::parse(path, line_no, m);
        if line.is_empty() {
            continue;
        }
        if !seen_header {
            if let Some(code) = line.strip_prefix("# lang:") {
                if lang.is_some() {
                    return Err(at("repeated `# lang:` line".into()));
                }
                lang = Some(Lang::try_from(code.trim().to_string()).map_err(|e| at(e.to_string()))?);
                continue;
            }
            if line != NLI_HEADER {
                return Err(at(format!("expected header `{}`", NLI_HEADER.escape_debug())));
            }
            seen_header = true;
            continue;
        }
        let fields = tsv::split_row(&line).ok_or_else(|| at("bad escape sequence".into()))?;
        let [id, premise, hypothesis, label]: [String; 4] = fields
            .try_into()
            .map_err(|_| at("expected 4 tab-separated columns".into()))?;
        let label: NliLabel = label.parse().map_err(|e: Error| at(e.to_string()))?;
        let lang = lang
            .clone()
            .ok_or_else(|| at("missing `# lang:` line".into()))?;
        if !ids.insert(id.clone()) {
            return Err(at(format!("duplicate id `{id}`")));
        }
        let split = |s: &str| -> Vec<String> { s.split(' ').map(String::from).collect() };
        let ex = NliExample {
            id,
            lang,
            premise: split(&premise),
            hypothesis: split(&hypothesis),
            label,
        };
        ex.validate().map_err(|e| at(e.to_string()))?;
        examples.push(ex);
    }
    Ok(Dataset {
        task: Task::Nli,
        lang,
        examples,
    })
}

pub fn write_nli_tsv(dataset: &NliDataset, path: impl AsRef<Path>) -> Result<()> {
    dataset.validate()?;
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(lang) = &dataset.lang {
        writeln!(w, "# lang: {lang}").map_err(io)?;
    }
    writeln!(w, "{NLI_HEADER}").map_err(io)?;
    for e in &dataset.examples {
        let row = tsv::join_row(&[
            e.id.as_str(),
            &e.premise.join(" "),
            &e.hypothesis.join(" "),
            e.label.as_str(),
        ]);
        writeln!(w, "{row}").map_err(io)?;
    }
    w.flush().map_err(io)
}
