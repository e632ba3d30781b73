//! Command-line driver for the noisebench pipeline.
//!
//! Settings come from an optional TOML file with one flat section per
//! subcommand; command-line flags override file values. Every subcommand
//! validates its settings before it writes anything.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use noisebench::contrastive::{self, ContrastiveConfig, MlmConfig, ToyEncoder, UnigramScorer};
use noisebench::corpus::{self, Miner, RevisionReader};
use noisebench::datasets::{self, LabeledDataset, NliDataset, Task};
use noisebench::inject::{self, InjectionConfig, REVIEW_PER_RATIO, REVIEW_RATIOS};
use noisebench::metrics::{self, Condition, EvaluationReport};
use noisebench::noisedict::{word_pair_filter, CjkResources, FrozenNoiseDictionary, NoiseDictionaryBuilder};
use noisebench::{Error as CoreError, Lang};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

const LOCK_FILE: &str = ".noisebench.lock";

#[derive(Debug, Parser)]
#[command(name = "noisebench", version, about = "Mine, inject and evaluate real-world text noise")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Language code.
    #[arg(long, global = true)]
    pub lang: Option<String>,
    /// Directory for output files.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// TOML settings file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract word deltas from a revision-pairs JSONL file.
    Mine(MineArgs),
    /// Build a noise dictionary from a word-delta TSV.
    BuildDict(BuildDictArgs),
    /// Noise a dataset with a dictionary.
    Inject(InjectArgs),
    /// Draw a shuffled set of noised examples for human review.
    SampleReview(SampleReviewArgs),
    /// Score predictions against a dataset.
    Evaluate(EvaluateArgs),
    /// Hallucination and confusion analysis of one or two prediction sets.
    Analyze(AnalyzeArgs),
    /// Train toy embeddings with the contrastive loss and record the trace.
    LossDemo(LossDemoArgs),
}

#[derive(Debug, Args, Default)]
pub struct MineArgs {
    pub revisions: Option<PathBuf>,
    /// Extra language code to accept besides the supported set.
    #[arg(long = "custom-lang")]
    pub custom_langs: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct BuildDictArgs {
    pub deltas: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct InjectArgs {
    pub dataset: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    /// Noise ratio; defaults to 0.10, or 0.05 for NLI.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub max_attempts_factor: Option<usize>,
    /// Task of a CoNLL file without a `# task:` header.
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct SampleReviewArgs {
    pub dataset: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    #[arg(long)]
    pub per_ratio: Option<usize>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct EvaluateArgs {
    pub dataset: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    /// `clean` or `noisy`.
    #[arg(long)]
    pub condition: Option<String>,
    /// Clean report to subtract from, written as `disparity.json`.
    #[arg(long)]
    pub clean_report: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct AnalyzeArgs {
    pub gold: Option<PathBuf>,
    pub pred_a: Option<PathBuf>,
    pub pred_b: Option<PathBuf>,
    /// JSON map from slot label to related labels.
    #[arg(long)]
    pub relatedness: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct LossDemoArgs {
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the printed form without temperature in the numerator.
    #[arg(long)]
    pub raw_numerator: bool,
    /// JSONL batch of `{clean_tokens, noisy_tokens}` to score with the toy encoder.
    #[arg(long)]
    pub batch: Option<PathBuf>,
    #[arg(long)]
    pub mask_prob: Option<f64>,
}

// ---------------------------------------------------------------------------
// Settings file

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub lang: Option<String>,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub mine: MineSection,
    #[serde(default)]
    pub build_dict: BuildDictSection,
    #[serde(default)]
    pub inject: InjectSection,
    #[serde(default)]
    pub sample_review: SampleReviewSection,
    #[serde(default)]
    pub evaluate: EvaluateSection,
    #[serde(default)]
    pub analyze: AnalyzeSection,
    #[serde(default)]
    pub loss_demo: LossDemoSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSection {
    pub revisions: Option<PathBuf>,
    #[serde(default)]
    pub custom_langs: Vec<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuildDictSection {
    pub deltas: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InjectSection {
    pub dataset: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub p: Option<f64>,
    pub max_tokens: Option<usize>,
    pub max_attempts_factor: Option<usize>,
    pub task: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleReviewSection {
    pub dataset: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub per_ratio: Option<usize>,
    pub task: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub dataset: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub condition: Option<String>,
    pub clean_report: Option<PathBuf>,
    pub task: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeSection {
    pub gold: Option<PathBuf>,
    pub pred_a: Option<PathBuf>,
    pub pred_b: Option<PathBuf>,
    pub relatedness: Option<PathBuf>,
    pub task: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossDemoSection {
    pub pairs: Option<usize>,
    pub dim: Option<usize>,
    pub tau: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub apply_tau_to_numerator: Option<bool>,
    pub batch: Option<PathBuf>,
    pub mask_prob: Option<f64>,
}

impl FileConfig {
    /// Loads `path`; relative paths inside the file are resolved against
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: FileConfig =
            toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.mine.revisions);
        fix(&mut cfg.build_dict.deltas);
        fix(&mut cfg.inject.dataset);
        fix(&mut cfg.inject.dict);
        fix(&mut cfg.sample_review.dataset);
        fix(&mut cfg.sample_review.dict);
        fix(&mut cfg.evaluate.dataset);
        fix(&mut cfg.evaluate.predictions);
        fix(&mut cfg.evaluate.clean_report);
        fix(&mut cfg.analyze.gold);
        fix(&mut cfg.analyze.pred_a);
        fix(&mut cfg.analyze.pred_b);
        fix(&mut cfg.analyze.relatedness);
        fix(&mut cfg.loss_demo.batch);
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Errors and exit codes

#[derive(Debug)]
pub enum Failure {
    /// Bad settings or unusable inputs; nothing was written.
    Config(String),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Config(m) => write!(f, "configuration error: {m}"),
            Failure::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config { .. } | CoreError::UnknownLang(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(field: &str, message: impl std::fmt::Display) -> Failure {
    Failure::Config(format!("`{field}`: {message}"))
}

fn require(value: Option<PathBuf>, field: &str) -> Outcome<PathBuf> {
    let p = value.ok_or_else(|| config_err(field, "missing; pass it as an argument or in the config file"))?;
    if !p.is_file() {
        return Err(config_err(field, format!("{} does not exist", p.display())));
    }
    Ok(p)
}

fn optional_file(value: Option<PathBuf>, field: &str) -> Outcome<Option<PathBuf>> {
    value.map(|p| require(Some(p), field)).transpose()
}

fn parse_task(value: Option<String>) -> Outcome<Option<Task>> {
    value
        .map(|t| t.parse::<Task>().map_err(|e| config_err("task", e)))
        .transpose()
}

fn parse_lang(value: Option<&str>) -> Outcome<Option<Lang>> {
    value
        .map(|l| Lang::try_from(l.to_string()).map_err(|e| config_err("lang", e)))
        .transpose()
}

// ---------------------------------------------------------------------------
// Output directory

/// Exclusive claim on an output directory, released on drop.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Outcome<Self> {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutDirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Failure::Runtime(anyhow::anyhow!(
                "{} is locked by another run (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display()))),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Runtime(anyhow::anyhow!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Datasets of either shape

pub enum AnyDataset {
    Labeled(LabeledDataset),
    Nli(NliDataset),
}

impl AnyDataset {
    fn lang(&self) -> Option<&Lang> {
        match self {
            AnyDataset::Labeled(d) => d.lang.as_ref(),
            AnyDataset::Nli(d) => d.lang.as_ref(),
        }
    }

    fn task(&self) -> Task {
        match self {
            AnyDataset::Labeled(d) => d.task,
            AnyDataset::Nli(_) => Task::Nli,
        }
    }
}

fn is_nli_path(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "tsv")
}

/// Picks the task for `path` without reading the whole file: `.tsv` is NLI,
/// otherwise the `# task:` header or the `task` setting decides.
fn resolve_task(path: &Path, setting: Option<Task>) -> Outcome<Task> {
    if is_nli_path(path) {
        return match setting {
            None | Some(Task::Nli) => Ok(Task::Nli),
            Some(t) => Err(config_err("task", format!("{t} data cannot be a .tsv file"))),
        };
    }
    let header = datasets::conll_header_task(path)?;
    match (header, setting) {
        (Some(h), Some(s)) if h != s => Err(config_err(
            "task",
            format!("{s} given but {} declares {h}", path.display()),
        )),
        (Some(t), _) | (None, Some(t)) => Ok(t),
        (None, None) => Err(config_err(
            "task",
            format!("{} has no `# task:` header; pass --task", path.display()),
        )),
    }
}

fn load_dataset(path: &Path, task: Task) -> Outcome<AnyDataset> {
    Ok(match task {
        Task::Nli => AnyDataset::Nli(datasets::read_nli_tsv(path)?),
        t => AnyDataset::Labeled(datasets::read_conll(path, t)?),
    })
}

fn check_lang(global: Option<&Lang>, found: Option<&Lang>) -> Outcome {
    match (global, found) {
        (Some(g), Some(f)) if g != f => Err(Failure::Runtime(
            CoreError::LangMismatch {
                expected: g.to_string(),
                found: f.to_string(),
            }
            .into(),
        )),
        _ => Ok(()),
    }
}

// ---------------------------------------------------------------------------
// Entry points

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code; diagnostics go to standard error.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Outcome {
    let file = match &cli.global.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let ctx = Context {
        seed: cli.global.seed.or(file.seed).unwrap_or(0),
        lang: parse_lang(cli.global.lang.as_deref().or(file.lang.as_deref()))?,
        out_dir: cli
            .global
            .out_dir
            .clone()
            .or(file.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    match cli.command {
        Command::Mine(a) => mine(&ctx, a, file.mine),
        Command::BuildDict(a) => build_dict(&ctx, a, file.build_dict),
        Command::Inject(a) => inject_cmd(&ctx, a, file.inject),
        Command::SampleReview(a) => sample_review(&ctx, a, file.sample_review),
        Command::Evaluate(a) => evaluate(&ctx, a, file.evaluate),
        Command::Analyze(a) => analyze(&ctx, a, file.analyze),
        Command::LossDemo(a) => loss_demo(&ctx, a, file.loss_demo),
    }
}

struct Context {
    seed: u64,
    lang: Option<Lang>,
    out_dir: PathBuf,
}

impl Context {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

// ---------------------------------------------------------------------------
// Subcommands

#[derive(Serialize)]
struct MineSummary {
    stats: corpus::MiningStats,
    skipped_other_lang: u64,
    warnings: Vec<String>,
}

fn mine(ctx: &Context, a: MineArgs, s: MineSection) -> Outcome {
    let input = require(a.revisions.or(s.revisions), "revisions")?;
    let mut custom = s.custom_langs;
    custom.extend(a.custom_langs);
    for c in &custom {
        Lang::custom(c).map_err(|e| config_err("custom_langs", e))?;
    }

    let mut reader = RevisionReader::open(&input, custom)?;
    let miner = Miner::default();
    let mut deltas = Vec::new();
    let mut stats = corpus::MiningStats::default();
    let mut skipped = 0;
    for rev in reader.by_ref() {
        let rev = rev?;
        if ctx.lang.as_ref().is_some_and(|l| *l != rev.lang) {
            skipped += 1;
            continue;
        }
        let (d, st) = miner.mine_revision(&rev);
        deltas.extend(d);
        stats.absorb(&st);
    }
    let warnings: Vec<String> = reader
        .warnings()
        .iter()
        .map(|w| format!("{}:{}: {}", input.display(), w.line, w.message))
        .collect();
    for w in &warnings {
        eprintln!("warning: {w}");
    }

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    corpus::write_deltas(ctx.out("deltas.tsv"), &deltas)?;
    let summary = MineSummary {
        stats,
        skipped_other_lang: skipped,
        warnings,
    };
    write_json(&ctx.out("mining_stats.json"), &summary)?;
    let st = &summary.stats;
    println!(
        "revisions {}  sentence pairs {}  accepted {}  rejected (length {}, token diff {}, edit distance {})  deltas {}",
        st.revisions,
        st.sentence_pairs,
        st.accepted,
        st.rejected_length,
        st.rejected_token_diff,
        st.rejected_rel_edit_distance,
        st.deltas
    );
    Ok(())
}

#[derive(Serialize, Default)]
struct DictSummary {
    deltas: u64,
    admitted: u64,
    rejected: BTreeMap<String, u64>,
    entries: usize,
}

fn build_dict(ctx: &Context, a: BuildDictArgs, s: BuildDictSection) -> Outcome {
    let input = require(a.deltas.or(s.deltas), "deltas")?;
    let deltas = corpus::read_deltas(&input)?;

    let lang = match &ctx.lang {
        Some(l) => l.clone(),
        None => {
            let mut langs: Vec<&Lang> = deltas.iter().map(|d| &d.lang).collect();
            langs.sort();
            langs.dedup();
            match langs.as_slice() {
                [one] => (*one).clone(),
                [] => return Err(config_err("lang", "no deltas to infer it from; pass --lang")),
                _ => return Err(config_err("lang", "deltas mix languages; pass --lang")),
            }
        }
    };

    let cjk = CjkResources::default();
    let mut builder = NoiseDictionaryBuilder::new(lang.clone());
    let mut summary = DictSummary::default();
    for d in deltas.iter().filter(|d| d.lang == lang) {
        summary.deltas += 1;
        let verdict = if lang.is_cjk() {
            if cjk.admits(d) {
                None
            } else {
                Some("cjk_rule".to_string())
            }
        } else {
            match word_pair_filter(d) {
                corpus::Decision::Accept => None,
                corpus::Decision::Reject(r) => Some(format!("{r:?}").to_lowercase()),
            }
        };
        match verdict {
            None => {
                builder.add_delta(d)?;
                summary.admitted += 1;
            }
            Some(reason) => *summary.rejected.entry(reason).or_insert(0) += 1,
        }
    }
    let dict = builder.freeze()?;
    summary.entries = dict.len();

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    dict.save(ctx.out(&format!("dict.{lang}.json")))?;
    write_json(&ctx.out(&format!("dict.{lang}.stats.json")), &summary)?;
    println!(
        "{lang}: {} deltas, {} admitted, {} dictionary entries",
        summary.deltas, summary.admitted, summary.entries
    );
    Ok(())
}

fn injection_config(ctx: &Context, task: Task, p: Option<f64>, max_tokens: Option<usize>, factor: Option<usize>) -> Outcome<InjectionConfig> {
    let mut cfg = InjectionConfig::for_task(task, ctx.seed);
    if let Some(p) = p {
        cfg.p = p;
    }
    if let Some(m) = max_tokens {
        cfg.max_tokens = m;
    }
    if let Some(f) = factor {
        cfg.max_attempts_factor = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn inject_cmd(ctx: &Context, a: InjectArgs, s: InjectSection) -> Outcome {
    let dataset_path = require(a.dataset.or(s.dataset), "dataset")?;
    let dict_path = require(a.dict.or(s.dict), "dict")?;
    let task = resolve_task(&dataset_path, parse_task(a.task.or(s.task))?)?;
    let cfg = injection_config(
        ctx,
        task,
        a.p.or(s.p),
        a.max_tokens.or(s.max_tokens),
        a.max_attempts_factor.or(s.max_attempts_factor),
    )?;

    let dataset = load_dataset(&dataset_path, task)?;
    let dict = FrozenNoiseDictionary::load(&dict_path)?;
    check_lang(ctx.lang.as_ref(), dataset.lang())?;

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    let (log, out_name) = match &dataset {
        AnyDataset::Labeled(d) => {
            let (noised, log) = inject::inject_dataset(d, &dict, &cfg)?;
            datasets::write_conll(&noised, ctx.out("noised.conll"))?;
            (log, "noised.conll")
        }
        AnyDataset::Nli(d) => {
            let (noised, log) = inject::inject_dataset(d, &dict, &cfg)?;
            datasets::write_nli_tsv(&noised, ctx.out("noised.tsv"))?;
            (log, "noised.tsv")
        }
    };
    inject::write_replacement_log(ctx.out("replacements.tsv"), &log)?;
    println!(
        "{}: p={} seed={} -> {} replacements, wrote {out_name} and replacements.tsv",
        dataset.task(),
        cfg.p,
        cfg.seed,
        log.len()
    );
    Ok(())
}

fn sample_review(ctx: &Context, a: SampleReviewArgs, s: SampleReviewSection) -> Outcome {
    let dataset_path = require(a.dataset.or(s.dataset), "dataset")?;
    let dict_path = require(a.dict.or(s.dict), "dict")?;
    let task = resolve_task(&dataset_path, parse_task(a.task.or(s.task))?)?;
    let per_ratio = a.per_ratio.or(s.per_ratio).unwrap_or(REVIEW_PER_RATIO);
    if per_ratio == 0 {
        return Err(config_err("per_ratio", "must be at least 1"));
    }

    let dataset = load_dataset(&dataset_path, task)?;
    let dict = FrozenNoiseDictionary::load(&dict_path)?;
    check_lang(ctx.lang.as_ref(), dataset.lang())?;

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    let (ratios, sources, log, count) = match &dataset {
        AnyDataset::Labeled(d) => {
            let r = inject::make_review_sample(d, &dict, &REVIEW_RATIOS, per_ratio, ctx.seed)?;
            datasets::write_conll(&r.dataset, ctx.out("review.conll"))?;
            (r.ratios, r.sources, r.log, r.dataset.len())
        }
        AnyDataset::Nli(d) => {
            let r = inject::make_review_sample(d, &dict, &REVIEW_RATIOS, per_ratio, ctx.seed)?;
            datasets::write_nli_tsv(&r.dataset, ctx.out("review.tsv"))?;
            (r.ratios, r.sources, r.log, r.dataset.len())
        }
    };
    write_json(&ctx.out("review_ratios.json"), &ratios)?;
    write_json(&ctx.out("review_sources.json"), &sources)?;
    inject::write_replacement_log(ctx.out("review_replacements.tsv"), &log)?;
    println!("{count} review items ({per_ratio} per ratio over {:?})", REVIEW_RATIOS);
    Ok(())
}

fn parse_condition(value: Option<String>) -> Outcome<Condition> {
    match value.as_deref() {
        None | Some("clean") => Ok(Condition::Clean),
        Some("noisy") => Ok(Condition::Noisy),
        Some(other) => Err(config_err("condition", format!("`{other}` is not clean or noisy"))),
    }
}

fn evaluate(ctx: &Context, a: EvaluateArgs, s: EvaluateSection) -> Outcome {
    let dataset_path = require(a.dataset.or(s.dataset), "dataset")?;
    let pred_path = require(a.predictions.or(s.predictions), "predictions")?;
    let clean_report = optional_file(a.clean_report.or(s.clean_report), "clean_report")?;
    let condition = parse_condition(a.condition.or(s.condition))?;
    let task = resolve_task(&dataset_path, parse_task(a.task.or(s.task))?)?;

    let dataset = load_dataset(&dataset_path, task)?;
    check_lang(ctx.lang.as_ref(), dataset.lang())?;
    let predictions = metrics::read_predictions(&pred_path)?;
    let report = match &dataset {
        AnyDataset::Labeled(d) => metrics::evaluate_labeled(d, &predictions, condition, Some(ctx.seed))?,
        AnyDataset::Nli(d) => metrics::evaluate_nli(d, &predictions, condition, Some(ctx.seed))?,
    };
    let gap = match &clean_report {
        Some(p) => {
            let clean: EvaluationReport = serde_json::from_str(&fs::read_to_string(p)?)?;
            Some(metrics::disparity(&clean, &report)?)
        }
        None => None,
    };

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    let name = match condition {
        Condition::Clean => "report.clean.json",
        Condition::Noisy => "report.noisy.json",
    };
    write_json(&ctx.out(name), &report)?;
    print!("{}", metrics::render_reports(std::slice::from_ref(&report)));
    if let Some(gap) = gap {
        write_json(&ctx.out("disparity.json"), &gap)?;
        for (k, v) in &gap {
            println!("disparity {k}: {v:.2}");
        }
    }
    Ok(())
}

fn analyze(ctx: &Context, a: AnalyzeArgs, s: AnalyzeSection) -> Outcome {
    let gold_path = require(a.gold.or(s.gold), "gold")?;
    let pred_a = require(a.pred_a.or(s.pred_a), "pred_a")?;
    let pred_b = optional_file(a.pred_b.or(s.pred_b), "pred_b")?;
    let relatedness_path = optional_file(a.relatedness.or(s.relatedness), "relatedness")?;
    let task = resolve_task(&gold_path, parse_task(a.task.or(s.task))?)?;
    if task == Task::Nli {
        return Err(config_err("task", "analysis needs sequence-labeling data"));
    }

    let AnyDataset::Labeled(gold) = load_dataset(&gold_path, task)? else {
        unreachable!("task is not NLI");
    };
    check_lang(ctx.lang.as_ref(), gold.lang.as_ref())?;
    let relatedness = match &relatedness_path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => metrics::bundled_relatedness(),
    };
    let pa = metrics::read_predictions(&pred_a)?;
    let pb = pred_b.as_deref().map(metrics::read_predictions).transpose()?;
    let analysis = metrics::analyze(&gold, &pa, pb.as_deref(), &relatedness)?;

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    write_json(&ctx.out("analysis.json"), &analysis)?;
    print!("{}", metrics::render_analysis(&analysis));
    Ok(())
}

#[derive(Debug, Serialize)]
struct LossDemoConfig {
    pairs: usize,
    dim: usize,
    tau: f64,
    apply_tau_to_numerator: bool,
    steps: usize,
    lr: f64,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct LossDemoOutput {
    config: LossDemoConfig,
    loss_trace: Vec<f64>,
    final_pos_cos: f64,
    final_neg_cos: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    batch_loss: Option<contrastive::CombinedLoss>,
}

fn loss_demo(ctx: &Context, a: LossDemoArgs, s: LossDemoSection) -> Outcome {
    let config = LossDemoConfig {
        pairs: a.pairs.or(s.pairs).unwrap_or(8),
        dim: a.dim.or(s.dim).unwrap_or(16),
        tau: a.tau.or(s.tau).unwrap_or(contrastive::DEFAULT_TAU),
        apply_tau_to_numerator: !a.raw_numerator && s.apply_tau_to_numerator.unwrap_or(true),
        steps: a.steps.or(s.steps).unwrap_or(500),
        lr: a.lr.or(s.lr).unwrap_or(0.5),
        seed: ctx.seed,
    };
    let cfg_c = ContrastiveConfig {
        tau: config.tau,
        apply_tau_to_numerator: config.apply_tau_to_numerator,
    };
    cfg_c.validate()?;
    for (field, v) in [("pairs", config.pairs), ("dim", config.dim), ("steps", config.steps)] {
        if v == 0 {
            return Err(config_err(field, "must be at least 1"));
        }
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(config_err("lr", format!("must be a non-negative real, got {}", config.lr)));
    }
    let cfg_m = MlmConfig {
        mask_prob: a.mask_prob.or(s.mask_prob).unwrap_or(contrastive::DEFAULT_MASK_PROB),
        seed: ctx.seed,
        ..MlmConfig::default()
    };
    cfg_m.validate()?;
    let batch_path = optional_file(a.batch.or(s.batch), "batch")?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let trained = contrastive::toy_align(config.pairs, config.dim, &cfg_c, config.steps, config.lr, &mut rng)?;
    let batch_loss = match &batch_path {
        Some(p) => {
            let rows = contrastive::read_batch(p)?;
            let clean: Vec<Vec<String>> = rows.iter().map(|r| r.clean_tokens.clone()).collect();
            let noisy: Vec<Vec<String>> = rows.iter().map(|r| r.noisy_tokens.clone()).collect();
            let encoder = ToyEncoder::new(config.dim, 32, ctx.seed);
            let scorer = UnigramScorer::fit(clean.iter().chain(&noisy).map(Vec::as_slice));
            let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg_m.seed);
            Some(contrastive::combined_loss(&clean, &noisy, &encoder, &scorer, &cfg_c, &cfg_m, &mut mask_rng)?)
        }
        None => None,
    };
    let out = LossDemoOutput {
        config,
        final_pos_cos: trained.final_pos_cos,
        final_neg_cos: trained.final_neg_cos,
        loss_trace: trained.loss_trace,
        batch_loss,
    };

    let _lock = OutDirLock::acquire(&ctx.out_dir)?;
    write_json(&ctx.out("loss_demo.json"), &out)?;
    println!(
        "loss {:.4} -> {:.4}  positive cos {:.3}  negative cos {:.3}",
        out.loss_trace[0],
        out.loss_trace[out.loss_trace.len() - 1],
        out.final_pos_cos,
        out.final_neg_cos
    );
    if let Some(b) = &out.batch_loss {
        println!(
            "batch: total {:.4} = contrastive {:.4} + mlm noisy {:.4} + mlm clean {:.4}",
            b.total, b.contrastive, b.mlm_noisy, b.mlm_clean
        );
    }
    Ok(())
}

/// Lock file that guards `dir` while a subcommand writes to it.
pub fn lock_path(dir: &Path) -> PathBuf {
    dir.join(LOCK_FILE)
}
