//! The `gdial` command line.
//!
//! Every invocation works inside one run directory holding a config
//! snapshot, its artifacts and a `done.json` stamp. The stamp records a hash
//! of the inputs (arguments, effective config, input file contents); a rerun
//! with the same hash and intact outputs does nothing.
//!
//! Config keys can be overridden with `--section.key value` anywhere on the
//! command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ConfigError, Profile, RunConfig};
use crate::corpus::synthetic::{generate_synthetic_corpus, CrossLingualConfig, CrossLingualSetup, PSEUDO_PAIRS};
use crate::corpus::{
    ingest_jsonl, read_examples, read_passages, write_examples, write_passages, write_turn_records, ContextOptions,
    CorpusError, CorpusRole, CorpusSet, Language, Passage,
};
use crate::generator::{generate_all, FidGenerator};
use crate::metrics::{gold_rank, GenerationScores, MetricsReport, RetrievalScores};
use crate::nn::Checkpoint;
use crate::pipeline::{build_tokenizer, gold_passages, Pipeline, PipelineError, RECALL_KS};
use crate::reranker::{rerank_all, CrossEncoder};
use crate::retriever::{CandidateList, DualEncoder, MipsIndex};
use crate::schedule::{
    ablation_suite, make_plan, median, run_plan, AblationTable, Corpora, PseudoPair, RunStore, ScheduleError, Variant,
};
use crate::xaug::{build_pseudo_set, StubTranslator};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Failure split by who has to act: the caller (bad input) or us.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    User(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => EXIT_USER,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::User(e.to_string())
    }
}

impl From<ScheduleError> for CliError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::InvalidPlan(_)
            | ScheduleError::MissingRole(_)
            | ScheduleError::TooFewExamples { .. }
            | ScheduleError::Config(_)
            | ScheduleError::Corpus(_)
            | ScheduleError::Xaug(_) => CliError::User(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            other => CliError::Internal(other.to_string()),
        }
    }
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

/// Reads a user-supplied file; a missing or unreadable file is the caller's
/// problem.
fn read_input(path: &Path) -> Result<Vec<u8>, CliError> {
    std::fs::read(path).map_err(|e| CliError::User(format!("cannot read {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::from_bytes(&read_input(path)?).map_err(|e| CliError::User(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "gdial", version, about = "Retrieve, rerank and generate for document-grounded dialogue")]
struct Cli {
    /// Built-in config profile.
    #[arg(long, global = true, value_enum, default_value = "desk")]
    profile: ProfileArg,
    /// TOML config file replacing the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory; defaults to runs/<command>-<input hash>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run even when the run directory is up to date.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum SynthKind {
    /// One language, random-word passages.
    Mono,
    /// Four languages with high-resource, downstream and dev splits.
    CrossLingual,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Validate dialogue JSONL against a passage file and write examples.
    Ingest {
        #[arg(long)]
        dialogues: PathBuf,
        #[arg(long)]
        passages: PathBuf,
        #[arg(long, default_value = "d_t_downstream")]
        role: String,
    },
    /// Write a seeded synthetic data directory.
    Synth {
        #[arg(long, value_enum, default_value = "mono")]
        kind: SynthKind,
        #[arg(long, default_value_t = 100)]
        passages: usize,
        #[arg(long, default_value_t = 200)]
        turns: usize,
        #[arg(long, default_value_t = 60)]
        dev_turns: usize,
        #[arg(long, default_value_t = 400)]
        vocab: usize,
    },
    /// Translate u_high_resource into pseudo data with the lexicon stub.
    Augment {
        #[arg(long)]
        data: PathBuf,
        /// Direction such as en-fr; repeat together with --lexicon.
        #[arg(long = "pair", required = true)]
        pairs: Vec<String>,
        /// JSON object mapping source words to target words.
        #[arg(long = "lexicon", required = true)]
        lexicons: Vec<PathBuf>,
    },
    /// One retriever, reranker and generator round on a data directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "d_t_downstream")]
        role: String,
    },
    /// Embed passages with a retriever checkpoint into a MIPS index.
    BuildIndex {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        passages: PathBuf,
    },
    Retrieve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long, default_value_t = 20)]
        k: usize,
    },
    Rerank {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lists: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        passages: PathBuf,
    },
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        lists: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        passages: PathBuf,
    },
    /// Run a staged training plan. Without --data the cross-lingual
    /// synthetic corpora are generated from the seed.
    RunPlan {
        #[arg(long)]
        variant: Option<String>,
        /// Leave one pseudo pair (e.g. zh-vi) out of the translated data.
        #[arg(long)]
        drop_pair: Option<String>,
        /// TOML plan file with variant, drop_pair, seed and overrides.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// The six-row comparison, once per seed, with per-row medians.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Score predictions against references (one per line).
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// 1-based gold ranks, one per line; blank or `none` for a miss.
        #[arg(long)]
        gold_ranks: Option<PathBuf>,
    },
    /// Print the effective config.
    ShowConfig,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::Synth { .. } => "synth",
            Command::Augment { .. } => "augment",
            Command::Train { .. } => "train",
            Command::BuildIndex { .. } => "build-index",
            Command::Retrieve { .. } => "retrieve",
            Command::Rerank { .. } => "rerank",
            Command::Generate { .. } => "generate",
            Command::RunPlan { .. } => "run-plan",
            Command::Ablate { .. } => "ablate",
            Command::Evaluate { .. } => "evaluate",
            Command::ShowConfig => "show-config",
        }
    }

    /// Files and directories whose contents feed the input hash.
    fn inputs(&self) -> Vec<&Path> {
        match self {
            Command::Ingest { dialogues, passages, .. } => vec![dialogues, passages],
            Command::Synth { .. } | Command::ShowConfig => vec![],
            Command::Augment { data, lexicons, .. } => std::iter::once(data).chain(lexicons).collect(),
            Command::Train { data, .. } => vec![data],
            Command::BuildIndex { checkpoint, passages } => vec![checkpoint, passages],
            Command::Retrieve {
                checkpoint,
                index,
                examples,
                ..
            } => vec![checkpoint, index, examples],
            Command::Rerank {
                checkpoint,
                lists,
                examples,
                passages,
            }
            | Command::Generate {
                checkpoint,
                lists,
                examples,
                passages,
            } => vec![checkpoint, lists, examples, passages],
            Command::RunPlan { plan, data, .. } => plan.iter().chain(data).collect(),
            Command::Ablate { data, .. } => data.iter().collect(),
            Command::Evaluate {
                pred,
                reference,
                gold_ranks,
            } => [pred, reference].into_iter().chain(gold_ranks).collect(),
        }
        .into_iter()
        .map(PathBuf::as_path)
        .collect()
    }
}

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy().into_owned();
        let Some(flag) = s.strip_prefix("--").filter(|f| {
            let key = f.split('=').next().unwrap_or("");
            key.contains('.') && !key.starts_with('.')
        }) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::User(format!("--{flag} needs a value")))?;
                overrides.push((flag.to_string(), v.to_string_lossy().into_owned()));
            }
        }
    }
    Ok((rest, overrides))
}

/// Entry point; returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| {
            use std::io::Write;
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .try_init();
    match execute(args) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            eprintln!("gdial: {e}");
            e.exit_code()
        }
    }
}

fn execute(args: Vec<OsString>) -> Result<(), CliError> {
    let (args, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { Ok(()) } else { Err(CliError::User("invalid arguments".into())) };
        }
    };
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(match cli.profile {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        }),
    };
    cfg = cfg.with_overrides(&overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Command::ShowConfig = cli.command {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let hash = input_hash(&cli.command, &cfg)?;
    let run_dir = cli
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-{}", cli.command.name(), &hash[..12])));
    if !cli.force && up_to_date(&run_dir, &hash) {
        log::info!("{} is up to date; nothing to do", run_dir.display());
        if let Command::Evaluate { .. } = cli.command {
            print!("{}", std::fs::read_to_string(run_dir.join("metrics.json")).map_err(internal)?);
        }
        return Ok(());
    }
    std::fs::create_dir_all(&run_dir).map_err(|e| CliError::User(format!("{}: {e}", run_dir.display())))?;
    let _ = std::fs::remove_file(run_dir.join(DONE));
    std::fs::write(run_dir.join("config.toml"), cfg.to_toml()).map_err(internal)?;
    let ctx = Ctx { cfg, dir: run_dir };
    log::info!("{} -> {}", cli.command.name(), ctx.dir.display());
    let outputs = dispatch(&cli.command, &ctx)?;
    stamp(&ctx.dir, &hash, cli.command.name(), &outputs)
}

const DONE: &str = "done.json";

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    command: String,
    input_hash: String,
    /// Output file name to content hash.
    outputs: BTreeMap<String, String>,
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| hex::encode(Sha256::digest(&b)))
}

fn up_to_date(dir: &Path, hash: &str) -> bool {
    let Some(stamp) = std::fs::read(dir.join(DONE))
        .ok()
        .and_then(|b| serde_json::from_slice::<Stamp>(&b).ok())
    else {
        return false;
    };
    stamp.input_hash == hash
        && stamp
            .outputs
            .iter()
            .all(|(name, h)| file_hash(&dir.join(name)).as_deref() == Some(h.as_str()))
}

fn stamp(dir: &Path, hash: &str, command: &str, outputs: &[String]) -> Result<(), CliError> {
    let mut map = BTreeMap::new();
    for name in outputs.iter().map(String::as_str).chain(["config.toml"]) {
        let h = file_hash(&dir.join(name)).ok_or_else(|| internal(format!("output {name} was not written")))?;
        map.insert(name.to_string(), h);
    }
    let s = Stamp {
        command: command.into(),
        input_hash: hash.into(),
        outputs: map,
    };
    std::fs::write(dir.join(DONE), serde_json::to_vec_pretty(&s).map_err(internal)?).map_err(internal)
}

/// Hash of the command, its arguments, the effective config and the bytes of
/// every input (directories: their files, sorted by name).
fn input_hash(cmd: &Command, cfg: &RunConfig) -> Result<String, CliError> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cmd).map_err(internal)?);
    h.update(cfg.to_toml().as_bytes());
    for p in cmd.inputs() {
        h.update(p.as_os_str().as_encoded_bytes());
        if p.is_dir() {
            let mut names: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| CliError::User(format!("{}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && f.file_name().is_some_and(|n| n != DONE))
                .collect();
            names.sort();
            for f in names {
                h.update(f.file_name().unwrap_or_default().as_encoded_bytes());
                h.update(read_input(&f)?);
            }
        } else {
            h.update(read_input(p)?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

struct Ctx {
    cfg: RunConfig,
    dir: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<String, CliError> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(internal)?;
        bytes.push(b'\n');
        std::fs::write(self.path(name), bytes).map_err(internal)?;
        Ok(name.to_string())
    }

    fn context(&self) -> ContextOptions {
        ContextOptions {
            pre_k_turns: self.cfg.retriever.pre_k_turns,
            ..ContextOptions::default()
        }
    }
}

fn parse_role(s: &str) -> Result<CorpusRole, CliError> {
    s.parse().map_err(CliError::User)
}

fn dispatch(cmd: &Command, ctx: &Ctx) -> Result<Vec<String>, CliError> {
    match cmd {
        Command::Ingest {
            dialogues,
            passages,
            role,
        } => {
            let pool = read_passages(passages)?;
            let role = parse_role(role)?;
            let ing = ingest_jsonl(dialogues, role, &pool, ctx.context())?;
            write_passages(ctx.path("passages.jsonl"), pool.passages())?;
            let name = format!("{role}.jsonl");
            write_examples(ctx.path(&name), &ing.set)?;
            let counts: BTreeMap<String, usize> = ing.counts.iter().map(|(l, n)| (l.to_string(), *n)).collect();
            let summary = ctx.write_json("ingest.json", &counts)?;
            Ok(vec!["passages.jsonl".into(), name, summary])
        }
        Command::Synth {
            kind,
            passages,
            turns,
            dev_turns,
            vocab,
        } => synth(ctx, *kind, *passages, *turns, *dev_turns, *vocab),
        Command::Augment { data, pairs, lexicons } => augment(ctx, data, pairs, lexicons),
        Command::Train { data, role } => train(ctx, data, parse_role(role)?),
        Command::BuildIndex { checkpoint, passages } => {
            let model = DualEncoder::from_checkpoint(&load_checkpoint(checkpoint)?).map_err(|e| CliError::User(e.to_string()))?;
            let pool = read_passages(passages)?;
            let index = model
                .build_index(pool.passages(), ctx.cfg.index.mode()?, ctx.cfg.seed)
                .map_err(internal)?;
            index.save(ctx.path("index.bin")).map_err(internal)?;
            Ok(vec!["index.bin".into()])
        }
        Command::Retrieve {
            checkpoint,
            index,
            examples,
            k,
        } => {
            let model = DualEncoder::from_checkpoint(&load_checkpoint(checkpoint)?).map_err(|e| CliError::User(e.to_string()))?;
            let index = MipsIndex::from_bytes(&read_input(index)?).map_err(|e| CliError::User(e.to_string()))?;
            let set = read_examples(examples, CorpusRole::DTDownstream)?;
            let lists = model.retrieve_all(&index, set.examples(), *k).map_err(internal)?;
            lists_outputs(ctx, &lists, &set)
        }
        Command::Rerank {
            checkpoint,
            lists,
            examples,
            passages,
        } => {
            let model = CrossEncoder::from_checkpoint(&load_checkpoint(checkpoint)?).map_err(|e| CliError::User(e.to_string()))?;
            let lists = read_lists(lists)?;
            let set = read_examples(examples, CorpusRole::DTDownstream)?;
            let pool = read_passages(passages)?;
            let head = ctx.cfg.reranker.passages;
            let heads: Vec<CandidateList> = lists
                .iter()
                .map(|l| CandidateList {
                    query_id: l.query_id.clone(),
                    candidates: l.candidates.iter().take(head).cloned().collect(),
                })
                .collect();
            let mut out = rerank_all(&heads, set.examples(), &pool, &model).map_err(|e| CliError::User(e.to_string()))?;
            for (r, l) in out.iter_mut().zip(&lists) {
                r.candidates.extend(l.candidates.iter().skip(head).cloned());
            }
            lists_outputs(ctx, &out, &set)
        }
        Command::Generate {
            checkpoint,
            lists,
            examples,
            passages,
        } => {
            let model = FidGenerator::from_checkpoint(&load_checkpoint(checkpoint)?).map_err(|e| CliError::User(e.to_string()))?;
            let lists = read_lists(lists)?;
            let set = read_examples(examples, CorpusRole::DTDownstream)?;
            let pool = read_passages(passages)?;
            let outs = generate_all(
                &model,
                set.examples(),
                &lists,
                &pool,
                ctx.cfg.generator.passages4gen,
                ctx.cfg.generator.beam_size,
            )
            .map_err(|e| CliError::User(e.to_string()))?;
            let preds: Vec<String> = outs.iter().map(|o| o.response.clone()).collect();
            let refs: Vec<String> = set.examples().iter().map(|e| e.response_r.clone()).collect();
            write_lines(&ctx.path("predictions.txt"), &preds)?;
            let metrics = MetricsReport::new(GenerationScores::compute(&preds, &refs), None);
            let m = ctx.write_json("metrics.json", &metrics)?;
            Ok(vec!["predictions.txt".into(), m])
        }
        Command::RunPlan {
            variant,
            drop_pair,
            plan,
            data,
        } => run_plan_cmd(ctx, variant.as_deref(), drop_pair.as_deref(), plan.as_deref(), data.as_deref()),
        Command::Ablate { seeds, data } => ablate(ctx, seeds, data.as_deref()),
        Command::Evaluate {
            pred,
            reference,
            gold_ranks,
        } => {
            let preds = read_lines(pred)?;
            let refs = read_lines(reference)?;
            if preds.len() != refs.len() {
                return Err(CliError::User(format!(
                    "{} predictions but {} references",
                    preds.len(),
                    refs.len()
                )));
            }
            let retrieval = match gold_ranks {
                Some(p) => Some(RetrievalScores::compute(&parse_ranks(p)?, &RECALL_KS)),
                None => None,
            };
            let report = MetricsReport::new(GenerationScores::compute(&preds, &refs), retrieval);
            let name = ctx.write_json("metrics.json", &report)?;
            print!("{}", std::fs::read_to_string(ctx.path(&name)).map_err(internal)?);
            Ok(vec![name])
        }
        Command::ShowConfig => Ok(vec![]),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CliError> {
    let text = String::from_utf8(read_input(path)?).map_err(|e| CliError::User(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<(), CliError> {
    let mut s = lines.join("\n");
    s.push('\n');
    std::fs::write(path, s).map_err(internal)
}

fn parse_ranks(path: &Path) -> Result<Vec<Option<usize>>, CliError> {
    read_lines(path)?
        .iter()
        .enumerate()
        .map(|(i, l)| match l.trim() {
            "" | "none" => Ok(None),
            t => match t.parse::<usize>() {
                Ok(r) if r >= 1 => Ok(Some(r)),
                _ => Err(CliError::User(format!("{}:{}: bad rank {t:?}", path.display(), i + 1))),
            },
        })
        .collect()
}

fn read_lists(path: &Path) -> Result<Vec<CandidateList>, CliError> {
    let text = String::from_utf8(read_input(path)?).map_err(|e| CliError::User(e.to_string()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::User(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

/// Writes `lists.jsonl` plus retrieval metrics against the examples' gold.
fn lists_outputs(ctx: &Ctx, lists: &[CandidateList], set: &CorpusSet) -> Result<Vec<String>, CliError> {
    let mut buf = Vec::new();
    for l in lists {
        serde_json::to_writer(&mut buf, l).map_err(internal)?;
        buf.push(b'\n');
    }
    std::fs::write(ctx.path("lists.jsonl"), buf).map_err(internal)?;
    let ranks: Vec<Option<usize>> = lists
        .iter()
        .zip(set.examples())
        .map(|(l, e)| gold_rank(&l.ids(), &e.grounding_passage_id))
        .collect();
    let m = ctx.write_json("retrieval.json", &RetrievalScores::compute(&ranks, &RECALL_KS))?;
    Ok(vec!["lists.jsonl".into(), m])
}

fn synth(
    ctx: &Ctx,
    kind: SynthKind,
    n_passages: usize,
    n_turns: usize,
    dev_turns: usize,
    vocab: usize,
) -> Result<Vec<String>, CliError> {
    let seed = ctx.cfg.seed;
    match kind {
        SynthKind::Mono => {
            if n_passages == 0 || n_turns == 0 || vocab == 0 {
                return Err(CliError::User("--passages, --turns and --vocab must be positive".into()));
            }
            let c = generate_synthetic_corpus(seed, n_passages, n_turns, vocab);
            let (dev_records, dev) = c.more_dialogues(seed.wrapping_add(1), dev_turns.max(1), "dev");
            write_passages(ctx.path("passages.jsonl"), &c.passages)?;
            write_turn_records(ctx.path("dialogues.jsonl"), &c.records)?;
            write_turn_records(ctx.path("dev_dialogues.jsonl"), &dev_records)?;
            write_examples(ctx.path("d_t_downstream.jsonl"), &c.set)?;
            write_examples(ctx.path("dev.jsonl"), &dev)?;
            Ok(["passages.jsonl", "dialogues.jsonl", "dev_dialogues.jsonl", "d_t_downstream.jsonl", "dev.jsonl"]
                .map(String::from)
                .to_vec())
        }
        SynthKind::CrossLingual => {
            let setup = CrossLingualSetup::generate(seed, &CrossLingualConfig::default());
            write_passages(ctx.path("passages.jsonl"), &setup.passages)?;
            let mut out = vec!["passages.jsonl".to_string()];
            for set in [&setup.d_cross_lingual, &setup.u_high_resource, &setup.dt_train] {
                let name = format!("{}.jsonl", set.role());
                write_examples(ctx.path(&name), set)?;
                out.push(name);
            }
            write_examples(ctx.path("dev.jsonl"), &setup.dt_dev)?;
            out.push("dev.jsonl".into());
            for (i, &(s, t)) in PSEUDO_PAIRS.iter().enumerate() {
                let lex = setup.lexicon(s, t, ctx.cfg.xaug.lexicon_noise, crate::train::derive_seed(seed, &[i as u64]));
                out.push(ctx.write_json(&format!("lexicon-{}-{}.json", s.code(), t.code()), &lex)?);
            }
            Ok(out)
        }
    }
}

/// Roles a data directory may hold, as `<role>.jsonl`.
const DATA_ROLES: [CorpusRole; 4] = [
    CorpusRole::DCrossLingual,
    CorpusRole::UHighResource,
    CorpusRole::DPrimeTranslated,
    CorpusRole::DTDownstream,
];

fn augment(ctx: &Ctx, data: &Path, pairs: &[String], lexicons: &[PathBuf]) -> Result<Vec<String>, CliError> {
    if pairs.len() != lexicons.len() {
        return Err(CliError::User("give one --lexicon per --pair".into()));
    }
    let mut pool = read_passages(data.join("passages.jsonl"))?;
    let source_set = read_examples(data.join("u_high_resource.jsonl"), CorpusRole::UHighResource)?;
    let mut pseudo = Vec::new();
    let mut reports = BTreeMap::new();
    for (pair, lex_path) in pairs.iter().zip(lexicons) {
        let pair: PseudoPair = pair.parse()?;
        let lexicon: BTreeMap<String, String> = serde_json::from_slice(&read_input(lex_path)?)
            .map_err(|e| CliError::User(format!("{}: {e}", lex_path.display())))?;
        let client = StubTranslator::new(pair.source, pair.target, lexicon);
        let src = CorpusSet::new(
            CorpusRole::UHighResource,
            source_set.examples().iter().filter(|e| e.language == pair.source).cloned().collect(),
        );
        let out = build_pseudo_set(&src, &pool, &client, &ctx.cfg.xaug.policy()).map_err(|e| CliError::User(e.to_string()))?;
        for p in out.passages {
            pool.insert(p)?;
        }
        pseudo.extend(out.set.examples().iter().cloned());
        reports.insert(pair.label(), out.report);
    }
    let mut outputs = vec![];
    // The run directory becomes a complete data directory.
    for role in DATA_ROLES {
        let src = data.join(format!("{role}.jsonl"));
        if role != CorpusRole::DPrimeTranslated && src.is_file() {
            std::fs::copy(&src, ctx.path(&format!("{role}.jsonl"))).map_err(internal)?;
            outputs.push(format!("{role}.jsonl"));
        }
    }
    if data.join("dev.jsonl").is_file() {
        std::fs::copy(data.join("dev.jsonl"), ctx.path("dev.jsonl")).map_err(internal)?;
        outputs.push("dev.jsonl".into());
    }
    write_examples(
        ctx.path("d_prime_translated.jsonl"),
        &CorpusSet::new(CorpusRole::DPrimeTranslated, pseudo),
    )?;
    write_passages(ctx.path("passages.jsonl"), pool.passages())?;
    outputs.push("d_prime_translated.jsonl".into());
    outputs.push("passages.jsonl".into());
    outputs.push(ctx.write_json("augment.json", &reports)?);
    Ok(outputs)
}

/// Loads a data directory: passages, any role files present, and `dev.jsonl`.
pub fn load_corpora(dir: &Path) -> Result<Corpora, CliError> {
    let pool = read_passages(dir.join("passages.jsonl"))?;
    let mut sets = BTreeMap::new();
    for role in DATA_ROLES {
        let p = dir.join(format!("{role}.jsonl"));
        if p.is_file() {
            sets.insert(role, read_examples(p, role)?);
        }
    }
    let dev_path = dir.join("dev.jsonl");
    if !dev_path.is_file() {
        return Err(CliError::User(format!("{} has no dev.jsonl", dir.display())));
    }
    let dev = read_examples(dev_path, CorpusRole::DTDownstream)?;
    for e in dev.examples() {
        if !pool.contains(&e.grounding_passage_id) {
            return Err(CliError::User(format!("dev example {} cites unknown passage {}", e.id, e.grounding_passage_id)));
        }
    }
    let languages: std::collections::BTreeSet<Language> = dev.examples().iter().map(|e| e.language).collect();
    let eval_passages: Vec<Passage> = pool
        .passages()
        .iter()
        .filter(|p| languages.contains(&p.language) && !p.id.contains('#'))
        .cloned()
        .collect();
    Ok(Corpora {
        sets,
        pool,
        dev,
        eval_passages,
        augment: Vec::new(),
    })
}

fn corpora_for(ctx: &Ctx, data: Option<&Path>, seed: u64) -> Result<Corpora, CliError> {
    match data {
        Some(d) => load_corpora(d),
        None => {
            let setup = CrossLingualSetup::generate(seed, &CrossLingualConfig::default());
            Ok(Corpora::from_cross_lingual(&setup, &ctx.cfg, seed)?)
        }
    }
}

fn train(ctx: &Ctx, data: &Path, role: CorpusRole) -> Result<Vec<String>, CliError> {
    let corpora = load_corpora(data)?;
    let set = corpora
        .sets
        .get(&role)
        .ok_or_else(|| CliError::User(format!("{} has no {role}.jsonl", data.display())))?;
    let cfg = &ctx.cfg;
    let tok = build_tokenizer(
        &corpora.pool,
        set.examples().iter().chain(corpora.dev.examples()),
        &cfg.generator.prompt,
    );
    let mut model = Pipeline::new(tok, cfg, cfg.seed);
    let index_passages = gold_passages(set.examples(), &corpora.pool);
    let round = model.train_round(set.examples(), &corpora.pool, &index_passages, cfg, cfg.seed)?;
    model.seal(Some("train"), &Default::default());
    let eval = model.evaluate(corpora.dev.examples(), &corpora.pool, &corpora.eval_passages, cfg, cfg.seed)?;
    model.save(&ctx.dir)?;
    write_lines(&ctx.path("predictions.txt"), &eval.predictions)?;
    let mut outputs = vec![
        "retriever.ckpt".to_string(),
        "reranker.ckpt".into(),
        "generator.ckpt".into(),
        "predictions.txt".into(),
    ];
    outputs.push(ctx.write_json("training.json", &round)?);
    outputs.push(ctx.write_json(
        "metrics.json",
        &serde_json::json!({
            "retrieval": MetricsReport::new(eval.generation.clone(), Some(eval.retrieval)),
            "reranked": MetricsReport::new(eval.generation, Some(eval.rerank)),
        }),
    )?);
    Ok(outputs)
}

/// Plan file contents.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanFile {
    pub variant: String,
    #[serde(default)]
    pub drop_pair: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// `section.key` to value, applied on top of the run config.
    #[serde(default)]
    pub overrides: BTreeMap<String, toml::Value>,
}

fn run_plan_cmd(
    ctx: &Ctx,
    variant: Option<&str>,
    drop_pair: Option<&str>,
    plan_path: Option<&Path>,
    data: Option<&Path>,
) -> Result<Vec<String>, CliError> {
    let file: Option<PlanFile> = match plan_path {
        Some(p) => {
            let text = String::from_utf8(read_input(p)?).map_err(|e| CliError::User(e.to_string()))?;
            Some(toml::from_str(&text).map_err(|e| CliError::User(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let variant = variant
        .or(file.as_ref().map(|f| f.variant.as_str()))
        .ok_or_else(|| CliError::User("give --variant or --plan".into()))?;
    let mut plan = make_plan(variant.parse::<Variant>()?);
    if let Some(pair) = drop_pair.or(file.as_ref().and_then(|f| f.drop_pair.as_deref())) {
        plan = plan.without_pair(pair.parse()?)?;
    }
    let mut cfg = ctx.cfg.clone();
    if let Some(f) = &file {
        let ov: Vec<(String, String)> = f
            .overrides
            .iter()
            .map(|(k, v)| (k.clone(), match v {
                toml::Value::String(s) => s.clone(),
                other => other.to_string(),
            }))
            .collect();
        cfg = cfg.with_overrides(&ov)?;
        if let Some(s) = f.seed {
            cfg.seed = s;
        }
    }
    let corpora = corpora_for(ctx, data, cfg.seed)?;
    let store = RunStore::at(ctx.path("stages"));
    let (record, _) = run_plan(&plan, &corpora, &cfg, cfg.seed, &store)?;
    let r = ctx.write_json("run_record.json", &record)?;
    let m = ctx.write_json("metrics.json", record.final_metrics().expect("plans have stages"))?;
    if !record.stages.iter().all(|s| s.audit.ok()) {
        return Err(internal("stage audit mismatch; see run_record.json"));
    }
    Ok(vec![r, m])
}

#[derive(Debug, Serialize)]
struct AblateReport {
    seeds: Vec<u64>,
    tables: Vec<AblationTable>,
    /// Row name to median Total over seeds.
    median_total: BTreeMap<String, f64>,
}

fn ablate(ctx: &Ctx, seeds: &[u64], data: Option<&Path>) -> Result<Vec<String>, CliError> {
    if seeds.is_empty() {
        return Err(CliError::User("--seeds is empty".into()));
    }
    let corpora = corpora_for(ctx, data, ctx.cfg.seed)?;
    let mut tables = Vec::new();
    for &s in seeds {
        let store = RunStore::at(ctx.path(&format!("seed{s}")));
        let t = ablation_suite(&corpora, &ctx.cfg, s, &store)?;
        log::info!("seed {s}\n{}", t.render());
        tables.push(t);
    }
    let mut median_total = BTreeMap::new();
    for row in &tables[0].rows {
        let totals: Vec<f64> = tables.iter().filter_map(|t| t.row(&row.name)).map(|r| r.total).collect();
        median_total.insert(row.name.clone(), median(&totals));
    }
    let mut text = String::new();
    for t in &tables {
        text.push_str(&format!("seed {}\n{}\n", t.seed, t.render()));
    }
    std::fs::write(ctx.path("ablation.txt"), &text).map_err(internal)?;
    print!("{text}");
    let report = AblateReport {
        seeds: seeds.to_vec(),
        tables,
        median_total,
    };
    Ok(vec!["ablation.txt".into(), ctx.write_json("ablation.json", &report)?])
}
