//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage, config or input errors, 3 numerical
//! failure (non-finite values or a failed gradient check).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::RngExt;

use crate::corpus::{
    build_vocab, encode_pairs, gen_synthetic, read_corpus, synthetic_vocab, write_corpus, ExamplePair, TaskKind,
    TokenPair, Vocabulary,
};
use crate::decoding::beam_generate;
use crate::error::{Error, Result};
use crate::gradcheck::{check_xent, TensorReport};
use crate::metrics::{bleu_score, bleu_stats, corpus_bleu_with, rouge2, RefReduce, RewardMetric, Smoothing};
use crate::model::{load_checkpoint, save_checkpoint, CellKind, ModelConfig, ModelParams, INIT_SCALE};
use crate::numkern::{derive_seed, seeded_rng};
use crate::training::{train, MetricLogWriter, RegimeKind, TrainOptions, TrainingSchedule};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mixer",
    version,
    about = "Sequence-level training and decoding for recurrent generators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model as described by a `key = value` config file.
    Train {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Decode every source sentence of a file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// One source per line; anything after a TAB is ignored.
        #[arg(long)]
        source: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        #[arg(long, default_value_t = 25)]
        max_len: usize,
        /// Accepted for interface uniformity; decoding is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score candidates against references.
    Score {
        candidates: PathBuf,
        references: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Bleu)]
        metric: MetricArg,
        #[arg(long, value_enum, default_value_t = Level::Corpus)]
        level: Level,
        /// How several references per line are combined for BLEU.
        #[arg(long, value_enum, default_value_t = ReduceArg::Pooled)]
        ref_reduce: ReduceArg,
    },
    /// Check analytic XENT gradients against finite differences on random
    /// small models.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic copy, reverse or sort corpus.
    GenData {
        #[arg(long)]
        task: TaskKind,
        #[arg(long, default_value_t = 20)]
        symbols: usize,
        #[arg(long, default_value_t = 5)]
        min_len: usize,
        #[arg(long, default_value_t = 10)]
        max_len: usize,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricArg {
    Bleu,
    Rouge2,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Level {
    Corpus,
    Sentence,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReduceArg {
    Pooled,
    Max,
}

/// Parses `args` (including the program name), runs the command, and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train { config, seed } => {
            let mut cfg = TrainConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let summary = cmd_train(&cfg)?;
            print!("{summary}");
            Ok(EXIT_OK)
        }
        Command::Generate {
            checkpoint,
            vocab,
            source,
            output,
            beam,
            max_len,
            seed: _,
        } => {
            let text = cmd_generate(&checkpoint, &vocab, &source, beam, max_len)?;
            match output {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => print!("{text}"),
            }
            Ok(EXIT_OK)
        }
        Command::Score {
            candidates,
            references,
            metric,
            level,
            ref_reduce,
        } => {
            let metric = match metric {
                MetricArg::Bleu => RewardMetric::Bleu,
                MetricArg::Rouge2 => RewardMetric::Rouge2,
            };
            let reduce = match ref_reduce {
                ReduceArg::Pooled => RefReduce::Pooled,
                ReduceArg::Max => RefReduce::Max,
            };
            let scores = cmd_score(
                &candidates,
                &references,
                metric,
                matches!(level, Level::Sentence),
                reduce,
            )?;
            for s in scores {
                println!("{s:.4}");
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { instances, seed } => {
            let (report, ok) = cmd_gradcheck(instances, seed)?;
            print!("{report}");
            Ok(if ok { EXIT_OK } else { EXIT_NUMERIC })
        }
        Command::GenData {
            task,
            symbols,
            min_len,
            max_len,
            n,
            seed,
            output,
        } => {
            let vocab = synthetic_vocab(symbols);
            let pairs = gen_synthetic(task, symbols, (min_len, max_len), n, seed)?;
            let raw = crate::corpus::decode_pairs(&vocab, &pairs)?;
            write_corpus(&output, &raw)?;
            Ok(EXIT_OK)
        }
    }
}

/// Everything a `train` run needs, read from a flat `key = value` file.
/// Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub train: PathBuf,
    pub valid: Option<PathBuf>,
    pub vocab: PathBuf,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub regime: RegimeKind,
    pub cell: CellKind,
    pub hidden: usize,
    pub window: usize,
    /// Defaults to the longest training source.
    pub max_source: Option<usize>,
    pub min_count: usize,
    pub init_scale: f64,
    pub seed: u64,
    pub reward: RewardMetric,
    pub schedule: TrainingSchedule,
}

const CONFIG_KEYS: &[&str] = &[
    "train",
    "valid",
    "vocab",
    "checkpoint",
    "log",
    "regime",
    "cell",
    "hidden",
    "window",
    "max_source",
    "min_count",
    "init_scale",
    "seed",
    "reward",
    "n_xent",
    "n_xer",
    "delta",
    "t",
    "epochs",
    "dad_start",
    "dad_end",
    "e2e_every",
    "k",
    "lr",
    "lr_mixed",
    "lr_b",
    "max_norm",
    "batch",
];

/// Parses `key = value` lines; `#` starts a comment line. Unknown or
/// repeated keys are errors.
pub fn parse_kv(text: &str, known: &[&str]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", i + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !known.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key {k:?}", i + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: key {k:?} given twice", i + 1)));
        }
    }
    Ok(out)
}

fn take<T: std::str::FromStr>(map: &mut BTreeMap<String, String>, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    map.remove(key)
        .map(|v| v.parse::<T>().map_err(|e| Error::Config(format!("{key} = {v:?}: {e}"))))
        .transpose()
}

impl TrainConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = parse_kv(text, CONFIG_KEYS)?;
        let path =
            |m: &mut BTreeMap<String, String>, key: &str| -> Option<PathBuf> { m.remove(key).map(|v| base.join(v)) };
        let train = path(&mut m, "train").ok_or_else(|| Error::Config("missing key `train`".into()))?;
        let checkpoint = path(&mut m, "checkpoint").ok_or_else(|| Error::Config("missing key `checkpoint`".into()))?;
        let valid = path(&mut m, "valid");
        let vocab = path(&mut m, "vocab").unwrap_or_else(|| checkpoint.with_extension("vocab"));
        let log = path(&mut m, "log").unwrap_or_else(|| checkpoint.with_extension("csv"));
        let d = TrainingSchedule::default();
        let schedule = TrainingSchedule {
            n_xent: take(&mut m, "n_xent")?.unwrap_or(d.n_xent),
            n_xer: take(&mut m, "n_xer")?.unwrap_or(d.n_xer),
            delta: take(&mut m, "delta")?.unwrap_or(d.delta),
            t: take(&mut m, "t")?.unwrap_or(d.t),
            epochs: take(&mut m, "epochs")?.unwrap_or(d.epochs),
            dad_start: take(&mut m, "dad_start")?.unwrap_or(d.dad_start),
            dad_end: take(&mut m, "dad_end")?.unwrap_or(d.dad_end),
            e2e_every: take(&mut m, "e2e_every")?.unwrap_or(d.e2e_every),
            k: take(&mut m, "k")?.unwrap_or(d.k),
            lr: take(&mut m, "lr")?.unwrap_or(d.lr),
            lr_mixed: take(&mut m, "lr_mixed")?.or(d.lr_mixed),
            lr_b: take(&mut m, "lr_b")?.unwrap_or(d.lr_b),
            max_norm: take(&mut m, "max_norm")?.unwrap_or(d.max_norm),
            batch: take(&mut m, "batch")?.unwrap_or(d.batch),
        };
        let cfg = TrainConfig {
            train,
            valid,
            vocab,
            checkpoint,
            log,
            regime: take(&mut m, "regime")?.unwrap_or(RegimeKind::Xent),
            cell: take(&mut m, "cell")?.unwrap_or(CellKind::Elman),
            hidden: take(&mut m, "hidden")?.unwrap_or(32),
            window: take(&mut m, "window")?.unwrap_or(5),
            max_source: take(&mut m, "max_source")?,
            min_count: take(&mut m, "min_count")?.unwrap_or(1),
            init_scale: take(&mut m, "init_scale")?.unwrap_or(INIT_SCALE),
            seed: take(&mut m, "seed")?.unwrap_or(0),
            reward: take(&mut m, "reward")?.unwrap_or_default(),
            schedule,
        };
        debug_assert!(m.is_empty(), "every known key is consumed");
        cfg.schedule.validate()?;
        if cfg.hidden == 0 || cfg.window.is_multiple_of(2) || cfg.min_count == 0 || !(cfg.init_scale > 0.0) {
            return Err(Error::Config(
                "hidden and min_count must be positive, window odd, init_scale positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

/// Runs a full training job and returns a printable summary.
pub fn cmd_train(cfg: &TrainConfig) -> Result<String> {
    let raw = read_corpus(&cfg.train)?;
    if raw.is_empty() {
        return Err(Error::Config(format!("{}: no training examples", cfg.train.display())));
    }
    let raw_valid = cfg.valid.as_deref().map(read_corpus).transpose()?.unwrap_or_default();
    let vocab = build_vocab(raw.iter().flat_map(|(s, t)| [s, t]), cfg.min_count)?;
    vocab.save(&cfg.vocab)?;

    let longest = raw.iter().map(|(s, _)| s.len()).max().unwrap_or(1).max(1);
    let max_source = cfg.max_source.unwrap_or(longest);
    let t_words = cfg.schedule.t.saturating_sub(1);
    let train_data: Vec<ExamplePair> = encode_pairs(&vocab, &raw, t_words, max_source)
        .into_iter()
        .filter(|e| !e.source.is_empty())
        .collect();
    let valid_data: Vec<ExamplePair> = encode_pairs(&vocab, &raw_valid, usize::MAX, max_source)
        .into_iter()
        .filter(|e| !e.source.is_empty())
        .collect();

    let model_cfg = ModelConfig {
        cell: cfg.cell,
        vocab: vocab.len(),
        hidden: cfg.hidden,
        window: cfg.window,
        max_source,
    };
    let mut params = ModelParams::random(model_cfg, cfg.init_scale, &mut seeded_rng(cfg.seed))?;
    let opts = TrainOptions {
        schedule: cfg.schedule.clone(),
        reward: cfg.reward,
        seed: derive_seed(cfg.seed, &[1]),
    };
    let mut log = MetricLogWriter::create(&cfg.log)?;
    let records = train(&mut params, &train_data, &valid_data, cfg.regime, &opts, |r| {
        log.append(r)
    })?;
    if !params.is_finite() {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    save_checkpoint(&params, &cfg.checkpoint)?;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "trained {} for {} epochs on {} examples (vocab {})",
        cfg.regime,
        records.len(),
        train_data.len(),
        vocab.len()
    );
    if let Some(last) = records.last() {
        let _ = write!(out, "final train_loss {:.4}", last.train_loss);
        if let Some(v) = last.val_metric {
            let _ = write!(out, ", val {} {:.4}", cfg.reward, v);
        }
        out.push('\n');
    }
    let _ = writeln!(out, "checkpoint {}", cfg.checkpoint.display());
    Ok(out)
}

fn first_field(line: &str) -> &str {
    line.split('\t').next().unwrap_or("")
}

fn split_tokens(s: &str) -> Vec<String> {
    s.split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// Decodes each source line and returns `source<TAB>hypothesis` lines.
pub fn cmd_generate(ckpt: &Path, vocab_path: &Path, source: &Path, beam: usize, max_len: usize) -> Result<String> {
    let params = load_checkpoint(ckpt)?;
    let vocab = Vocabulary::load(vocab_path)?;
    if vocab.len() != params.vocab() {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the checkpoint expects {}",
            vocab.len(),
            params.vocab()
        )));
    }
    let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
    let lines: Vec<&str> = text.lines().map(first_field).collect();
    let outputs = lines
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let toks = split_tokens(line);
            let mut ids = vocab.encode(&toks);
            ids.truncate(params.config.max_source);
            if ids.is_empty() {
                return Err(Error::Parse {
                    path: source.to_path_buf(),
                    line: i + 1,
                    msg: "empty source sentence".into(),
                });
            }
            let best = beam_generate(&params, &ids, beam, max_len)?.swap_remove(0);
            Ok(format!(
                "{}\t{}",
                toks.join(" "),
                vocab.decode(best.output_words())?.join(" ")
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::new();
    for o in outputs {
        out.push_str(&o);
        out.push('\n');
    }
    Ok(out)
}

/// Sentences of a scoring file: the text after the first TAB (several
/// TAB-separated references allowed), or the whole line if it has no TAB.
fn score_lines(path: &Path) -> Result<Vec<Vec<Vec<String>>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| {
            let fields: Vec<&str> = l.split('\t').collect();
            let sents = if fields.len() == 1 { &fields[..] } else { &fields[1..] };
            sents.iter().map(|s| split_tokens(s)).collect()
        })
        .collect())
}

/// Corpus-level score (one value) or one value per line.
pub fn cmd_score(
    candidates: &Path,
    references: &Path,
    metric: RewardMetric,
    sentence_level: bool,
    reduce: RefReduce,
) -> Result<Vec<f64>> {
    let cands = score_lines(candidates)?;
    let refs = score_lines(references)?;
    if cands.len() != refs.len() {
        return Err(Error::Config(format!(
            "{} candidate lines but {} reference lines",
            cands.len(),
            refs.len()
        )));
    }
    let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = cands
        .into_iter()
        .zip(refs)
        .map(|(mut c, r)| (c.swap_remove(0), r))
        .collect();
    match (metric, sentence_level) {
        (RewardMetric::Bleu, false) => Ok(vec![corpus_bleu_with(&pairs, reduce)?]),
        (RewardMetric::Bleu, true) => pairs
            .iter()
            .map(|(c, r)| match reduce {
                RefReduce::Pooled => Ok(bleu_score(&bleu_stats(c, r)?, Smoothing::None)),
                RefReduce::Max => r
                    .iter()
                    .map(|one| Ok(bleu_score(&bleu_stats(c, std::slice::from_ref(one))?, Smoothing::None)))
                    .try_fold(0.0f64, |m, s: Result<f64>| Ok(m.max(s?))),
            })
            .collect(),
        (RewardMetric::Rouge2, true) => Ok(pairs
            .iter()
            .map(|(c, r)| r.iter().map(|one| rouge2(c, one)).fold(0.0, f64::max))
            .collect()),
        (RewardMetric::Rouge2, false) => {
            // pooled bigram recall against the best reference of each line
            let (mut hit, mut total) = (0.0, 0.0);
            for (c, r) in &pairs {
                let best = r
                    .iter()
                    .max_by(|a, b| rouge2(c, a).total_cmp(&rouge2(c, b)))
                    .expect("at least one reference");
                let n = best.len().saturating_sub(1) as f64;
                hit += rouge2(c, best) * n;
                total += n;
            }
            Ok(vec![if total > 0.0 { hit / total } else { 0.0 }])
        }
    }
}

/// Random XENT gradient checks over both cells; returns the printable
/// report and whether every tensor passed.
pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<(String, bool)> {
    let mut out = String::new();
    let mut all_ok = true;
    for i in 0..instances {
        let mut rng = seeded_rng(derive_seed(seed, &[i as u64]));
        let cell = if i % 2 == 0 { CellKind::Elman } else { CellKind::Lstm };
        let (params, ex) = random_instance(cell, &mut rng)?;
        let reports = check_xent(&params, &ex)?;
        let ok = reports.iter().all(TensorReport::passed);
        all_ok &= ok;
        let _ = writeln!(
            out,
            "instance {i} ({cell}, H={}, W={}, T={}): {}",
            params.hidden(),
            params.vocab(),
            ex.steps(),
            if ok { "PASS" } else { "FAIL" }
        );
        for r in reports {
            let _ = writeln!(out, "  {:<18} max rel err {:.3e}", r.name, r.max_rel_error);
        }
    }
    let _ = writeln!(out, "{}", if all_ok { "PASS" } else { "FAIL" });
    Ok((out, all_ok))
}

/// A random model with H ≤ 8, W ≤ 10 and a target of at most 5 steps.
pub fn random_instance(cell: CellKind, rng: &mut crate::numkern::Rng) -> Result<(ModelParams, ExamplePair)> {
    let w = rng.random_range(5..=10);
    let h = rng.random_range(2..=8);
    let m = rng.random_range(1..=4);
    let cfg = ModelConfig {
        cell,
        vocab: w,
        hidden: h,
        window: [1, 3, 5][rng.random_range(0..3)],
        max_source: m + 1,
    };
    let params = ModelParams::random(cfg, 0.5, rng)?;
    let source: Vec<usize> = (0..m).map(|_| rng.random_range(0..w)).collect();
    let len = rng.random_range(1..=4);
    let words: Vec<usize> = (0..len).map(|_| rng.random_range(3..w)).collect();
    Ok((params, ExamplePair::new(source, &words)))
}

/// Raw pairs for tests and tooling.
pub fn token_pairs(pairs: &[(&str, &str)]) -> Vec<TokenPair> {
    pairs.iter().map(|(s, t)| (split_tokens(s), split_tokens(t))).collect()
}
