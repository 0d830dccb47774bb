//! Verb implementations behind the `lnadapt` binary.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use lnadapt_core::adapters::param_count;
use lnadapt_core::corpus::make_speaker_with;
use lnadapt_core::metrics::CSV_HEADER;
use lnadapt_core::training::{adapt_on, evaluate, evaluate_predictions, train_sd};
use lnadapt_core::{
    load_corpus, load_model, save_corpus, save_model, synthesize_corpus, AdapterKind, BlockGroup,
    CorpusConfig, InsertionPolicy, MultiTaskModel, Split, TrainConfig,
};

use crate::config::{ExperimentConfig, TrainOverrides};
use crate::sweep::{adaptation_subset, run_sweep};

/// A command-line mistake; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(
    name = "lnadapt",
    version,
    about = "Linear-network adapter experiments on synthetic speakers"
)]
pub struct Cli {
    /// Seed for corpus generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Experiment config (sweep) or training overrides (train-sd, adapt).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory or file, depending on the verb.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads for the sweep grid (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speaker corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a speaker-dependent model on a corpus.
    TrainSd(TrainSdArgs),
    /// Adapt a source model to a target corpus.
    Adapt(AdaptArgs),
    /// Score a model on one corpus split.
    Eval(EvalArgs),
    /// Run an experiment grid from a config file.
    Sweep,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    /// Distance of the speaker from the base teacher, in [0, 1].
    #[arg(long, default_value_t = 0.0)]
    pub distance: f64,
    /// Total utterances, including validation and test.
    #[arg(long, default_value_t = 200)]
    pub n_utts: usize,
    /// Speaker seed (defaults to --seed).
    #[arg(long)]
    pub speaker_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainSdArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Ol,
    FullLn,
    LrpdLn,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Source model file.
    #[arg(long)]
    pub model: PathBuf,
    /// Target corpus directory.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    /// Number of target training utterances (default: all).
    #[arg(long)]
    pub n_adapt: Option<usize>,
    /// Comma-separated slot positions.
    #[arg(long, default_value = "before_last_hidden,before_output")]
    pub policy: String,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "valid")]
    pub split: SplitArg,
    /// Score the references against themselves instead of a model.
    #[arg(long)]
    pub oracle: bool,
    /// Label written in the system column.
    #[arg(long)]
    pub label: Option<String>,
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match &cli.command {
        Command::GenCorpus(a) => gen_corpus(&cli, a),
        Command::TrainSd(a) => train_sd_cmd(&cli, a),
        Command::Adapt(a) => adapt_cmd(&cli, a),
        Command::Eval(a) => eval_cmd(&cli, a),
        Command::Sweep => sweep_cmd(&cli),
    }
}

fn required_out(cli: &Cli) -> Result<&Path> {
    cli.out
        .as_deref()
        .ok_or_else(|| usage("--out is required for this command"))
}

fn check_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        bail!(
            "{} already exists; pass --force to overwrite",
            path.display()
        );
    }
    Ok(())
}

fn train_overrides(cli: &Cli) -> Result<TrainOverrides> {
    match &cli.config {
        None => Ok(TrainOverrides::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn training_config(
    cli: &Cli,
    base: TrainConfig,
    epochs: Option<usize>,
    lr: Option<f64>,
) -> Result<TrainConfig> {
    let mut t = train_overrides(cli)?.apply(base);
    if let Some(e) = epochs {
        t.epochs = e;
    }
    if let Some(lr) = lr {
        t.learning_rate = lr;
    }
    t.seed = cli.seed;
    Ok(t)
}

pub fn gen_corpus(cli: &Cli, a: &GenCorpusArgs) -> Result<()> {
    let out = required_out(cli)?;
    if out.exists() {
        let non_empty = fs::read_dir(out)
            .with_context(|| format!("reading {}", out.display()))?
            .next()
            .is_some();
        if non_empty && !cli.force {
            bail!("{} is not empty; pass --force to overwrite", out.display());
        }
    }
    let cfg = CorpusConfig::default();
    let spk = make_speaker_with(&cfg.teacher, a.speaker_seed.unwrap_or(cli.seed), a.distance)?;
    let corpus = synthesize_corpus(&spk, a.n_utts, cli.seed, &cfg)?;
    save_corpus(&corpus, out)?;
    let frames: usize = corpus.train.iter().map(|u| u.frames()).sum();
    println!(
        "wrote {}: speaker seed {} distance {}, {} train / {} valid / {} test utterances, {frames} train frames",
        out.display(),
        spk.seed,
        spk.distance,
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len()
    );
    Ok(())
}

pub fn train_sd_cmd(cli: &Cli, a: &TrainSdArgs) -> Result<()> {
    let out = required_out(cli)?;
    check_overwrite(out, cli.force)?;
    let corpus =
        load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let tcfg = training_config(cli, TrainConfig::sd_default(), a.epochs, a.lr)?;
    let (model, record) = train_sd(&corpus.config.teacher, &corpus, &tcfg)?;
    save_model(&model, out)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, record.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    println!(
        "wrote {} and {}: selected epoch {}, validation loss {:.6}",
        out.display(),
        csv.display(),
        record.selected_epoch,
        record.selected_valid_loss()
    );
    Ok(())
}

pub fn adapt_cmd(cli: &Cli, a: &AdaptArgs) -> Result<()> {
    let out = required_out(cli)?;
    check_overwrite(out, cli.force)?;
    let policy: InsertionPolicy = a
        .policy
        .parse()
        .map_err(|e| usage(format!("--policy: {e}")))?;
    let source = load_model(&a.model)?;
    let corpus =
        load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let kind = match a.method {
        Method::Ol => None,
        Method::FullLn => Some(AdapterKind::Full),
        Method::LrpdLn => Some(AdapterKind::Lrpd { rank: a.rank }),
    };
    if let Some(k) = kind {
        for pos in &policy.positions {
            let slot = pos.resolve(source.config())?;
            let width = source.config().slot_width(slot);
            k.validate(width)?;
            info!(
                "adapter {k} at slot {slot} ({pos}): {} parameters",
                param_count(k, width)
            );
        }
    }
    let n = a.n_adapt.unwrap_or(corpus.train.len());
    if n == 0 || n > corpus.train.len() {
        bail!("--n-adapt must be between 1 and {}", corpus.train.len());
    }
    let train = adaptation_subset(&corpus.train, n, cli.seed);
    let tcfg = training_config(cli, TrainConfig::adapt_default(), a.epochs, a.lr)?;
    let (model, record) = adapt_on(
        &source,
        &train,
        &corpus.valid,
        &corpus.stats,
        kind,
        &policy,
        &tcfg,
    )?;
    assert_trunk_unchanged(&source, &model)?;
    save_model(&model, out)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, record.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    println!(
        "wrote {}: {n} adaptation utterances, selected epoch {}, validation loss {:.6}",
        out.display(),
        record.selected_epoch,
        record.selected_valid_loss()
    );
    Ok(())
}

fn assert_trunk_unchanged(source: &MultiTaskModel, adapted: &MultiTaskModel) -> Result<()> {
    if source.snapshot(BlockGroup::Trunk) != adapted.snapshot(BlockGroup::Trunk) {
        bail!("adapted model's trunk differs from the source; refusing to write it");
    }
    Ok(())
}

pub fn eval_cmd(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let corpus =
        load_corpus(&a.corpus).with_context(|| format!("loading corpus {}", a.corpus.display()))?;
    let utts = corpus.split(a.split.into());
    let (label, report) = if a.oracle {
        let preds = utts
            .iter()
            .map(|u| corpus.stats.normalize(u).map(|n| n.targets))
            .collect::<lnadapt_core::Result<Vec<_>>>()?;
        (
            "oracle".to_string(),
            evaluate_predictions(&preds, utts, &corpus.stats)?,
        )
    } else {
        let path = a
            .model
            .as_ref()
            .expect("clap enforces --model without --oracle");
        let model = load_model(path)?;
        let stats = model.norm.as_ref().unwrap_or(&corpus.stats);
        let label = path
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned());
        (label, evaluate(&model, utts, stats)?)
    };
    let label = a.label.clone().unwrap_or(label);
    let row = report.csv_row(&label, corpus.train.len());
    println!("{CSV_HEADER}\n{row}");
    if let Some(out) = &cli.out {
        let fresh = !out.exists();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out)
            .with_context(|| format!("opening {}", out.display()))?;
        if fresh {
            writeln!(f, "{CSV_HEADER}")?;
        }
        writeln!(f, "{row}")?;
    }
    Ok(())
}

pub fn sweep_cmd(cli: &Cli) -> Result<()> {
    let cfg_path = cli
        .config
        .as_deref()
        .ok_or_else(|| usage("sweep needs --config"))?;
    let out = required_out(cli)?;
    let cfg = ExperimentConfig::load(cfg_path)?;
    let csv = out.join("sweep.csv");
    let md = out.join("sweep.md");
    for p in [&csv, &md] {
        check_overwrite(p, cli.force)?;
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_sweep(&cfg)?;
    fs::write(&csv, report.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
    fs::write(&md, report.to_markdown()).with_context(|| format!("writing {}", md.display()))?;
    let kept = out.join("sweep.toml");
    if fs::canonicalize(cfg_path).ok() != fs::canonicalize(&kept).ok() {
        fs::copy(cfg_path, &kept).with_context(|| format!("copying {}", cfg_path.display()))?;
    }
    for c in &report.checks {
        println!(
            "{} [{}] {}: {}",
            if c.pass { "PASS" } else { "FAIL" },
            c.target,
            c.label,
            c.detail
        );
    }
    println!("wrote {} and {}", csv.display(), md.display());
    if !report.all_pass() {
        bail!(
            "{} failed cell(s) or trend check(s)",
            report.failures() + report.checks.iter().filter(|c| !c.pass).count()
        );
    }
    Ok(())
}
