//! The experiment grid: one source model, then train/adapt and evaluate for
//! every target × system × size × seed cell.

use std::fmt::Write as _;

use anyhow::{Context, Result};
use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;

use lnadapt_core::corpus::{make_speaker_with, rng_for, SpeakerSpec};
use lnadapt_core::training::{adapt_on, evaluate, train_sd_on};
use lnadapt_core::{synthesize_corpus, train_sd, Corpus, MetricsReport, MultiTaskModel, Utterance};

use crate::config::{Check, ExperimentConfig, System, TargetConfig};

pub const SWEEP_CSV_HEADER: &str =
    "target,system,n_adapt,seed,mcd,f0_rmse,uv_err,mse,n_frames,status";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub target: String,
    pub system: System,
    pub n_adapt: usize,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

impl SweepRow {
    fn csv(&self) -> String {
        let head = format!(
            "{},{},{},{}",
            self.target, self.system, self.n_adapt, self.seed
        );
        match &self.outcome {
            Ok(m) => format!(
                "{head},{:.6},{:.6},{:.6},{:.8},{},ok",
                m.mcd, m.f0_rmse, m.uv_error, m.overall_mse, m.n_frames
            ),
            Err(e) => format!("{head},,,,,,error: {}", e.replace([',', '\n'], ";")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub target: String,
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub sizes: Vec<usize>,
    pub systems: Vec<System>,
    pub targets: Vec<TargetConfig>,
    pub rows: Vec<SweepRow>,
    pub checks: Vec<CheckResult>,
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

impl SweepReport {
    /// Median over seeds of a metric; `None` when every seed failed.
    pub fn median(
        &self,
        target: &str,
        system: System,
        n: usize,
        metric: fn(&MetricsReport) -> f64,
    ) -> Option<f64> {
        median(
            self.rows
                .iter()
                .filter(|r| r.target == target && r.system == system && r.n_adapt == n)
                .filter_map(|r| r.outcome.as_ref().ok().map(metric))
                .collect(),
        )
    }

    pub fn median_mse(&self, target: &str, system: System, n: usize) -> Option<f64> {
        self.median(target, system, n, |m| m.overall_mse)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.outcome.is_err()).count()
    }

    pub fn all_pass(&self) -> bool {
        self.failures() == 0 && self.checks.iter().all(|c| c.pass)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.csv());
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::from("# Sweep report\n");
        let seeds = self
            .rows
            .iter()
            .map(|r| r.seed)
            .collect::<std::collections::BTreeSet<_>>()
            .len();
        for t in &self.targets {
            let _ = write!(md, "\n## Target `{}` (distance {})\n", t.name, t.distance);
            for (title, metric) in [
                (
                    "validation MSE",
                    (|m: &MetricsReport| m.overall_mse) as fn(&MetricsReport) -> f64,
                ),
                ("MCD (dB)", |m: &MetricsReport| m.mcd),
                ("F0 RMSE (Hz)", |m: &MetricsReport| m.f0_rmse),
                ("U/V error", |m: &MetricsReport| m.uv_error),
            ] {
                let _ = write!(md, "\nMedian {title} over {seeds} seeds.\n\n| system |");
                for n in &self.sizes {
                    let _ = write!(md, " {n} |");
                }
                md.push_str("\n|---|");
                md.push_str(&"---:|".repeat(self.sizes.len()));
                md.push('\n');
                for &s in &self.systems {
                    let _ = write!(md, "| {s} |");
                    for &n in &self.sizes {
                        match self.median(&t.name, s, n, metric) {
                            Some(v) => {
                                let _ = write!(md, " {v:.6} |");
                            }
                            None => md.push_str(" n/a |"),
                        }
                    }
                    md.push('\n');
                }
            }
            let checks: Vec<_> = self.checks.iter().filter(|c| c.target == t.name).collect();
            if !checks.is_empty() {
                md.push_str("\nTrend checks:\n\n");
                for c in checks {
                    let _ = writeln!(md, "- {}: {} ({})", verdict(c.pass), c.label, c.detail);
                }
            }
        }
        let cross: Vec<_> = self.checks.iter().filter(|c| c.target == "*").collect();
        if !cross.is_empty() {
            md.push_str("\n## Across targets\n\n");
            for c in cross {
                let _ = writeln!(md, "- {}: {} ({})", verdict(c.pass), c.label, c.detail);
            }
        }
        let failures = self.failures();
        if failures > 0 {
            let _ = writeln!(
                md,
                "\n{failures} cell(s) failed; see the CSV status column."
            );
        }
        md
    }
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{v:.6}"))
}

/// Evaluates one trend check on the medians of `target`.
pub fn evaluate_check(report: &SweepReport, target: &str, check: Check) -> CheckResult {
    let sizes = &report.sizes;
    let (small, large) = (sizes[0], sizes[sizes.len() - 1]);
    let m = |s: System, n: usize| report.median_mse(target, s, n);
    let result = |pass: bool, detail: String| CheckResult {
        target: target.to_string(),
        label: check.label().to_string(),
        pass,
        detail,
    };
    match check {
        Check::BeatsSd => {
            let mut losses = Vec::new();
            for &n in sizes {
                let sd = m(System::Sd, n);
                for s in [System::Ol, System::OlFullLn, System::OlLrpdLn] {
                    match (m(s, n), sd) {
                        (Some(a), Some(b)) if a < b => {}
                        (a, b) => {
                            losses.push(format!("{s}@{n}: {} vs SD {}", fmt_opt(a), fmt_opt(b)))
                        }
                    }
                }
            }
            if losses.is_empty() {
                result(true, "all sizes".into())
            } else {
                result(false, losses.join("; "))
            }
        }
        Check::GapGrows => {
            let gap = |n| Some(m(System::Ol, n)? - m(System::OlFullLn, n)?);
            let (a, b) = (gap(small), gap(large));
            let pass = matches!((a, b), (Some(a), Some(b)) if b > a);
            result(
                pass,
                format!("gap@{small} {} vs gap@{large} {}", fmt_opt(a), fmt_opt(b)),
            )
        }
        Check::RankCrossover => {
            let (fs, ls) = (m(System::OlFullLn, small), m(System::OlLrpdLn, small));
            let (fl, ll) = (m(System::OlFullLn, large), m(System::OlLrpdLn, large));
            let small_ok = matches!((ls, fs), (Some(l), Some(f)) if l <= f);
            let large_ok = matches!((fl, ll), (Some(f), Some(l)) if f <= l);
            result(
                small_ok && large_ok,
                format!(
                    "@{small}: LRPD {} Full {}; @{large}: Full {} LRPD {}",
                    fmt_opt(ls),
                    fmt_opt(fs),
                    fmt_opt(fl),
                    fmt_opt(ll)
                ),
            )
        }
    }
}

/// For targets ordered by distance, every system's median MSE at the
/// smallest size must not decrease with distance.
pub fn difficulty_check(report: &SweepReport) -> Option<CheckResult> {
    let mut targets: Vec<&TargetConfig> = report.targets.iter().collect();
    if targets.len() < 2 {
        return None;
    }
    targets.sort_by(|a, b| a.distance.total_cmp(&b.distance));
    let small = report.sizes[0];
    let mut problems = Vec::new();
    for pair in targets.windows(2) {
        for &s in &report.systems {
            let near = report.median_mse(&pair[0].name, s, small);
            let far = report.median_mse(&pair[1].name, s, small);
            if !matches!((near, far), (Some(a), Some(b)) if b >= a) {
                problems.push(format!(
                    "{s}: {} {} vs {} {}",
                    pair[1].name,
                    fmt_opt(far),
                    pair[0].name,
                    fmt_opt(near)
                ));
            }
        }
    }
    Some(CheckResult {
        target: "*".into(),
        label: format!("farther targets are harder at {small} utterances"),
        pass: problems.is_empty(),
        detail: if problems.is_empty() {
            "all systems".into()
        } else {
            problems.join("; ")
        },
    })
}

pub fn source_corpus(cfg: &ExperimentConfig) -> Result<Corpus> {
    let c = cfg.corpus_config();
    let spk = make_speaker_for(cfg, cfg.source.seed, cfg.source.distance)?;
    Ok(synthesize_corpus(
        &spk,
        cfg.source_utts + c.n_valid + c.n_test,
        cfg.source.seed,
        &c,
    )?)
}

pub fn target_corpus(cfg: &ExperimentConfig, t: &TargetConfig) -> Result<Corpus> {
    let c = cfg.corpus_config();
    let spk = make_speaker_for(cfg, t.seed, t.distance)?;
    let pool = *cfg.sizes.last().expect("validated non-empty");
    synthesize_corpus(&spk, pool + c.n_valid + c.n_test, t.seed, &c)
        .with_context(|| format!("target {}", t.name))
}

fn make_speaker_for(cfg: &ExperimentConfig, seed: u64, distance: f64) -> Result<SpeakerSpec> {
    Ok(make_speaker_with(
        &cfg.corpus_config().teacher,
        seed,
        distance,
    )?)
}

pub fn train_source(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<MultiTaskModel> {
    let mut tcfg = cfg.source_tcfg();
    tcfg.seed = cfg.source_train_seed;
    let (model, record) =
        train_sd(&cfg.corpus_config().teacher, corpus, &tcfg).context("training source model")?;
    info!(
        "source model: selected epoch {} of {}, valid loss {:.6}",
        record.selected_epoch,
        record.valid_loss.len() - 1,
        record.selected_valid_loss()
    );
    Ok(model)
}

/// The first `n` utterances of a seed-specific permutation of the target
/// training pool. Subsets of one seed are nested across sizes.
pub fn adaptation_subset(pool: &[Utterance], n: usize, seed: u64) -> Vec<Utterance> {
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut rng_for(seed, 3));
    idx.into_iter().take(n).map(|i| pool[i].clone()).collect()
}

/// Trains or adapts one system on `n` target utterances and scores it on
/// the target's validation split.
pub fn run_cell(
    cfg: &ExperimentConfig,
    source: &MultiTaskModel,
    target: &Corpus,
    system: System,
    n: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let train = adaptation_subset(&target.train, n, seed);
    let stats = &target.stats;
    let model = match system {
        System::Sd => {
            let mut tcfg = cfg.sd_tcfg();
            tcfg.seed = seed;
            train_sd_on(
                &cfg.corpus_config().teacher,
                &train,
                &target.valid,
                stats,
                &tcfg,
            )?
            .0
        }
        _ => {
            let mut tcfg = cfg.adapt_tcfg();
            tcfg.seed = seed;
            adapt_on(
                source,
                &train,
                &target.valid,
                stats,
                system.adapter(cfg.rank),
                &cfg.policy,
                &tcfg,
            )?
            .0
        }
    };
    Ok(evaluate(&model, &target.valid, stats)?)
}

/// Runs every cell against an already trained source model.
pub fn run_grid(cfg: &ExperimentConfig, source: &MultiTaskModel) -> Result<SweepReport> {
    let corpora = cfg
        .targets
        .iter()
        .map(|t| target_corpus(cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (ti, t) in cfg.targets.iter().enumerate() {
        for &system in &cfg.systems {
            for &n in &cfg.sizes {
                for &seed in &cfg.seeds {
                    cells.push((ti, t, system, n, seed));
                }
            }
        }
    }
    let total = cells.len();
    let rows: Vec<SweepRow> = cells
        .into_par_iter()
        .map(|(ti, t, system, n, seed)| {
            let outcome =
                run_cell(cfg, source, &corpora[ti], system, n, seed).map_err(|e| format!("{e:#}"));
            match &outcome {
                Ok(m) => info!(
                    "{} {system} n={n} seed={seed}: mse {:.6}",
                    t.name, m.overall_mse
                ),
                Err(e) => info!("{} {system} n={n} seed={seed}: failed: {e}", t.name),
            }
            SweepRow {
                target: t.name.clone(),
                system,
                n_adapt: n,
                seed,
                outcome,
            }
        })
        .collect();
    debug_assert_eq!(rows.len(), total);
    let mut report = SweepReport {
        sizes: cfg.sizes.clone(),
        systems: cfg.systems.clone(),
        targets: cfg.targets.clone(),
        rows,
        checks: Vec::new(),
    };
    let mut checks = Vec::new();
    for t in &cfg.targets {
        for &c in &t.checks {
            checks.push(evaluate_check(&report, &t.name, c));
        }
    }
    checks.extend(difficulty_check(&report));
    report.checks = checks;
    Ok(report)
}

/// Generates the source corpus, trains the source model once (unless the
/// config names a model file) and runs the grid.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let source = match &cfg.source_model {
        Some(p) => lnadapt_core::load_model(p)
            .with_context(|| format!("loading source model {}", p.display()))?,
        None => train_source(cfg, &source_corpus(cfg)?)?,
    };
    run_grid(cfg, &source)
}
