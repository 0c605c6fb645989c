//! The `emogate` command line: generate corpora, train, evaluate, report
//! and run the canned experiment suites.
//!
//! Exit codes are 0 on success, 1 for usage errors, 2 for invalid configs
//! or data and 3 for runtime failures. A failing command removes every
//! file it created.

pub mod config;
pub mod error;
pub mod output;
pub mod run;
pub mod suite;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use emogate::data::SyntheticSpec;
use emogate::eval::{compactness, embeddings, evaluate, format_embeddings, gate_report};
use emogate::model::Variant;

use crate::config::{parse_config, ExperimentConfig};
use crate::error::{io_error, CliError};
use crate::output::Outputs;
use crate::run::{load_run, train_seeds, write_run};

/// Default root for output directories when neither `--out` nor the
/// config's `out_dir` is set.
pub const OUT_ENV: &str = "EMOGATE_OUT";

#[derive(Debug, Parser)]
#[command(name = "emogate", version, about = "Multi-domain speech emotion recognition experiments")]
pub struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Run only this seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the config's variant: single, base, sb, omoe, mmoe or ours.
    #[arg(long, global = true, value_parser = parse_variant)]
    pub variant: Option<Variant>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus directory.
    Synth {
        /// Synthetic spec (TOML); defaults to the config's spec or the
        /// built-in default.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Train every seed and write logs, checkpoints and a summary.
    Train,
    /// Score a trained seed on its test split.
    Eval {
        /// A `seed-N` directory or its `checkpoint` directory.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write gate, routing, compactness and embedding tables for a trained seed.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Run a canned multi-seed experiment.
    Suite {
        #[arg(value_enum)]
        which: SuiteKind,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteKind {
    /// Every variant from Base to Ours.
    Ladder,
    /// Single-domain models with and without the auxiliary loss.
    Ablation,
    /// Gate attribution with one informative feature per domain.
    Gates,
}

fn parse_variant(tag: &str) -> Result<Variant, String> {
    Variant::parse(tag).map_err(|e| e.to_string())
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The config, with command-line overrides applied, and the directory its
/// relative paths are resolved against.
fn load_config(cli: &Cli, fallback: impl FnOnce() -> ExperimentConfig) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let (mut cfg, base) = match &cli.config {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (parse_config(p)?, base)
        }
        None => (fallback(), PathBuf::new()),
    };
    apply_overrides(cli, &mut cfg);
    Ok((cfg, base))
}

fn apply_overrides(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(v) = cli.variant {
        cfg.variant = v;
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
}

/// `--out`, else the config's `out_dir`, else `$EMOGATE_OUT/<name>`, else
/// `runs/<name>`.
fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>, base: &Path, name: &str) -> PathBuf {
    if let Some(o) = &cli.out {
        return o.clone();
    }
    if let Some(o) = cfg.and_then(|c| c.out_dir.as_ref()) {
        return base.join(o);
    }
    match std::env::var_os(OUT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(name),
        _ => PathBuf::from("runs").join(name),
    }
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth { spec } => synth(cli, spec.as_deref()),
        Command::Train => train(cli),
        Command::Eval { run } => eval(cli, run),
        Command::Report { run } => report(cli, run),
        Command::Suite { which } => suite(cli, *which),
    }
}

fn synth(cli: &Cli, spec_path: Option<&Path>) -> Result<(), CliError> {
    let spec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            let spec: SyntheticSpec =
                toml::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            spec.validate()?;
            spec
        }
        None => match &cli.config {
            Some(p) => parse_config(p)?.data.synthetic.unwrap_or_default(),
            None => SyntheticSpec::default(),
        },
    };
    let corpus = emogate::data::generate_synthetic(&spec)?;
    let dir = out_dir(cli, None, Path::new(""), "corpus");
    let mut out = Outputs::new();
    out.dir(&dir)?;
    corpus.save(&dir)?;
    out.commit();
    println!("wrote {} samples to {}", corpus.samples.len(), dir.display());
    Ok(())
}

fn train(cli: &Cli) -> Result<(), CliError> {
    let (cfg, base) = load_config(cli, || ExperimentConfig::new(Variant::Ours))?;
    let corpus = cfg.load_corpus(&base)?;
    let runs = train_seeds(&cfg, &corpus)?;
    let dir = out_dir(cli, Some(&cfg), &base, &cfg.variant.to_string().to_lowercase());
    let mut out = Outputs::new();
    write_run(&mut out, &dir, &cfg, &base, &runs)?;
    out.commit();
    print!("{}", run::summary_table(&runs));
    println!("wrote {}", dir.display());
    Ok(())
}

fn loaded(cli: &Cli, path: &Path) -> Result<run::LoadedRun, CliError> {
    let cfg = match &cli.config {
        Some(_) => Some(load_config(cli, || unreachable!())?),
        None => None,
    };
    load_run(path, cfg)
}

fn eval(cli: &Cli, path: &Path) -> Result<(), CliError> {
    let r = loaded(cli, path)?;
    let test: Vec<usize> = r.splits.iter().flat_map(|s| s.test.iter().copied()).collect();
    let result = evaluate(&r.model, &r.corpus, &test)?;
    let table = result.to_tsv();
    if let Some(dir) = &cli.out {
        let mut out = Outputs::new();
        out.write(&dir.join("eval.tsv"), &table)?;
        out.commit();
    }
    print!("{table}");
    println!("mean\t{}\t{:.6}\t{:.6}", test.len(), result.mean_wa(), result.mean_ua());
    Ok(())
}

fn report(cli: &Cli, path: &Path) -> Result<(), CliError> {
    let r = loaded(cli, path)?;
    let test: Vec<usize> = r.splits.iter().flat_map(|s| s.test.iter().copied()).collect();
    let dir = cli.out.clone().unwrap_or_else(|| path.join("report"));
    let mut out = Outputs::new();
    out.dir(&dir)?;
    if r.model.variant().has_gates() {
        out.write(&dir.join("gates.tsv"), gate_report(&r.model, &r.corpus, &test)?.to_tsv())?;
    }
    let mut comp = String::from("domain\tintra\tinter\tratio\n");
    for (k, split) in r.splits.iter().enumerate() {
        let rows = embeddings(&r.model, &r.corpus, &split.test)?;
        let labels: Vec<usize> = split.test.iter().map(|&i| r.corpus.samples[i].label).collect();
        let reps: Vec<Vec<f64>> = rows.into_iter().map(|x| x.rep).collect();
        let c = compactness(&reps, &labels)?;
        comp.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\n",
            r.corpus.domains[k].name, c.intra, c.inter, c.ratio
        ));
    }
    out.write(&dir.join("compactness.tsv"), comp)?;
    out.write(
        &dir.join("embeddings.tsv"),
        format_embeddings(&embeddings(&r.model, &r.corpus, &test)?),
    )?;
    out.commit();
    println!("wrote {} (seed {})", dir.display(), r.seed);
    Ok(())
}

fn suite(cli: &Cli, which: SuiteKind) -> Result<(), CliError> {
    let (mut cfg, base) = load_config(cli, suite::suite_config)?;
    let name = match which {
        SuiteKind::Ladder => "ladder",
        SuiteKind::Ablation => "ablation",
        SuiteKind::Gates => "gates",
    };
    let dir = out_dir(cli, Some(&cfg), &base, name);
    let mut out = Outputs::new();
    out.dir(&dir)?;
    match which {
        SuiteKind::Ladder => {
            let corpus = cfg.load_corpus(&base)?;
            let res = suite::run_ladder(&cfg, &corpus)?;
            out.write(&dir.join("ladder.tsv"), res.table())?;
            out.write(&dir.join("ladder_seeds.tsv"), res.seed_table())?;
            print!("{}", res.table());
        }
        SuiteKind::Ablation => {
            if cli.variant.is_none() {
                cfg.variant = Variant::Single;
            }
            let corpus = cfg.load_corpus(&base)?;
            let res = suite::run_ablation(&cfg, &corpus)?;
            out.write(&dir.join("ablation.tsv"), res.table())?;
            out.write(&dir.join("ablation_seeds.tsv"), res.seed_table())?;
            print!("{}", res.table());
        }
        SuiteKind::Gates => {
            if cfg.data.corpus.is_some() {
                return Err(CliError::Usage(
                    "the gate suite needs a synthetic corpus with known informative features".into(),
                ));
            }
            let spec = cfg.data.synthetic.get_or_insert_with(suite::gate_spec).clone();
            let informative = suite::single_informative(&spec)?;
            let corpus = cfg.load_corpus(&base)?;
            let res = suite::run_gate_check(&cfg, &corpus, &informative)?;
            out.write(&dir.join("gates.tsv"), res.table())?;
            print!("{}", res.table());
        }
    }
    out.write(&dir.join("experiment.toml"), run::echo_config(&cfg, &base, cfg.seeds.clone()).to_toml())?;
    out.commit();
    Ok(())
}
