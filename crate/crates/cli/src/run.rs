//! Training over seeds and the files a run leaves behind.
//!
//! A run directory holds `experiment.toml` (the config as run),
//! `summary.tsv` (test WA/UA per domain, mean and standard deviation over
//! seeds) and one `seed-N/` directory per seed with `experiment.toml` (the
//! config narrowed to that seed), `log.tsv`, `test.tsv` and `checkpoint/`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use emogate::data::Corpus;
use emogate::eval::{evaluate, EvalResult};
use emogate::model::{load_checkpoint, save_checkpoint, Model};
use emogate::train::{fit, format_log, split_corpus, FitOptions, FitReport, Split};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::Outputs;

/// One trained seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub model: Model,
    pub splits: Vec<Split>,
    pub report: FitReport,
    pub test: EvalResult,
}

impl SeedRun {
    pub fn test_indices(&self) -> Vec<usize> {
        self.splits.iter().flat_map(|s| s.test.iter().copied()).collect()
    }
}

pub fn train_seed(cfg: &ExperimentConfig, corpus: &Corpus, seed: u64) -> Result<SeedRun, CliError> {
    let model_cfg = cfg.model_config(&corpus.domains, &corpus.features)?;
    let mut model = Model::build(model_cfg, seed)?;
    let splits = split_corpus(corpus, seed)?;
    let opts = FitOptions {
        schedule: cfg.schedule,
        optimizer: cfg.optimizer,
        alphas: cfg.alphas(&corpus.domains),
        seed,
        exclude_self: cfg.exclude_self_centroid,
    };
    let report = fit(&mut model, corpus, &splits, &opts, |_| {})?;
    let test_idx: Vec<usize> = splits.iter().flat_map(|s| s.test.iter().copied()).collect();
    let test = evaluate(&model, corpus, &test_idx)?;
    Ok(SeedRun {
        seed,
        model,
        splits,
        report,
        test,
    })
}

/// Trains every seed of `cfg`, in parallel, returning runs in seed order.
pub fn train_seeds(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<SeedRun>, CliError> {
    cfg.seeds.par_iter().map(|&s| train_seed(cfg, corpus, s)).collect()
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `domain\tua_mean\tua_std\twa_mean\twa_std` over seeds, plus a `mean` row
/// averaging the domains.
pub fn summary_table(runs: &[SeedRun]) -> String {
    let mut out = String::from("domain\tua_mean\tua_std\twa_mean\twa_std\n");
    let domains: Vec<String> = runs[0].test.domains.iter().map(|d| d.domain.clone()).collect();
    let mut row = |name: &str, ua: Vec<f64>, wa: Vec<f64>| {
        let (um, us) = mean_std(&ua);
        let (wm, ws) = mean_std(&wa);
        let _ = writeln!(out, "{name}\t{um:.6}\t{us:.6}\t{wm:.6}\t{ws:.6}");
    };
    for (i, d) in domains.iter().enumerate() {
        row(
            d,
            runs.iter().map(|r| r.test.domains[i].ua).collect(),
            runs.iter().map(|r| r.test.domains[i].wa).collect(),
        );
    }
    row(
        "mean",
        runs.iter().map(|r| r.test.mean_ua()).collect(),
        runs.iter().map(|r| r.test.mean_wa()).collect(),
    );
    out
}

/// The config to record for a run: narrowed to `seeds`, with an absolute
/// corpus path so the record works from any directory.
pub fn echo_config(cfg: &ExperimentConfig, base: &Path, seeds: Vec<u64>) -> ExperimentConfig {
    let mut echo = cfg.clone();
    echo.seeds = seeds;
    if let Some(p) = &echo.data.corpus {
        let joined = base.join(p);
        echo.data.corpus = Some(std::fs::canonicalize(&joined).unwrap_or(joined));
    }
    echo
}

/// Writes the run directory described in the module docs.
pub fn write_run(out: &mut Outputs, dir: &Path, cfg: &ExperimentConfig, base: &Path, runs: &[SeedRun]) -> Result<(), CliError> {
    out.dir(dir)?;
    let echo = echo_config(cfg, base, cfg.seeds.clone());
    out.write(&dir.join("experiment.toml"), echo.to_toml())?;
    for r in runs {
        let sd = seed_dir(dir, r.seed);
        out.dir(&sd)?;
        out.write(&sd.join("experiment.toml"), echo_config(cfg, base, vec![r.seed]).to_toml())?;
        out.write(&sd.join("log.tsv"), format_log(&r.report.log))?;
        out.write(&sd.join("test.tsv"), r.test.to_tsv())?;
        let ck = sd.join("checkpoint");
        out.track(&ck);
        save_checkpoint(&r.model, &ck)?;
    }
    out.write(&dir.join("summary.tsv"), summary_table(runs))?;
    Ok(())
}

pub fn seed_dir(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}"))
}

/// A trained seed loaded back from disk.
pub struct LoadedRun {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model: Model,
    pub corpus: Corpus,
    pub splits: Vec<Split>,
}

/// Loads `seed-N/` (or its `checkpoint/` directly). `config` replaces the
/// recorded `experiment.toml` when given.
pub fn load_run(path: &Path, config: Option<(ExperimentConfig, PathBuf)>) -> Result<LoadedRun, CliError> {
    let (seed_dir, ck) = if path.join("checkpoint").is_dir() {
        (path.to_path_buf(), path.join("checkpoint"))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    };
    if !ck.join("params.bin").is_file() {
        return Err(CliError::Runtime(format!("{}: no checkpoint found", path.display())));
    }
    let (config, base) = match config {
        Some(c) => c,
        None => {
            let p = seed_dir.join("experiment.toml");
            (crate::config::parse_config(&p)?, seed_dir.clone())
        }
    };
    let model = load_checkpoint(&ck)?;
    let corpus = config.load_corpus(&base)?;
    if corpus.domains != model.config.domains || corpus.features != model.config.features {
        return Err(CliError::Validation(format!(
            "{}: checkpoint was trained on different domains or features than the corpus",
            ck.display()
        )));
    }
    let seed = config.seeds[0];
    let splits = split_corpus(&corpus, seed)?;
    Ok(LoadedRun {
        config,
        seed,
        model,
        corpus,
        splits,
    })
}
