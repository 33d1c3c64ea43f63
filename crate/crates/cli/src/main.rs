//! `hinova`: synth → slice → train → fingerprint → detect/baseline → evaluate.
//!
//! Exit status: 0 on success, 2 for usage errors, 1 for a failed stage. A
//! failure prints one line `error: stage=<name>: <message>` to stderr.

mod config;
mod selftest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(
    name = "hinova",
    version,
    about = "Open-set RF device authentication from LSTM hidden states"
)]
struct Cli {
    /// TOML config file; see `configs/desk.toml` for every key.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Override any config value, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    sets: Vec<String>,

    /// Worker threads for parallel stages. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct PathFlags {
    /// Capture directory.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Feature cache file.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    fingerprints: Option<PathBuf>,
    /// Scores CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    reports: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic captures for simulated transmitters.
    Synth {
        #[command(flatten)]
        paths: PathFlags,
        #[arg(long)]
        separability: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Replace an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Slice captures and compute autocorrelation features.
    Slice {
        #[command(flatten)]
        paths: PathFlags,
    },
    /// Train a classifier on the known devices of one fold.
    Train {
        #[command(flatten)]
        paths: PathFlags,
        /// `lstm` or `cnn`.
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Training log CSV; defaults next to the checkpoint.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Build known-device fingerprints from a trained CNN+LSTM.
    Fingerprint {
        #[command(flatten)]
        paths: PathFlags,
        /// `single` or `pairwise`.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        bins: Option<usize>,
    },
    /// Score held-out groups against known fingerprints.
    Detect {
        #[command(flatten)]
        paths: PathFlags,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score held-out groups with MaxLogit or OpenMax.
    Baseline {
        #[command(flatten)]
        paths: PathFlags,
        /// `maxlogit-cnn`, `maxlogit-cnnlstm` or `openmax`.
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Run every fold of an open-set experiment and write a report.
    Evaluate {
        #[command(flatten)]
        paths: PathFlags,
    },
    /// Check fast kernels against brute-force oracles.
    Selftest,
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Slice { .. } => "slice",
            Command::Train { .. } => "train",
            Command::Fingerprint { .. } => "fingerprint",
            Command::Detect { .. } => "detect",
            Command::Baseline { .. } => "baseline",
            Command::Evaluate { .. } => "evaluate",
            Command::Selftest => "selftest",
        }
    }
}

fn apply_paths(config: &mut RunConfig, p: &PathFlags) {
    let paths = &mut config.paths;
    for (flag, slot) in [
        (&p.dataset, &mut paths.dataset),
        (&p.features, &mut paths.features),
        (&p.checkpoint, &mut paths.checkpoint),
        (&p.fingerprints, &mut paths.fingerprints),
        (&p.scores, &mut paths.scores),
        (&p.reports, &mut paths.reports),
    ] {
        if let Some(v) = flag {
            *slot = v.clone();
        }
    }
}

/// Applies subcommand flags, the last and strongest layer of configuration.
fn apply_flags(config: &mut RunConfig, command: &Command) {
    match command {
        Command::Synth {
            paths,
            separability,
            seed,
            ..
        } => {
            apply_paths(config, paths);
            if let Some(s) = separability {
                config.synth.separability = *s;
            }
            if let Some(s) = seed {
                config.synth.seed = *s;
            }
        }
        Command::Slice { paths } | Command::Evaluate { paths } => apply_paths(config, paths),
        Command::Train {
            paths, head, epochs, ..
        } => {
            apply_paths(config, paths);
            if let Some(h) = head {
                config.model.head = h.clone();
            }
            if let Some(e) = epochs {
                config.train.epochs = *e;
            }
        }
        Command::Fingerprint { paths, mode, bins } => {
            apply_paths(config, paths);
            if let Some(m) = mode {
                config.fingerprint.mode = m.clone();
            }
            if let Some(b) = bins {
                config.fingerprint.bins = *b;
            }
        }
        Command::Detect { paths, threshold } => {
            apply_paths(config, paths);
            if threshold.is_some() {
                config.detect.threshold = *threshold;
            }
        }
        Command::Baseline {
            paths,
            method,
            threshold,
        } => {
            apply_paths(config, paths);
            if let Some(m) = method {
                config.baseline.method = m.clone();
            }
            if threshold.is_some() {
                config.detect.threshold = *threshold;
            }
        }
        Command::Selftest => {}
    }
}

fn fail(stage: &str, err: impl std::fmt::Display) -> ExitCode {
    let msg = err.to_string().replace('\n', " ");
    eprintln!("error: stage={stage}: {msg}");
    ExitCode::from(1)
}

fn run(cli: Cli) -> ExitCode {
    let stage = cli.command.stage();
    let mut config = match RunConfig::resolve(cli.config.as_deref(), &cli.sets) {
        Ok(c) => c,
        Err(e) => return fail("config", format!("{e:#}")),
    };
    apply_flags(&mut config, &cli.command);
    if let Err(e) = config.validate() {
        return fail("config", format!("{e:#}"));
    }
    if cli.print_config {
        print!("{}", config.to_toml());
        return ExitCode::SUCCESS;
    }
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail("config", e);
        }
    }
    log::info!("config digest {}", config.digest());

    let outcome = match &cli.command {
        Command::Synth { force, .. } => stages::synth(&config, *force),
        Command::Slice { .. } => stages::slice(&config),
        Command::Train { log, .. } => stages::train_model(&config, log.as_deref()),
        Command::Fingerprint { .. } => stages::fingerprint(&config),
        Command::Detect { .. } => stages::detect_groups(&config),
        Command::Baseline { .. } => stages::baseline(&config),
        Command::Evaluate { .. } => stages::evaluate(&config),
        Command::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
            if failed.is_empty() {
                Ok(format!("all {} oracle suites passed", results.len()))
            } else {
                Err(anyhow::anyhow!("failed suites: {}", failed.join(", ")))
            }
        }
    };
    match outcome {
        Ok(msg) => {
            println!("{msg}");
            println!("config digest {}", config.digest());
            ExitCode::SUCCESS
        }
        Err(e) => fail(stage, format!("{e:#}")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    run(cli)
}
