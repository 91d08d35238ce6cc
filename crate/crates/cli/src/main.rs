//! Command-line driver for the reconstruction-uncertainty workbench.
//!
//! Any `--section.field=value` (or `--section.field value`) argument overrides
//! one field of the JSON config. `RECONUQ_SEED` replaces every seed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use reconuq::pipeline::{self, ErrorKind, PipelineError, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "reconuq", version, about = "Input-reconstruction uncertainty workbench")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for fold, ensemble and pass parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Shorthand for `--output_dir`.
    #[arg(long, short = 'o', global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    GenData {
        /// Target directory (default: <output_dir>/data).
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train the selected fold's dual-decoder model into <output_dir>/train.
    Train,
    /// Score held-out and OOD samples, writing scores.csv.
    Uq {
        /// Model directory (default: <output_dir>/train).
        #[arg(long)]
        model: Option<PathBuf>,
        /// Ensemble member directories for DE scores.
        #[arg(long, num_args = 1..)]
        ensemble: Vec<PathBuf>,
    },
    /// Build report.json and the CSV tables from scores.csv.
    Eval,
    /// Run the whole experiment.
    Pipeline,
    /// Compare single- and dual-decoder models on DVH errors.
    Ablation,
}

/// Splits dotted `--a.b=v` / `--a.b v` overrides from the arguments clap sees.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--").filter(|b| b.split('=').next().unwrap().contains('.')) else {
            rest.push(a);
            continue;
        };
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("--{body} needs a value"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

fn seed_from_env() -> Result<Option<u64>, PipelineError> {
    match std::env::var("RECONUQ_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| PipelineError {
            stage: "config",
            kind: ErrorKind::Config,
            message: format!("RECONUQ_SEED={s:?} is not an unsigned integer"),
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli, overrides: Vec<(String, String)>) -> Result<(), PipelineError> {
    let mut overrides = overrides;
    if let Some(o) = &cli.out {
        overrides.push(("output_dir".into(), serde_json::to_string(o).expect("path serializes")));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides, seed_from_env()?)?;
    match cli.cmd {
        Cmd::GenData { dir } => {
            let dir = dir.unwrap_or_else(|| cfg.output_dir.join("data"));
            let n = pipeline::cmd_gen_data(&cfg, &dir)?;
            log::info!("wrote {n} samples to {}", dir.display());
        }
        Cmd::Train => {
            let t = pipeline::cmd_train(&cfg)?;
            if let Some(h) = t.history.last() {
                log::info!("final train loss {:.5}", h.train_loss);
            }
        }
        Cmd::Uq { model, ensemble } => {
            let model = model.unwrap_or_else(|| cfg.output_dir.join("train"));
            let s = pipeline::cmd_uq(&cfg, &model, &ensemble)?;
            log::info!("wrote {} scores", s.rows.len());
        }
        Cmd::Eval => {
            let r = pipeline::cmd_eval(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&r.pearson).expect("serializes"));
        }
        Cmd::Pipeline => {
            let run = pipeline::cmd_pipeline(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&run.report.pearson).expect("serializes"));
            println!("{}", serde_json::to_string_pretty(&run.report.ood).expect("serializes"));
        }
        Cmd::Ablation => {
            for r in pipeline::cmd_ablation(&cfg)? {
                println!("{},{},{}", r.structure, r.metric.as_str(), r.wilcoxon_p);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs.max(1))
        .build_global()
    {
        eprintln!("error: thread pool: {e}");
        return ExitCode::from(5);
    }
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(a: &[&str]) -> Vec<String> {
        a.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn dotted_flags_become_overrides() {
        let (rest, o) =
            split_overrides(v(&["reconuq", "--train.epochs=5", "pipeline", "--uq.de_models", "3", "--jobs", "2"]))
                .unwrap();
        assert_eq!(rest, v(&["reconuq", "pipeline", "--jobs", "2"]));
        assert_eq!(
            o,
            vec![("train.epochs".into(), "5".into()), ("uq.de_models".into(), "3".into())]
        );
        assert!(split_overrides(v(&["reconuq", "--train.epochs"])).is_err());
        // a dot only in the value is not an override
        let (rest, o) = split_overrides(v(&["reconuq", "--config=a.json"])).unwrap();
        assert_eq!((rest.len(), o.len()), (2, 0));
    }
}
