//! Command-line front end for the experiment pipeline. All substance lives in
//! the library; this binary parses arguments, loads the config, and maps
//! errors onto exit codes: 0 ok, 1 config, 2 missing prerequisite, 3 runtime.

use std::path::PathBuf;
use std::process::ExitCode;

use tabadv::pipeline::{run_stage, ExperimentConfig, Stage};
use tabadv::{par, Error};

const USAGE: &str = "\
usage: tabadv <stage> [--config FILE] [--threads N] [--temporal]

stages:
  generate          synthesize the labeled transaction dataset
  featurize         compute engineered features and persist the plan
  train-estimators  fit propagation estimators for inexact profiles
  train-baseline    fit the baseline classifier and its alarm threshold
  attack-bench      sweep attack strategies across cost caps
  adv-train         adversarially retrain the baseline
  evaluate          compare baseline and robust models under attack
  report            merge the metric files into a readable report

options:
  --config FILE   sectioned key=value experiment config; defaults apply
                  when omitted
  --threads N     cap the worker pool
  --temporal      allow timestamp shifts in attack search for this stage
  --help          print this message";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--help" || a == "-h") {
        println!("{USAGE}");
        return ExitCode::SUCCESS;
    }
    match run(&args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config(_) | Error::Plan(_) => 1,
                Error::MissingPrerequisite(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(args: &[String]) -> Result<String, Error> {
    let mut stage: Option<Stage> = None;
    let mut config_path: Option<PathBuf> = None;
    let mut threads: Option<usize> = None;
    let mut temporal = false;

    let mut it = args.iter();
    while let Some(arg) = it.next() {
        match arg.as_str() {
            "--config" => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::Config("--config needs a file path".into()))?;
                config_path = Some(PathBuf::from(value));
            }
            "--threads" => {
                let value = it
                    .next()
                    .ok_or_else(|| Error::Config("--threads needs a count".into()))?;
                let n: usize = value
                    .parse()
                    .map_err(|e| Error::Config(format!("--threads: {e}")))?;
                if n == 0 {
                    return Err(Error::Config("--threads must be positive".into()));
                }
                threads = Some(n);
            }
            "--temporal" => temporal = true,
            flag if flag.starts_with('-') => {
                return Err(Error::Config(format!("unknown flag {flag:?}")));
            }
            name => {
                if stage.is_some() {
                    return Err(Error::Config(format!("unexpected extra argument {name:?}")));
                }
                stage = Some(Stage::parse(name)?);
            }
        }
    }
    let stage = stage.ok_or_else(|| Error::Config(format!("no stage given\n{USAGE}")))?;

    if let Some(n) = threads {
        par::limit_threads(n);
    }
    let mut config = match config_path {
        Some(path) => ExperimentConfig::load(&path)?,
        None => ExperimentConfig::default(),
    };
    if temporal {
        config.search.temporal = true;
        config.advtrain_temporal = true;
    }
    run_stage(&config, stage)
}
