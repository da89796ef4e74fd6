mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};
use cldtrack_core::config::{flag_name, RunConfig};

/// Short spellings for frequently tuned keys.
const ALIASES: [(&str, &str); 5] = [
    ("bag.tau_val", "tau-val"),
    ("inference.hanning_weight", "hanning-weight"),
    ("train.steps", "steps"),
    ("train.lr", "lr"),
    ("gradcheck.epsilon", "epsilon"),
];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cldtrack_core::Error),
    #[error("acceptance failed: {0}")]
    Acceptance(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use cldtrack_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(E::Config(_) | E::InvalidArgument(_)) => 2,
            CliError::Core(_) => 3,
            CliError::Acceptance(_) => 4,
        }
    }
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .required(true)
        .help(help)
}

fn build_command(keys: &[String]) -> Command {
    let mut cmd = Command::new("cldtrack")
        .about("Language-guided single-object tracking: bag construction, tracking, evaluation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("PATH")
                .value_parser(value_parser!(PathBuf))
                .global(true)
                .help("TOML run configuration"),
        )
        .arg(
            Arg::new("sequential")
                .long("sequential")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Run data-parallel loops on the calling thread"),
        )
        .arg(
            Arg::new("verbose")
                .short('v')
                .long("verbose")
                .action(ArgAction::Count)
                .global(true)
                .help("More log output (repeatable)"),
        );
    for key in keys {
        let mut arg = Arg::new(key.clone())
            .long(flag_name(key))
            .value_name("VALUE")
            .global(true)
            .help_heading("Config overrides")
            .help(format!("Override `{key}`"));
        if let Some((_, alias)) = ALIASES.iter().find(|(k, _)| k == key) {
            arg = arg.visible_alias(*alias);
        }
        cmd = cmd.arg(arg);
    }
    cmd.subcommand(
        Command::new("build-bag")
            .about("Build the bag of descriptions for a target boxed in one frame")
            .arg(path_arg("frame", "First frame (PNG)"))
            .arg(
                Arg::new("bbox")
                    .long("bbox")
                    .value_name("X,Y,W,H")
                    .required(true)
                    .help("Target box in pixels"),
            )
            .arg(path_arg("class-dict", "Class dictionary, one entry per line"))
            .arg(path_arg("attribute-dict", "Attribute dictionary, one entry per line"))
            .arg(path_arg("lexicon", "Synonym lexicon (JSON)"))
            .arg(path_arg("exclusions", "Phrases to drop, one per line").required(false))
            .arg(path_arg("out", "Bag file to write")),
    )
    .subcommand(
        Command::new("track")
            .about("Track a sequence from its first groundtruth box")
            .arg(path_arg("sequence", "Sequence directory"))
            .arg(path_arg("bag", "Bag file"))
            .arg(path_arg("model", "Model parameter file"))
            .arg(path_arg("out", "Predictions file to write")),
    )
    .subcommand(
        Command::new("eval")
            .about("Score predictions against groundtruth")
            .arg(path_arg("sequence", "Sequence directory (repeatable)").action(ArgAction::Append))
            .arg(
                path_arg("predictions", "Predictions file, one per --sequence, same order")
                    .action(ArgAction::Append),
            )
            .arg(path_arg("out", "Directory for report.csv and report.json")),
    )
    .subcommand(
        Command::new("demo-synthetic")
            .about("Generate a moving-square sequence, train, track and score it")
            .arg(path_arg("out", "Output directory")),
    )
    .subcommand(
        Command::new("grad-check")
            .about("Compare analytic gradients of the tracking loss with finite differences")
            .arg(path_arg("out", "JSON report to write").required(false))
            .arg(
                Arg::new("corrupt-gradient")
                    .long("corrupt-gradient")
                    .action(ArgAction::SetTrue)
                    .hide(true),
            ),
    )
}

/// Base profile, then the config file, then environment, then flags.
fn resolve_config(base: RunConfig, keys: &[String], m: &ArgMatches) -> Result<RunConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = m.get_one::<PathBuf>("config") {
        if !path.is_file() {
            return Err(CliError::Usage(format!("--config: {} not found", path.display())));
        }
        cfg = cfg.merged_file(path)?;
    }
    cfg = cfg.with_env(std::env::vars())?;
    let overrides: Vec<(&str, &str)> = keys
        .iter()
        .filter_map(|k| m.get_one::<String>(k).map(|v| (k.as_str(), v.as_str())))
        .collect();
    Ok(cfg.with_overrides(overrides)?)
}

fn main() -> ExitCode {
    let keys = RunConfig::default().keys().expect("default config serializes");
    let matches = match build_command(&keys).try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let level = match matches.get_count("verbose") {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (name, sub) = matches.subcommand().expect("subcommand required");
    let base = if name == "demo-synthetic" {
        RunConfig::demo()
    } else {
        RunConfig::default()
    };
    let result = resolve_config(base, &keys, sub).and_then(|cfg| commands::run(name, sub, &cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
