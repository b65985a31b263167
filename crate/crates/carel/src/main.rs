//! Command-line entry points: training, evaluation, sweeps, and the two
//! verification commands (gradient check and loss oracle comparison).

use std::env;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use carel::gridworld::Level;
use carel::harness::{
    parse_split, run_eval, run_gradcheck, run_oracle_check, run_sweep, run_train_with,
    EvalPolicy, EvalRequest, RunConfig, CONFIG_KEYS,
};
use carel::ndgrad::OpKind;
use carel::trainer::{ActionSelection, MetricsRecord};
use carel::{Error, Result};

/// When set, relative output directories are rooted here.
const OUTPUT_ROOT_VAR: &str = "CAREL_OUTPUT_ROOT";

fn key_help(key: &str) -> &'static str {
    match key {
        "level" => "mission family: gotoobj, gotoseq, or opendoorsorder",
        "seeds" => "comma-separated run seeds, one training run each",
        "total-frames" => "environment-step budget per seed",
        "eval-interval" => "frames between evaluation windows",
        "eval-episodes" => "episodes per split in each evaluation window",
        "warmstart-frames" => "oracle-imitation frames before reinforcement learning",
        "timing" => "record the fps and wall_seconds columns",
        "output-dir" => "artifact directory (one seed-<n> subdirectory per run)",
        "room-size" => "interior room width and height",
        "view-size" => "odd egocentric view size (shared with the encoder)",
        "gotoseq-subtasks" => "go-to targets in a sequence mission",
        "door-count" => "doors in an open-in-order mission",
        "distractors" => "non-target objects per mission",
        "learning-rate" => "Adam learning rate",
        "adam-beta1" => "Adam first-moment decay",
        "adam-beta2" => "Adam second-moment decay",
        "adam-eps" => "Adam denominator epsilon",
        "batch-size" => "transitions per optimization minibatch",
        "clip-epsilon" => "trust-region half-width of the surrogate",
        "discount" => "reward discount factor",
        "gae-lambda" => "generalized-advantage-estimation lambda",
        "ppo-epochs" => "passes over each rollout batch",
        "entropy-coef" => "entropy bonus coefficient",
        "value-coef" => "value-loss coefficient",
        "rollout-len" => "steps collected per environment per phase",
        "num-envs" => "parallel environment count",
        "normalize-advantages" => "standardize advantages per batch",
        "carel" => "enable the auxiliary episode-instruction objective",
        "lambda-c" => "auxiliary loss weight",
        "tau" => "contrastive softmax temperature",
        "success-fraction" => "fraction of max reward that counts as success",
        "aux-batch-max" => "successful-episode buffer capacity",
        "tracking" => "enable instruction tracking and masking",
        "k" => "spike threshold factor over the running mean",
        "warmup-steps" => "scores recorded before spikes may fire",
        "mask-max-frames" => "frames until masking probability saturates",
        "score-source" => "tracker score source: ew or ow",
        "positive-mean-guard" => "require a positive running mean before spiking",
        "normalize-global" => "L2-normalize global representations in the tracker",
        "embed-dim" => "token and cell embedding width",
        "repr-dim" => "shared representation width",
        "gru-hidden" => "instruction encoder hidden width",
        "obs-hidden" => "observation encoder hidden width",
        "policy-hidden" => "policy memory width",
        "max-instruction-len" => "instruction padding length",
        "normalize-reps" => "L2-normalize local representations",
        "action-embeddings" => "pair observations with embedded actions",
        "aggregation" => "global pooling: mean or attention",
        "token-reps" => "word representations: embeddings or gru-hiddens",
        _ => "configuration field",
    }
}

/// Attach `--config` plus one flag per configuration key.
fn with_config_flags(mut cmd: Command) -> Command {
    cmd = cmd.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("flat key=value configuration file (flags override it)"),
    );
    for &key in CONFIG_KEYS {
        cmd = cmd.arg(
            Arg::new(key)
                .long(key)
                .value_name("VALUE")
                .help(key_help(key)),
        );
    }
    cmd
}

fn cli() -> Command {
    Command::new("carel")
        .about("Instruction-following RL laboratory: PPO with an auxiliary episode-instruction alignment objective and instruction tracking on a symbolic gridworld")
        .after_help(format!(
            "Relative output directories are rooted at ${OUTPUT_ROOT_VAR} when it is set."
        ))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_flags(
            Command::new("train").about("Train one run per seed and write metrics, config, checkpoint, and mask-audit artifacts"),
        ))
        .subcommand(
            with_config_flags(
                Command::new("sweep")
                    .about("Train the same configuration once per value of one key, each under its own subdirectory"),
            )
            .arg(
                Arg::new("param")
                    .long("param")
                    .required(true)
                    .value_name("KEY")
                    .help("configuration key to vary"),
            )
            .arg(
                Arg::new("values")
                    .long("values")
                    .required(true)
                    .value_name("V1,V2,...")
                    .help("comma-separated values for the swept key"),
            ),
        )
        .subcommand(
            Command::new("eval")
                .about("Evaluate a checkpoint (or a scripted baseline) on freshly generated missions; never updates parameters")
                .arg(Arg::new("checkpoint").long("checkpoint").value_name("FILE").help("checkpoint.json written by train"))
                .arg(Arg::new("level").long("level").value_name("LEVEL").help("mission family (defaults to the checkpoint's)"))
                .arg(Arg::new("split").long("split").value_name("SPLIT").default_value("holdout").help("train or holdout"))
                .arg(Arg::new("episodes").long("episodes").value_name("N").default_value("100").help("missions to evaluate"))
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("evaluation mission seed"))
                .arg(
                    Arg::new("policy")
                        .long("policy")
                        .value_name("POLICY")
                        .default_value("checkpoint")
                        .help("checkpoint, oracle, or random"),
                )
                .arg(
                    Arg::new("sample")
                        .long("sample")
                        .action(ArgAction::SetTrue)
                        .help("sample actions instead of the default greedy argmax"),
                )
                .arg(Arg::new("trace").long("trace").value_name("FILE").help("append per-step trace records as JSON lines"))
                .arg(Arg::new("room-size").long("room-size").value_name("N").help("mission room size (oracle/random only)"))
                .arg(Arg::new("view-size").long("view-size").value_name("N").help("egocentric view size (oracle/random only)"))
                .arg(Arg::new("gotoseq-subtasks").long("gotoseq-subtasks").value_name("N").help("sequence-mission targets (oracle/random only)"))
                .arg(Arg::new("door-count").long("door-count").value_name("N").help("door-order mission doors (oracle/random only)"))
                .arg(Arg::new("distractors").long("distractors").value_name("N").help("distractor objects (oracle/random only)")),
        )
        .subcommand(
            Command::new("gradcheck")
                .about("Compare analytic auxiliary-loss gradients against central finite differences, per parameter class")
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("instance generator seed"))
                .arg(Arg::new("instances").long("instances").value_name("N").default_value("20").help("random instances to check"))
                .arg(
                    Arg::new("corrupt-backward")
                        .long("corrupt-backward")
                        .action(ArgAction::SetTrue)
                        .hide(true)
                        .help("test fixture: deliberately break one backward rule"),
                ),
        )
        .subcommand(
            Command::new("oracle-check")
                .about("Compare the graph-built contrastive loss against an independent naive-loop implementation")
                .arg(Arg::new("seed").long("seed").value_name("N").default_value("0").help("instance generator seed"))
                .arg(Arg::new("instances").long("instances").value_name("N").default_value("100").help("random instances to compare")),
        )
}

fn config_overrides(matches: &ArgMatches) -> Vec<(String, String)> {
    CONFIG_KEYS
        .iter()
        .filter_map(|&key| {
            matches
                .get_one::<String>(key)
                .map(|v| (key.to_string(), v.clone()))
        })
        .collect()
}

fn load_run_config(matches: &ArgMatches) -> Result<RunConfig> {
    let file = matches.get_one::<String>("config").map(PathBuf::from);
    let mut cfg = RunConfig::load(file.as_deref(), &config_overrides(matches))?;
    if let Ok(root) = env::var(OUTPUT_ROOT_VAR) {
        if !root.is_empty() && cfg.output_dir.is_relative() {
            cfg.output_dir = PathBuf::from(root).join(&cfg.output_dir);
        }
    }
    Ok(cfg)
}

fn progress_line(seed: u64, r: &MetricsRecord) -> String {
    let mut line = format!(
        "seed {seed}  frame {:>9}  episodes {:>6}  sr_train {:.3}  sr_holdout {:.3}  rl_loss {:+.4}",
        r.frame, r.episodes, r.sr_train, r.sr_holdout, r.rl_loss
    );
    match r.aux_loss {
        Some(a) => line.push_str(&format!("  aux_loss {a:.4}")),
        None => line.push_str("  aux_loss -"),
    }
    line.push_str(&format!("  mask_events {}", r.mask_events));
    if let Some(fps) = r.fps {
        line.push_str(&format!("  fps {fps:.0}"));
    }
    line
}

fn cmd_train(matches: &ArgMatches) -> Result<ExitCode> {
    let cfg = load_run_config(matches)?;
    let artifacts = run_train_with(&cfg, |seed, record| {
        println!("{}", progress_line(seed, record));
    })?;
    for a in &artifacts {
        println!("seed {} artifacts in {}", a.seed, a.run_dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sweep(matches: &ArgMatches) -> Result<ExitCode> {
    let cfg = load_run_config(matches)?;
    let param = matches.get_one::<String>("param").expect("required");
    let values: Vec<String> = matches
        .get_one::<String>("values")
        .expect("required")
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    let runs = run_sweep(&cfg, param, &values)?;
    for (value, artifacts) in &runs {
        for a in artifacts {
            let sr = a.records.last().map(|r| r.sr_train).unwrap_or(0.0);
            println!(
                "{param}={value} seed {}: final sr_train {:.3} ({})",
                a.seed,
                sr,
                a.run_dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(matches: &ArgMatches) -> Result<ExitCode> {
    let mut req = EvalRequest {
        checkpoint: matches.get_one::<String>("checkpoint").map(PathBuf::from),
        trace_path: matches.get_one::<String>("trace").map(PathBuf::from),
        ..EvalRequest::default()
    };
    if let Some(level) = matches.get_one::<String>("level") {
        req.level = Some(level.parse::<Level>()?);
    }
    req.split = parse_split(matches.get_one::<String>("split").expect("default"))?;
    req.episodes = parse_flag(matches, "episodes")?;
    req.seed = parse_flag(matches, "seed")?;
    req.policy = matches
        .get_one::<String>("policy")
        .expect("default")
        .parse::<EvalPolicy>()?;
    if matches.get_flag("sample") {
        req.selection = ActionSelection::Sample;
    }
    for key in [
        "room-size",
        "view-size",
        "gotoseq-subtasks",
        "door-count",
        "distractors",
    ] {
        if let Some(value) = matches.get_one::<String>(key) {
            let n = value
                .parse::<usize>()
                .map_err(|e| Error::parameter(format!("flag {key}: {e}")))?;
            match key {
                "room-size" => req.gen.room_size = n,
                "view-size" => req.gen.view_size = n,
                "gotoseq-subtasks" => req.gen.gotoseq_subtasks = n,
                "door-count" => req.gen.door_count = n,
                _ => req.gen.distractors = n,
            }
        }
    }
    let report = run_eval(&req)?;
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}

fn parse_flag<T: std::str::FromStr>(matches: &ArgMatches, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    matches
        .get_one::<String>(name)
        .expect("defaulted flag")
        .parse()
        .map_err(|e| Error::parameter(format!("flag {name}: {e}")))
}

fn cmd_gradcheck(matches: &ArgMatches) -> Result<ExitCode> {
    let seed = parse_flag(matches, "seed")?;
    let instances = parse_flag(matches, "instances")?;
    let corruption = matches
        .get_flag("corrupt-backward")
        .then_some((OpKind::MatVec, 1.5));
    let report = run_gradcheck(seed, instances, corruption)?;
    println!("{report}");
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_oracle_check(matches: &ArgMatches) -> Result<ExitCode> {
    let seed = parse_flag(matches, "seed")?;
    let instances = parse_flag(matches, "instances")?;
    let report = run_oracle_check(seed, instances)?;
    println!("{report}");
    Ok(if report.passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn run() -> Result<ExitCode> {
    let matches = cli().get_matches();
    match matches.subcommand() {
        Some(("train", m)) => cmd_train(m),
        Some(("sweep", m)) => cmd_sweep(m),
        Some(("eval", m)) => cmd_eval(m),
        Some(("gradcheck", m)) => cmd_gradcheck(m),
        Some(("oracle-check", m)) => cmd_oracle_check(m),
        _ => unreachable!("subcommand is required"),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                // Bad flags and config fields are usage errors.
                Error::Parameter(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
