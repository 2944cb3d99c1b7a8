use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wa_core::evaluation::PdmsWeights;
use wa_core::harness::{self, EvalEcho, RunConfig, TrainEcho};
use wa_core::microworld::ScenarioKind;
use wa_core::training::{log_csv, Checkpoint, WmKind};
use wa_core::CoreError;

const SEED_ENV: &str = "WA_SEED";

#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{0}")]
    Other(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 64,
            Failure::MissingInput(_) => 66,
            Failure::Numeric(_) => 2,
            Failure::Other(_) => 1,
        }
    }

    /// Failure while reading an input file.
    fn input(e: CoreError) -> Self {
        match e {
            CoreError::Io { .. } => Failure::MissingInput(e.to_string()),
            CoreError::Numeric(m) => Failure::Numeric(m),
            other => Failure::Other(other.to_string()),
        }
    }

    fn run(e: CoreError) -> Self {
        match e {
            CoreError::Numeric(m) => Failure::Numeric(m),
            CoreError::Contract(m) => Failure::Usage(m),
            other => Failure::Other(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "wa", version, about = "Anticipatory planning in a driving microworld")]
struct Cli {
    /// Base directory for every relative path.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Phase {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AblateMode {
    Steps,
    Wm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum WmArg {
    Oracle,
    Simple,
    None,
}

impl From<WmArg> for WmKind {
    fn from(w: WmArg) -> Self {
        match w {
            WmArg::Oracle => WmKind::Oracle,
            WmArg::Simple => WmKind::Simple,
            WmArg::None => WmKind::None,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write scenario files and a manifest.
    GenScenarios {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: u64,
        /// Overrides WA_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated scenario kinds; all kinds by default.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
    },
    /// Run one training phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: Phase,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides WA_SEED and the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Closed-loop evaluation of one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long = "t-d", default_value_t = 100)]
        t_d: u32,
        #[arg(long, value_enum, default_value = "oracle")]
        wm: WmArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Denoising-step or world-model ablation.
    Ablate {
        /// Checkpoint path, optionally `label=path`; repeat for wm mode.
        #[arg(long = "ckpt", alias = "ckpts", value_delimiter = ',', required = true)]
        ckpts: Vec<String>,
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<u32>>,
        #[arg(long)]
        scenarios: PathBuf,
        #[arg(long = "t-d", default_value_t = 100)]
        t_d: u32,
        #[arg(long)]
        out: PathBuf,
    },
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}='{v}' is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn out_err(e: CoreError) -> Failure {
    Failure::Other(e.to_string())
}

fn load_ckpt(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(Failure::input)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let wd = &cli.workdir;
    let at = |p: &Path| wd.join(p);
    let weights = PdmsWeights::default();
    match cli.command {
        Command::GenScenarios { out, count, seed, kinds } => {
            let seed = seed.or(env_seed()?).unwrap_or(0);
            let kinds = match kinds {
                None => ScenarioKind::ALL.to_vec(),
                Some(list) => list
                    .iter()
                    .map(|k| k.trim().parse::<ScenarioKind>().map_err(|e| Failure::Usage(e.to_string())))
                    .collect::<Result<Vec<_>, _>>()?,
            };
            let m = harness::gen_scenarios(&at(&out), count, seed, &kinds).map_err(Failure::run)?;
            eprintln!("wrote {} scenarios to {}", m.count, at(&out).display());
        }
        Command::Train {
            config,
            phase,
            init,
            out,
            seed,
        } => {
            let phase = match phase {
                Phase::One => 1u8,
                Phase::Two => 2,
            };
            if phase == 2 && init.is_none() {
                return Err(Failure::Usage("phase 2 requires --init".into()));
            }
            if phase == 1 && init.is_some() {
                return Err(Failure::Usage("phase 1 does not take --init".into()));
            }
            let mut run_cfg = RunConfig::load(&at(&config)).map_err(|e| match e {
                CoreError::Io { .. } => Failure::MissingInput(e.to_string()),
                other => Failure::Usage(other.to_string()),
            })?;
            if let Some(s) = seed.or(env_seed()?) {
                run_cfg.train.seed = s;
            }
            let scen_dir = at(&run_cfg.scenarios);
            let set = harness::load_scenarios(&scen_dir).map_err(Failure::input)?;
            let init_path = init.as_ref().map(|p| at(p));
            let init_ck = init_path.as_deref().map(load_ckpt).transpose()?;
            let init_hash = match &init_path {
                Some(p) => Some(harness::sha256_hex(
                    &std::fs::read(p).map_err(|e| Failure::MissingInput(format!("{}: {e}", p.display())))?,
                )),
                None => None,
            };
            let result = harness::train(&run_cfg.train, phase, init_ck.as_ref(), &set).map_err(Failure::run)?;
            let out_path = at(&out);
            harness::write_text(&harness::sibling(&out_path, ".log.csv"), &log_csv(&result.outcome.log)).map_err(out_err)?;
            let echo = TrainEcho {
                command: "train",
                phase,
                scenarios: &run_cfg.scenarios,
                scenario_hash: set.hash(),
                scenario_count: set.len(),
                init: init.as_deref(),
                init_hash,
                out: &out,
                train: &run_cfg.train,
            };
            harness::write_json(&harness::sibling(&out_path, ".config.json"), &echo).map_err(out_err)?;
            if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("{}: {e}", parent.display())))?;
            }
            result.checkpoint.save(&out_path).map_err(out_err)?;
            if let Some(msg) = result.outcome.diverged {
                return Err(Failure::Numeric(format!("{msg}; last good checkpoint kept at {}", out_path.display())));
            }
            eprintln!("trained phase {phase}: {} steps, checkpoint {}", result.outcome.log.len(), out_path.display());
        }
        Command::Eval {
            ckpt,
            scenarios,
            t_d,
            wm,
            out,
        } => {
            let ck = load_ckpt(&at(&ckpt))?;
            let set = harness::load_scenarios(&at(&scenarios)).map_err(Failure::input)?;
            let wm: WmKind = wm.into();
            let report = harness::eval(&ck, &set, wm, t_d, &weights).map_err(Failure::run)?;
            let out_path = at(&out);
            harness::write_text(&out_path, &report.csv()).map_err(out_err)?;
            harness::write_text(&harness::sibling(&out_path, ".summary.json"), &report.summary_json()).map_err(out_err)?;
            let echo = EvalEcho {
                command: "eval",
                checkpoints: vec![("model", &ckpt, harness::sha256_hex(&ck.to_bytes()))],
                scenarios: &scenarios,
                scenario_hash: set.hash(),
                t_d: Some(t_d),
                steps: None,
                wm: Some(wm),
                mode: None,
                weights,
                out: &out,
            };
            harness::write_json(&harness::sibling(&out_path, ".config.json"), &echo).map_err(out_err)?;
            eprintln!(
                "evaluated {} scenarios ({} errors): mean PDMS {:.4}",
                report.rows.len(),
                report.errors,
                report.means.pdms
            );
        }
        Command::Ablate {
            ckpts,
            mode,
            steps,
            scenarios,
            t_d,
            out,
        } => {
            let named: Vec<(Option<String>, PathBuf)> = ckpts
                .iter()
                .map(|c| match c.split_once('=') {
                    Some((l, p)) => (Some(l.to_string()), PathBuf::from(p)),
                    None => (None, PathBuf::from(c)),
                })
                .collect();
            let set = harness::load_scenarios(&at(&scenarios)).map_err(Failure::input)?;
            let loaded = named
                .iter()
                .map(|(_, p)| load_ckpt(&at(p)))
                .collect::<Result<Vec<_>, _>>()?;
            let (report, mode_name, steps_used) = match mode {
                AblateMode::Steps => {
                    let steps = steps.ok_or_else(|| Failure::Usage("--mode steps requires --steps".into()))?;
                    if loaded.len() != 1 {
                        return Err(Failure::Usage("--mode steps takes exactly one --ckpt".into()));
                    }
                    let r = harness::ablate_steps(&loaded[0], &steps, &set, &weights).map_err(Failure::run)?;
                    (r, "steps", Some(steps))
                }
                AblateMode::Wm => {
                    if steps.is_some() {
                        return Err(Failure::Usage("--steps applies to --mode steps only".into()));
                    }
                    let runs: Vec<(String, Checkpoint)> = named
                        .iter()
                        .zip(loaded.iter())
                        .map(|((l, _), c)| (l.clone().unwrap_or_else(|| harness::native_wm(c).name().to_string()), c.clone()))
                        .collect();
                    let r = harness::ablate_wm(&runs, t_d, &set, &weights).map_err(Failure::run)?;
                    (r, "wm", None)
                }
            };
            let out_path = at(&out);
            harness::write_text(&out_path, &report.csv()).map_err(out_err)?;
            harness::write_text(&harness::sibling(&out_path, ".rows.csv"), &report.rows_csv()).map_err(out_err)?;
            let labels: Vec<String> = named
                .iter()
                .zip(&loaded)
                .map(|((l, _), c)| l.clone().unwrap_or_else(|| harness::native_wm(c).name().to_string()))
                .collect();
            let echo = EvalEcho {
                command: "ablate",
                checkpoints: labels
                    .iter()
                    .zip(&named)
                    .zip(&loaded)
                    .map(|((l, (_, p)), c)| (l.as_str(), p.as_path(), harness::sha256_hex(&c.to_bytes())))
                    .collect(),
                scenarios: &scenarios,
                scenario_hash: report.scenario_hash.clone(),
                t_d: if steps_used.is_none() { Some(t_d) } else { None },
                steps: steps_used.as_deref(),
                wm: None,
                mode: Some(mode_name),
                weights,
                out: &out,
            };
            harness::write_json(&harness::sibling(&out_path, ".config.json"), &echo).map_err(out_err)?;
            eprintln!("ablation: {} rows over {} scenarios", report.rows.len(), report.scenario_count);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("wa: {f}");
            ExitCode::from(f.code())
        }
    }
}
