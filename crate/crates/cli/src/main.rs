use std::path::PathBuf;
use std::process::ExitCode;

use bbdfml::api_pool::save_pool;
use bbdfml::config::RunConfig;
use bbdfml::harness::{comparison_table, EvalReport};
use bbdfml::runner::{
    export_report, pool_dir, run_ablation, run_baseline, run_dir, run_meta_training, AblationKind, Experiment, Method, RunState,
};
use bbdfml::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bbdfml", version, about = "Meta-learn a few-shot initialization from black-box classifier APIs")]
struct Cli {
    /// TOML config file; overrides the preset.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Named preset used when no config file is given.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// `dotted.key=value` overrides applied after loading.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, global = true, env = "BBDFML_OUTPUT_DIR")]
    output_dir: Option<PathBuf>,
    #[arg(long, global = true, env = "BBDFML_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the API pool and save it with its manifest.
    BuildPool,
    /// Run meta-training and save the final state.
    Train {
        /// Continue from the run's checkpoint if one exists.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate methods on shared meta-test episodes and export the report.
    Evaluate {
        #[arg(long, value_delimiter = ',', default_value = "random,best_api,single_dfkd,distill_avg,bidf_mkd")]
        methods: Vec<String>,
        /// Exit with status 4 unless bidf_mkd beats random by 10 points and beats distill_avg.
        #[arg(long)]
        check: bool,
    },
    /// Run one ablation sweep.
    Ablate {
        /// q_sweep, api_count_sweep, lambda_sweep, shot_sweep, fo_vs_zo or component_toggle.
        which: String,
    },
    /// Re-export the saved final state and reports.
    Export,
    /// Print the resolved configuration.
    ShowConfig,
}

enum Failure {
    Config(String),
    Runtime(String),
    Acceptance(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?,
        None => RunConfig::preset(&cli.preset)?,
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn final_dir(cfg: &RunConfig) -> PathBuf {
    run_dir(cfg).join("final")
}

fn train_or_load(exp: &Experiment, cfg: &RunConfig, resume: bool) -> Result<RunState, Failure> {
    let dir = final_dir(cfg);
    if !resume && dir.join("state.json").exists() {
        log::info!("using trained state in {}", dir.display());
        return Ok(RunState::load(&dir, cfg)?);
    }
    let state = run_meta_training(exp, cfg, resume)?;
    state.save(&dir)?;
    Ok(state)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve(&cli)?;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()?),
        Command::BuildPool => {
            let exp = Experiment::build(&cfg)?;
            let dir = pool_dir(&cfg);
            let manifest = save_pool(&exp.pool, &dir)?;
            println!("| api | arch | source | accuracy | low quality |\n|---:|---|---|---:|---|");
            for r in &manifest.apis {
                println!("| {} | {} | {} | {:.3} | {} |", r.api_id, r.arch_tag, r.source_id, r.reported_accuracy, r.low_quality);
            }
            println!("pool written to {}", dir.display());
        }
        Command::Train { resume } => {
            let exp = Experiment::load_or_build(&cfg)?;
            let state = run_meta_training(&exp, &cfg, resume)?;
            state.save(&final_dir(&cfg))?;
            let out = export_report(&cfg.output_dir, &cfg, &state, &[])?;
            println!("{} slots, {} queries, {} failed; outputs in {}", state.slot, state.queries, state.failures, out.display());
        }
        Command::Evaluate { methods, check } => {
            let methods: Vec<Method> = methods.iter().map(|m| m.parse()).collect::<Result<_, _>>()?;
            let exp = Experiment::load_or_build(&cfg)?;
            let episodes = exp.test_episodes(&cfg)?;
            let mut reports = Vec::new();
            let mut state = None;
            for m in methods {
                let report = if m == Method::BidfMkd {
                    let s = train_or_load(&exp, &cfg, false)?;
                    let meta = s.meta.clone();
                    state = Some(s);
                    bbdfml::harness::evaluate(&meta, &episodes, &cfg.eval, m.tag(), state.as_ref().unwrap().queries, cfg.workers)?
                } else {
                    run_baseline(&exp, &cfg, m, &episodes)?.0
                };
                log::info!("{m}: {:.2}%", 100.0 * report.mean_accuracy);
                reports.push(report);
            }
            print!("{}", comparison_table("method", &reports));
            let state = match state {
                Some(s) => s,
                None => RunState::new(&exp, &cfg)?,
            };
            let out = export_report(&cfg.output_dir, &cfg, &state, &reports)?;
            println!("report written to {}", out.display());
            if check {
                check_ordering(&reports)?;
            }
        }
        Command::Ablate { which } => {
            let kind: AblationKind = which.parse()?;
            let exp = Experiment::load_or_build(&cfg)?;
            let table = run_ablation(&exp, kind, &cfg)?;
            let dir = run_dir(&cfg);
            std::fs::create_dir_all(&dir).map_err(Error::from)?;
            std::fs::write(dir.join(format!("ablation_{}.csv", kind.tag())), table.csv()).map_err(Error::from)?;
            std::fs::write(dir.join(format!("ablation_{}.md", kind.tag())), table.markdown()).map_err(Error::from)?;
            print!("{}", table.markdown());
        }
        Command::Export => {
            let state = RunState::load(&final_dir(&cfg), &cfg)?;
            let reports_path = run_dir(&cfg).join("reports.json");
            let reports: Vec<EvalReport> = match std::fs::read(&reports_path) {
                Ok(bytes) => serde_json::from_slice(&bytes).map_err(Error::from)?,
                Err(_) => Vec::new(),
            };
            let out = export_report(&cfg.output_dir, &cfg, &state, &reports)?;
            println!("report written to {}", out.display());
        }
    }
    Ok(())
}

fn check_ordering(reports: &[EvalReport]) -> Result<(), Failure> {
    let acc = |tag: &str| reports.iter().find(|r| r.method_tag == tag).map(|r| 100.0 * r.mean_accuracy);
    let (Some(ours), Some(random), Some(avg)) = (acc("bidf_mkd"), acc("random"), acc("distill_avg")) else {
        return Err(Failure::Config("--check needs bidf_mkd, random and distill_avg".into()));
    };
    if ours >= random + 10.0 && ours > avg {
        Ok(())
    } else {
        Err(Failure::Acceptance(format!("bidf_mkd {ours:.2} vs random {random:.2} and distill_avg {avg:.2}")))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
        Err(Failure::Acceptance(msg)) => {
            eprintln!("acceptance check failed: {msg}");
            ExitCode::from(4)
        }
    }
}
