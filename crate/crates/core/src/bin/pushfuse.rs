use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use pushfuse::env::TaskConfig;
use pushfuse::eval::{self, Method, RunConfig, RunDir};
use pushfuse::Result;

#[derive(Parser)]
#[command(name = "pushfuse", version, about = "Train, adapt and evaluate CoM-conditioned pushing policies")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for training phases; restricts evaluation to this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fused,
    Privileged,
    PriorOnly,
    RmaOnly,
    Dr,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::Fused => Method::Fused,
            MethodArg::Privileged => Method::Privileged,
            MethodArg::PriorOnly => Method::PriorOnly,
            MethodArg::RmaOnly => Method::RmaOnly,
            MethodArg::Dr => Method::Dr,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Tblock,
    Hammer,
}

#[derive(Subcommand)]
enum Cmd {
    /// PPO with ground-truth conditioning (or the DR baseline when the
    /// config's method is `dr`).
    TrainPhase1 {
        #[command(flatten)]
        common: Common,
        /// `dr` trains the unconditioned baseline; other values are ignored.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Continue training with noisy conditioning.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Overrides the config's noise sigma (m).
        #[arg(long, allow_hyphen_values = true)]
        sigma: Option<f64>,
    },
    /// Collect histories with the frozen policy and fit the ensemble.
    TrainAdapters(Common),
    /// Evaluate the config's method over its seeds.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
    /// Sweep the biased-prior ladder.
    Ablation(Common),
    /// Write a default run configuration.
    InitConfig {
        #[arg(long, value_enum, default_value = "tblock")]
        task: TaskArg,
        #[arg(long, default_value = "run")]
        name: String,
        /// Prior file referenced by the config.
        #[arg(long, default_value = "prior.json")]
        prior_file: PathBuf,
        /// Destination file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Rebuild the error CDF CSV from stored metrics.
    ExportCdf {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
    },
}

fn open(common: &Common) -> Result<(RunConfig, RunDir)> {
    let cfg = RunConfig::load(&common.config)?;
    let dir = RunDir::create(&common.out, &cfg)?;
    Ok((cfg, dir))
}

fn train_seed(cfg: &RunConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainPhase1 { common, method } => {
            let (cfg, dir) = open(&common)?;
            let dr = method.map_or(cfg.method, Method::from) == Method::Dr;
            eval::train_phase1(&dir, &cfg, train_seed(&cfg, common.seed), dr)?;
            println!("wrote {}", dir.root.join("checkpoints").display());
        }
        Cmd::Finetune { common, sigma } => {
            let (cfg, dir) = open(&common)?;
            let sigma = sigma.unwrap_or(cfg.phase15_sigma);
            eval::finetune(&dir, &cfg, train_seed(&cfg, common.seed), sigma)?;
            println!("wrote {}", dir.checkpoint(eval::PHASE15).display());
        }
        Cmd::TrainAdapters(c) => {
            let (cfg, dir) = open(&c)?;
            let (_, report) = eval::train_adapters(&dir, &cfg, train_seed(&cfg, c.seed))?;
            println!("{}", serde_json::to_string_pretty(&report.heldout)?);
        }
        Cmd::Evaluate { common, method } => {
            let (mut cfg, dir) = open(&common)?;
            if let Some(m) = method {
                cfg.method = m.into();
            }
            for s in eval::cmd_evaluate(&dir, &cfg, common.seed)? {
                println!(
                    "{} seed {}: success {:.1}% pos_err {:.4}±{:.4} m",
                    s.method.name(),
                    s.seed,
                    s.success_rate,
                    s.pos_err_mean,
                    s.pos_err_std
                );
            }
        }
        Cmd::Ablation(c) => {
            let (cfg, dir) = open(&c)?;
            let report = eval::cmd_ablation(&dir, &cfg, c.seed)?;
            for r in &report.rows {
                println!(
                    "prior {:+.3}±{:.3} {} seed {}: {:.1}%",
                    r.rung.value,
                    r.rung.sigma,
                    r.method.name(),
                    r.seed,
                    r.success_rate
                );
            }
        }
        Cmd::InitConfig {
            task,
            name,
            prior_file,
            out,
        } => {
            let mut cfg = RunConfig::tblock(&name, prior_file);
            if let TaskArg::Hammer = task {
                cfg.task = TaskConfig::hammer();
            }
            cfg.validate()?;
            let text = serde_json::to_string_pretty(&cfg)?;
            std::fs::write(&out, text + "\n").map_err(|e| pushfuse::Error::Io { path: out.clone(), source: e })?;
            println!("wrote {}", out.display());
        }
        Cmd::ExportCdf { common, method } => {
            let (cfg, dir) = open(&common)?;
            let method = method.map_or(cfg.method, Method::from);
            let seeds = common.seed.map_or(cfg.seeds.clone(), |s| vec![s]);
            for s in seeds {
                println!("{}", eval::cmd_export_cdf(&dir, method, s)?.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
