//! `fedssl`: run, sweep, compare and re-evaluate federated SSL experiments.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 config, 4 I/O, 5 data,
//! 6 training, 7 evaluation, 8 checkpoint, 9 compare.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fedssl::config::{ExperimentConfig, StrategyKind, StrategySection};
use fedssl::runner::{self, RunError};
use fedssl::ssl::Preset;

/// Environment variable naming the output root.
const OUT_ENV: &str = "FEDSSL_OUT";

#[derive(Parser)]
#[command(name = "fedssl", version, about = "Federated self-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment into `<out>/<run id>`.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
    /// FedEMA runs over a grid of fixed lambda values.
    Sweep {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated lambda values.
        #[arg(long, value_delimiter = ',', default_values_t = runner::default_lambdas())]
        lambdas: Vec<f64>,
    },
    /// Mean and sample std of final accuracies, grouped by method/strategy.
    Compare {
        /// Run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-evaluate a run's checkpoint.
    Eval {
        run: PathBuf,
        /// Checkpoint to evaluate instead of `<run>/checkpoint.bin`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Byol,
    Simsiam,
    Simclr,
    Moco,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Fedema,
    Replace,
    UpdateBoth,
    ConstantMu,
    Standalone,
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    out: PathBuf,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    classes_per_client: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    no_predictor: bool,
    #[arg(long)]
    no_stop_gradient: bool,
    #[arg(long)]
    momentum: Option<f64>,
    /// Replaces the strategy section of the config.
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long, conflicts_with = "tau")]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    mu_encoder: Option<f64>,
    #[arg(long)]
    mu_predictor: Option<f64>,
    #[arg(long)]
    allow_off_label: bool,
    #[arg(long)]
    wire: bool,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every_round: bool,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl ExperimentArgs {
    fn build(self) -> Result<(ExperimentConfig, PathBuf), RunError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        set(&mut cfg.name, self.name);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.workers, self.workers);
        let f = &mut cfg.federation;
        set(&mut f.rounds, self.rounds);
        set(&mut f.clients, self.clients);
        if self.clients_per_round.is_some() {
            f.clients_per_round = self.clients_per_round;
        }
        set(&mut f.local_epochs, self.local_epochs);
        set(&mut f.batch_size, self.batch_size);
        set(&mut f.lr, self.lr);
        f.wire |= self.wire;
        let d = &mut cfg.data;
        set(&mut d.classes, self.classes);
        set(&mut d.per_class, self.per_class);
        set(&mut d.dim, self.dim);
        set(&mut d.classes_per_client, self.classes_per_client);
        if let Some(m) = self.method {
            cfg.method.preset = match m {
                MethodArg::Byol => Preset::Byol,
                MethodArg::Simsiam => Preset::SimSiam,
                MethodArg::Simclr => Preset::SimClr,
                MethodArg::Moco => Preset::MoCo,
            };
        }
        if self.no_predictor {
            cfg.method.predictor = Some(false);
        }
        if self.no_stop_gradient {
            cfg.method.stop_gradient = Some(false);
        }
        if self.momentum.is_some() {
            cfg.method.momentum = self.momentum;
        }
        if let Some(s) = self.strategy {
            let kind = match s {
                StrategyArg::Fedema => StrategyKind::Fedema,
                StrategyArg::Replace => StrategyKind::Replace,
                StrategyArg::UpdateBoth => StrategyKind::UpdateBoth,
                StrategyArg::ConstantMu => StrategyKind::ConstantMu,
                StrategyArg::Standalone => StrategyKind::Standalone,
            };
            cfg.strategy = StrategySection { kind, allow_off_label: cfg.strategy.allow_off_label, ..Default::default() };
        }
        if self.lambda.is_some() {
            cfg.strategy.lambda = self.lambda;
            cfg.strategy.tau = None;
        }
        if self.tau.is_some() {
            cfg.strategy.tau = self.tau;
            cfg.strategy.lambda = None;
        }
        if self.mu_encoder.is_some() {
            cfg.strategy.mu_encoder = self.mu_encoder;
        }
        if self.mu_predictor.is_some() {
            cfg.strategy.mu_predictor = self.mu_predictor;
        }
        cfg.strategy.allow_off_label |= self.allow_off_label;
        set(&mut cfg.eval.every, self.eval_every);
        cfg.eval.checkpoint_every_round |= self.checkpoint_every_round;
        Ok((cfg.finish()?, self.out))
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn execute(cli: Cli) -> Result<(), RunError> {
    match cli.command {
        Command::Run { exp } => {
            let (cfg, out) = exp.build()?;
            let dir = out.join(cfg.run_id());
            let s = runner::run(&cfg, &dir)?;
            println!(
                "{}  rounds={}  linear={}  knn={}  collapse={:.4}  -> {}",
                s.run_id,
                s.rounds,
                pct(s.final_eval.linear_acc),
                pct(s.final_eval.knn_acc),
                s.final_eval.collapse_stat,
                s.out_dir.display()
            );
        }
        Command::Sweep { exp, lambdas } => {
            let (cfg, out) = exp.build()?;
            let root = out.join(format!("{}-sweep-seed{}", cfg.name, cfg.seed));
            let rows = runner::sweep(&cfg, &lambdas, &root)?;
            println!("{:>8}  {:>10}  {:>10}", "lambda", "linear", "knn");
            for r in rows {
                println!("{:>8}  {:>10}  {:>10}", r.lambda, pct(r.linear_acc), pct(r.knn_acc));
            }
            println!("-> {}", root.join("sweep.csv").display());
        }
        Command::Compare { runs, csv } => {
            let rows = runner::compare(&runs)?;
            print!("{}", runner::format_compare_table(&rows));
            if let Some(path) = csv {
                runner::write_compare_csv(&rows, &path)?;
            }
        }
        Command::Eval { run, checkpoint } => {
            let report = runner::evaluate_checkpoint(&run, checkpoint.as_deref().map(Path::new))?;
            println!("{}", report.to_json_line());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
