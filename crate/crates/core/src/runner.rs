//! Experiment runner: seeded data, federation loop, final evaluation and
//! on-disk artifacts.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | fully resolved config |
//! | `partition.txt` | `client: index index ...` per client |
//! | `rounds.csv` | `round,client,n_k,loss_mean,divergence,mu,reset,lambda,weight` |
//! | `loss_trace.csv` | `round,client,epoch,batch,loss` |
//! | `plot_divergence.csv` | `round,client,divergence` |
//! | `plot_knn.csv` | `round,knn_acc,collapse_stat` |
//! | `metrics.jsonl` | one round record per line |
//! | `eval.jsonl` | final evaluation report |
//! | `checkpoint.bin` | final global parameters |
//! | `clients/client_<k>.bin` | final online parameters of client `k` |
//!
//! With `eval.checkpoint_every_round`, `checkpoints/init.bin` and
//! `checkpoints/round_<r>/{global,client_<k>}.bin` are written as well.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, StrategySection};
use crate::data::{partition_non_iid, write_partition, DataError, Dataset};
use crate::eval::{self, EvalError, EvalReport};
use crate::fed::{FedError, Federation, Monitor, RoundRecord, UpdateStrategy};
use crate::nn::Network;
use crate::params::{NamedParams, ParamsError, ENCODER};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fed(#[from] FedError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] ParamsError),
    #[error("compare: {0}")]
    Compare(String),
}

impl RunError {
    pub fn category(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Io { .. } => "io",
            RunError::Data(_) => "data",
            RunError::Fed(_) => "training",
            RunError::Eval(_) => "eval",
            RunError::Checkpoint(_) => "checkpoint",
            RunError::Compare(_) => "compare",
        }
    }

    /// Process exit code. 2 is left to argument parsing.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 3,
            RunError::Io { .. } => 4,
            RunError::Data(_) => 5,
            RunError::Fed(_) => 6,
            RunError::Eval(_) => 7,
            RunError::Checkpoint(_) => 8,
            RunError::Compare(_) => 9,
        }
    }
}

pub type Result<T> = std::result::Result<T, RunError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

impl From<csv::Error> for RunError {
    fn from(e: csv::Error) -> Self {
        RunError::Io { path: "csv".into(), source: e.into() }
    }
}

/// Generated train/test sets and the client split of the train set.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Vec<Vec<usize>>,
}

impl PreparedData {
    pub fn client_data(&self) -> Vec<Array2<f64>> {
        self.partition.iter().map(|p| self.train.subset(p).samples).collect()
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test) = cfg.data.blob_spec().generate(cfg.seed)?;
    let partition = partition_non_iid(&train, &cfg.partition_spec())?;
    Ok(PreparedData { train, test, partition })
}

/// Accuracy of a trained encoder on the held-out set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinalEval {
    pub linear_acc: f64,
    pub knn_acc: f64,
    pub collapse_stat: f64,
}

/// Linear, kNN and collapse evaluation of the encoder group of `params`.
pub fn evaluate_params(cfg: &ExperimentConfig, params: &NamedParams, data: &PreparedData) -> Result<FinalEval> {
    let encoder = Network::from_params(cfg.net_specs().encoder, params.group(ENCODER)?.to_vec())
        .map_err(|e| RunError::Eval(e.into()))?;
    Ok(FinalEval {
        linear_acc: eval::linear_eval(&encoder, &data.train, &data.test, &cfg.eval.linear, cfg.seed)?,
        knn_acc: eval::knn_eval(&encoder, &data.train, &data.test, cfg.eval.knn_k)?,
        collapse_stat: eval::collapse_stat(&encoder, &data.test.samples.view())?,
    })
}

/// Standalone runs have no meaningful global model; they are scored by the
/// mean over clients of each client's own encoder.
fn final_eval(cfg: &ExperimentConfig, out: &RunOutput, data: &PreparedData) -> Result<FinalEval> {
    if cfg.strategy.to_strategy()? != UpdateStrategy::Standalone {
        return evaluate_params(cfg, &out.global, data);
    }
    let evals = out
        .client_params
        .iter()
        .map(|p| evaluate_params(cfg, p, data))
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len() as f64;
    Ok(FinalEval {
        linear_acc: evals.iter().map(|e| e.linear_acc).sum::<f64>() / n,
        knn_acc: evals.iter().map(|e| e.knn_acc).sum::<f64>() / n,
        collapse_stat: evals.iter().map(|e| e.collapse_stat).sum::<f64>() / n,
    })
}

/// In-memory result of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub init_global: NamedParams,
    pub global: NamedParams,
    pub client_params: Vec<NamedParams>,
    pub report: EvalReport,
    pub final_eval: FinalEval,
}

/// Divergence per client over the rounds it took part in.
pub fn divergence_by_client(records: &[RoundRecord]) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in records {
        for c in &r.clients {
            out.entry(c.client).or_default().push(c.divergence);
        }
    }
    out
}

/// Runs the experiment without touching the filesystem. `on_round` sees the
/// federation after every completed round.
pub fn execute_with(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    mut on_round: impl FnMut(&Federation, &RoundRecord) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    let fed_cfg = cfg.fed_config()?;
    let rounds = fed_cfg.rounds;
    let mut fed = Federation::new(fed_cfg, data.client_data())?;
    let init_global = fed.server.global.clone();
    let monitor = Monitor { train: &data.train, test: &data.test, knn_k: cfg.eval.knn_k, every: cfg.eval.every };
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let mut rec = fed.run_round()?;
        if monitor.due(rec.round, rounds) {
            monitor.observe(&fed.global_encoder()?, &mut rec)?;
        }
        on_round(&fed, &rec)?;
        records.push(rec);
    }
    let client_params = fed.server.clients.iter().map(|c| c.nets.online_params()).collect();
    let mut out = RunOutput {
        records,
        init_global,
        global: fed.server.global,
        client_params,
        report: EvalReport {
            run_id: cfg.run_id(),
            round: rounds,
            knn_acc: 0.0,
            linear_acc: 0.0,
            collapse_stat: 0.0,
            per_round_divergence: BTreeMap::new(),
        },
        final_eval: FinalEval { linear_acc: 0.0, knn_acc: 0.0, collapse_stat: 0.0 },
    };
    let fe = final_eval(cfg, &out, data)?;
    out.final_eval = fe;
    out.report.knn_acc = fe.knn_acc;
    out.report.linear_acc = fe.linear_acc;
    out.report.collapse_stat = fe.collapse_stat;
    out.report.per_round_divergence = divergence_by_client(&out.records);
    Ok(out)
}

pub fn execute(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let data = prepare_data(cfg)?;
    execute_with(cfg, &data, |_, _| Ok(()))
}

#[derive(Serialize)]
struct RoundRow {
    round: usize,
    client: usize,
    n_k: usize,
    loss_mean: f64,
    divergence: f64,
    mu: f64,
    reset: bool,
    lambda: Option<f64>,
    weight: f64,
}

#[derive(Serialize)]
struct LossTraceRow {
    round: usize,
    client: usize,
    epoch: usize,
    batch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct DivergenceRow {
    round: usize,
    client: usize,
    divergence: f64,
}

#[derive(Serialize)]
struct KnnRow {
    round: usize,
    knn_acc: f64,
    collapse_stat: f64,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path).map_err(io_err(path))?)))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

struct Artifacts {
    rounds: csv::Writer<BufWriter<File>>,
    trace: csv::Writer<BufWriter<File>>,
    divergence: csv::Writer<BufWriter<File>>,
    knn: csv::Writer<BufWriter<File>>,
    metrics: BufWriter<File>,
}

impl Artifacts {
    fn create(dir: &Path) -> Result<Self> {
        let metrics = dir.join("metrics.jsonl");
        Ok(Self {
            rounds: csv_writer(&dir.join("rounds.csv"))?,
            trace: csv_writer(&dir.join("loss_trace.csv"))?,
            divergence: csv_writer(&dir.join("plot_divergence.csv"))?,
            knn: csv_writer(&dir.join("plot_knn.csv"))?,
            metrics: BufWriter::new(File::create(&metrics).map_err(io_err(&metrics))?),
        })
    }

    fn record(&mut self, rec: &RoundRecord) -> Result<()> {
        for c in &rec.clients {
            let weight = rec.weights.iter().find(|w| w.0 == c.client).map_or(0.0, |w| w.1);
            self.rounds.serialize(RoundRow {
                round: rec.round,
                client: c.client,
                n_k: c.n_k,
                loss_mean: c.loss_mean,
                divergence: c.divergence,
                mu: c.mu,
                reset: c.reset,
                lambda: c.lambda,
                weight,
            })?;
            self.divergence.serialize(DivergenceRow { round: rec.round, client: c.client, divergence: c.divergence })?;
        }
        for (client, l) in &rec.loss_trace {
            self.trace.serialize(LossTraceRow { round: rec.round, client: *client, epoch: l.epoch, batch: l.batch, loss: l.loss })?;
        }
        if let (Some(knn_acc), Some(collapse_stat)) = (rec.knn_acc, rec.collapse_stat) {
            self.knn.serialize(KnnRow { round: rec.round, knn_acc, collapse_stat })?;
        }
        let line = serde_json::to_string(rec).expect("round record serializes");
        writeln!(self.metrics, "{line}").map_err(|source| RunError::Io { path: "metrics.jsonl".into(), source })
    }

    fn finish(mut self) -> Result<()> {
        self.rounds.flush().map_err(|source| RunError::Io { path: "rounds.csv".into(), source })?;
        self.trace.flush().map_err(|source| RunError::Io { path: "loss_trace.csv".into(), source })?;
        self.divergence.flush().map_err(|source| RunError::Io { path: "plot_divergence.csv".into(), source })?;
        self.knn.flush().map_err(|source| RunError::Io { path: "plot_knn.csv".into(), source })?;
        self.metrics.flush().map_err(|source| RunError::Io { path: "metrics.jsonl".into(), source })
    }
}

/// What `run` reports back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_eval: FinalEval,
    pub out_dir: PathBuf,
}

/// Runs the experiment and writes every artifact into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_bytes(&out_dir.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let data = prepare_data(cfg)?;
    let part_path = out_dir.join("partition.txt");
    let mut part = BufWriter::new(File::create(&part_path).map_err(io_err(&part_path))?);
    write_partition(&mut part, &data.partition).map_err(io_err(&part_path))?;
    part.flush().map_err(io_err(&part_path))?;

    let mut artifacts = Artifacts::create(out_dir)?;
    let every_round = cfg.eval.checkpoint_every_round;
    let ckpt_dir = out_dir.join("checkpoints");
    let out = execute_with(cfg, &data, |fed, rec| {
        artifacts.record(rec)?;
        if every_round {
            let dir = ckpt_dir.join(format!("round_{:04}", rec.round));
            write_bytes(&dir.join("global.bin"), &fed.server.global.to_bytes())?;
            for c in &rec.clients {
                let params = fed.server.clients[c.client].nets.online_params();
                write_bytes(&dir.join(format!("client_{}.bin", c.client)), &params.to_bytes())?;
            }
        }
        Ok(())
    })?;
    artifacts.finish()?;
    if every_round {
        write_bytes(&ckpt_dir.join("init.bin"), &out.init_global.to_bytes())?;
    }

    write_bytes(&out_dir.join("checkpoint.bin"), &out.global.to_bytes())?;
    for (k, p) in out.client_params.iter().enumerate() {
        write_bytes(&out_dir.join("clients").join(format!("client_{k}.bin")), &p.to_bytes())?;
    }
    let eval_path = out_dir.join("eval.jsonl");
    write_bytes(&eval_path, format!("{}\n", out.report.to_json_line()).as_bytes())?;

    Ok(RunSummary {
        run_id: cfg.run_id(),
        label: cfg.label(),
        seed: cfg.seed,
        rounds: out.records.len(),
        final_eval: out.final_eval,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Default `lambda` grid of the sweep.
pub fn default_lambdas() -> Vec<f64> {
    (0..=5).map(|i| i as f64 * 0.2).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub linear_acc: f64,
    pub knn_acc: f64,
    pub collapse_stat: f64,
}

/// One FedEMA run per fixed `lambda` under `out_root/lambda_<value>`, plus
/// `out_root/sweep.csv` with columns `lambda,linear_acc,knn_acc,collapse_stat`.
pub fn sweep(base: &ExperimentConfig, lambdas: &[f64], out_root: &Path) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut cfg = base.clone();
        cfg.strategy = StrategySection { allow_off_label: base.strategy.allow_off_label, ..StrategySection::fedema_lambda(lambda) };
        let cfg = cfg.finish()?;
        let s = run(&cfg, &out_root.join(format!("lambda_{lambda}")))?;
        rows.push(SweepRow {
            lambda,
            linear_acc: s.final_eval.linear_acc,
            knn_acc: s.final_eval.knn_acc,
            collapse_stat: s.final_eval.collapse_stat,
        });
    }
    fs::create_dir_all(out_root).map_err(io_err(out_root))?;
    let mut w = csv_writer(&out_root.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(out_root))?;
    Ok(rows)
}

/// Reads the last evaluation report of a run directory.
pub fn read_eval_report(run_dir: &Path) -> Result<EvalReport> {
    let path = run_dir.join("eval.jsonl");
    let f = File::open(&path).map_err(io_err(&path))?;
    let mut last = None;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(&path))?;
        if !line.trim().is_empty() {
            last = Some(line);
        }
    }
    let line = last.ok_or_else(|| RunError::Compare(format!("{} has no evaluation", path.display())))?;
    serde_json::from_str(&line).map_err(|e| RunError::Compare(format!("{}: {e}", path.display())))
}

pub fn read_round_records(run_dir: &Path) -> Result<Vec<RoundRecord>> {
    let path = run_dir.join("metrics.jsonl");
    let f = File::open(&path).map_err(io_err(&path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| RunError::Compare(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub runs: usize,
    pub linear_mean: f64,
    pub linear_std: f64,
    pub knn_mean: f64,
    pub knn_std: f64,
}

/// Mean and sample standard deviation (`n - 1`). One value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups runs by method/strategy label, in first-seen order. All runs must
/// share the dataset spec and client count, and every group the same seeds.
pub fn compare(run_dirs: &[PathBuf]) -> Result<Vec<CompareRow>> {
    if run_dirs.is_empty() {
        return Err(RunError::Compare("no runs given".into()));
    }
    let mut groups: Vec<(String, Vec<u64>, Vec<EvalReport>)> = Vec::new();
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    for dir in run_dirs {
        let cfg = ExperimentConfig::load(&dir.join("config.toml"))?;
        if let Some((ref_dir, r)) = &reference {
            if r.data != cfg.data || r.federation.clients != cfg.federation.clients {
                return Err(RunError::Compare(format!(
                    "{} and {} use different dataset specs",
                    ref_dir.display(),
                    dir.display()
                )));
            }
        } else {
            reference = Some((dir.clone(), cfg.clone()));
        }
        let report = read_eval_report(dir)?;
        let label = cfg.label();
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => {
                g.1.push(cfg.seed);
                g.2.push(report);
            }
            None => groups.push((label, vec![cfg.seed], vec![report])),
        }
    }
    let mut seed_sets = groups.iter().map(|g| {
        let mut s = g.1.clone();
        s.sort_unstable();
        s
    });
    let first = seed_sets.next().expect("nonempty");
    if seed_sets.any(|s| s != first) {
        return Err(RunError::Compare("groups were run with different seed sets".into()));
    }
    Ok(groups
        .into_iter()
        .map(|(label, _, reports)| {
            let lin: Vec<f64> = reports.iter().map(|r| r.linear_acc).collect();
            let knn: Vec<f64> = reports.iter().map(|r| r.knn_acc).collect();
            let (linear_mean, linear_std) = mean_std(&lin);
            let (knn_mean, knn_std) = mean_std(&knn);
            CompareRow { label, runs: reports.len(), linear_mean, linear_std, knn_mean, knn_std }
        })
        .collect())
}

/// Columns `label,runs,linear_mean,linear_std,knn_mean,knn_std`.
pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

/// Aligned plain-text table, accuracies in percent.
pub fn format_compare_table(rows: &[CompareRow]) -> String {
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max("method/strategy".len());
    let mut s = format!("{:<width$}  {:>4}  {:>16}  {:>16}\n", "method/strategy", "runs", "linear acc (%)", "knn acc (%)");
    for r in rows {
        let lin = format!("{:.2} ± {:.2}", 100.0 * r.linear_mean, 100.0 * r.linear_std);
        let knn = format!("{:.2} ± {:.2}", 100.0 * r.knn_mean, 100.0 * r.knn_std);
        s.push_str(&format!("{:<width$}  {:>4}  {:>16}  {:>16}\n", r.label, r.runs, lin, knn));
    }
    s
}

/// Re-evaluates a run's checkpoint (default `checkpoint.bin`) against the
/// run's own data.
pub fn evaluate_checkpoint(run_dir: &Path, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let path = checkpoint.map_or_else(|| run_dir.join("checkpoint.bin"), Path::to_path_buf);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let params = NamedParams::from_bytes(&bytes)?;
    let data = prepare_data(&cfg)?;
    let fe = evaluate_params(&cfg, &params, &data)?;
    let records = read_round_records(run_dir).unwrap_or_default();
    Ok(EvalReport {
        run_id: cfg.run_id(),
        round: records.len(),
        knn_acc: fe.knn_acc,
        linear_acc: fe.linear_acc,
        collapse_stat: fe.collapse_stat,
        per_round_divergence: divergence_by_client(&records),
    })
}
