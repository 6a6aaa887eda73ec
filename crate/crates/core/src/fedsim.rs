//! Federated round orchestration: local training, server aggregation, evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{
    load_row, Aggregator, AggregatorConfig, AggregatorKind, ParamLayout, ParamMatrix,
};
use crate::data::{
    chronological_split, make_node_windows, NormStats, SplitConvention, SplitFractions, SplitName,
    SplitRanges, TrafficDataset, WindowedSplit,
};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::metrics::{evaluate, evaluate_per_horizon, MetricReport};
use crate::model::{
    predict_split, train_epochs, AdamConfig, AdamState, GruArch, GruSeq2Seq, TrainOptions,
};
use crate::rng::{derive_seed, seeded_rng, SimRng};

/// Stream id for the shared initial model; client streams use their node id.
const INIT_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Federated,
    Centralized,
    LocalOnly,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Federated => "federated",
            Mode::Centralized => "centralized",
            Mode::LocalOnly => "local_only",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowOptions {
    pub fractions: SplitFractions,
    pub convention: SplitConvention,
    pub stride: usize,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            fractions: SplitFractions::default(),
            convention: SplitConvention::Timesteps,
            stride: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub mode: Mode,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub aggregator: AggregatorConfig,
    pub arch: GruArch,
    pub windows: WindowOptions,
    pub seed: u64,
    pub worker_count: usize,
    pub clip_norm: Option<f64>,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Federated,
            rounds: 5,
            local_epochs: 3,
            batch_size: 128,
            adam: AdamConfig::default(),
            aggregator: AggregatorConfig::fedavg(),
            arch: GruArch::default(),
            windows: WindowOptions::default(),
            seed: 0,
            worker_count: 1,
            clip_norm: None,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.worker_count == 0 {
            return Err(Error::Config("worker_count must be >= 1".into()));
        }
        if self.windows.stride == 0 {
            return Err(Error::Config("windows.stride must be >= 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("adam.lr must be > 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config("clip_norm must be > 0".into()));
            }
        }
        self.arch.validate()?;
        self.windows.fractions.validate()?;
        self.aggregator.validate()
    }

    /// Hex SHA-256 prefix of the canonical JSON form; `worker_count` is excluded since it
    /// does not affect results.
    pub fn hash(&self) -> String {
        let canonical = FedConfig {
            worker_count: 1,
            ..self.clone()
        };
        let json = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Method label used in logs and summaries.
    pub fn method_label(&self) -> String {
        match self.mode {
            Mode::Federated => self.aggregator.label(),
            Mode::Centralized => "centralized".into(),
            Mode::LocalOnly => "local_only".into(),
        }
    }

    fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            clip_norm: self.clip_norm,
        }
    }
}

/// Windowed train/val/test views of one node's series.
#[derive(Debug, Clone)]
pub struct ClientData {
    pub node: usize,
    pub train: WindowedSplit,
    pub val: WindowedSplit,
    pub test: WindowedSplit,
}

impl ClientData {
    pub fn split(&self, name: SplitName) -> &WindowedSplit {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Splits the dataset chronologically and windows every node with train statistics.
pub fn prepare_clients(
    ds: &TrafficDataset,
    arch: &GruArch,
    opts: &WindowOptions,
) -> Result<(SplitRanges, Vec<ClientData>)> {
    if arch.input_dim != 1 {
        return Err(Error::Config(
            "datasets carry one feature per node; arch.input_dim must be 1".into(),
        ));
    }
    let (m, t) = (arch.horizon_in, arch.horizon_out);
    let ranges = chronological_split(ds, opts.fractions, m + t, opts.convention)?;
    let clients = (0..ds.n_nodes())
        .map(|node| {
            let w = |name: SplitName| {
                make_node_windows(
                    ds,
                    node,
                    ranges.range(name),
                    ranges.norm,
                    m,
                    t,
                    opts.stride,
                    name,
                )
            };
            Ok(ClientData {
                node,
                train: w(SplitName::Train)?,
                val: w(SplitName::Val)?,
                test: w(SplitName::Test)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ranges, clients))
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub node: usize,
    pub model: GruSeq2Seq,
    pub optimizer: AdamState,
    rng: SimRng,
}

impl ClientState {
    fn new(node: usize, model: GruSeq2Seq, adam: AdamConfig, seed: u64) -> Self {
        let optimizer = AdamState::for_model(adam, &model);
        Self {
            node,
            model,
            optimizer,
            rng: seeded_rng(client_seed(seed, node)),
        }
    }
}

/// Shuffling stream seed of client `node`.
pub fn client_seed(seed: u64, node: usize) -> u64 {
    derive_seed(seed, node as u64)
}

/// The initial model every client starts from.
pub fn initial_model(config: &FedConfig) -> GruSeq2Seq {
    GruSeq2Seq::init(config.arch, derive_seed(config.seed, INIT_STREAM))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Round,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub kind: ReportKind,
    pub round: usize,
    pub method: String,
    pub mode: Mode,
    pub aggregator: AggregatorKind,
    pub config_hash: String,
    /// Mean over clients of the last local epoch's masked train MSE (normalized units).
    pub train_loss: f64,
    pub val: MetricReport,
    pub test: MetricReport,
    pub test_per_horizon: Vec<MetricReport>,
    /// Final report only: round with the lowest validation RMSE and its test metrics.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub best_val_test: Option<MetricReport>,
    /// Kept out of the results log so identical runs produce identical logs.
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// Hooks for side outputs (checkpoints, parameter dumps). All methods default to no-ops.
pub trait RunObserver {
    fn on_aggregated(
        &mut self,
        _round: usize,
        _before: &ParamMatrix,
        _after: &ParamMatrix,
    ) -> Result<()> {
        Ok(())
    }

    fn on_round_end(&mut self, _report: &RoundReport, _clients: &[ClientState]) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;

impl RunObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// One report per round followed by the final report.
    pub reports: Vec<RoundReport>,
    /// Final client states (a single entry in centralized mode).
    pub clients: Vec<ClientState>,
    pub ranges: SplitRanges,
}

impl RunOutcome {
    pub fn final_report(&self) -> &RoundReport {
        self.reports.last().expect("at least one report")
    }
}

pub fn run(
    config: &FedConfig,
    graph: Option<&SensorGraph>,
    ds: &TrafficDataset,
) -> Result<RunOutcome> {
    run_with_observer(config, graph, ds, &mut NoopObserver)
}

pub fn run_centralized(config: &FedConfig, ds: &TrafficDataset) -> Result<RunOutcome> {
    let config = FedConfig {
        mode: Mode::Centralized,
        ..config.clone()
    };
    run_with_observer(&config, None, ds, &mut NoopObserver)
}

pub fn run_with_observer(
    config: &FedConfig,
    graph: Option<&SensorGraph>,
    ds: &TrafficDataset,
    observer: &mut dyn RunObserver,
) -> Result<RunOutcome> {
    config.validate()?;
    let aggregator = match config.mode {
        Mode::Federated => {
            if let Some(g) = graph {
                if g.n_nodes() != ds.n_nodes() {
                    return Err(Error::Config(format!(
                        "graph has {} nodes but the dataset has {}",
                        g.n_nodes(),
                        ds.n_nodes()
                    )));
                }
            }
            Some(Aggregator::new(config.aggregator, graph)?)
        }
        Mode::Centralized | Mode::LocalOnly => None,
    };

    let (ranges, data) = prepare_clients(ds, &config.arch, &config.windows)?;
    let init = initial_model(config);
    let layout = ParamLayout::for_arch(config.arch);
    let hash = config.hash();

    let pooled_train;
    let (mut clients, train_views): (Vec<ClientState>, Vec<&WindowedSplit>) = match config.mode {
        Mode::Centralized => {
            let parts: Vec<WindowedSplit> = data.iter().map(|c| c.train.clone()).collect();
            pooled_train = WindowedSplit::concat(&parts)?;
            (
                vec![ClientState::new(0, init.clone(), config.adam, config.seed)],
                vec![&pooled_train],
            )
        }
        _ => (
            data.iter()
                .map(|c| ClientState::new(c.node, init.clone(), config.adam, config.seed))
                .collect(),
            data.iter().map(|c| &c.train).collect(),
        ),
    };

    let mut reports = Vec::with_capacity(config.rounds + 1);
    for round in 1..=config.rounds {
        let started = Instant::now();
        let losses = train_all(
            &mut clients,
            &train_views,
            config.train_options(),
            config.worker_count,
        )?;

        if let Some(agg) = &aggregator {
            let models: Vec<&GruSeq2Seq> = clients.iter().map(|c| &c.model).collect();
            let before = ParamMatrix::from_models(&models, &layout)?;
            let after = agg.apply(&before)?;
            for (i, c) in clients.iter_mut().enumerate() {
                load_row(&mut c.model, after.row(i), &layout)?;
            }
            observer.on_aggregated(round, &before, &after)?;
        }

        let models: Vec<&GruSeq2Seq> = clients.iter().map(|c| &c.model).collect();
        let val = evaluate_models(&models, &data, SplitName::Val, ranges.norm)?;
        let test = evaluate_models(&models, &data, SplitName::Test, ranges.norm)?;
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        let report = RoundReport {
            kind: ReportKind::Round,
            round,
            method: config.method_label(),
            mode: config.mode,
            aggregator: config.aggregator.kind,
            config_hash: hash.clone(),
            train_loss,
            val: val.0,
            test: test.0,
            test_per_horizon: test.1,
            best_val_round: None,
            best_val_test: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        observer.on_round_end(&report, &clients)?;
        reports.push(report);
    }

    let last = reports.last().expect("rounds >= 1").clone();
    let best = reports
        .iter()
        .filter(|r| r.val.is_defined())
        .min_by(|a, b| a.val.rmse.total_cmp(&b.val.rmse))
        .unwrap_or(&last);
    let final_report = RoundReport {
        kind: ReportKind::Final,
        best_val_round: Some(best.round),
        best_val_test: Some(best.test),
        wall_time_s: reports.iter().map(|r| r.wall_time_s).sum(),
        ..last
    };
    reports.push(final_report);
    Ok(RunOutcome {
        reports,
        clients,
        ranges,
    })
}

/// Trains every client for one round. Clients are split into `workers` contiguous
/// groups; each client only touches its own state, so the result does not depend on
/// the grouping. Returns each client's last-epoch loss.
fn train_all(
    clients: &mut [ClientState],
    views: &[&WindowedSplit],
    opts: TrainOptions,
    workers: usize,
) -> Result<Vec<f64>> {
    let train_one = |c: &mut ClientState, split: &WindowedSplit| -> Result<f64> {
        let hist = train_epochs(&mut c.model, &mut c.optimizer, split, opts, &mut c.rng)
            .map_err(|e| annotate(e, c.node))?;
        Ok(hist.last().copied().unwrap_or(f64::NAN))
    };

    let chunk = clients.len().div_ceil(workers.max(1)).max(1);
    let results: Vec<Result<f64>> = if workers <= 1 {
        clients
            .iter_mut()
            .zip(views)
            .map(|(c, v)| train_one(c, v))
            .collect()
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .chunks_mut(chunk)
                .zip(views.chunks(chunk))
                .map(|(cs, vs)| {
                    s.spawn(move || {
                        cs.iter_mut()
                            .zip(vs)
                            .map(|(c, v)| train_one(c, v))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("training worker panicked"))
                .collect()
        })
    };

    let mut losses = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(l) => losses.push(l),
            Err(e) => failures.push(e),
        }
    }
    match failures.len() {
        0 => Ok(losses),
        1 => Err(failures.remove(0)),
        _ if failures
            .iter()
            .all(|e| matches!(e, Error::TrainingDiverged(_))) =>
        {
            Err(Error::TrainingDiverged(
                failures
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("; "),
            ))
        }
        _ => Err(failures.remove(0)),
    }
}

fn annotate(e: Error, node: usize) -> Error {
    match e {
        Error::TrainingDiverged(msg) => Error::TrainingDiverged(format!("client {node}: {msg}")),
        other => other,
    }
}

/// Batch size used for inference; predictions do not depend on it.
const EVAL_BATCH: usize = 256;

/// Pooled metrics over all clients' windows of one split, in original units.
/// A single model serves every node (centralized mode).
pub fn evaluate_models(
    models: &[&GruSeq2Seq],
    data: &[ClientData],
    split: SplitName,
    norm: NormStats,
) -> Result<(MetricReport, Vec<MetricReport>)> {
    if models.len() != 1 && models.len() != data.len() {
        return Err(Error::Config(format!(
            "{} models for {} clients",
            models.len(),
            data.len()
        )));
    }
    let (mut preds, mut targets, mut mask) = (Vec::new(), Vec::new(), Vec::new());
    for (i, d) in data.iter().enumerate() {
        let model = models[if models.len() == 1 { 0 } else { i }];
        let windows = d.split(split);
        let p = predict_split(model, windows, EVAL_BATCH)?;
        preds.extend(p.iter().map(|v| norm.denormalize(*v)));
        for s in &windows.sequences {
            targets.extend(s.target.iter().map(|v| norm.denormalize(*v)));
            mask.extend_from_slice(&s.target_mask);
        }
    }
    let horizon = data.first().map_or(1, |d| d.train.horizon_out);
    let overall = evaluate(&preds, &targets, &mask)?;
    let per_horizon = evaluate_per_horizon(&preds, &targets, &mask, horizon, 1)?;
    Ok((overall, per_horizon))
}

/// One entry of a method comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Federated(AggregatorConfig),
    LocalOnly,
    Centralized,
}

impl Method {
    pub fn configure(&self, base: &FedConfig) -> FedConfig {
        match *self {
            Method::Federated(aggregator) => FedConfig {
                mode: Mode::Federated,
                aggregator,
                ..base.clone()
            },
            Method::LocalOnly => FedConfig {
                mode: Mode::LocalOnly,
                ..base.clone()
            },
            Method::Centralized => FedConfig {
                mode: Mode::Centralized,
                ..base.clone()
            },
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Method::Federated(a) => f.write_str(&a.label()),
            Method::LocalOnly => f.write_str("local_only"),
            Method::Centralized => f.write_str("centralized"),
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    /// `fedavg`, `graphfedavg[:HOPS]`, `mpfedavg[:ALPHA[:HOPS]]`, `local_only`, `centralized`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad method `{s}`"));
        let mut parts = s.trim().split(':');
        let head = parts.next().unwrap_or_default().to_ascii_lowercase();
        let rest: Vec<&str> = parts.collect();
        let hops = |v: Option<&&str>| v.map_or(Ok(1), |h| h.parse::<usize>().map_err(|_| bad()));
        let method = match head.as_str() {
            "local_only" | "local" if rest.is_empty() => Method::LocalOnly,
            "centralized" if rest.is_empty() => Method::Centralized,
            "fedavg" if rest.is_empty() => Method::Federated(AggregatorConfig::fedavg()),
            "graphfedavg" if rest.len() <= 1 => {
                Method::Federated(AggregatorConfig::graph_fedavg(hops(rest.first())?))
            }
            "mpfedavg" | "lpfedavg" if rest.len() <= 2 => {
                let alpha = rest
                    .first()
                    .map_or(Ok(0.8), |a| a.parse::<f64>().map_err(|_| bad()))?;
                Method::Federated(AggregatorConfig::mp_fedavg(alpha, hops(rest.get(1))?))
            }
            _ => return Err(bad()),
        };
        if let Method::Federated(a) = &method {
            a.validate()?;
        }
        Ok(method)
    }
}

/// Final-round and best-validation test metrics of one (method, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRun {
    pub method: String,
    pub seed: u64,
    pub test: MetricReport,
    pub best_val_round: usize,
    pub best_val_test: MetricReport,
}

/// Runs every method for every seed on the same data.
pub fn compare_methods(
    base: &FedConfig,
    methods: &[Method],
    seeds: &[u64],
    graph: Option<&SensorGraph>,
    ds: &TrafficDataset,
) -> Result<Vec<ComparisonRun>> {
    let mut runs = Vec::with_capacity(methods.len() * seeds.len());
    for method in methods {
        for &seed in seeds {
            let config = FedConfig {
                seed,
                ..method.configure(base)
            };
            let outcome = run(&config, graph, ds)?;
            let last = outcome.final_report();
            runs.push(ComparisonRun {
                method: method.to_string(),
                seed,
                test: last.test,
                best_val_round: last.best_val_round.unwrap_or(last.round),
                best_val_test: last.best_val_test.unwrap_or(last.test),
            });
        }
    }
    Ok(runs)
}

/// Mean final-round test RMSE of `method` across its runs.
pub fn mean_test_rmse(runs: &[ComparisonRun], method: &str) -> Option<f64> {
    let v: Vec<f64> = runs
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.test.rmse)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
