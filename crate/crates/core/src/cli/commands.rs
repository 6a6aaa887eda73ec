use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::config::{RunManifest, TrainConfig};
use super::{CompareArgs, EvaluateArgs, GenerateArgs, GraphShape, Overrides, TrainArgs};
use crate::aggregation::ParamMatrix;
use crate::data::{generate_synthetic, load_dataset, SplitName, TrafficDataset};
use crate::error::{Error, Result};
use crate::fedsim::{
    compare_methods, evaluate_models, prepare_clients, run_with_observer, ClientState,
    ComparisonRun, Method, Mode, RoundReport, RunObserver, RunOutcome,
};
use crate::graph::{load_graph, SensorGraph};
use crate::metrics::MetricReport;
use crate::model::{Checkpoint, GruSeq2Seq};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESULTS_FILE: &str = "results.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let graph = match args.graph {
        GraphShape::Ring => SensorGraph::ring(args.nodes)?,
        GraphShape::Grid => {
            let rows = (1..=args.nodes)
                .filter(|r| args.nodes % r == 0 && r * r <= args.nodes)
                .max()
                .unwrap_or(1);
            SensorGraph::grid(rows, args.nodes / rows)?
        }
        GraphShape::Er => SensorGraph::erdos_renyi(args.nodes, args.edge_prob, args.seed)?,
    };
    let ds = generate_synthetic(args.nodes, args.steps, &graph, args.seed, args.missing_rate)?;
    create_dir(&args.out)?;
    let series = args.out.join("series.csv");
    let graph_path = args.out.join("graph.csv");
    ds.save(&series)?;
    graph.save(&graph_path)?;
    println!(
        "wrote {} ({} nodes x {} steps, {:.2}% missing) and {} ({} edges, connected: {})",
        series.display(),
        ds.n_nodes(),
        ds.n_steps(),
        100.0 * (1.0 - ds.observed_fraction()),
        graph_path.display(),
        graph.edges().len(),
        graph.is_connected()
    );
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn apply_overrides(cfg: &mut TrainConfig, o: &Overrides) {
    if let Some(kind) = o.aggregator {
        cfg.run.aggregator.kind = kind;
        if cfg.run.mode != Mode::Federated && o.mode.is_none() {
            cfg.run.mode = Mode::Federated;
        }
    }
    if let Some(h) = o.hops {
        cfg.run.aggregator.hops = h;
    }
    if let Some(a) = o.alpha {
        cfg.run.aggregator.alpha = a;
    }
    if let Some(m) = o.mode {
        cfg.run.mode = m.into();
    }
    if let Some(s) = o.seed {
        cfg.run.seed = s;
    }
    if let Some(w) = o.workers {
        cfg.run.worker_count = w;
    }
    if let Some(out) = &o.out {
        cfg.output.dir = out.clone();
    }
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let o = &args.overrides;
    let (mut cfg, replay_dir) = match (&args.replay, &args.config) {
        (Some(manifest_path), _) => {
            if o.aggregator.is_some()
                || o.hops.is_some()
                || o.alpha.is_some()
                || o.mode.is_some()
                || o.seed.is_some()
            {
                return Err(Error::Config(
                    "--replay only accepts --out and --workers overrides".into(),
                ));
            }
            let manifest = RunManifest::load(manifest_path)?;
            manifest.verify_inputs()?;
            let dir = manifest_path
                .parent()
                .unwrap_or(Path::new("."))
                .to_path_buf();
            let mut cfg = manifest.config;
            cfg.output.dir = dir.join("replay");
            (cfg, Some(dir))
        }
        (None, Some(path)) => (TrainConfig::load(path)?, None),
        (None, None) => {
            return Err(Error::Config(
                "a config file or --replay is required".into(),
            ))
        }
    };
    apply_overrides(&mut cfg, o);
    if args.dump_params {
        cfg.output.dump_params = true;
    }
    cfg.run.validate()?;

    let outcome = train_with_config(&cfg)?;
    let last = outcome.final_report();
    println!("{}", summary_line(last));
    println!("outputs in {}", cfg.output.dir.display());

    if let Some(dir) = replay_dir {
        let original = dir.join(RESULTS_FILE);
        let logged = read_final_record(&original)?;
        let replayed = serde_json::to_string(last).expect("report serializes");
        if logged != replayed {
            return Err(Error::Integrity {
                path: original,
                msg: "replayed final report differs from the logged one".into(),
            });
        }
        println!("replay reproduces the logged final report");
    }
    Ok(())
}

fn summary_line(r: &RoundReport) -> String {
    format!(
        "{} round {}: test MAE {:.4} MAPE {:.3}% RMSE {:.4} | val RMSE {:.4}",
        r.method, r.round, r.test.mae, r.test.mape, r.test.rmse, r.val.rmse
    )
}

fn read_final_record(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .rev()
        .find(|l| !l.trim().is_empty())
        .map(str::to_string)
        .ok_or_else(|| Error::Integrity {
            path: path.to_path_buf(),
            msg: "results log is empty".into(),
        })
}

/// Loads the series and, when the run needs one, the graph.
pub fn load_inputs(
    cfg: &TrainConfig,
    want_graph: bool,
) -> Result<(TrafficDataset, Option<SensorGraph>)> {
    let ds = load_dataset(&cfg.data.series, cfg.data.interval_min)?;
    let graph = match (&cfg.data.graph, want_graph) {
        (Some(path), true) => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "graph file {} does not exist",
                    path.display()
                )));
            }
            Some(load_graph(
                path,
                cfg.data.symmetrize,
                cfg.data.binarize_threshold,
            )?)
        }
        _ => None,
    };
    Ok((ds, graph))
}

/// Runs a training job and writes its artifacts under `cfg.output.dir`:
/// the manifest (once inputs load, before training), the results log, a timing log and checkpoints.
pub fn train_with_config(cfg: &TrainConfig) -> Result<RunOutcome> {
    let out = &cfg.output.dir;
    let (ds, graph) = load_inputs(cfg, cfg.run.mode == Mode::Federated)?;
    create_dir(out)?;
    RunManifest::new(cfg)?.save(&out.join(MANIFEST_FILE))?;

    let mut writer = ArtifactWriter::new(cfg)?;
    let outcome = run_with_observer(&cfg.run, graph.as_ref(), &ds, &mut writer)?;
    let last = outcome.final_report();
    writer.write_report(last)?;
    writer.flush()?;
    save_checkpoints(&out.join("checkpoints").join("final"), &outcome.clients)?;
    Ok(outcome)
}

fn checkpoint_path(dir: &Path, client: usize) -> PathBuf {
    dir.join(format!("client_{client:04}.fgck"))
}

fn save_checkpoints(dir: &Path, clients: &[ClientState]) -> Result<()> {
    create_dir(dir)?;
    for (i, c) in clients.iter().enumerate() {
        Checkpoint::new(&c.model, &c.optimizer)?.save(&checkpoint_path(dir, i))?;
    }
    Ok(())
}

struct ArtifactWriter {
    out: PathBuf,
    results: BufWriter<File>,
    timing: BufWriter<File>,
    checkpoint_every: usize,
    dump_params: bool,
    config_hash: String,
}

impl ArtifactWriter {
    fn new(cfg: &TrainConfig) -> Result<Self> {
        let out = cfg.output.dir.clone();
        let open = |name: &str| -> Result<BufWriter<File>> {
            let p = out.join(name);
            File::create(&p)
                .map(BufWriter::new)
                .map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            results: open(RESULTS_FILE)?,
            timing: open(TIMING_FILE)?,
            out,
            checkpoint_every: cfg.output.checkpoint_every,
            dump_params: cfg.output.dump_params,
            config_hash: cfg.run.hash(),
        })
    }

    fn write_report(&mut self, r: &RoundReport) -> Result<()> {
        let line = serde_json::to_string(r).expect("report serializes");
        let timing = serde_json::json!({
            "kind": r.kind,
            "round": r.round,
            "config_hash": self.config_hash,
            "wall_time_s": r.wall_time_s,
        });
        let results_path = self.out.join(RESULTS_FILE);
        let timing_path = self.out.join(TIMING_FILE);
        writeln!(self.results, "{line}").map_err(|e| Error::io(&results_path, e))?;
        writeln!(self.timing, "{timing}").map_err(|e| Error::io(&timing_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        let results_path = self.out.join(RESULTS_FILE);
        let timing_path = self.out.join(TIMING_FILE);
        self.results
            .flush()
            .map_err(|e| Error::io(&results_path, e))?;
        self.timing.flush().map_err(|e| Error::io(&timing_path, e))
    }
}

impl RunObserver for ArtifactWriter {
    fn on_aggregated(
        &mut self,
        round: usize,
        before: &ParamMatrix,
        after: &ParamMatrix,
    ) -> Result<()> {
        if !self.dump_params {
            return Ok(());
        }
        let dir = self.out.join("params");
        create_dir(&dir)?;
        for (tag, x) in [("before", before), ("after", after)] {
            let p = dir.join(format!("round_{round:04}_{tag}.csv"));
            std::fs::write(&p, x.to_debug_csv()).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    fn on_round_end(&mut self, report: &RoundReport, clients: &[ClientState]) -> Result<()> {
        self.write_report(report)?;
        // keep the log usable if a later round diverges
        self.flush()?;
        if self.checkpoint_every > 0 && report.round % self.checkpoint_every == 0 {
            let dir = self
                .out
                .join("checkpoints")
                .join(format!("round_{:04}", report.round));
            save_checkpoints(&dir, clients)?;
        }
        Ok(())
    }
}

/// Loads every checkpoint of `dir` and recomputes pooled metrics on `split`.
pub fn evaluate_checkpoints(
    cfg: &TrainConfig,
    dir: &Path,
    split: SplitName,
) -> Result<MetricReport> {
    let (ds, _) = load_inputs(cfg, false)?;
    let (ranges, data) = prepare_clients(&ds, &cfg.run.arch, &cfg.run.windows)?;
    let expected = if cfg.run.mode == Mode::Centralized {
        1
    } else {
        ds.n_nodes()
    };
    let mut models: Vec<GruSeq2Seq> = Vec::with_capacity(expected);
    for i in 0..expected {
        let path = checkpoint_path(dir, i);
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing checkpoint {}",
                path.display()
            )));
        }
        let ck = Checkpoint::load(&path)?;
        if ck.layout.arch != cfg.run.arch {
            return Err(Error::Layout(format!(
                "{} was saved for {:?}, config expects {:?}",
                path.display(),
                ck.layout.arch,
                cfg.run.arch
            )));
        }
        models.push(ck.model()?);
    }
    let refs: Vec<&GruSeq2Seq> = models.iter().collect();
    Ok(evaluate_models(&refs, &data, split, ranges.norm)?.0)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config)?;
    let dir = args
        .checkpoints
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("checkpoints").join("final"));
    let split: SplitName = args.split.into();
    let report = evaluate_checkpoints(&cfg, &dir, split)?;
    let line = serde_json::json!({ "split": split, "metrics": report });
    println!("{line}");
    Ok(())
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let mut cfg = TrainConfig::load(&args.config)?;
    if let Some(w) = args.workers {
        cfg.run.worker_count = w;
    }
    let methods = args
        .methods
        .iter()
        .map(|m| m.parse())
        .collect::<Result<Vec<Method>>>()?;
    if args.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let needs_graph = methods.iter().any(|m| matches!(m, Method::Federated(_)));
    let (ds, graph) = load_inputs(&cfg, needs_graph)?;
    let runs = compare_methods(&cfg.run, &methods, &args.seeds, graph.as_ref(), &ds)?;

    print!("{}", summary_table(&methods, &runs));
    let csv_path = args
        .csv
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("comparison.csv"));
    if let Some(parent) = csv_path.parent() {
        create_dir(parent)?;
    }
    std::fs::write(&csv_path, comparison_csv(&runs)).map_err(|e| Error::io(&csv_path, e))?;
    println!("per-run results in {}", csv_path.display());
    Ok(())
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean ± std of final-round test metrics per method.
pub fn summary_table(methods: &[Method], runs: &[ComparisonRun]) -> String {
    let mut out = format!(
        "{:<24} {:>5} {:>18} {:>18} {:>18}\n",
        "method", "runs", "MAE", "MAPE (%)", "RMSE"
    );
    let mut means = Vec::new();
    for m in methods {
        let label = m.to_string();
        let rs: Vec<&ComparisonRun> = runs.iter().filter(|r| r.method == label).collect();
        if rs.is_empty() {
            continue;
        }
        let col = |f: fn(&MetricReport) -> f64| {
            mean_std(&rs.iter().map(|r| f(&r.test)).collect::<Vec<_>>())
        };
        let (mae, mape, rmse) = (col(|t| t.mae), col(|t| t.mape), col(|t| t.rmse));
        out += &format!(
            "{:<24} {:>5} {:>10.4} ± {:<6.4}{:>10.3} ± {:<6.3}{:>10.4} ± {:<6.4}\n",
            label,
            rs.len(),
            mae.0,
            mae.1,
            mape.0,
            mape.1,
            rmse.0,
            rmse.1
        );
        means.push((label, rmse.0));
    }
    let find = |name: &str| means.iter().find(|(l, _)| l == name).map(|(_, v)| *v);
    if let (Some(f), Some(l)) = (find("fedavg"), find("local_only")) {
        out += &format!("fedavg - local_only test RMSE gap: {:+.4}\n", f - l);
    }
    out
}

pub fn comparison_csv(runs: &[ComparisonRun]) -> String {
    let mut out = String::from(
        "method,seed,test_mae,test_mape,test_rmse,best_val_round,best_val_test_rmse\n",
    );
    for r in runs {
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            r.seed,
            r.test.mae,
            r.test.mape,
            r.test.rmse,
            r.best_val_round,
            r.best_val_test.rmse
        );
    }
    out
}
