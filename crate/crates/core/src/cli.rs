//! Command-line surface: `train`, `verify`, `compact`, `bench`, `inspect`,
//! `fetch`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use tracing::info;

use crate::bench;
use crate::compact;
use crate::config::{ArchConfig, DatasetName, RunConfig};
use crate::data::{self, Dataset, DATA_DIR_ENV};
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, HistogramBins};
use crate::fetch;
use crate::lirpa::Engine;
use crate::model_file::{self, Metadata};
use crate::net::{LastEvent, Network};
use crate::sparsity::{self, Budget};
use crate::tensor::Tensor;
use crate::train::{self, BoundMix};

#[derive(Debug, Parser)]
#[command(name = "sparsecert", version, about = "Sparse certifiably robust classifiers")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset directory (default: $SPARSECERT_DATA_DIR, then data/<dataset>).
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Perturbation radius (ε_max for training, radius for verification).
    #[arg(long, global = true)]
    pub eps: Option<f64>,
    /// Parameter budget: a fraction in (0, 1] or an absolute count.
    #[arg(long, global = true)]
    pub budget: Option<Budget>,
    /// Bound engine: training engine for `train`, evaluation engine otherwise.
    #[arg(long, global = true)]
    pub engine: Option<Engine>,
    /// Run every parallel section on a single worker.
    #[arg(long, global = true)]
    pub strict_determinism: bool,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Robust sparse training; writes model.vcm, metrics.csv, summary.json,
    /// certs.csv and hist.csv.
    Train(TrainArgs),
    /// Standard and verified accuracy of a model on the test split.
    Verify(VerifyArgs),
    /// Remove dormant elements and report the size change.
    Compact(CompactArgs),
    /// Per-sample inference latency.
    Bench(BenchArgs),
    /// Layer table, dormant counts and weight histogram.
    Inspect(InspectArgs),
    /// Download a dataset and verify checksums.
    Fetch(FetchArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub t_exp: Option<usize>,
    #[arg(long)]
    pub ramp_start: Option<usize>,
    #[arg(long)]
    pub ramp_length: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    #[arg(long)]
    pub freeze_after: Option<usize>,
    /// `anneal-to-ibp` (default) or `crown`.
    #[arg(long)]
    pub bound_mix: Option<BoundMix>,
    /// Do not intersect perturbation balls with the pixel range.
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub dataset: Option<DatasetName>,
    /// Evaluate only the first `n` test samples.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Debug, Args)]
pub struct CompactArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Deactivate to the budget first if the model was trained after its
    /// last deactivation.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// A second model to compare against.
    #[arg(long)]
    pub against: Option<PathBuf>,
    #[arg(long, default_value_t = bench::DEFAULT_REPETITIONS)]
    pub repetitions: usize,
    #[arg(long, default_value_t = bench::DEFAULT_WARMUP)]
    pub warmup: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Where to write the histogram CSV (default: <out>/hist.csv when --out
    /// is given).
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetName,
    #[arg(long, default_value = fetch::MNIST_MIRROR)]
    pub mirror: String,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn with_workers<R: Send>(strict: bool, f: impl FnOnce() -> R + Send) -> Result<R> {
    #[cfg(feature = "parallel")]
    if strict {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    let _ = strict;
    Ok(f())
}

/// Merges the config file (if any) with command-line overrides.
pub fn resolve_config(g: &Global, a: &TrainArgs) -> Result<RunConfig> {
    let mut c = match &g.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(v) = &g.data_dir {
        c.data_dir = Some(v.clone());
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.eps {
        c.eps_max = v;
    }
    if let Some(v) = g.budget {
        c.budget = v;
    }
    if let Some(v) = g.engine {
        c.train_engine = v;
    }
    if g.strict_determinism {
        c.strict_determinism = true;
    }
    if let Some(v) = &g.out {
        c.out_dir = v.clone();
    }
    if let Some(v) = &a.preset {
        c.arch = ArchConfig::Preset { preset: v.clone() };
    }
    if let Some(v) = a.dataset {
        c.dataset = v;
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.t_exp {
        c.t_exp = v;
    }
    if let Some(v) = a.ramp_start {
        c.ramp_start = v;
    }
    if let Some(v) = a.ramp_length {
        c.ramp_length = v;
    }
    if let Some(v) = a.lr {
        c.optimizer.lr = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if a.train_subset.is_some() {
        c.train_subset = a.train_subset;
    }
    if a.eval_subset.is_some() {
        c.eval_subset = a.eval_subset;
    }
    if a.freeze_after.is_some() {
        c.freeze_after = a.freeze_after;
    }
    if let Some(v) = a.bound_mix {
        c.bound_mix = v;
    }
    if a.no_clip {
        c.clip = false;
    }
    Ok(c)
}

/// Everything `train` writes, produced from a validated configuration.
pub fn run_training(cfg: &RunConfig) -> Result<serde_json::Value> {
    cfg.validate()?;
    let (train_set, test_set) = cfg.load_data()?;
    let arch = cfg.architecture()?;
    let net = Network::<f32>::build(arch, cfg.seed)?;
    let backbone = net.total_param_count();
    let sched = cfg.schedule();
    let plan = cfg.plan();
    let t0 = Instant::now();
    let outcome = with_workers(cfg.strict_determinism, || {
        info!(
            "training {} on {} samples with {} worker(s)",
            cfg.dataset.as_str(),
            train_set.len(),
            crate::par::num_workers()
        );
        train::train(net, &train_set, &test_set, &sched, &plan, |_| {})
    })??;
    let train_seconds = t0.elapsed().as_secs_f64();

    let eval_set = match cfg.eval_subset {
        Some(n) => test_set.take(n),
        None => test_set.clone(),
    };
    let opts = EvalOptions {
        engine: cfg.eval_engine,
        clip: cfg.clip_range(),
        ..Default::default()
    };
    let (ev, certs) = with_workers(cfg.strict_determinism, || {
        eval::evaluate(&outcome.net, &eval_set, cfg.eps_max, &opts)
    })??;
    let hist = eval::weight_histogram(&outcome.net, &HistogramBins::default());

    let out = &cfg.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let meta = Metadata {
        seed: Some(cfg.seed),
        eps_max: Some(cfg.eps_max),
        budget: Some(outcome.budget),
        epochs: Some(cfg.epochs),
        dataset: Some(cfg.dataset.as_str().into()),
        normalization: Some(train_set.normalization.clone()),
        build_id: model_file::build_id(),
    };
    model_file::save(&outcome.net, &meta, &out.join("model.vcm"))?;
    write_with(&out.join("metrics.csv"), |w| train::write_metrics(&outcome.reports, w))?;
    write_with(&out.join("certs.csv"), |w| eval::write_certificates(&certs, w))?;
    write_with(&out.join("hist.csv"), |w| hist.write_csv(w))?;
    let summary = json!({
        "config": cfg,
        "backbone_params": backbone,
        "budget": outcome.budget,
        "active_params": outcome.net.active_param_count(),
        "test": ev,
        "low_magnitude_fraction_1e-3": hist.fraction_below(-3),
        "train_seconds": train_seconds,
        "build_id": model_file::build_id(),
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn load_model(path: &Path) -> Result<(Network<f32>, model_file::Manifest)> {
    model_file::load::<f32>(path)
}

fn test_split(
    g: &Global,
    dataset: Option<DatasetName>,
    meta: &Metadata,
) -> Result<Dataset> {
    let name = match dataset {
        Some(d) => d,
        None => meta
            .dataset
            .as_deref()
            .unwrap_or("mnist")
            .parse::<DatasetName>()?,
    };
    let cfg = RunConfig {
        dataset: name,
        data_dir: g.data_dir.clone(),
        normalization: meta.normalization.clone(),
        ..Default::default()
    };
    Ok(cfg.load_data()?.1)
}

fn cmd_verify(g: &Global, a: &VerifyArgs) -> Result<()> {
    let (net, manifest) = load_model(&a.model)?;
    let mut ds = test_split(g, a.dataset, &manifest.metadata)?;
    if let Some(n) = a.limit {
        ds = ds.take(n);
    }
    let eps = g.eps.or(manifest.metadata.eps_max).unwrap_or(0.0);
    let opts = EvalOptions {
        engine: g.engine.unwrap_or(Engine::Ibp),
        clip: (!a.no_clip).then_some((0.0, 1.0)),
        ..Default::default()
    };
    let (ev, certs) = with_workers(g.strict_determinism, || eval::evaluate(&net, &ds, eps, &opts))??;
    println!(
        "samples {}  eps {}  engine {}  standard {:.2}%  verified {:.2}%",
        ev.samples, ev.eps, ev.engine, ev.standard_accuracy, ev.verified_accuracy
    );
    if let Some(out) = &g.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        write_with(&out.join("certs.csv"), |w| eval::write_certificates(&certs, w))?;
        write_json(&out.join("summary.json"), &json!({ "model": a.model, "test": ev }))?;
    }
    Ok(())
}

fn cmd_compact(g: &Global, a: &CompactArgs) -> Result<()> {
    let (mut net, manifest) = load_model(&a.model)?;
    if net.last_event != LastEvent::Deactivate {
        if !a.force {
            return Err(Error::Consistency(
                "model was modified after its last deactivation; pass --force to \
                 deactivate to the budget first"
                    .into(),
            ));
        }
        let budget = match (g.budget, manifest.metadata.budget) {
            (Some(b), _) => b.resolve(net.total_param_count())?,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::Config("--force needs a budget (--budget)".into()))
            }
        };
        sparsity::deactivate(&mut net, budget)?;
    }
    let small = compact::compact(&net)?;
    model_file::save(&small, &manifest.metadata, &a.output)?;
    let report = compact::size_report(&net, &small)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench_input(net: &Network<f32>, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shape = vec![1];
    shape.extend_from_slice(net.input_shape());
    Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0))
}

fn cmd_bench(g: &Global, a: &BenchArgs) -> Result<()> {
    let (net, _) = load_model(&a.model)?;
    let x = bench_input(&net, g.seed.unwrap_or(0));
    let s = bench::latency(&net, &x, a.repetitions, a.warmup)?;
    let mut report = json!({ "model": a.model, "latency": s });
    if let Some(other) = &a.against {
        let (net2, _) = load_model(other)?;
        let s2 = bench::latency(&net2, &x, a.repetitions, a.warmup)?;
        report["against"] = json!({ "model": other, "latency": s2 });
        report["latency_ratio"] = json!(s2.mean_us / s.mean_us);
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_inspect(g: &Global, a: &InspectArgs) -> Result<()> {
    let (net, manifest) = load_model(&a.model)?;
    println!(
        "{:>3} {:<8} {:<18} {:>8} {:>8} {:>8} {:>10} {:>10}",
        "idx", "kind", "output", "elems", "active", "dormant", "params", "active_p"
    );
    for (i, layer) in net.arch().layers.iter().enumerate() {
        let shape = format!("{:?}", net.output_shape(i));
        match net.layer_params(i) {
            Some(p) => {
                let active = p.mask.iter().filter(|&&m| m).count();
                println!(
                    "{:>3} {:<8} {:<18} {:>8} {:>8} {:>8} {:>10} {:>10}",
                    i,
                    layer.name(),
                    shape,
                    p.elements(),
                    active,
                    p.elements() - active,
                    p.weight.len() + p.bias.len(),
                    active * p.params_per_element()
                );
            }
            None => println!("{:>3} {:<8} {:<18}", i, layer.name(), shape),
        }
    }
    println!(
        "total {}  active {}  dormant elements {}  last event {:?}",
        net.total_param_count(),
        net.active_param_count(),
        net.dormant_elements(),
        net.last_event
    );
    if let Some(budget) = manifest.metadata.budget {
        if budget < net.total_param_count() {
            let alloc = sparsity::erk_allocate(&net, budget)?;
            let matches = alloc.layers.iter().all(|l| {
                net.layer_params(l.layer).unwrap().mask.iter().filter(|&&m| m).count() == l.keep
            });
            println!(
                "budget {budget}  allocator keep counts {:?}  masks match: {matches}",
                alloc.layers.iter().map(|l| l.keep).collect::<Vec<_>>()
            );
        }
    }
    let hist_path = a.hist.clone().or_else(|| g.out.as_ref().map(|o| o.join("hist.csv")));
    if let Some(p) = hist_path {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let hist = eval::weight_histogram(&net, &HistogramBins::default());
        write_with(&p, |w| hist.write_csv(w))?;
        println!("histogram written to {}", p.display());
    }
    Ok(())
}

fn cmd_fetch(g: &Global, a: &FetchArgs) -> Result<()> {
    let dir = g
        .data_dir
        .clone()
        .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data").join(a.dataset.as_str()));
    match a.dataset {
        DatasetName::Mnist => {
            let got = fetch::fetch_mnist(&dir, &a.mirror)?;
            println!(
                "{}: {} file(s) downloaded, all checksums verified",
                dir.display(),
                got.len()
            );
            let (tr, te) = data::load_mnist(&dir)?;
            println!("train {}  test {}", tr.len(), te.len());
            Ok(())
        }
        DatasetName::Cifar10 => Err(Error::Unsupported(
            "fetch supports mnist; place the CIFAR-10 binary batches in the data directory"
                .into(),
        )),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train(a) => {
            let cfg = resolve_config(g, a)?;
            let summary = run_training(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&summary["test"])?);
            Ok(())
        }
        Command::Verify(a) => cmd_verify(g, a),
        Command::Compact(a) => cmd_compact(g, a),
        Command::Bench(a) => cmd_bench(g, a),
        Command::Inspect(a) => cmd_inspect(g, a),
        Command::Fetch(a) => cmd_fetch(g, a),
    }
}
