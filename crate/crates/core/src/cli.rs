//! `soupforge` command line.
//!
//! Exit codes: 0 success, 1 runtime or property failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{
    convergence_trace, cosine_report, ensemble_accuracy, run_bench, sensitivity_study, write_bench_csv,
    write_convergence_csv, write_cosine_csv, write_sensitivity_csv,
};
use crate::config::RunConfig;
use crate::error::Error;
use crate::finetune::{build_pool, generate_dataset, FactoryConfig, Splits};
use crate::model::{evaluate, Activation, Dataset, ModelSpec, Split};
use crate::params::{read_checkpoint, write_checkpoint, CheckpointStore};
use crate::soup::{Basis, SoupMethod, SoupResult, SoupTrainConfig};
use crate::{fmt_real, verify};

#[derive(Parser, Debug)]
#[command(name = "soupforge", version, about = "Build model soups from fine-tuned checkpoints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write train/val/test CSVs for the configured Gaussian-blob problem.
    Gen(GenArgs),
    /// Pre-train a base model and fine-tune K ingredients from it.
    Finetune(FinetuneArgs),
    /// Build one soup from a manifest of ingredients.
    Soup(SoupArgs),
    /// Print accuracy and mean loss of one checkpoint on one dataset.
    Eval(EvalArgs),
    /// Run the invariant suite.
    Verify(VerifyArgs),
    /// Time every method and write the benchmark reports.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// INI run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `[run] seed`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Output directory (default: `[paths] data`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Directory holding train.csv; generated from the config when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory (default: `[paths] pool`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug)]
struct SoupArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// One of: uniform, greedy, learned-softmax, learned-softmax-plus, hl, hl-plus, mehl, mehl-plus.
    #[arg(long)]
    method: String,
    /// Manifest listing the ingredient checkpoints.
    #[arg(long)]
    models: PathBuf,
    /// Validation CSV.
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    model_batch: Option<usize>,
    #[arg(long)]
    outer: Option<usize>,
    #[arg(long)]
    inner: Option<usize>,
    #[arg(long)]
    data_batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    /// Per-layer coefficients (selects the `-plus` variant).
    #[arg(long)]
    layerwise: bool,
    /// Combine raw ingredients instead of deviations from their mean.
    #[arg(long)]
    no_decentralize: bool,
    #[arg(long)]
    reset_adam_per_block: bool,
    #[arg(long)]
    activation: Option<Activation>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split label; inferred from the file name when omitted.
    #[arg(long)]
    split: Option<Split>,
    #[arg(long, default_value = "relu")]
    activation: Activation,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Print property names without running them.
    #[arg(long)]
    list: bool,
    /// Flip one analytic gradient sign (the gradient properties must fail).
    #[arg(long)]
    corrupt_grad: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    cfg: ConfigArg,
    /// Output directory (default: `[paths] out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated methods (default: `[bench] methods`).
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<SoupMethod>>,
    /// Comma-separated numbers of top ingredients to remove.
    #[arg(long, value_delimiter = ',')]
    sensitivity: Option<Vec<usize>>,
    /// Skip the convergence trace.
    #[arg(long)]
    no_convergence: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

type Outcome = std::result::Result<(), Failure>;

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e.to_string())
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e.to_string())
}

fn load_config(arg: &ConfigArg) -> std::result::Result<RunConfig, Failure> {
    let cfg = match &arg.config {
        Some(path) => RunConfig::load(path).map_err(usage)?,
        None => RunConfig::default(),
    };
    Ok(match arg.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

/// Parses `args` (including the program name), runs the command and
/// returns its exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Soup(a) => cmd_soup(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn write_splits(dir: &Path, splits: &Splits) -> crate::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    splits.train.write_csv(dir.join("train.csv"))?;
    splits.val.write_csv(dir.join("val.csv"))?;
    splits.test.write_csv(dir.join("test.csv"))
}

fn cmd_gen(a: GenArgs) -> Outcome {
    let cfg = load_config(&a.cfg)?;
    let out = a.out.unwrap_or(cfg.paths.data.clone());
    let splits = generate_dataset(&cfg.data_spec()).map_err(usage)?;
    write_splits(&out, &splits).map_err(runtime)?;
    println!("wrote {} train, {} val, {} test rows to {}", splits.train.len(), splits.val.len(), splits.test.len(), out.display());
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> Outcome {
    let mut cfg = load_config(&a.cfg)?;
    if let Some(k) = a.k {
        if k == 0 {
            return Err(Failure::Usage("--k must be at least 1".into()));
        }
        cfg.k = k;
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    let train = match &a.data {
        Some(dir) => Dataset::read_csv(dir.join("train.csv"), Split::Train).map_err(usage)?,
        None => generate_dataset(&cfg.data_spec()).map_err(usage)?.train,
    };
    let out = a.out.unwrap_or(cfg.paths.pool.clone());
    let factory = cfg.factory().map_err(usage)?;
    let pool = build_pool(&out, &train, &factory).map_err(runtime)?;
    println!("wrote {} ingredients and {}", pool.hparams.len(), pool.manifest.display());
    Ok(())
}

fn soup_settings(a: &SoupArgs, cfg: &RunConfig, method: SoupMethod, k: usize) -> SoupTrainConfig {
    let base = match method {
        SoupMethod::LearnedSoftmax { .. } => cfg.softmax_config(),
        _ => cfg.soup_config(),
    };
    let mut s = SoupTrainConfig {
        model_batch: a.model_batch.unwrap_or(base.model_batch.min(k)),
        outer_iters: a.outer.unwrap_or(base.outer_iters),
        inner_iters: a.inner.unwrap_or(base.inner_iters),
        data_batch: a.data_batch.unwrap_or(base.data_batch),
        lr: a.lr.unwrap_or(base.lr),
        weight_decay: a.wd.unwrap_or(base.weight_decay),
        reset_adam_per_block: a.reset_adam_per_block || base.reset_adam_per_block,
        ..base
    };
    if a.no_decentralize {
        s.basis = Basis::Raw;
    }
    if a.outer.is_some() || a.inner.is_some() {
        s.schedule_horizon = None;
    }
    s
}

fn write_alpha_csv(path: &Path, store: &CheckpointStore, r: &SoupResult) -> crate::Result<()> {
    let mut text = String::from("model_id,layer_name,alpha,effective_coef\n");
    for id in store.ids() {
        if r.alpha.layerwise() {
            for (li, layer) in store.layout().layers().iter().enumerate() {
                text.push_str(&format!(
                    "{id},{},{},{}\n",
                    layer.name,
                    fmt_real(r.alpha.get(id - 1, li)),
                    fmt_real(r.effective.get(id - 1, li))
                ));
            }
        } else {
            text.push_str(&format!(
                "{id},*,{},{}\n",
                fmt_real(r.alpha.get(id - 1, 0)),
                fmt_real(r.effective.get(id - 1, 0))
            ));
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_trace_csv(path: &Path, r: &SoupResult) -> crate::Result<()> {
    let mut text = String::from("step,val_loss,grad_norm_sq\n");
    for p in &r.trace {
        text.push_str(&format!("{},{},{}\n", p.step, fmt_real(p.val_loss), fmt_real(p.grad_norm_sq)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_soup(a: SoupArgs) -> Outcome {
    let cfg = load_config(&a.cfg)?;
    let method: SoupMethod = a.method.parse().map_err(usage)?;
    let method = if a.layerwise { method.with_layerwise(true) } else { method };
    let store = CheckpointStore::open(&a.models).map_err(usage)?;
    let activation = a.activation.unwrap_or(cfg.activation);
    let spec = ModelSpec::from_layer_map(store.layout(), activation).map_err(usage)?;
    let val = Dataset::read_csv(&a.val, Split::Validation).map_err(usage)?;
    let settings = soup_settings(&a, &cfg, method, store.len());
    let result = crate::soup::run_method(method, &store, &spec, &val, &settings).map_err(|e| match e {
        Error::InvalidArgument(_) | Error::Dimension(_) => usage(e),
        other => runtime(other),
    })?;

    fs::create_dir_all(&a.out).map_err(|e| runtime(Error::io(&a.out, e)))?;
    write_checkpoint(store.layout(), &result.soup, a.out.join("soup.soup")).map_err(runtime)?;
    write_alpha_csv(&a.out.join("alpha.csv"), &store, &result).map_err(runtime)?;
    write_trace_csv(&a.out.join("trace.csv"), &result).map_err(runtime)?;
    println!("{method}: wrote {}", a.out.join("soup.soup").display());
    Ok(())
}

fn infer_split(path: &Path) -> Split {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.parse().ok())
        .unwrap_or(Split::Test)
}

fn cmd_eval(a: EvalArgs) -> Outcome {
    let (layout, params) = read_checkpoint(&a.model).map_err(usage)?;
    let spec = ModelSpec::from_layer_map(&layout, a.activation).map_err(usage)?;
    let split = a.split.unwrap_or_else(|| infer_split(&a.data));
    let data = Dataset::read_csv(&a.data, split).map_err(usage)?;
    let loss = evaluate(&spec, &params, &data, 0.0).map_err(usage)?;
    let acc = loss.correct as f64 / data.len() as f64;
    println!("path,split,n,accuracy,mean_loss");
    println!("{},{split},{},{},{}", a.model.display(), data.len(), fmt_real(acc), fmt_real(loss.value));
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Outcome {
    if a.list {
        for name in verify::property_names() {
            println!("{name}");
        }
        return Ok(());
    }
    let outcomes = verify::run_suite(&verify::VerifyOptions {
        seed: a.seed,
        corrupt_grad: a.corrupt_grad,
    });
    let mut failed = 0;
    for o in &outcomes {
        println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        failed += usize::from(!o.passed);
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} properties failed", outcomes.len())));
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Outcome {
    let cfg = load_config(&a.cfg)?;
    let out = a.out.clone().unwrap_or(cfg.paths.out.clone());
    let methods = a.methods.clone().unwrap_or(cfg.bench.methods.clone());
    let drops = a.sensitivity.clone().unwrap_or(cfg.bench.sensitivity.clone());
    if drops.windows(2).any(|w| w[0] >= w[1]) || drops.last().is_some_and(|&d| d >= cfg.k) {
        return Err(Failure::Usage(format!(
            "sensitivity drops must be strictly increasing and below k = {}",
            cfg.k
        )));
    }

    let splits = generate_dataset(&cfg.data_spec()).map_err(usage)?;
    let factory = cfg.factory().map_err(usage)?;
    let pool = build_pool(out.join("pool"), &splits.train, &factory).map_err(runtime)?;
    let store = CheckpointStore::open(&pool.manifest).map_err(runtime)?;
    let spec = &factory.model;

    let mut reports = Vec::with_capacity(methods.len());
    for &m in &methods {
        let settings = match m {
            SoupMethod::LearnedSoftmax { .. } => cfg.softmax_config(),
            _ => cfg.soup_config(),
        };
        let (report, _) = run_bench(m, &store, spec, &splits.val, &splits.test, &settings).map_err(runtime)?;
        reports.push(report);
    }
    write_bench_csv(out.join("bench.csv"), &reports).map_err(runtime)?;

    let ensemble = ensemble_accuracy(&store, spec, &splits.test).map_err(runtime)?;
    let text = format!("split,accuracy\ntest,{}\n", fmt_real(ensemble));
    fs::write(out.join("ensemble.csv"), text).map_err(|e| runtime(Error::io(out.join("ensemble.csv"), e)))?;

    let cos = cosine_report(&store).map_err(runtime)?;
    write_cosine_csv(out.join("cosine.csv"), &cos).map_err(runtime)?;

    let sens = sensitivity_study(&store, spec, &splits.val, &splits.test, &drops, &cfg.soup_config()).map_err(runtime)?;
    write_sensitivity_csv(out.join("sensitivity.csv"), &sens).map_err(runtime)?;

    if !a.no_convergence {
        let linear = FactoryConfig {
            model: ModelSpec::new(cfg.data.input_dim, vec![], cfg.data.num_classes, cfg.activation).map_err(usage)?,
            ..factory.clone()
        };
        let lin_pool = build_pool(out.join("pool_linear"), &splits.train, &linear).map_err(runtime)?;
        let lin_store = CheckpointStore::open(&lin_pool.manifest).map_err(runtime)?;
        let conv_cfg = SoupTrainConfig {
            model_batch: cfg.soup.model_batch.min(lin_store.len()),
            ..cfg.convergence_config()
        };
        let conv = convergence_trace(&lin_store, &linear.model, &splits.val, &conv_cfg, &cfg.bench.convergence_outer, true)
            .map_err(runtime)?;
        write_convergence_csv(out.join("convergence.csv"), &conv).map_err(runtime)?;
    }
    println!("wrote reports for {} methods to {}", reports.len(), out.display());
    Ok(())
}
