//! `otselect`: coreset selection, scoring, oracles and synthetic data from the
//! command line.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 when an internal
//! solver invariant fails.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use otselect_core::oracle::{brute_force_best, lipschitz_probe, ot_1d, synth_pools, GradModel, SynthSpec};
use otselect_core::ot::{kr_gap, solve_ot, solve_ot_on_subset, Marginals};
use otselect_core::pool::{load_indices, load_pool_files, save_pool, FileFormat, PoolFiles};
use otselect_core::report::{index_path, save_report, ConfigEcho};
use otselect_core::selector::{effective_grad_norms, poo_score, run, Initialization, DEFAULT_LAMBDA};
use otselect_core::{DistanceMatrix, Metric, Pool, PoolRole, PooCostMatrix, SelectionConfig};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "otselect", version, about = "Coreset selection by optimal-transport proxy minimization")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select a subset of the training pool.
    Select(SelectArgs),
    /// Score existing subsets.
    Score(ScoreArgs),
    /// Ground-truth checks.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// Write synthetic pools.
    Gen(GenArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Binary,
    Csv,
}

impl From<FormatArg> for FileFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Binary => FileFormat::Binary,
            FormatArg::Csv => FileFormat::Csv,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Euclidean,
    Manhattan,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Euclidean => Metric::Euclidean,
            MetricArg::Manhattan => Metric::Manhattan,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Greedy,
    Random,
}

#[derive(Args)]
struct PoolArgs {
    /// Training embeddings.
    #[arg(long)]
    train: PathBuf,
    /// Validation embeddings.
    #[arg(long)]
    val: PathBuf,
    /// Training gradient norms (default: all zero).
    #[arg(long)]
    grad: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "binary")]
    format: FormatArg,
    #[arg(long, value_enum, default_value = "euclidean")]
    metric: MetricArg,
    /// Min-max scale gradient norms to [0, 1].
    #[arg(long)]
    normalize_grad: bool,
}

impl PoolArgs {
    fn load(&self, train_labels: Option<&Path>, val_labels: Option<&Path>) -> Result<(Pool, Pool)> {
        let train = load_pool_files(
            &PoolFiles {
                embeddings: self.train.clone(),
                grad_norms: self.grad.clone(),
                labels: train_labels.map(Path::to_path_buf),
                format: self.format.into(),
            },
            PoolRole::Training,
        )?;
        let val = load_pool_files(
            &PoolFiles {
                embeddings: self.val.clone(),
                grad_norms: None,
                labels: val_labels.map(Path::to_path_buf),
                format: self.format.into(),
            },
            PoolRole::Validation,
        )?;
        Ok((train, val))
    }

    fn echo(&self, inputs: &mut BTreeMap<String, String>) {
        inputs.insert("train".into(), self.train.display().to_string());
        inputs.insert("val".into(), self.val.display().to_string());
        if let Some(g) = &self.grad {
            inputs.insert("grad".into(), g.display().to_string());
        }
        let format = match self.format {
            FormatArg::Binary => "binary",
            FormatArg::Csv => "csv",
        };
        inputs.insert("format".into(), format.into());
    }
}

#[derive(Args)]
struct SelectArgs {
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long)]
    budget: usize,
    /// Training labels, one integer per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Validation labels, one integer per line.
    #[arg(long)]
    val_labels: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Run one selection per value, e.g. 0,0.05,0.1,0.3,0.5.
    #[arg(long, value_delimiter = ',', conflicts_with = "lambda")]
    lambda_sweep: Option<Vec<f64>>,
    /// Pruning width per side.
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 200)]
    t_max: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-class selection with budgets proportional to validation class sizes.
    #[arg(long)]
    labeled: bool,
    #[arg(long)]
    redistribute_remainder: bool,
    #[arg(long, value_enum, default_value = "greedy")]
    init: InitArg,
    /// Compute cost rows on demand instead of storing the full matrix.
    #[arg(long)]
    on_demand: bool,
    /// Report path; the index list goes next to it with extension `.idx`.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    pools: PoolArgs,
    /// Index list files (newline-separated); repeat to score several.
    #[arg(long, required = true)]
    subset: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Subcommand)]
enum OracleCommand {
    /// Score every size-n subset exhaustively.
    Brute(BruteArgs),
    /// Compare the solver with sorted matching on random 1-D instances.
    Ot1d(Ot1dArgs),
    /// Probe the Kantorovich-Rubinstein bound with random 1-Lipschitz functions.
    Kr(KrArgs),
}

#[derive(Args)]
struct BruteArgs {
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
}

#[derive(Args)]
struct Ot1dArgs {
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 64)]
    max_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct KrArgs {
    #[command(flatten)]
    pools: PoolArgs,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    /// Subset size per probe (default: half the training pool).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 8)]
    anchors: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradArg {
    Uniform,
    Lognormal,
    Constant,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_val: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    clusters: usize,
    /// Also write labels with this many classes.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_enum, default_value = "lognormal")]
    grad_model: GradArg,
    /// Scale gradient norms up with distance from the cluster center.
    #[arg(long)]
    grad_correlated: bool,
    #[arg(long, default_value_t = 0.0)]
    val_shift: f64,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e
                .chain()
                .any(|c| c.downcast_ref::<otselect_core::Error>().is_some_and(|e| e.is_internal()));
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Select(a) => cmd_select(&a, cli.threads),
        Command::Score(a) => cmd_score(&a),
        Command::Oracle(OracleCommand::Brute(a)) => cmd_brute(&a),
        Command::Oracle(OracleCommand::Ot1d(a)) => cmd_ot1d(&a),
        Command::Oracle(OracleCommand::Kr(a)) => cmd_kr(&a),
        Command::Gen(a) => cmd_gen(&a),
    }
}

fn sweep_path(out: &Path, lambda: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = out.extension().map(|e| e.to_string_lossy().into_owned()).unwrap_or_else(|| "json".into());
    out.with_file_name(format!("{stem}.lambda-{lambda}.{ext}"))
}

fn cmd_select(a: &SelectArgs, threads: Option<usize>) -> Result<()> {
    let (train, val) = a.pools.load(a.labels.as_deref(), a.val_labels.as_deref())?;
    let mut config = SelectionConfig::new(a.budget);
    config.k = a.k;
    config.t_max = a.t_max;
    config.seed = a.seed;
    config.normalize_grad = a.pools.normalize_grad;
    config.labeled = a.labeled;
    config.redistribute_remainder = a.redistribute_remainder;
    config.metric = a.pools.metric.into();
    config.on_demand_costs = a.on_demand;
    config.init = match a.init {
        InitArg::Greedy => Initialization::Greedy,
        InitArg::Random => Initialization::Random,
    };

    let mut inputs = BTreeMap::new();
    a.pools.echo(&mut inputs);
    if let Some(p) = &a.labels {
        inputs.insert("labels".into(), p.display().to_string());
    }
    if let Some(p) = &a.val_labels {
        inputs.insert("val_labels".into(), p.display().to_string());
    }
    inputs.insert(
        "threads".into(),
        threads.map_or_else(|| format!("all ({})", rayon::current_num_threads()), |n| n.to_string()),
    );

    let runs: Vec<(f64, PathBuf)> = match &a.lambda_sweep {
        Some(grid) if grid.is_empty() => bail!("--lambda-sweep needs at least one value"),
        Some(grid) => grid.iter().map(|&l| (l, sweep_path(&a.out, l))).collect(),
        None => vec![(a.lambda, a.out.clone())],
    };
    let sweep = a.lambda_sweep.is_some();
    let mut stdout = std::io::stdout().lock();
    if sweep {
        writeln!(stdout, "lambda\tfinal_score\tot_component\tgrad_component\treport")?;
    }
    for (lambda, path) in runs {
        config.lambda = lambda;
        let mut report = run(&config, &train, &val)?;
        report.config_echo = ConfigEcho {
            selection: config.clone(),
            inputs: inputs.clone(),
        };
        save_report(&report, &path)?;
        if sweep {
            writeln!(
                stdout,
                "{lambda}\t{}\t{}\t{}\t{}",
                report.final_score,
                report.ot_component,
                report.grad_component,
                path.display()
            )?;
        } else {
            writeln!(stdout, "selected {} of {}", report.selected_indices.len(), train.len())?;
            writeln!(stdout, "initial_score\t{}", report.initial_score)?;
            writeln!(stdout, "final_score\t{}", report.final_score)?;
            writeln!(stdout, "ot_component\t{}", report.ot_component)?;
            writeln!(stdout, "grad_component\t{}", report.grad_component)?;
            writeln!(stdout, "exchanges\t{}", report.exchange_log.len())?;
            if let Some(p) = report.pass_at_1 {
                writeln!(stdout, "pass_at_1\t{p}")?;
            }
            writeln!(stdout, "report\t{}", path.display())?;
            writeln!(stdout, "indices\t{}", index_path(&path).display())?;
        }
    }
    Ok(())
}

fn distances(p: &PoolArgs, train: &Pool, val: &Pool) -> Result<DistanceMatrix> {
    Ok(DistanceMatrix::compute_with(train, val, p.metric.into())?)
}

fn cmd_score(a: &ScoreArgs) -> Result<()> {
    let (train, val) = a.pools.load(None, None)?;
    let d = distances(&a.pools, &train, &val)?;
    let g = effective_grad_norms(&train, a.pools.normalize_grad);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "subset\tscore\tot_component\tgrad_component")?;
    for path in &a.subset {
        let indices = load_indices(path)?;
        let b = poo_score(&d, &g, a.lambda, &indices).with_context(|| format!("scoring {}", path.display()))?;
        writeln!(stdout, "{}\t{}\t{}\t{}", path.display(), b.score, b.ot, b.grad_term)?;
    }
    Ok(())
}

fn cmd_brute(a: &BruteArgs) -> Result<()> {
    let (train, val) = a.pools.load(None, None)?;
    let d = distances(&a.pools, &train, &val)?;
    let g = effective_grad_norms(&train, a.pools.normalize_grad);
    let m = PooCostMatrix::build(&d, &g, a.lambda)?;
    let bf = brute_force_best(&m, a.n)?;
    let mut stdout = std::io::stdout().lock();
    for (subset, score) in &bf.table {
        let s: Vec<String> = subset.iter().map(usize::to_string).collect();
        writeln!(stdout, "{}\t{score}", s.join(" "))?;
    }
    eprintln!("best {:?} score {}", bf.best, bf.best_score);
    Ok(())
}

fn cmd_ot1d(a: &Ot1dArgs) -> Result<()> {
    if a.max_size < 1 {
        bail!("--max-size must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "size\tsolver\toracle\tabs_diff")?;
    let mut worst: f64 = 0.0;
    for _ in 0..a.instances {
        let n = rng.random_range(1..=a.max_size);
        let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cost = ndarray::Array2::from_shape_fn((n, n), |(i, j)| (xs[i] - ys[j]).abs());
        let solved = solve_ot(cost.view(), &Marginals::uniform(n, n)?)?.objective;
        let oracle = ot_1d(&xs, &ys)?;
        let diff = (solved - oracle).abs();
        worst = worst.max(diff);
        writeln!(stdout, "{n}\t{solved}\t{oracle}\t{diff:e}")?;
    }
    eprintln!("max abs diff {worst:e}");
    Ok(())
}

fn cmd_kr(a: &KrArgs) -> Result<()> {
    let (train, val) = a.pools.load(None, None)?;
    let d = distances(&a.pools, &train, &val)?;
    let size = a.size.unwrap_or((train.len() / 2).max(1));
    if size == 0 || size > train.len() {
        bail!("--size {size} outside 1..={}", train.len());
    }
    if a.anchors == 0 {
        bail!("--anchors must be at least 1");
    }
    // anchors are drawn inside the bounding box of both pools
    let dim = train.dim();
    let (mut lo, mut hi) = (vec![f64::INFINITY; dim], vec![f64::NEG_INFINITY; dim]);
    for row in train.embeddings().chunks_exact(dim).chain(val.embeddings().chunks_exact(dim)) {
        for (k, &x) in row.iter().enumerate() {
            lo[k] = lo[k].min(f64::from(x));
            hi[k] = hi[k].max(f64::from(x));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut stdout = std::io::stdout().lock();
    let mut min_gap = f64::INFINITY;
    for _ in 0..a.probes {
        let mut subset = sample(&mut rng, train.len(), size).into_vec();
        subset.sort_unstable();
        let anchors: Vec<Vec<f64>> = (0..a.anchors)
            .map(|_| (0..dim).map(|k| lo[k] + (hi[k] - lo[k]) * rng.random::<f64>()).collect())
            .collect();
        let values: Vec<f64> = (0..a.anchors).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (ft, fv) = lipschitz_probe(&train, &val, &anchors, &values, a.pools.metric.into())?;
        let ot = solve_ot_on_subset(&d, &subset)?.objective();
        let fs: Vec<f64> = subset.iter().map(|&i| ft[i]).collect();
        let gap = kr_gap(ot, &fs, &fv);
        min_gap = min_gap.min(gap);
        writeln!(stdout, "{gap}")?;
    }
    eprintln!("min gap {min_gap:e}");
    Ok(())
}

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut spec = SynthSpec::new(a.seed, a.n_train, a.n_val, a.dim, a.clusters);
    spec.grad_model = match a.grad_model {
        GradArg::Uniform => GradModel::Uniform,
        GradArg::Lognormal => GradModel::LogNormal { mu: 0.0, sigma: 0.75 },
        GradArg::Constant => GradModel::Constant { value: 1.0 },
    };
    spec.grad_correlated = a.grad_correlated;
    spec.val_shift = a.val_shift;
    spec.n_classes = a.classes;
    let (train, val) = synth_pools(&spec)?;
    std::fs::create_dir_all(&a.out_dir).with_context(|| format!("creating {}", a.out_dir.display()))?;
    let labels = a.classes.is_some();
    for (name, pool) in [("train", &train), ("val", &val)] {
        let files = PoolFiles {
            embeddings: a.out_dir.join(format!("{name}.emb")),
            grad_norms: Some(a.out_dir.join(format!("{name}.grad"))),
            labels: labels.then(|| a.out_dir.join(format!("{name}.labels"))),
            format: FileFormat::Binary,
        };
        save_pool(pool, &files)?;
    }
    println!("wrote {} training and {} validation points to {}", train.len(), val.len(), a.out_dir.display());
    Ok(())
}
