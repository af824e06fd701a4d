//! The `cosmos` command line: calibrate, select, evaluate, tune, synth and ablate.
//!
//! Exit codes: 0 on success, 1 on I/O failure, 2 on validation or usage errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cosmos_core::benchgen::{self, OracleTable};
use cosmos_core::calibration::{calibrate_models, CalibrationProfile, TemperatureGrid};
use cosmos_core::clustering::{ClusterConfig, FeatureSource};
use cosmos_core::data::{load_dataset, ValidatedDataset};
use cosmos_core::evaluation::{
    ablate, ablation_table_csv, build_mixture, method_name, run_suite, SuiteConfig,
    DEFAULT_ABLATION_SIZES, DEFAULT_MIXTURES,
};
use cosmos_core::selection::{select, tune_by_frequency, SelectOptions, SelectionMode};

pub const THREADS_ENV: &str = "COSMOS_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cosmos_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_io() => 1,
            _ => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cosmos", version, about = "Confidence-based model selection under subpopulation shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit per-model temperatures on a labelled source split.
    Calibrate(CalibrateArgs),
    /// Route test inputs to base models and write predictions.
    Select(SelectArgs),
    /// Score methods on mixture and per-group test sets.
    Evaluate(EvaluateArgs),
    /// Rank models by how often cluster selection picks them.
    Tune(TuneArgs),
    /// Write a synthetic benchmark dataset.
    Synth(SynthArgs),
    /// Sweep the cluster size and summarize each run.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Temperature grid as start:stop:step.
    #[arg(long, default_value = "0.25:15:0.25")]
    pub grid: String,
    #[arg(long, default_value_t = cosmos_core::DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long, default_value = "profile.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Clone)]
pub struct RoutingArgs {
    /// Target number of inputs per cluster.
    #[arg(long = "points-per-cluster", default_value_t = 50)]
    pub points_per_cluster: usize,
    /// Clustering features: logits or embeddings.
    #[arg(long, default_value = "logits")]
    pub features: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Z-score clustering features.
    #[arg(long)]
    pub standardize: bool,
    /// Ensemble raw instead of temperature-scaled logits.
    #[arg(long = "raw-logits")]
    pub raw_logits: bool,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// cluster, input-dep, ensemble-logits or ensemble-weights.
    #[arg(long, default_value = "cluster")]
    pub mode: String,
    #[command(flatten)]
    pub routing: RoutingArgs,
    #[arg(long = "out-dir", default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// Comma-separated methods; model names select single models. Default: every mode and model.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<String>,
    /// Comma-separated majority percentages.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MIXTURES)]
    pub mixtures: Vec<u32>,
    /// Average accuracy over mixtures only.
    #[arg(long = "mixtures-only")]
    pub mixtures_only: bool,
    #[command(flatten)]
    pub routing: RoutingArgs,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
    /// Also write the report as long-format CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// Restrict to a mixture with this majority percentage.
    #[arg(long)]
    pub mixture: Option<u32>,
    #[command(flatten)]
    pub routing: RoutingArgs,
    #[arg(long, default_value = "ranking.json")]
    pub out: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// two-model-tradeoff or six-model-sweep.
    #[arg(long)]
    pub preset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    /// Comma-separated cluster sizes.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_ABLATION_SIZES)]
    pub sizes: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MIXTURES)]
    pub mixtures: Vec<u32>,
    #[command(flatten)]
    pub routing: RoutingArgs,
    #[arg(long = "out-dir", default_value = "ablation")]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub force: bool,
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn check_writable(paths: &[&Path], force: bool) -> CliResult<()> {
    if force {
        return Ok(());
    }
    match paths.iter().find(|p| p.exists()) {
        Some(p) => Err(usage(format!("{} exists; pass --force to overwrite", p.display()))),
        None => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(cosmos_core::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn to_json(value: &impl serde::Serialize) -> CliResult<String> {
    Ok(serde_json::to_string_pretty(value).map_err(cosmos_core::Error::from)? + "\n")
}

pub fn load_profile(path: &Path) -> CliResult<CalibrationProfile> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    Ok(serde_json::from_str(&text).map_err(cosmos_core::Error::from)?)
}

fn parse_mode(s: &str, dataset: &ValidatedDataset) -> CliResult<SelectionMode> {
    if let Some(i) = dataset.models.iter().position(|m| m.name == s) {
        return Ok(SelectionMode::Single(i));
    }
    let mode: SelectionMode = s.parse()?;
    if let SelectionMode::Single(i) = mode {
        if i >= dataset.models.len() {
            return Err(usage(format!("no model with index {i}")));
        }
    }
    Ok(mode)
}

impl RoutingArgs {
    fn feature_source(&self) -> CliResult<FeatureSource> {
        Ok(self.features.parse()?)
    }

    fn options(&self) -> CliResult<SelectOptions> {
        Ok(SelectOptions {
            cluster: ClusterConfig {
                points_per_cluster: self.points_per_cluster,
                features: self.feature_source()?,
                seed: self.seed,
                standardize: self.standardize,
                ..ClusterConfig::default()
            },
            raw_logits: self.raw_logits,
        })
    }

    fn suite(&self, methods: Vec<SelectionMode>, mixtures: Vec<u32>, groups_in_average: bool) -> CliResult<SuiteConfig> {
        Ok(SuiteConfig {
            methods,
            mixtures,
            groups_in_average,
            points_per_cluster: self.points_per_cluster,
            features: self.feature_source()?,
            standardize: self.standardize,
            raw_logits: self.raw_logits,
            seed: self.seed,
        })
    }

    fn check(&self, dataset: &ValidatedDataset) -> CliResult<()> {
        if self.feature_source()? == FeatureSource::Embeddings && dataset.embeddings.is_none() {
            return Err(usage(format!(
                "--features embeddings but the {:?} manifest has no \"embeddings\" field",
                dataset.split
            )));
        }
        Ok(())
    }
}

fn check_profile(profile: &CalibrationProfile, dataset: &ValidatedDataset) -> CliResult<()> {
    profile.alphas_for(dataset.models.iter().map(|m| m.name.as_str()))?;
    Ok(())
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> CliResult<CalibrationProfile> {
    check_writable(&[&args.out], args.force)?;
    let grid: TemperatureGrid = args.grid.parse()?;
    let dataset = load_dataset(&args.manifest)?;
    let labels = dataset.require_labels()?;
    let profile = calibrate_models(&dataset.models, labels, &grid, args.bins)?;
    println!("target ECE {:.6}", profile.target_ece);
    println!("{:<24} {:>8} {:>8} {:>10}", "model", "alpha", "alpha*", "ECE*");
    for m in &profile.models {
        println!("{:<24} {:>8} {:>8} {:>10.6}", m.name, m.alpha, m.alpha_star, m.ece_star);
    }
    write(&args.out, &to_json(&profile)?)?;
    Ok(profile)
}

pub fn cmd_select(args: &SelectArgs) -> CliResult<()> {
    let predictions = args.out_dir.join("predictions.csv");
    let summary = args.out_dir.join("selection.json");
    check_writable(&[&predictions, &summary], args.force)?;
    let dataset = load_dataset(&args.manifest)?;
    let profile = load_profile(&args.profile)?;
    check_profile(&profile, &dataset)?;
    let mode = parse_mode(&args.mode, &dataset)?;
    if mode == SelectionMode::Cluster {
        args.routing.check(&dataset)?;
    }
    if mode == SelectionMode::EnsembleWeights && (dataset.heads.is_none() || dataset.embeddings.is_none()) {
        return Err(usage(
            "ensemble-weights needs \"head\" entries for every model and an \"embeddings\" field",
        ));
    }
    let result = select(&dataset, &profile, mode, &args.routing.options()?)?;
    let names: Vec<String> = dataset.models.iter().map(|m| m.name.clone()).collect();
    let mut doc = json!({
        "mode": mode.to_string(),
        "n": result.labels.len(),
    });
    if mode == SelectionMode::Cluster {
        doc["k"] = json!(result.cluster_table.len());
        doc["points_per_cluster"] = json!(args.routing.points_per_cluster);
        doc["clusters"] = result
            .cluster_table
            .iter()
            .map(|c| {
                json!({
                    "cluster": c.cluster,
                    "size": c.size,
                    "winner": names[c.winner],
                    "mean_confidence": c.mean_confidence,
                })
            })
            .collect();
    }
    if let Some(freq) = &result.frequencies {
        doc["frequencies"] = names.iter().cloned().zip(freq.iter().copied()).collect();
    }
    write(&predictions, &result.predictions_csv(&names))?;
    write(&summary, &to_json(&doc)?)?;
    if let Some(k) = doc.get("k") {
        println!("{mode}: {} inputs in {k} clusters", result.labels.len());
    } else {
        println!("{mode}: {} inputs", result.labels.len());
    }
    Ok(())
}

fn default_methods(dataset: &ValidatedDataset) -> Vec<SelectionMode> {
    let mut m = vec![
        SelectionMode::Cluster,
        SelectionMode::InputDep,
        SelectionMode::EnsembleLogits,
    ];
    if dataset.heads.is_some() && dataset.embeddings.is_some() {
        m.push(SelectionMode::EnsembleWeights);
    }
    m.extend((0..dataset.models.len()).map(SelectionMode::Single));
    m
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<cosmos_core::EvalReport> {
    let mut outputs = vec![args.out.as_path()];
    outputs.extend(args.csv.as_deref());
    check_writable(&outputs, args.force)?;
    let dataset = load_dataset(&args.manifest)?;
    let profile = load_profile(&args.profile)?;
    check_profile(&profile, &dataset)?;
    args.routing.check(&dataset)?;
    let methods = if args.methods.is_empty() {
        default_methods(&dataset)
    } else {
        args.methods
            .iter()
            .map(|m| parse_mode(m.trim(), &dataset))
            .collect::<CliResult<_>>()?
    };
    let cfg = args.routing.suite(methods, args.mixtures.clone(), !args.mixtures_only)?;
    let report = run_suite(&dataset, &profile, &cfg)?;
    write(&args.out, &report.to_json()?)?;
    if let Some(csv) = &args.csv {
        write(csv, &report.to_csv())?;
    }
    println!("{:<24} {:>10} {:>11}", "method", "avg_acc", "avg_regret");
    for (name, s) in &report.summary {
        println!("{name:<24} {:>10.4} {:>11.4}", s.avg_acc, s.avg_regret);
    }
    Ok(report)
}

pub fn cmd_tune(args: &TuneArgs) -> CliResult<Vec<String>> {
    check_writable(&[&args.out], args.force)?;
    let mut dataset = load_dataset(&args.manifest)?;
    let profile = load_profile(&args.profile)?;
    check_profile(&profile, &dataset)?;
    args.routing.check(&dataset)?;
    if let Some(m) = args.mixture {
        let rows = build_mixture(dataset.require_groups()?, m, args.routing.seed)?;
        dataset = dataset.subset(&rows);
    }
    let result = select(&dataset, &profile, SelectionMode::Cluster, &args.routing.options()?)?;
    let order = tune_by_frequency(&result)?;
    let freq = result.frequencies.as_ref().expect("cluster mode reports frequencies");
    let names = dataset.model_names();
    let ranking: Vec<serde_json::Value> = order
        .iter()
        .enumerate()
        .map(|(r, &i)| json!({"rank": r + 1, "model": names[i], "frequency": freq[i]}))
        .collect();
    let doc = json!({
        "recommended": names[order[0]],
        "n": dataset.len(),
        "mixture": args.mixture,
        "ranking": ranking,
    });
    write(&args.out, &to_json(&doc)?)?;
    for (r, &i) in order.iter().enumerate() {
        println!("{:>2}. {:<24} {:.4}", r + 1, names[i], freq[i]);
    }
    Ok(order.iter().map(|&i| names[i].to_string()).collect())
}

pub fn cmd_synth(args: &SynthArgs) -> CliResult<benchgen::BundlePaths> {
    let preset = benchgen::preset(&args.preset, args.seed)?;
    let targets = [
        args.out_dir.join("source.json"),
        args.out_dir.join("test.json"),
        args.out_dir.join("oracle.json"),
    ];
    check_writable(&targets.iter().map(PathBuf::as_path).collect::<Vec<_>>(), args.force)?;
    let bundle = benchgen::generate(&preset.spec, &preset.classifiers)?;
    let oracle = OracleTable::compute(&preset.spec, &preset.classifiers, Some(&preset.name))?;
    let paths = benchgen::write_bundle(&bundle, &oracle, &args.out_dir)?;
    println!("wrote {} to {}", preset.name, args.out_dir.display());
    Ok(paths)
}

pub fn cmd_ablate(args: &AblateArgs) -> CliResult<Vec<cosmos_core::AblationRow>> {
    if args.sizes.is_empty() {
        return Err(usage("--sizes must list at least one cluster size"));
    }
    let reports: Vec<PathBuf> = args
        .sizes
        .iter()
        .map(|n| args.out_dir.join(format!("report_N{n}.json")))
        .collect();
    let table = args.out_dir.join("ablation.csv");
    let mut outputs: Vec<&Path> = reports.iter().map(PathBuf::as_path).collect();
    outputs.push(&table);
    check_writable(&outputs, args.force)?;
    let dataset = load_dataset(&args.manifest)?;
    let profile = load_profile(&args.profile)?;
    check_profile(&profile, &dataset)?;
    args.routing.check(&dataset)?;
    let cfg = args.routing.suite(vec![SelectionMode::Cluster], args.mixtures.clone(), true)?;
    let (runs, rows) = ablate(&dataset, &profile, &cfg, &args.sizes)?;
    for (path, report) in reports.iter().zip(&runs) {
        write(path, &report.to_json()?)?;
    }
    let csv = ablation_table_csv(&rows);
    write(&table, &csv)?;
    print!("{csv}");
    Ok(rows)
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Calibrate(a) => cmd_calibrate(a).map(drop),
        Command::Select(a) => cmd_select(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(drop),
        Command::Tune(a) => cmd_tune(a).map(drop),
        Command::Synth(a) => cmd_synth(a).map(drop),
        Command::Ablate(a) => cmd_ablate(a).map(drop),
    }
}

/// Size the global worker pool from `COSMOS_THREADS`, if set. Later calls are no-ops.
pub fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Parse `args` (including the program name) and run; returns the process exit code.
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
    configure_threads();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Method names in report order for a dataset's default method list.
pub fn default_method_names(dataset: &ValidatedDataset) -> Vec<String> {
    let names = dataset.model_names();
    default_methods(dataset)
        .into_iter()
        .map(|m| method_name(m, &names))
        .collect()
}
