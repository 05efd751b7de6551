//! `amplab` — command-line front end for the difficulty-disparity lab.
//!
//! Every subcommand is a thin binding over `amplab_core::harness`: it loads
//! the TOML config (all sections optional), applies flag overrides, prints
//! the resolved config hash, runs one protocol, and emits the artifact set
//! under a run-id directory. Progress and summaries go to standard error;
//! standard output stays empty unless `--json` asks for the machine-readable
//! result.
//!
//! Exit codes: 0 success, 1 usage error, 2 config/data error, 3 numerical
//! failure (divergence, singular design). Errors print to standard error
//! with an `error[config]:` / `error[numerical]:` prefix.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{ArgAction, Args, Parser, Subcommand};

use amplab_core::data::{read_csv, stratified_split, write_csv, GroupedDataset, Sampler};
use amplab_core::harness::{
    amplification_sweep, audit, design_sweep, emit_report, mitigation_experiment,
    pairwise_difficulty_experiment, sha256_hex, AmplificationReport, ArtifactEntry, AuditReport,
    ExperimentConfig, Manifest, MitigationReport, MitigationStrategy, PairwiseReport,
    ResultsBundle, SweepResult, SweepVariable, TaskConfig, TaskSampler,
};
use amplab_core::nn::{init_mlp, train, Activation, GradPenalty, PenaltyMode, TrainConfig};
use amplab_core::seed::derive_seed;
use amplab_core::{Error, Result};

/// Output-root environment variable, read when `--out` is absent.
const OUT_ENV: &str = "AMPLAB_OUT";

#[derive(Parser)]
#[command(
    name = "amplab",
    version,
    about = "Measure, sweep, and mitigate model-dependent accuracy disparity between data groups",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the configured dataset and write it as CSV.
    Generate {
        #[command(flatten)]
        task: TaskFlags,
        /// TOML experiment config; missing sections use built-in defaults.
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Data seed (task.seed): one number pins every generated row.
        #[arg(long)]
        seed: Option<u64>,
        /// Shrink the generated dataset to smoke-test size.
        #[arg(long)]
        quick: bool,
        /// Print a JSON summary of the written file on standard output.
        #[arg(long)]
        json: bool,
        /// More detail on standard error (repeatable).
        #[arg(short, long, action = ArgAction::Count)]
        verbose: u8,
        /// Output CSV file.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train one model on the configured task; save the model and its curve.
    Train {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Two-stage disparity audit: per-group isolation runs, combined runs,
    /// and the estimated-versus-observed disparity per group pair.
    Audit {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Audit many sampled tasks and fit the amplification factor k.
    Amplify {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Tasks to sample (sweep.m_tasks).
        #[arg(long)]
        tasks: Option<usize>,
        /// Difficulty-knob grid the sampler draws from (sweep.frequency_grid).
        #[arg(long, value_name = "F1,F2,..", value_parser = parse_grid)]
        frequency_grid: Option<GridList>,
    },
    /// Re-fit k along a design knob: width, step, weight_decay, or
    /// grad_penalty_c.
    Sweep {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Tasks to sample per grid value (sweep.m_tasks).
        #[arg(long)]
        tasks: Option<usize>,
        /// Design knob to vary (sweep.variable): width, step, weight_decay,
        /// or grad_penalty_c.
        #[arg(long, value_name = "NAME")]
        variable: Option<String>,
        /// Grid values for the knob (sweep.grid); unused for step.
        #[arg(long, value_name = "V1,V2,..", value_parser = parse_grid)]
        grid: Option<GridList>,
    },
    /// Compare a mitigation strategy against the plain audit, run by run.
    Mitigate {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Mitigation strategy: oversample or add_data.
        #[arg(long, default_value = "oversample", value_name = "NAME")]
        strategy: String,
        /// Group the mitigation targets (mitigation.target_group).
        #[arg(long)]
        target_group: Option<usize>,
        /// add_data growth factor (mitigation.add_data_factor).
        #[arg(long)]
        factor: Option<f64>,
        /// oversample weight (mitigation.oversample_weight).
        #[arg(long)]
        weight: Option<f64>,
        /// CSV of extra target-group rows for add_data; generated tasks
        /// derive a fresh reserve from the data seed when omitted.
        #[arg(long, value_name = "FILE")]
        reserve: Option<PathBuf>,
    },
    /// Rank class-pair difficulty across model architectures and test how
    /// well the rankings agree.
    Pairwise {
        #[command(flatten)]
        common: CommonFlags,
        #[command(flatten)]
        task: TaskFlags,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        train: TrainFlags,
        /// Hidden layouts compared against each other, e.g. "16/32/64,64"
        /// (pairwise.model_widths).
        #[arg(long, value_name = "W/W,W/..", value_parser = parse_roster)]
        model_widths: Option<Roster>,
    },
    /// Re-emit the artifact set from a stored report.json.
    Report {
        /// A report.json or the run directory containing one.
        #[arg(value_name = "PATH")]
        input: PathBuf,
        /// Output root for the re-emitted run directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Print the report JSON on standard output.
        #[arg(long)]
        json: bool,
        /// More detail on standard error (repeatable).
        #[arg(short, long, action = ArgAction::Count)]
        verbose: u8,
    },
}

/// Flags shared by every experiment subcommand.
#[derive(Args)]
struct CommonFlags {
    /// TOML experiment config; missing sections use built-in defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Master seed: sets task.seed and protocol.seed together, so one
    /// number pins every generated row, split, and weight draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Training runs per condition (protocol.n_runs).
    #[arg(long)]
    runs: Option<usize>,
    /// Parallel workers for independent conditions (protocol.jobs).
    #[arg(long)]
    jobs: Option<usize>,
    /// Output root for run directories; beats AMPLAB_OUT and output.dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Shrink runs, epochs, dataset, and task count to smoke-test size.
    #[arg(long)]
    quick: bool,
    /// Print the full results JSON on standard output.
    #[arg(long)]
    json: bool,
    /// More detail on standard error (repeatable).
    #[arg(short, long, action = ArgAction::Count)]
    verbose: u8,
}

/// Task-section overrides; every flag maps onto one config key.
#[derive(Args)]
struct TaskFlags {
    /// Generator family: teaser or blobs (task.generator).
    #[arg(long = "task", value_name = "GEN")]
    generator: Option<String>,
    /// Generated row count (task.n).
    #[arg(long)]
    n: Option<usize>,
    /// Difficulty knob: group 1's boundary frequency (task.frequency).
    #[arg(long)]
    frequency: Option<f64>,
    /// Symmetric label-flip probability (task.noise).
    #[arg(long)]
    noise: Option<f64>,
    /// Empty band around the teaser boundaries (task.margin).
    #[arg(long)]
    margin: Option<f64>,
    /// Blobs class count (task.num_classes).
    #[arg(long)]
    num_classes: Option<usize>,
    /// Blobs per-class spread (task.spread).
    #[arg(long)]
    spread: Option<f64>,
    /// CSV dataset source (task.csv).
    #[arg(long, value_name = "FILE")]
    csv: Option<PathBuf>,
    /// IDX image file (task.images); needs --labels and --class-pairs.
    #[arg(long, value_name = "FILE")]
    images: Option<PathBuf>,
    /// IDX label file (task.labels).
    #[arg(long, value_name = "FILE")]
    labels: Option<PathBuf>,
    /// Four source classes "a0,a1,b0,b1" stitched into a two-group binary
    /// task (task.class_pairs).
    #[arg(long, value_name = "A0,A1,B0,B1", value_parser = parse_class_pairs)]
    class_pairs: Option<ClassPairs>,
    /// Row cap per (group, label) cell after stitching (task.per_cell).
    #[arg(long)]
    per_cell: Option<usize>,
}

impl TaskFlags {
    fn apply(&self, cfg: &mut TaskConfig) {
        if let Some(v) = &self.generator {
            cfg.generator = v.clone();
        }
        if let Some(v) = self.n {
            cfg.n = v;
        }
        if let Some(v) = self.frequency {
            cfg.frequency = v;
        }
        if let Some(v) = self.noise {
            cfg.noise = v;
        }
        if let Some(v) = self.margin {
            cfg.margin = v;
        }
        if let Some(v) = self.num_classes {
            cfg.num_classes = v;
        }
        if let Some(v) = self.spread {
            cfg.spread = v;
        }
        if let Some(v) = &self.csv {
            cfg.csv = Some(v.clone());
        }
        if let Some(v) = &self.images {
            cfg.images = Some(v.clone());
        }
        if let Some(v) = &self.labels {
            cfg.labels = Some(v.clone());
        }
        if let Some(v) = &self.class_pairs {
            cfg.class_pairs = Some(v.0);
        }
        if let Some(v) = self.per_cell {
            cfg.per_cell = Some(v);
        }
    }
}

/// Model-section overrides.
#[derive(Args)]
struct ModelFlags {
    /// Hidden-layer widths, comma-separated (model.hidden_widths).
    #[arg(long, value_name = "W1,W2,..", value_parser = parse_widths)]
    widths: Option<Widths>,
    /// Hidden activation: tanh, relu, or softplus (model.activation).
    #[arg(long, value_name = "NAME", value_parser = parse_activation)]
    activation: Option<Activation>,
    /// Skip input standardization (model.input_batchnorm = false).
    #[arg(long)]
    no_batchnorm: bool,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(w) = &self.widths {
            cfg.model.hidden_widths = w.0.clone();
        }
        if let Some(a) = self.activation {
            cfg.model.activation = a;
        }
        if self.no_batchnorm {
            cfg.model.input_batchnorm = false;
        }
    }
}

/// Train-section overrides.
#[derive(Args)]
struct TrainFlags {
    /// Training epochs (train.epochs).
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (train.lr).
    #[arg(long)]
    lr: Option<f64>,
    /// Mini-batch size (train.batch_size).
    #[arg(long)]
    batch: Option<usize>,
    /// Weight decay, biases included (train.weight_decay).
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Checkpoint cadence in steps (train.eval_every).
    #[arg(long)]
    eval_every: Option<usize>,
    /// Input-gradient penalty weight (train.grad_penalty.lambda).
    #[arg(long)]
    penalty_lambda: Option<f64>,
    /// Input-gradient target norm (train.grad_penalty.c).
    #[arg(long)]
    penalty_c: Option<f64>,
    /// Use the finite-difference penalty mode (works for relu).
    #[arg(long)]
    penalty_fd: bool,
}

impl TrainFlags {
    fn apply(&self, cfg: &mut TrainConfig) {
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch {
            cfg.batch_size = v;
        }
        if let Some(v) = self.weight_decay {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.eval_every {
            cfg.eval_every = v;
        }
        if self.penalty_lambda.is_some() || self.penalty_c.is_some() || self.penalty_fd {
            let mut p = cfg.grad_penalty.unwrap_or(GradPenalty {
                lambda: 10.0,
                c: 1.0,
                mode: PenaltyMode::default(),
            });
            if let Some(v) = self.penalty_lambda {
                p.lambda = v;
            }
            if let Some(v) = self.penalty_c {
                p.c = v;
            }
            if self.penalty_fd {
                p.mode = PenaltyMode::FiniteDiff;
            }
            cfg.grad_penalty = Some(p);
        }
    }
}

// Newtypes keep clap from treating list-valued flags as repeated arguments.
#[derive(Clone)]
struct Widths(Vec<usize>);
#[derive(Clone)]
struct GridList(Vec<f64>);
#[derive(Clone)]
struct ClassPairs([[usize; 2]; 2]);
#[derive(Clone)]
struct Roster(Vec<Vec<usize>>);

fn parse_widths(s: &str) -> std::result::Result<Widths, String> {
    let widths = s
        .split(',')
        .map(|w| w.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format!("expected comma-separated widths, got {s:?}: {e}"))?;
    if widths.is_empty() {
        return Err("expected at least one width".into());
    }
    Ok(Widths(widths))
}

fn parse_grid(s: &str) -> std::result::Result<GridList, String> {
    let values = s
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format!("expected comma-separated numbers, got {s:?}: {e}"))?;
    if values.is_empty() {
        return Err("expected at least one value".into());
    }
    Ok(GridList(values))
}

impl FromStr for GridList {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<GridList, String> {
        parse_grid(s)
    }
}

fn parse_class_pairs(s: &str) -> std::result::Result<ClassPairs, String> {
    let ids = s
        .split(',')
        .map(|v| v.trim().parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| format!("expected four class ids, got {s:?}: {e}"))?;
    if ids.len() != 4 {
        return Err(format!("expected four class ids a0,a1,b0,b1, got {s:?}"));
    }
    Ok(ClassPairs([[ids[0], ids[1]], [ids[2], ids[3]]]))
}

fn parse_roster(s: &str) -> std::result::Result<Roster, String> {
    let layouts = s
        .split('/')
        .map(|part| parse_widths(part).map(|w| w.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if layouts.len() < 2 {
        return Err("expected at least two layouts separated by '/'".into());
    }
    Ok(Roster(layouts))
}

fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    match s.to_ascii_lowercase().as_str() {
        "tanh" => Ok(Activation::Tanh),
        "relu" => Ok(Activation::Relu),
        "softplus" => Ok(Activation::Softplus),
        other => Err(format!(
            "unknown activation {other:?} (expected tanh, relu, or softplus)"
        )),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders --help/--version on stdout (exit 0) and genuine
            // usage errors on stderr (exit 1, not clap's default 2).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (class, code) = if err.is_numerical() {
                ("numerical", 3)
            } else {
                ("config", 2)
            };
            eprintln!("error[{class}]: {err}");
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            task,
            config,
            seed,
            quick,
            json,
            verbose,
            out,
        } => cmd_generate(&task, config.as_deref(), seed, quick, json, verbose, &out),
        Command::Train {
            common,
            task,
            model,
            train,
        } => cmd_train(&common, &task, &model, &train),
        Command::Audit {
            common,
            task,
            model,
            train,
        } => cmd_audit(&common, &task, &model, &train),
        Command::Amplify {
            common,
            task,
            model,
            train,
            tasks,
            frequency_grid,
        } => cmd_amplify(&common, &task, &model, &train, tasks, frequency_grid),
        Command::Sweep {
            common,
            task,
            model,
            train,
            tasks,
            variable,
            grid,
        } => cmd_sweep(&common, &task, &model, &train, tasks, variable, grid),
        Command::Mitigate {
            common,
            task,
            model,
            train,
            strategy,
            target_group,
            factor,
            weight,
            reserve,
        } => cmd_mitigate(
            &common,
            &task,
            &model,
            &train,
            &strategy,
            target_group,
            factor,
            weight,
            reserve.as_deref(),
        ),
        Command::Pairwise {
            common,
            task,
            model,
            train,
            model_widths,
        } => cmd_pairwise(&common, &task, &model, &train, model_widths),
        Command::Report {
            input,
            out,
            json,
            verbose,
        } => cmd_report(&input, out.as_deref(), json, verbose),
    }
}

// ---------------------------------------------------------------------------
// Config resolution
// ---------------------------------------------------------------------------

/// Load the config file (or defaults), apply flag overrides (`extra` carries
/// the subcommand-specific ones so the announced hash covers them), then the
/// `--quick` caps, then the flags once more: the preset needs to see the
/// flagged generator to shrink `n` on a valid lattice, while explicit flags
/// still beat its caps. Validates and prints the resolved hash.
fn resolve_config(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train: &TrainFlags,
    extra: impl Fn(&mut ExperimentConfig),
) -> Result<ExperimentConfig> {
    let mut cfg = load_config(common.config.as_deref())?;
    let apply_flags = |cfg: &mut ExperimentConfig| {
        if let Some(seed) = common.seed {
            cfg.protocol.seed = seed;
            cfg.task.seed = seed;
        }
        if let Some(runs) = common.runs {
            cfg.protocol.n_runs = runs;
        }
        if let Some(jobs) = common.jobs {
            cfg.protocol.jobs = jobs;
        }
        task.apply(&mut cfg.task);
        model.apply(cfg);
        train.apply(&mut cfg.train);
        extra(cfg);
    };
    apply_flags(&mut cfg);
    if common.quick {
        cfg.apply_quick_preset();
        apply_flags(&mut cfg);
    }
    cfg.output.dir = output_root(common.out.as_deref(), &cfg);
    cfg.validate()?;
    announce(&cfg, common.verbose);
    Ok(cfg)
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Flag beats `AMPLAB_OUT` beats the config's `output.dir`.
fn output_root(flag: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_ENV) {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    cfg.output.dir.clone()
}

/// Print the resolved config hash (every run) and, verbosely, the config.
fn announce(cfg: &ExperimentConfig, verbose: u8) {
    eprintln!("config sha256: {}", cfg.sha256_hex());
    if verbose > 0 {
        match toml::to_string(cfg) {
            Ok(text) => eprint!("{text}"),
            Err(e) => eprintln!("(cannot render resolved config: {e})"),
        }
    }
}

/// Emit the artifacts, print the run directory, and honor `--json`.
fn finish(bundle: &ResultsBundle, cfg: &ExperimentConfig, json: bool) -> Result<()> {
    let dir = emit_report(bundle, &cfg.output.dir)?;
    eprintln!("wrote {}", dir.display());
    if json {
        print_json(bundle)?;
    }
    Ok(())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config {
        why: format!("cannot serialize result: {e}"),
    })?;
    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{text}").map_err(io_err("stdout"))?;
    Ok(())
}

/// `map_err` closure tagging an I/O failure with its path.
fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_generate(
    task: &TaskFlags,
    config: Option<&Path>,
    seed: Option<u64>,
    quick: bool,
    json: bool,
    verbose: u8,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    let apply_flags = |cfg: &mut ExperimentConfig| {
        if let Some(seed) = seed {
            cfg.task.seed = seed;
            cfg.protocol.seed = seed;
        }
        task.apply(&mut cfg.task);
    };
    apply_flags(&mut cfg);
    if quick {
        cfg.apply_quick_preset();
        apply_flags(&mut cfg);
    }
    cfg.validate()?;
    announce(&cfg, verbose);

    let ds = cfg.task.load_dataset()?;
    write_csv(&ds, out)?;
    eprintln!(
        "wrote {} ({} rows, {} groups, {} classes, {} features)",
        out.display(),
        ds.n(),
        ds.num_groups(),
        ds.num_classes(),
        ds.feature_dim,
    );
    if json {
        let bytes = std::fs::read(out).map_err(io_err(out))?;
        print_json(&serde_json::json!({
            "path": out,
            "rows": ds.n(),
            "groups": ds.group_names,
            "classes": ds.class_names,
            "feature_dim": ds.feature_dim,
            "sha256": sha256_hex(&bytes),
        }))?;
    }
    Ok(())
}

fn cmd_train(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |_| {})?;
    let ds = cfg.task.load_dataset()?;
    let split_seed = derive_seed(cfg.protocol.seed, "split", 0);
    let (train_ds, test_ds) = stratified_split(&ds, cfg.protocol.split_fraction, split_seed)?;
    let spec = cfg.model.resolve(&ds);
    let mlp = init_mlp(&spec, derive_seed(cfg.protocol.seed, "train:init", 0))?;
    let sampler = Sampler::uniform(derive_seed(cfg.protocol.seed, "train:sampler", 0));
    let layout: Vec<String> = std::iter::once(spec.input_dim)
        .chain(spec.hidden_widths.iter().copied())
        .chain(std::iter::once(spec.output_dim))
        .map(|w| w.to_string())
        .collect();
    eprintln!(
        "training mlp {} on {} rows ({} held out), {} epochs",
        layout.join("-"),
        train_ds.n(),
        test_ds.n(),
        cfg.train.epochs,
    );
    let (model, curve) = train(&mlp, &train_ds, &test_ds, &sampler, &cfg.train)?;

    let curve_json = serde_json::to_vec_pretty(&curve).map_err(|e| Error::Config {
        why: format!("cannot serialize curve: {e}"),
    })?;
    let run_id = format!("train-{}", &sha256_hex(&curve_json)[..12]);
    let dir = cfg.output.dir.join(&run_id);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    model.save(&dir.join("model.json"))?;
    curve.write_csv(&dir.join("curve.csv"))?;
    write_manifest(&dir, run_id, &cfg, &["model.json", "curve.csv"])?;

    let best = curve.best_index();
    let final_cp = curve.final_checkpoint();
    eprintln!(
        "final step {}: loss {:.6}, test acc {:.4} (best {:.4} at step {})",
        final_cp.step,
        final_cp.loss,
        curve.overall_test_acc(curve.checkpoints.len() - 1),
        curve.overall_test_acc(best),
        curve.checkpoints[best].step,
    );
    eprintln!("wrote {}", dir.display());
    if common.json {
        print_json(&serde_json::json!({
            "run_dir": dir,
            "best_step": curve.checkpoints[best].step,
            "best_test_acc": curve.overall_test_acc(best),
            "final_loss": final_cp.loss,
            "final_test_acc": curve.overall_test_acc(curve.checkpoints.len() - 1),
            "curve": curve,
        }))?;
    }
    Ok(())
}

/// Manifest for a run directory whose artifacts are already on disk.
fn write_manifest(dir: &Path, run_id: String, cfg: &ExperimentConfig, files: &[&str]) -> Result<()> {
    let mut artifacts = Vec::with_capacity(files.len());
    for name in files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        artifacts.push(ArtifactEntry {
            file: name.to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        run_id,
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        artifacts,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config {
        why: format!("cannot serialize manifest: {e}"),
    })? + "\n";
    let path = dir.join("manifest.json");
    std::fs::write(&path, text).map_err(io_err(&path))
}

fn cmd_audit(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |_| {})?;
    let ds = cfg.task.load_dataset()?;
    eprintln!(
        "auditing {} rows, {} groups: {} runs x ({} isolated + combined)",
        ds.n(),
        ds.num_groups(),
        cfg.protocol.n_runs,
        ds.num_groups(),
    );
    let report = audit(&ds, &cfg)?;
    print_audit_summary(&report);
    let bundle = ResultsBundle {
        audit: Some(report),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        ..ResultsBundle::default()
    };
    finish(&bundle, &cfg, common.json)
}

fn print_audit_summary(report: &AuditReport) {
    for pair in &report.pairs {
        for (tag, d) in [("early stop", &pair.early), ("final", &pair.last)] {
            eprintln!(
                "{} vs {} ({tag}): d_tilde {:+.4}{}, d {:+.4}{}, k {}, amplified {}",
                d.group_a,
                d.group_b,
                d.d_tilde,
                fmt_se(d.d_tilde_se),
                d.d,
                fmt_se(d.d_se),
                d.k_ratio
                    .map_or_else(|| "n/a".to_string(), |k| format!("{k:.2}")),
                if d.amplified { "yes" } else { "no" },
            );
        }
    }
}

fn fmt_se(se: Option<f64>) -> String {
    se.map_or_else(String::new, |s| format!(" (se {s:.4})"))
}

fn cmd_amplify(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
    tasks: Option<usize>,
    frequency_grid: Option<GridList>,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |cfg| {
        if let Some(m) = tasks {
            cfg.sweep.m_tasks = m;
        }
        if let Some(grid) = &frequency_grid {
            cfg.sweep.frequency_grid = grid.0.clone();
        }
    })?;
    let sampler = TaskSampler::from_config(&cfg)?;
    eprintln!(
        "amplification sweep: {} tasks x {} runs",
        cfg.sweep.m_tasks, cfg.protocol.n_runs,
    );
    let report = amplification_sweep(&sampler, cfg.sweep.m_tasks, &cfg)?;
    print_amplification_summary(&report);
    let bundle = ResultsBundle {
        amplification: Some(report),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        ..ResultsBundle::default()
    };
    finish(&bundle, &cfg, common.json)
}

fn print_amplification_summary(report: &AmplificationReport) {
    let with_int = report
        .fit_with_intercept
        .coefficient("d_tilde")
        .map_or_else(|| "n/a".to_string(), |(k, se)| format!("{k:.3} (se {se:.3})"));
    eprintln!(
        "k {:.3} (se {:.3}), R^2 {:.3} over {} tasks; intercept variant k {}",
        report.k,
        report.k_se,
        report.r_squared,
        report.records.len(),
        with_int,
    );
}

fn cmd_sweep(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
    tasks: Option<usize>,
    variable: Option<String>,
    grid: Option<GridList>,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |cfg| {
        if let Some(m) = tasks {
            cfg.sweep.m_tasks = m;
        }
        if let Some(v) = &variable {
            cfg.sweep.variable = Some(v.clone());
        }
        if let Some(g) = &grid {
            cfg.sweep.grid = g.0.clone();
        }
    })?;
    let name = cfg.sweep.variable.clone().ok_or_else(|| Error::Config {
        why: "the sweep needs a design knob: pass --variable or set sweep.variable".into(),
    })?;
    let variable = SweepVariable::from_str(&name)?;
    let grid = if cfg.sweep.grid.is_empty() {
        if variable == SweepVariable::Step {
            vec![0.0] // unused: step refits at every recorded checkpoint
        } else {
            return Err(Error::Config {
                why: format!("sweeping {variable} needs grid values: pass --grid or set sweep.grid"),
            });
        }
    } else {
        cfg.sweep.grid.clone()
    };
    let sampler = TaskSampler::from_config(&cfg)?;
    eprintln!(
        "design sweep over {variable}: {} tasks x {} runs per value",
        cfg.sweep.m_tasks, cfg.protocol.n_runs,
    );
    let result = design_sweep(variable, &grid, &sampler, &cfg)?;
    print_sweep_summary(&result);
    let bundle = ResultsBundle {
        sweep: Some(result),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        ..ResultsBundle::default()
    };
    finish(&bundle, &cfg, common.json)
}

fn print_sweep_summary(result: &SweepResult) {
    for point in &result.points {
        eprintln!(
            "{} = {}: k {:.3} (se {:.3}), R^2 {:.3}",
            result.variable, point.value, point.k, point.k_se, point.r_squared,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_mitigate(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
    strategy: &str,
    target_group: Option<usize>,
    factor: Option<f64>,
    weight: Option<f64>,
    reserve: Option<&Path>,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |cfg| {
        if let Some(g) = target_group {
            cfg.mitigation.target_group = g;
        }
        if let Some(f) = factor {
            cfg.mitigation.add_data_factor = f;
        }
        if let Some(w) = weight {
            cfg.mitigation.oversample_weight = w;
        }
    })?;

    let strategy = match strategy {
        "oversample" => MitigationStrategy::Oversample {
            weight: cfg.mitigation.oversample_weight,
        },
        "add_data" | "add-data" => MitigationStrategy::AddData {
            factor: cfg.mitigation.add_data_factor,
        },
        other => {
            return Err(Error::Config {
                why: format!("unknown strategy {other:?} (expected oversample or add_data)"),
            })
        }
    };
    let ds = cfg.task.load_dataset()?;
    let reserve = reserve_rows(&cfg, &ds, strategy, reserve)?;
    eprintln!(
        "mitigation {strategy} targeting group {}: {} paired runs",
        cfg.mitigation.target_group, cfg.protocol.n_runs,
    );
    let report = mitigation_experiment(&ds, reserve.as_ref(), strategy, &cfg)?;
    print_mitigation_summary(&report);
    let bundle = ResultsBundle {
        mitigation: Some(report),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        ..ResultsBundle::default()
    };
    finish(&bundle, &cfg, common.json)
}

/// The extra target-group rows add_data draws from: the `--reserve` CSV when
/// given, else a fresh draw of the generator under a derived seed (so the
/// new rows never repeat the training data). File-backed tasks have no
/// generator to re-draw and must pass `--reserve`.
fn reserve_rows(
    cfg: &ExperimentConfig,
    ds: &GroupedDataset,
    strategy: MitigationStrategy,
    reserve: Option<&Path>,
) -> Result<Option<GroupedDataset>> {
    if !matches!(strategy, MitigationStrategy::AddData { .. }) {
        return Ok(None);
    }
    let target = cfg.mitigation.target_group;
    if let Some(path) = reserve {
        let pool = read_csv(path)?;
        return Ok(Some(pool.filter_group(target)?));
    }
    if cfg.task.csv.is_some() || cfg.task.images.is_some() {
        return Err(Error::Config {
            why: "add_data on a file-backed task needs --reserve <csv> with extra \
                  target-group rows"
                .into(),
        });
    }
    let mut spec = cfg.task.generator_spec();
    spec.seed = derive_seed(spec.seed, "mitigation:reserve", 0);
    // Enough fresh rows for any factor: ceil(factor) whole copies of the
    // dataset keeps every generator's divisibility requirement intact.
    spec.n = ds.n() * (cfg.mitigation.add_data_factor.ceil() as usize).max(1);
    Ok(Some(spec.generate()?.filter_group(target)?))
}

fn print_mitigation_summary(report: &MitigationReport) {
    for delta in &report.deltas {
        let improved = delta.per_run_delta.iter().filter(|d| **d < 0.0).count();
        eprintln!(
            "{} vs {}: |d| {:.4} -> {:.4} ({:+.4}, reduced {}; {}/{} runs improved)",
            delta.group_a,
            delta.group_b,
            delta.observed_before,
            delta.observed_after,
            delta.delta_abs,
            if delta.reduced { "yes" } else { "no" },
            improved,
            delta.per_run_delta.len(),
        );
    }
}

fn cmd_pairwise(
    common: &CommonFlags,
    task: &TaskFlags,
    model: &ModelFlags,
    train_flags: &TrainFlags,
    model_widths: Option<Roster>,
) -> Result<()> {
    let cfg = resolve_config(common, task, model, train_flags, |cfg| {
        if let Some(roster) = &model_widths {
            cfg.pairwise.model_widths = roster.0.clone();
        }
    })?;
    let ds = cfg.task.load_dataset()?;
    let models = cfg.pairwise.model_configs(&cfg.model);
    eprintln!(
        "pairwise difficulty: {} classes x {} models x {} runs",
        ds.num_classes(),
        models.len(),
        cfg.protocol.n_runs,
    );
    let report = pairwise_difficulty_experiment(&ds, &models, &cfg)?;
    print_pairwise_summary(&report);
    let bundle = ResultsBundle {
        pairwise: Some(report),
        config_sha256: cfg.sha256_hex(),
        inputs: cfg.task.describe(),
        ..ResultsBundle::default()
    };
    finish(&bundle, &cfg, common.json)
}

fn print_pairwise_summary(report: &PairwiseReport) {
    let mut taus = Vec::new();
    for (i, row) in report.tau.iter().enumerate() {
        for (j, &t) in row.iter().enumerate() {
            if j > i {
                taus.push(t);
            }
        }
    }
    let mean_tau = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
    eprintln!(
        "{} pairs, {} models: mean cross-model tau {:.3}, geometry PLS R^2 {:.3}",
        report.pairs.len(),
        report.models.len(),
        mean_tau,
        report.pls_r_squared,
    );
}

fn cmd_report(input: &Path, out: Option<&Path>, json: bool, verbose: u8) -> Result<()> {
    let path = if input.is_dir() {
        input.join("report.json")
    } else {
        input.to_path_buf()
    };
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    let bundle: ResultsBundle = serde_json::from_str(&text).map_err(|e| Error::FileFormat {
        path: path.clone(),
        why: format!("not a stored report: {e}"),
    })?;
    eprintln!("config sha256: {}", bundle.config_sha256);
    if verbose > 0 {
        let mut line = String::from("sections:");
        for (name, present) in [
            ("audit", bundle.audit.is_some()),
            ("amplification", bundle.amplification.is_some()),
            ("sweep", bundle.sweep.is_some()),
            ("mitigation", bundle.mitigation.is_some()),
            ("pairwise", bundle.pairwise.is_some()),
        ] {
            if present {
                let _ = write!(line, " {name}");
            }
        }
        eprintln!("{line}");
    }
    let root = out
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let dir = emit_report(&bundle, &root)?;
    eprintln!("wrote {}", dir.display());
    if json {
        print_json(&bundle)?;
    }
    Ok(())
}
