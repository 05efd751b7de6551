//! End-to-end experimental protocols.
//!
//! Everything here composes the lower layers into the measurements the crate
//! exists for:
//!
//! * [`run_single_group_protocol`] — stage one: N models per group, each
//!   trained on that group's rows alone.
//! * [`run_combined_protocol`] — stage two: N models on the full data,
//!   accuracy broken out per group.
//! * [`audit`] — both stages plus a [`DisparityReport`] per group pair,
//!   at the early-stopped and at the final checkpoint.
//! * [`amplification_sweep`] — audits over many sampled tasks, then the
//!   nuisance-adjusted regression of observed on estimated disparity whose
//!   `d_tilde` coefficient is the amplification factor `k`.
//! * [`design_sweep`] — `k` as a function of one design knob (width,
//!   training step, weight decay, or the gradient-penalty target).
//! * [`mitigation_experiment`] — baseline vs. mitigated audits (extra data
//!   for one group, or oversampling it), with per-run paired deltas.
//! * [`pairwise_difficulty_experiment`] — multi-class difficulty rankings
//!   across architectures: masked pair accuracies, Kendall correlations,
//!   and the rank-on-rank PLS against class-mean distances.
//!
//! # Seeds
//!
//! Every condition's randomness is derived as
//! `derive_seed(protocol.seed, condition_tag, run)`; distinct conditions get
//! distinct tags, so no two share a stream, and re-running a config
//! reproduces every value bitwise. The per-run split seed is shared across
//! conditions within one protocol pass on purpose: run `r` of every stage
//! sees the same train/test partition, which pairs stage-one and stage-two
//! accuracies run by run.
//!
//! # Concurrency
//!
//! Conditions are independent jobs executed by a small work queue
//! ([`ProtocolConfig::jobs`] bounds the worker count); assembly is
//! single-threaded and index-ordered, so results are identical at any
//! parallelism.

pub mod config;
pub mod report;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment_group, oversample_weights, stratified_split, GroupedDataset, Sampler, TaskSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{
    kendall_tau, pairwise_difficulty_matrix, rank_transform, separability_cells,
    CellPairAccuracy, DisparityReport, RunStats, SeparabilityVector,
};
use crate::nn::{init_mlp, train, GradPenalty, TrainingCurve};
use crate::seed::derive_seed;
use crate::stats::{ols_fit, pls1_fit, DesignMatrix, PlsModel, RegressionResult};

pub use config::{
    ExperimentConfig, MitigationConfig, ModelConfig, OutputConfig, PairwiseConfig,
    ProtocolConfig, SweepConfig, TaskConfig,
};
pub use report::{emit_report, sha256_hex, ArtifactEntry, Manifest, ResultsBundle};

// ---------------------------------------------------------------------------
// Work queue
// ---------------------------------------------------------------------------

/// Run `n` independent jobs with at most `jobs` worker threads; results come
/// back in index order. On failure the lowest-index error is returned, so
/// the outcome does not depend on scheduling.
pub(crate) fn run_jobs<T, F>(n: usize, jobs: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if jobs <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(n) {
            let tx = tx.clone();
            let next = &next;
            let f = &f;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                // A closed channel means the receiver is gone because
                // another worker panicked; just stop.
                if tx.send((i, f(i))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
    });
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    for (i, r) in rx {
        slots[i] = Some(r);
    }
    let mut out = Vec::with_capacity(n);
    for slot in slots {
        match slot.expect("every job index was claimed exactly once") {
            Ok(v) => out.push(v),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Protocol results
// ---------------------------------------------------------------------------

/// One group's stage-one (isolation) accuracy distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupIsolationResult {
    pub group: usize,
    pub name: String,
    /// Per-run test accuracy at the early-stopped checkpoint (the one with
    /// the best overall test accuracy of that run).
    pub early: RunStats,
    /// Per-run test accuracy at the final checkpoint.
    pub last: RunStats,
    /// Model-init seed of each run.
    pub init_seeds: Vec<u64>,
    /// Group-count vector of each run's actual training split — provenance
    /// that the isolation stage never saw another group's rows (all entries
    /// other than `group` are zero).
    pub train_group_counts: Vec<Vec<usize>>,
}

/// Stage one of the audit: every group trained and evaluated in isolation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingleGroupProtocol {
    pub groups: Vec<GroupIsolationResult>,
    /// Per-run seed of the shared stratified split.
    pub split_seeds: Vec<u64>,
    pub n_runs: usize,
}

/// Stage two: N models trained on the full dataset, accuracy per group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinedProtocol {
    pub group_names: Vec<String>,
    /// Early-stopped per-group test accuracy, one [`RunStats`] per group.
    pub early: Vec<RunStats>,
    /// Final-checkpoint per-group test accuracy.
    pub last: Vec<RunStats>,
    pub init_seeds: Vec<u64>,
    pub split_seeds: Vec<u64>,
    /// Full checkpoint curve of every run (the disparity-versus-step data).
    pub curves: Vec<TrainingCurve>,
}

/// Observed disparity at one checkpoint step, aggregated across runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDisparity {
    pub step: usize,
    /// Mean of `acc_a - acc_b` over runs at this step.
    pub d: f64,
    /// Standard error over runs (`None` for a single run).
    pub se: Option<f64>,
}

/// Disparity audit of one ordered group pair at both checkpoint choices,
/// plus the step-resolved observed disparity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAudit {
    pub group_a: usize,
    pub group_b: usize,
    /// Headline report: accuracies read at each run's early-stopped
    /// checkpoint.
    pub early: DisparityReport,
    /// The same four series read at the final checkpoint.
    pub last: DisparityReport,
    /// Mean observed disparity `acc_a - acc_b` per combined checkpoint.
    pub observed_by_step: Vec<StepDisparity>,
}

/// Both protocol stages plus per-pair disparity reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub group_names: Vec<String>,
    pub n_runs: usize,
    /// Base seed all condition seeds were derived from.
    pub seed: u64,
    pub isolation: SingleGroupProtocol,
    pub combined: CombinedProtocol,
    /// One entry per unordered pair `(a, b)` with `a < b`; the mirrored view
    /// is [`DisparityReport::swapped`].
    pub pairs: Vec<PairAudit>,
}

impl AuditReport {
    /// The audit of a specific pair, if present.
    pub fn pair(&self, a: usize, b: usize) -> Option<&PairAudit> {
        self.pairs
            .iter()
            .find(|p| (p.group_a, p.group_b) == (a, b) || (p.group_a, p.group_b) == (b, a))
    }
}

// ---------------------------------------------------------------------------
// Internal training jobs
// ---------------------------------------------------------------------------

/// How the combined stage draws mini-batches.
#[derive(Clone, Copy, Debug, PartialEq)]
enum CombinedSampling {
    Uniform,
    Oversample { group: usize, weight: f64 },
}

fn check_protocol_preconditions(ds: &GroupedDataset, cfg: &ExperimentConfig) -> Result<()> {
    cfg.validate()?;
    cfg.model.resolve(ds).validate()?;
    if cfg.protocol.allow_unbalanced {
        return Ok(());
    }
    let cells = ds.cell_counts();
    if cells.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::MatchedDistribution {
            why: format!(
                "groups are unbalanced (per-group label counts {cells:?}); balance the dataset \
                 first or set protocol.allow_unbalanced to waive this check"
            ),
        });
    }
    Ok(())
}

struct IsoRun {
    early: f64,
    last: f64,
    init_seed: u64,
    train_group_counts: Vec<usize>,
}

fn iso_job(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
    group: usize,
    run: usize,
) -> Result<IsoRun> {
    let split_seed = derive_seed(seed, "split", run as u64);
    let (train_all, test_all) = stratified_split(ds, cfg.protocol.split_fraction, split_seed)?;
    let train_g = train_all.filter_group(group)?;
    let test_g = test_all.filter_group(group)?;
    let spec = cfg.model.resolve(ds);
    let init_seed = derive_seed(seed, &format!("iso:{group}:init"), run as u64);
    let sampler_seed = derive_seed(seed, &format!("iso:{group}:sampler"), run as u64);
    let mlp = init_mlp(&spec, init_seed)?;
    let sampler = Sampler::uniform(sampler_seed);
    let (_, curve) = train(&mlp, &train_g, &test_g, &sampler, &cfg.train)?;
    let best = curve.best_index();
    Ok(IsoRun {
        early: curve.checkpoints[best].test_acc[group],
        last: curve.final_checkpoint().test_acc[group],
        init_seed,
        train_group_counts: curve.train_group_sizes.clone(),
    })
}

struct CombRun {
    early: Vec<f64>,
    last: Vec<f64>,
    init_seed: u64,
    curve: TrainingCurve,
}

fn comb_job(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
    run: usize,
    sampling: CombinedSampling,
) -> Result<CombRun> {
    let split_seed = derive_seed(seed, "split", run as u64);
    let (train_all, test_all) = stratified_split(ds, cfg.protocol.split_fraction, split_seed)?;
    let spec = cfg.model.resolve(ds);
    let init_seed = derive_seed(seed, "comb:init", run as u64);
    let sampler_seed = derive_seed(seed, "comb:sampler", run as u64);
    let sampler = match sampling {
        CombinedSampling::Uniform => Sampler::uniform(sampler_seed),
        CombinedSampling::Oversample { group, weight } => {
            oversample_weights(&train_all, group, weight)?.with_seed(sampler_seed)
        }
    };
    let mlp = init_mlp(&spec, init_seed)?;
    let (_, curve) = train(&mlp, &train_all, &test_all, &sampler, &cfg.train)?;
    let best = curve.best_index();
    Ok(CombRun {
        early: curve.checkpoints[best].test_acc.clone(),
        last: curve.final_checkpoint().test_acc.clone(),
        init_seed,
        curve,
    })
}

fn assemble_single_group(
    ds: &GroupedDataset,
    seed: u64,
    n_runs: usize,
    runs: Vec<IsoRun>,
) -> Result<SingleGroupProtocol> {
    let n_groups = ds.num_groups();
    debug_assert_eq!(runs.len(), n_groups * n_runs);
    let mut groups = Vec::with_capacity(n_groups);
    let mut it = runs.into_iter();
    for g in 0..n_groups {
        let mut early = Vec::with_capacity(n_runs);
        let mut last = Vec::with_capacity(n_runs);
        let mut init_seeds = Vec::with_capacity(n_runs);
        let mut counts = Vec::with_capacity(n_runs);
        for _ in 0..n_runs {
            let run = it.next().expect("one result per (group, run) job");
            early.push(run.early);
            last.push(run.last);
            init_seeds.push(run.init_seed);
            counts.push(run.train_group_counts);
        }
        groups.push(GroupIsolationResult {
            group: g,
            name: ds.group_names[g].clone(),
            early: RunStats::from_runs(early)?,
            last: RunStats::from_runs(last)?,
            init_seeds,
            train_group_counts: counts,
        });
    }
    Ok(SingleGroupProtocol {
        groups,
        split_seeds: (0..n_runs)
            .map(|r| derive_seed(seed, "split", r as u64))
            .collect(),
        n_runs,
    })
}

fn single_group_inner(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SingleGroupProtocol> {
    check_protocol_preconditions(ds, cfg)?;
    let n_runs = cfg.protocol.n_runs;
    let n_groups = ds.num_groups();
    let runs = run_jobs(n_groups * n_runs, cfg.protocol.jobs, |i| {
        let (g, r) = (i / n_runs, i % n_runs);
        iso_job(ds, cfg, seed, g, r)
            .map_err(Error::in_condition(format!("isolation training of group {g}"), r))
    })?;
    assemble_single_group(ds, seed, n_runs, runs)
}

fn combined_inner(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
    sampling: CombinedSampling,
) -> Result<CombinedProtocol> {
    check_protocol_preconditions(ds, cfg)?;
    let n_runs = cfg.protocol.n_runs;
    let runs = run_jobs(n_runs, cfg.protocol.jobs, |r| {
        comb_job(ds, cfg, seed, r, sampling)
            .map_err(Error::in_condition("combined training", r))
    })?;
    let n_groups = ds.num_groups();
    let mut early = vec![Vec::with_capacity(n_runs); n_groups];
    let mut last = vec![Vec::with_capacity(n_runs); n_groups];
    let mut init_seeds = Vec::with_capacity(n_runs);
    let mut curves = Vec::with_capacity(n_runs);
    for run in runs {
        for g in 0..n_groups {
            early[g].push(run.early[g]);
            last[g].push(run.last[g]);
        }
        init_seeds.push(run.init_seed);
        curves.push(run.curve);
    }
    Ok(CombinedProtocol {
        group_names: ds.group_names.clone(),
        early: early.into_iter().map(RunStats::from_runs).collect::<Result<_>>()?,
        last: last.into_iter().map(RunStats::from_runs).collect::<Result<_>>()?,
        init_seeds,
        split_seeds: (0..n_runs)
            .map(|r| derive_seed(seed, "split", r as u64))
            .collect(),
        curves,
    })
}

/// Mean and standard error of `acc_a - acc_b` at every checkpoint shared by
/// all combined runs.
fn observed_by_step(curves: &[TrainingCurve], a: usize, b: usize) -> Result<Vec<StepDisparity>> {
    let steps: Vec<usize> = curves[0].checkpoints.iter().map(|c| c.step).collect();
    for curve in &curves[1..] {
        let other: Vec<usize> = curve.checkpoints.iter().map(|c| c.step).collect();
        if other != steps {
            return Err(Error::IncompleteProtocol {
                why: format!(
                    "combined runs disagree on checkpoint steps ({steps:?} vs {other:?}); \
                     split sizes should be identical across runs"
                ),
            });
        }
    }
    let mut out = Vec::with_capacity(steps.len());
    for (i, &step) in steps.iter().enumerate() {
        let d_runs: Vec<f64> = curves
            .iter()
            .map(|c| c.checkpoints[i].test_acc[a] - c.checkpoints[i].test_acc[b])
            .collect();
        let stats = RunStats::from_runs(d_runs)?;
        out.push(StepDisparity {
            step,
            d: stats.mean,
            se: stats.se,
        });
    }
    Ok(out)
}

fn audit_inner(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
    sampling: CombinedSampling,
) -> Result<AuditReport> {
    if ds.num_groups() < 2 {
        return Err(Error::invalid(
            "audit",
            format!("needs at least 2 groups, got {}", ds.num_groups()),
        ));
    }
    let isolation = single_group_inner(ds, cfg, seed)?;
    let combined = combined_inner(ds, cfg, seed, sampling)?;
    let mut pairs = Vec::new();
    for a in 0..ds.num_groups() {
        for b in a + 1..ds.num_groups() {
            let early = DisparityReport::from_runs(
                ds.group_names[a].clone(),
                ds.group_names[b].clone(),
                isolation.groups[a].early.clone(),
                isolation.groups[b].early.clone(),
                combined.early[a].clone(),
                combined.early[b].clone(),
            )?;
            let last = DisparityReport::from_runs(
                ds.group_names[a].clone(),
                ds.group_names[b].clone(),
                isolation.groups[a].last.clone(),
                isolation.groups[b].last.clone(),
                combined.last[a].clone(),
                combined.last[b].clone(),
            )?;
            pairs.push(PairAudit {
                group_a: a,
                group_b: b,
                early,
                last,
                observed_by_step: observed_by_step(&combined.curves, a, b)?,
            });
        }
    }
    Ok(AuditReport {
        group_names: ds.group_names.clone(),
        n_runs: cfg.protocol.n_runs,
        seed,
        isolation,
        combined,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// Public protocol operations
// ---------------------------------------------------------------------------

/// Stage one: train `protocol.n_runs` models per group, each on that group's
/// rows alone, and evaluate on the group's held-out rows.
///
/// Requires balanced groups (identical per-group label counts) unless
/// `protocol.allow_unbalanced` waives it.
pub fn run_single_group_protocol(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
) -> Result<SingleGroupProtocol> {
    single_group_inner(ds, cfg, cfg.protocol.seed)
}

/// Stage two: train `protocol.n_runs` models on the full dataset and report
/// per-group accuracy distributions. Splits pair with
/// [`run_single_group_protocol`] run by run (same split seeds).
pub fn run_combined_protocol(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
) -> Result<CombinedProtocol> {
    combined_inner(ds, cfg, cfg.protocol.seed, CombinedSampling::Uniform)
}

/// The full two-stage disparity audit: both protocols plus a
/// [`DisparityReport`] per group pair at the early-stopped and final
/// checkpoints, and the observed-disparity-versus-step series.
pub fn audit(ds: &GroupedDataset, cfg: &ExperimentConfig) -> Result<AuditReport> {
    audit_inner(ds, cfg, cfg.protocol.seed, CombinedSampling::Uniform)
}

// ---------------------------------------------------------------------------
// Separability cells
// ---------------------------------------------------------------------------

/// Binary dataset distinguishing two (group, label) subpopulations; the
/// first cell becomes class 0.
fn cell_dataset(
    ds: &GroupedDataset,
    first: (usize, usize),
    second: (usize, usize),
) -> Result<GroupedDataset> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for i in 0..ds.n() {
        let cell = (ds.groups[i], ds.labels[i]);
        let label = if cell == first {
            0
        } else if cell == second {
            1
        } else {
            continue;
        };
        features.extend_from_slice(ds.feature_row(i));
        labels.push(label);
    }
    for (class, cell) in [(0, first), (1, second)] {
        if !labels.contains(&class) {
            return Err(Error::EmptySelection {
                context: "separability cell",
                why: format!("no rows in cell (group {}, label {})", cell.0, cell.1),
            });
        }
    }
    let n = labels.len();
    GroupedDataset::new(
        features,
        ds.feature_dim,
        labels,
        vec![0; n],
        vec![
            format!("g{}y{}", first.0, first.1),
            format!("g{}y{}", second.0, second.1),
        ],
        vec!["all".to_string()],
    )
}

/// Measure the four separability cells of a binary two-group task, each as
/// a dedicated binary training repeated over the protocol's runs, on the
/// same per-run splits as the audit.
fn measure_separability(
    ds: &GroupedDataset,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<SeparabilityVector> {
    if ds.num_groups() != 2 || ds.num_classes() != 2 {
        return Err(Error::invalid(
            "separability cells",
            format!(
                "defined for binary two-group tasks, got {} groups and {} classes",
                ds.num_groups(),
                ds.num_classes()
            ),
        ));
    }
    // Cell pairs in design-matrix column order.
    let cells: [((usize, usize), (usize, usize), &str); 4] = [
        ((0, 0), (0, 1), "s_a0_a1"),
        ((1, 0), (1, 1), "s_b0_b1"),
        ((0, 0), (1, 1), "s_a0_b1"),
        ((0, 1), (1, 0), "s_a1_b0"),
    ];
    let n_runs = cfg.protocol.n_runs;
    let outs = run_jobs(cells.len() * n_runs, cfg.protocol.jobs, |i| {
        let (c, r) = (i / n_runs, i % n_runs);
        let (first, second, name) = cells[c];
        let job = || -> Result<(f64, u64)> {
            let split_seed = derive_seed(seed, "split", r as u64);
            let (train_all, test_all) =
                stratified_split(ds, cfg.protocol.split_fraction, split_seed)?;
            let cell_train = cell_dataset(&train_all, first, second)?;
            let cell_test = cell_dataset(&test_all, first, second)?;
            let spec = cfg.model.resolve(&cell_train);
            let init_seed = derive_seed(seed, &format!("cell:{name}:init"), r as u64);
            let sampler_seed = derive_seed(seed, &format!("cell:{name}:sampler"), r as u64);
            let mlp = init_mlp(&spec, init_seed)?;
            let sampler = Sampler::uniform(sampler_seed);
            let (_, curve) = train(&mlp, &cell_train, &cell_test, &sampler, &cfg.train)?;
            Ok((curve.overall_test_acc(curve.best_index()), init_seed))
        };
        job().map_err(Error::in_condition(format!("separability cell {name}"), r))
    })?;
    let mut measured = Vec::with_capacity(4);
    for (c, ((ga, la), (gb, lb), _)) in cells.iter().enumerate() {
        let mut accs = Vec::with_capacity(n_runs);
        let mut seeds = Vec::with_capacity(n_runs);
        for r in 0..n_runs {
            let (acc, s) = outs[c * n_runs + r];
            accs.push(acc);
            seeds.push(s);
        }
        measured.push(CellPairAccuracy {
            group_a: *ga,
            label_a: *la,
            group_b: *gb,
            label_b: *lb,
            accuracy: RunStats::from_runs(accs)?,
            seeds,
        });
    }
    separability_cells(&measured)
}

// ---------------------------------------------------------------------------
// Amplification sweep
// ---------------------------------------------------------------------------

/// Samples two-group tasks for the amplification sweep: group 0 keeps the
/// fixed linear boundary while group 1's boundary frequency — the difficulty
/// knob — is drawn uniformly from a grid, with fresh data per task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSampler {
    /// Base generator settings; `frequency` and `seed` are overridden per
    /// task.
    pub base: TaskSpec,
    /// Difficulty-knob values drawn uniformly per task.
    pub frequency_grid: Vec<f64>,
}

/// One sampled task: its data plus the knobs that produced it.
#[derive(Debug)]
pub struct SampledTask {
    pub id: String,
    pub frequency: f64,
    pub data_seed: u64,
    pub ds: GroupedDataset,
}

impl TaskSampler {
    /// Build the sampler described by `[task]` and `[sweep]`.
    pub fn from_config(cfg: &ExperimentConfig) -> Result<TaskSampler> {
        if cfg.task.csv.is_some() || cfg.task.images.is_some() {
            return Err(Error::config(
                "the amplification sweep samples synthetic tasks; file-based task sources \
                 cannot be re-sampled",
            ));
        }
        if cfg.task.generator != "teaser" {
            return Err(Error::config(format!(
                "the amplification sweep varies the teaser frequency knob; task.generator \
                 must be \"teaser\", got {:?}",
                cfg.task.generator
            )));
        }
        cfg.sweep.validate()?;
        Ok(TaskSampler {
            base: cfg.task.generator_spec(),
            frequency_grid: cfg.sweep.frequency_grid.clone(),
        })
    }

    /// Draw task `index`. Deterministic in `(seed_base, index)`.
    pub fn sample(&self, index: usize, seed_base: u64) -> Result<SampledTask> {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed_base, "task:frequency", index as u64));
        let frequency = self.frequency_grid[rng.gen_range(0..self.frequency_grid.len())];
        let data_seed = derive_seed(seed_base, "task:data", index as u64);
        let spec = TaskSpec {
            frequency,
            seed: data_seed,
            ..self.base.clone()
        };
        Ok(SampledTask {
            id: format!("task{index:03}_f{frequency:.2}"),
            frequency,
            data_seed,
            ds: spec.generate()?,
        })
    }
}

/// Everything measured on one sampled task. `d_tilde` / `d` are the
/// early-stopped headline values; the `_last` variants read the final
/// checkpoint instead.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: String,
    /// Difficulty-knob value (group 1's boundary frequency).
    pub frequency: f64,
    pub data_seed: u64,
    /// Base seed of this task's training-condition seed streams.
    pub train_seed: u64,
    pub d_tilde: f64,
    pub d_tilde_se: Option<f64>,
    pub d: f64,
    pub d_se: Option<f64>,
    pub d_tilde_last: f64,
    pub d_last: f64,
    pub separability: SeparabilityVector,
    /// Mean observed disparity per combined checkpoint; drives the
    /// step-variable design sweep without retraining.
    pub observed_by_step: Vec<StepDisparity>,
}

/// The amplification regression over sampled tasks.
///
/// `k` is the `d_tilde` coefficient of the no-intercept fit of observed on
/// estimated disparity with the four separability cells as nuisance
/// regressors; the intercept variant is reported alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmplificationReport {
    pub records: Vec<TaskRecord>,
    /// Designated fit (no intercept).
    pub fit: RegressionResult,
    pub fit_with_intercept: RegressionResult,
    /// Headline amplification factor: the `d_tilde` coefficient of `fit`.
    pub k: f64,
    pub k_se: f64,
    /// R² of the designated fit.
    pub r_squared: f64,
    /// Nuisance columns dropped from the designated fit because they were
    /// linearly dependent on earlier ones (saturated separability cells
    /// produce constant, duplicate columns at small scale).
    pub dropped_columns: Vec<String>,
    pub n_runs: usize,
    pub seed: u64,
}

/// Name of the estimated-disparity column in the amplification design.
pub const DISPARITY_COLUMN: &str = "d_tilde";

fn amplification_design(records: &[TaskRecord]) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut names = vec![DISPARITY_COLUMN.to_string()];
    names.extend(SeparabilityVector::COLUMN_NAMES.iter().map(|s| s.to_string()));
    let mut columns = vec![records.iter().map(|r| r.d_tilde).collect::<Vec<f64>>()];
    for j in 0..4 {
        columns.push(records.iter().map(|r| r.separability.means()[j]).collect());
    }
    (names, columns)
}

/// Least squares with deterministic rank repair: a nuisance column reported
/// as linearly dependent is dropped and the fit retried, until the design
/// has full rank. `d_tilde` (or the intercept) going dependent is a hard
/// error — the sweep itself is degenerate then. Returns the fit and the
/// dropped column names in drop order.
fn fit_dropping_dependent_nuisances(
    names: &[String],
    columns: &[Vec<f64>],
    y: &[f64],
    intercept: bool,
) -> Result<(RegressionResult, Vec<String>)> {
    let mut kept: Vec<usize> = (0..names.len()).collect();
    let mut dropped = Vec::new();
    loop {
        let x = DesignMatrix::from_columns(
            kept.iter().map(|&j| names[j].clone()).collect(),
            kept.iter().map(|&j| columns[j].clone()).collect(),
        )?;
        match ols_fit(&x, y, intercept) {
            Ok(fit) => return Ok((fit, dropped)),
            Err(Error::SingularDesign { column, .. })
                if column != DISPARITY_COLUMN && column != "intercept" =>
            {
                let at = kept
                    .iter()
                    .position(|&j| names[j] == column)
                    .expect("the reported column is part of the design");
                dropped.push(column);
                kept.remove(at);
            }
            Err(e) => return Err(actionable_singular(e)),
        }
    }
}

/// Rewrite a singular-design failure with advice specific to task sampling.
fn actionable_singular(e: Error) -> Error {
    match e {
        Error::SingularDesign { column, .. } => Error::SingularDesign {
            column,
            hint: "; estimated disparity does not vary across the sampled tasks — widen \
                   sweep.frequency_grid or raise the task count"
                .to_string(),
        },
        other => other,
    }
}

impl AmplificationReport {
    /// Fit the amplification regression on measured task records. This is
    /// the whole statistical layer of the sweep: feeding back a report's own
    /// `records` reproduces its `k` exactly.
    pub fn from_records(
        records: Vec<TaskRecord>,
        n_runs: usize,
        seed: u64,
    ) -> Result<AmplificationReport> {
        if records.is_empty() {
            return Err(Error::invalid("amplification records", "no tasks measured"));
        }
        let (names, columns) = amplification_design(&records);
        let y: Vec<f64> = records.iter().map(|r| r.d).collect();
        let (fit, dropped_columns) =
            fit_dropping_dependent_nuisances(&names, &columns, &y, false)?;
        let (fit_with_intercept, _) =
            fit_dropping_dependent_nuisances(&names, &columns, &y, true)?;
        let (k, k_se) = fit
            .coefficient(DISPARITY_COLUMN)
            .expect("designated fit always carries the d_tilde column");
        let r_squared = fit.r_squared;
        Ok(AmplificationReport {
            records,
            fit,
            fit_with_intercept,
            k,
            k_se,
            r_squared,
            dropped_columns,
            n_runs,
            seed,
        })
    }
}

fn amplification_sweep_inner(
    sampler: &TaskSampler,
    m_tasks: usize,
    cfg: &ExperimentConfig,
    data_seed: u64,
    train_seed: u64,
) -> Result<AmplificationReport> {
    if m_tasks <= 6 {
        return Err(Error::invalid(
            "m_tasks",
            format!(
                "the 5-column amplification regression needs more than 6 tasks, got {m_tasks}"
            ),
        ));
    }
    let mut records = Vec::with_capacity(m_tasks);
    for t in 0..m_tasks {
        let task = sampler.sample(t, data_seed)?;
        let task_train_seed = derive_seed(train_seed, &format!("task:{t}:train"), 0);
        let wrap = |e| Error::in_condition(format!("task {}", task.id), t)(e);
        let report = audit_inner(&task.ds, cfg, task_train_seed, CombinedSampling::Uniform)
            .map_err(wrap)?;
        let separability = measure_separability(&task.ds, cfg, task_train_seed)
            .map_err(|e| Error::in_condition(format!("task {}", task.id), t)(e))?;
        let pair = &report.pairs[0];
        records.push(TaskRecord {
            task_id: task.id,
            frequency: task.frequency,
            data_seed: task.data_seed,
            train_seed: task_train_seed,
            d_tilde: pair.early.d_tilde,
            d_tilde_se: pair.early.d_tilde_se,
            d: pair.early.d,
            d_se: pair.early.d_se,
            d_tilde_last: pair.last.d_tilde,
            d_last: pair.last.d,
            separability,
            observed_by_step: pair.observed_by_step.clone(),
        });
    }
    AmplificationReport::from_records(records, cfg.protocol.n_runs, cfg.protocol.seed)
}

/// Audit `m_tasks` sampled tasks (disparities plus separability cells per
/// task) and fit the amplification regression.
pub fn amplification_sweep(
    sampler: &TaskSampler,
    m_tasks: usize,
    cfg: &ExperimentConfig,
) -> Result<AmplificationReport> {
    amplification_sweep_inner(sampler, m_tasks, cfg, cfg.protocol.seed, cfg.protocol.seed)
}

// ---------------------------------------------------------------------------
// Design sweep
// ---------------------------------------------------------------------------

/// The design knob a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    /// Hidden-layer width (every hidden layer is set to the grid value).
    Width,
    /// Training step: one sweep pass, `k` refit at every recorded
    /// checkpoint from the stored per-task series.
    Step,
    /// Optimizer weight decay.
    WeightDecay,
    /// Gradient-penalty target norm `C` (penalty weight defaults to 10 when
    /// the base config has none).
    GradPenaltyC,
}

impl SweepVariable {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepVariable::Width => "width",
            SweepVariable::Step => "step",
            SweepVariable::WeightDecay => "weight_decay",
            SweepVariable::GradPenaltyC => "grad_penalty_c",
        }
    }
}

impl std::fmt::Display for SweepVariable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SweepVariable {
    type Err = Error;

    fn from_str(s: &str) -> Result<SweepVariable> {
        match s {
            "width" => Ok(SweepVariable::Width),
            "step" => Ok(SweepVariable::Step),
            "weight_decay" => Ok(SweepVariable::WeightDecay),
            "grad_penalty_c" => Ok(SweepVariable::GradPenaltyC),
            other => Err(Error::config(format!(
                "unknown sweep variable {other:?} (expected width, step, weight_decay, \
                 or grad_penalty_c)"
            ))),
        }
    }
}

/// Amplification factor at one grid value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub k: f64,
    pub k_se: f64,
    pub r_squared: f64,
}

/// `k` as a function of one design knob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub variable: SweepVariable,
    /// Grid actually reported (for `step`: every recorded checkpoint step).
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    /// Full per-value reports; a single entry for the `step` variable,
    /// whose refits all read the same training pass.
    pub reports: Vec<AmplificationReport>,
}

fn apply_sweep_value(
    variable: SweepVariable,
    value: f64,
    cfg: &ExperimentConfig,
) -> Result<ExperimentConfig> {
    let mut out = cfg.clone();
    match variable {
        SweepVariable::Width => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::config(format!(
                    "width grid values must be positive integers, got {value}"
                )));
            }
            let w = value as usize;
            if out.model.hidden_widths.is_empty() {
                out.model.hidden_widths = vec![w];
            } else {
                out.model.hidden_widths.iter_mut().for_each(|x| *x = w);
            }
        }
        SweepVariable::WeightDecay => {
            if value < 0.0 {
                return Err(Error::config(format!(
                    "weight_decay grid values must be >= 0, got {value}"
                )));
            }
            out.train.weight_decay = value;
        }
        SweepVariable::GradPenaltyC => {
            if value < 0.0 {
                return Err(Error::config(format!(
                    "grad_penalty_c grid values must be >= 0, got {value}"
                )));
            }
            let mut p = out.train.grad_penalty.unwrap_or(GradPenalty {
                lambda: 10.0,
                c: 0.0,
                mode: Default::default(),
            });
            p.c = value;
            out.train.grad_penalty = Some(p);
        }
        SweepVariable::Step => unreachable!("step sweeps do not rewrite the config"),
    }
    Ok(out)
}

/// Refit `k` at every recorded checkpoint step from a sweep report's stored
/// per-task series — no retraining.
fn per_step_fits(report: &AmplificationReport) -> Result<(Vec<f64>, Vec<SweepPoint>)> {
    let steps: Vec<usize> = report.records[0]
        .observed_by_step
        .iter()
        .map(|s| s.step)
        .collect();
    for rec in &report.records[1..] {
        let other: Vec<usize> = rec.observed_by_step.iter().map(|s| s.step).collect();
        if other != steps {
            return Err(Error::IncompleteProtocol {
                why: format!(
                    "tasks disagree on checkpoint steps ({steps:?} vs {other:?} in {}); \
                     the step sweep needs a uniform task size",
                    rec.task_id
                ),
            });
        }
    }
    let (names, columns) = amplification_design(&report.records);
    let mut grid = Vec::with_capacity(steps.len());
    let mut points = Vec::with_capacity(steps.len());
    for (i, &step) in steps.iter().enumerate() {
        let y: Vec<f64> = report
            .records
            .iter()
            .map(|r| r.observed_by_step[i].d)
            .collect();
        let (fit, _) = fit_dropping_dependent_nuisances(&names, &columns, &y, false)?;
        let (k, k_se) = fit
            .coefficient(DISPARITY_COLUMN)
            .expect("step fit always carries the d_tilde column");
        grid.push(step as f64);
        points.push(SweepPoint {
            value: step as f64,
            k,
            k_se,
            r_squared: fit.r_squared,
        });
    }
    Ok((grid, points))
}

/// Measure `k` across a grid of one design knob.
///
/// For `width`, `weight_decay`, and `grad_penalty_c` this runs one full
/// [`amplification_sweep`] per grid value with only that knob changed, so a
/// grid of length one reproduces a plain sweep exactly; task data and seed
/// streams are shared across values to pair the comparisons. For `step`,
/// one sweep runs and `k` is refit at every recorded checkpoint from the
/// stored records (the grid argument is ignored beyond a non-empty check).
pub fn design_sweep(
    variable: SweepVariable,
    grid: &[f64],
    sampler: &TaskSampler,
    cfg: &ExperimentConfig,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::config("sweep grid must be non-empty"));
    }
    if variable == SweepVariable::Step {
        let report = amplification_sweep(sampler, cfg.sweep.m_tasks, cfg)?;
        let (grid, points) = per_step_fits(&report)?;
        return Ok(SweepResult {
            variable,
            grid,
            points,
            reports: vec![report],
        });
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!(
            "sweep grid must be strictly increasing, got {grid:?}"
        )));
    }
    let mut points = Vec::with_capacity(grid.len());
    let mut reports = Vec::with_capacity(grid.len());
    for &value in grid {
        let cfg_v = apply_sweep_value(variable, value, cfg)?;
        let report = amplification_sweep(sampler, cfg.sweep.m_tasks, &cfg_v)
            .map_err(Error::in_condition(format!("sweep {variable}={value}"), 0))?;
        points.push(SweepPoint {
            value,
            k: report.k,
            k_se: report.k_se,
            r_squared: report.r_squared,
        });
        reports.push(report);
    }
    Ok(SweepResult {
        variable,
        grid: grid.to_vec(),
        points,
        reports,
    })
}

// ---------------------------------------------------------------------------
// Mitigation
// ---------------------------------------------------------------------------

/// How the observed disparity is attacked.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum MitigationStrategy {
    /// Grow the target group's data by `factor` with rows from a reserve.
    AddData { factor: f64 },
    /// Sample the target group's rows with `weight` in combined training.
    Oversample { weight: f64 },
}

impl std::fmt::Display for MitigationStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MitigationStrategy::AddData { factor } => write!(f, "add_data({factor})"),
            MitigationStrategy::Oversample { weight } => write!(f, "oversample({weight})"),
        }
    }
}

/// Observed-disparity change for one group pair, final checkpoint, with
/// per-run paired deltas (both arms reuse the same split and init seeds).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationDelta {
    pub group_a: String,
    pub group_b: String,
    pub observed_before: f64,
    pub observed_after: f64,
    /// `|observed_after| - |observed_before|`; negative means the gap
    /// shrank.
    pub delta_abs: f64,
    /// Per-run `|d_after| - |d_before|`, paired by run index.
    pub per_run_delta: Vec<f64>,
    pub reduced: bool,
}

/// Baseline and mitigated audits plus per-pair deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MitigationReport {
    pub strategy: MitigationStrategy,
    pub target_group: usize,
    pub baseline: AuditReport,
    pub mitigated: AuditReport,
    pub deltas: Vec<MitigationDelta>,
}

/// Audit the task before and after one mitigation and report how the
/// observed disparity moved (final checkpoint, per-run paired).
///
/// `reserve` supplies the extra rows for [`MitigationStrategy::AddData`]
/// (it must contain only target-group rows) and is ignored otherwise. Both
/// arms derive identical seed streams, so oversampling deltas differ only
/// through the sampler and add-data deltas only through the grown dataset.
pub fn mitigation_experiment(
    ds: &GroupedDataset,
    reserve: Option<&GroupedDataset>,
    strategy: MitigationStrategy,
    cfg: &ExperimentConfig,
) -> Result<MitigationReport> {
    let target = cfg.mitigation.target_group;
    if target >= ds.num_groups() {
        return Err(Error::UnknownGroup {
            group: target,
            num_groups: ds.num_groups(),
        });
    }
    let seed = cfg.protocol.seed;
    let baseline = audit_inner(ds, cfg, seed, CombinedSampling::Uniform)?;
    let mitigated = match strategy {
        MitigationStrategy::Oversample { weight } => {
            if !weight.is_finite() || weight <= 0.0 {
                return Err(Error::invalid(
                    "oversample weight",
                    format!("must be > 0, got {weight}"),
                ));
            }
            audit_inner(
                ds,
                cfg,
                seed,
                CombinedSampling::Oversample {
                    group: target,
                    weight,
                },
            )?
        }
        MitigationStrategy::AddData { factor } => {
            let reserve = reserve.ok_or_else(|| {
                Error::invalid(
                    "mitigation reserve",
                    "add_data needs a reserve dataset of target-group rows",
                )
            })?;
            let grown = augment_group(
                ds,
                reserve,
                target,
                factor,
                derive_seed(seed, "mitigation:add_data", 0),
            )?;
            // Growing one group unbalances the task by design.
            let mut cfg_m = cfg.clone();
            cfg_m.protocol.allow_unbalanced = true;
            audit_inner(&grown, &cfg_m, seed, CombinedSampling::Uniform)?
        }
    };
    let mut deltas = Vec::with_capacity(baseline.pairs.len());
    for (before, after) in baseline.pairs.iter().zip(&mitigated.pairs) {
        let (b, a) = (&before.last, &after.last);
        let per_run_delta: Vec<f64> = b
            .acc_a_comb
            .runs
            .iter()
            .zip(&b.acc_b_comb.runs)
            .zip(a.acc_a_comb.runs.iter().zip(&a.acc_b_comb.runs))
            .map(|((&ba, &bb), (&aa, &ab))| (aa - ab).abs() - (ba - bb).abs())
            .collect();
        let delta_abs = a.d.abs() - b.d.abs();
        deltas.push(MitigationDelta {
            group_a: b.group_a.clone(),
            group_b: b.group_b.clone(),
            observed_before: b.d,
            observed_after: a.d,
            delta_abs,
            per_run_delta,
            reduced: delta_abs < 0.0,
        });
    }
    Ok(MitigationReport {
        strategy,
        target_group: target,
        baseline,
        mitigated,
        deltas,
    })
}

// ---------------------------------------------------------------------------
// Pairwise difficulty
// ---------------------------------------------------------------------------

/// One architecture's difficulty profile over all class pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseModelResult {
    pub name: String,
    pub hidden_widths: Vec<usize>,
    /// Masked pair accuracy per class pair (upper-triangle order), over
    /// runs.
    pub pair_accuracy: Vec<RunStats>,
    /// Tied-average ranks of `1 - mean accuracy`: rank 1 is the easiest
    /// pair.
    pub difficulty_rank: Vec<f64>,
    pub init_seeds: Vec<u64>,
}

/// Difficulty rankings across architectures plus the distance-based
/// explanation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub class_names: Vec<String>,
    /// Class pairs `(i, j)` with `i < j`, the shared index for all
    /// per-pair vectors.
    pub pairs: Vec<(usize, usize)>,
    pub models: Vec<PairwiseModelResult>,
    /// Kendall tau between models' mean pair accuracies.
    pub tau: Vec<Vec<f64>>,
    /// Cosine distance between the two classes' feature means, per pair.
    pub cosine_distance: Vec<f64>,
    /// PLS of the consensus difficulty rank on the distance rank.
    pub pls: PlsModel,
    pub pls_r_squared: f64,
    pub n_runs: usize,
    pub seed: u64,
}

/// Rank pair difficulty under every architecture and test how consistently
/// the models agree (Kendall tau) and how much a model-free geometry
/// feature explains (rank-on-rank PLS).
pub fn pairwise_difficulty_experiment(
    ds: &GroupedDataset,
    model_cfgs: &[ModelConfig],
    cfg: &ExperimentConfig,
) -> Result<PairwiseReport> {
    if ds.num_classes() < 3 {
        return Err(Error::invalid(
            "pairwise difficulty",
            format!(
                "needs at least 3 classes to rank pairs, got {}",
                ds.num_classes()
            ),
        ));
    }
    if model_cfgs.len() < 2 {
        return Err(Error::invalid(
            "pairwise difficulty",
            format!("needs at least 2 model specs, got {}", model_cfgs.len()),
        ));
    }
    for m in model_cfgs {
        m.validate()?;
    }
    cfg.protocol.validate()?;
    cfg.train.validate()?;

    let k = ds.num_classes();
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let seed = cfg.protocol.seed;
    let n_runs = cfg.protocol.n_runs;

    let outs = run_jobs(model_cfgs.len() * n_runs, cfg.protocol.jobs, |idx| {
        let (s, r) = (idx / n_runs, idx % n_runs);
        let job = || -> Result<(Vec<f64>, u64)> {
            let split_seed = derive_seed(seed, "split", r as u64);
            let (train_ds, test_ds) =
                stratified_split(ds, cfg.protocol.split_fraction, split_seed)?;
            let spec = model_cfgs[s].resolve(ds);
            let init_seed = derive_seed(seed, &format!("pairwise:{s}:init"), r as u64);
            let sampler_seed = derive_seed(seed, &format!("pairwise:{s}:sampler"), r as u64);
            let mlp = init_mlp(&spec, init_seed)?;
            let sampler = Sampler::uniform(sampler_seed);
            let (model, _) = train(&mlp, &train_ds, &test_ds, &sampler, &cfg.train)?;
            let matrix = pairwise_difficulty_matrix(&model, &test_ds)?;
            let accs = pairs.iter().map(|&(i, j)| matrix[i][j]).collect();
            Ok((accs, init_seed))
        };
        job().map_err(Error::in_condition(format!("pairwise model {s}"), r))
    })?;

    let mut models = Vec::with_capacity(model_cfgs.len());
    let mut mean_accs: Vec<Vec<f64>> = Vec::with_capacity(model_cfgs.len());
    for (s, m) in model_cfgs.iter().enumerate() {
        let mut per_pair: Vec<Vec<f64>> = vec![Vec::with_capacity(n_runs); pairs.len()];
        let mut init_seeds = Vec::with_capacity(n_runs);
        for r in 0..n_runs {
            let (accs, init_seed) = &outs[s * n_runs + r];
            for (p, &a) in accs.iter().enumerate() {
                per_pair[p].push(a);
            }
            init_seeds.push(*init_seed);
        }
        let pair_accuracy: Vec<RunStats> = per_pair
            .into_iter()
            .map(RunStats::from_runs)
            .collect::<Result<_>>()?;
        let means: Vec<f64> = pair_accuracy.iter().map(|s| s.mean).collect();
        let difficulty: Vec<f64> = means.iter().map(|&a| 1.0 - a).collect();
        models.push(PairwiseModelResult {
            name: format!(
                "mlp_{}",
                m.hidden_widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            ),
            hidden_widths: m.hidden_widths.clone(),
            pair_accuracy,
            difficulty_rank: rank_transform(&difficulty),
            init_seeds,
        });
        mean_accs.push(means);
    }

    let mut tau = vec![vec![1.0; models.len()]; models.len()];
    for s in 0..models.len() {
        for t in s + 1..models.len() {
            let v = kendall_tau(&mean_accs[s], &mean_accs[t])?;
            tau[s][t] = v;
            tau[t][s] = v;
        }
    }

    let cosine_distance: Vec<f64> = pairs
        .iter()
        .map(|&(i, j)| crate::metrics::cosine_distance_class_means(ds, i, j))
        .collect::<Result<_>>()?;

    // Consensus difficulty: mean of the per-model difficulties, ranked, and
    // explained by the ranked geometric distance — rank-on-rank keeps the
    // relation linear whenever it is monotone.
    let consensus: Vec<f64> = (0..pairs.len())
        .map(|p| {
            mean_accs.iter().map(|m| 1.0 - m[p]).sum::<f64>() / mean_accs.len() as f64
        })
        .collect();
    let y_rank = rank_transform(&consensus);
    let x_rank = rank_transform(&cosine_distance);
    let pls = pls1_fit(&x_rank, pairs.len(), 1, &y_rank)?;
    let pls_r_squared = pls.r_squared;

    Ok(PairwiseReport {
        class_names: ds.class_names.clone(),
        pairs,
        models,
        tau,
        cosine_distance,
        pls,
        pls_r_squared,
        n_runs,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_teaser_task;

    /// Small, fast experiment settings shared by the protocol tests.
    fn tiny_cfg(n_runs: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task.n = 80;
        cfg.model.hidden_widths = vec![4];
        cfg.train.epochs = 3;
        cfg.train.batch_size = 32;
        cfg.train.eval_every = 2;
        cfg.protocol.n_runs = n_runs;
        cfg.protocol.seed = 7;
        cfg.sweep.m_tasks = 7;
        cfg.sweep.frequency_grid = vec![0.0, 1.0, 2.0];
        cfg
    }

    fn tiny_teaser(frequency: f64, seed: u64) -> GroupedDataset {
        gen_teaser_task(80, 0.1, frequency, 0.0, seed).unwrap()
    }

    #[test]
    fn run_jobs_is_ordered_and_parallel_matches_serial() {
        let serial = run_jobs(17, 1, |i| Ok(i * i)).unwrap();
        let parallel = run_jobs(17, 4, |i| Ok(i * i)).unwrap();
        assert_eq!(serial, (0..17).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(serial, parallel);
        // More workers than jobs is fine.
        assert_eq!(run_jobs(2, 8, |i| Ok(i)).unwrap(), vec![0, 1]);
        assert_eq!(run_jobs(0, 3, |i| Ok(i)).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn run_jobs_returns_the_lowest_index_error() {
        let err = run_jobs(10, 4, |i| {
            if i >= 5 {
                Err(Error::invalid("job", format!("boom {i}")))
            } else {
                Ok(i)
            }
        })
        .unwrap_err();
        assert!(err.to_string().contains("boom 5"), "{err}");
    }

    #[test]
    fn isolation_stage_never_sees_other_groups() {
        let ds = tiny_teaser(1.0, 3);
        let cfg = tiny_cfg(2);
        let iso = run_single_group_protocol(&ds, &cfg).unwrap();
        assert_eq!(iso.groups.len(), 2);
        assert_eq!(iso.n_runs, 2);
        for g in &iso.groups {
            assert_eq!(g.train_group_counts.len(), 2);
            for counts in &g.train_group_counts {
                for (other, &c) in counts.iter().enumerate() {
                    if other == g.group {
                        assert!(c > 0);
                    } else {
                        assert_eq!(c, 0, "group {} saw rows of group {other}", g.group);
                    }
                }
            }
        }
    }

    #[test]
    fn unbalanced_groups_are_rejected_unless_waived() {
        let ds = tiny_teaser(1.0, 3);
        // Drop one row to unbalance the cells.
        let keep: Vec<usize> = (0..ds.n() - 1).collect();
        let unbalanced = ds.subset(&keep);
        let mut cfg = tiny_cfg(1);
        let err = run_single_group_protocol(&unbalanced, &cfg).unwrap_err();
        assert!(err.to_string().contains("unbalanced"), "{err}");
        cfg.protocol.allow_unbalanced = true;
        run_single_group_protocol(&unbalanced, &cfg).unwrap();
    }

    #[test]
    fn audit_is_deterministic_and_seed_sensitive() {
        let ds = tiny_teaser(2.0, 5);
        let cfg = tiny_cfg(2);
        let a = audit(&ds, &cfg).unwrap();
        let b = audit(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.protocol.seed = 8;
        let c = audit(&ds, &cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parallel_audit_equals_serial_audit() {
        let ds = tiny_teaser(2.0, 5);
        let mut cfg = tiny_cfg(2);
        let serial = audit(&ds, &cfg).unwrap();
        cfg.protocol.jobs = 3;
        let parallel = audit(&ds, &cfg).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn audit_pairs_are_consistent_with_stage_outputs() {
        let ds = tiny_teaser(2.0, 5);
        let cfg = tiny_cfg(3);
        let report = audit(&ds, &cfg).unwrap();
        assert_eq!(report.pairs.len(), 1);
        let pair = &report.pairs[0];
        // d_tilde is the mean paired difference of the isolation runs.
        let iso_a = &report.isolation.groups[0].early.runs;
        let iso_b = &report.isolation.groups[1].early.runs;
        let expect: f64 =
            iso_a.iter().zip(iso_b).map(|(a, b)| a - b).sum::<f64>() / iso_a.len() as f64;
        assert!((pair.early.d_tilde - expect).abs() < 1e-12);
        // The by-step series ends at the final combined checkpoint and
        // matches the final-checkpoint report.
        let last_step = pair.observed_by_step.last().unwrap();
        assert!((last_step.d - pair.last.d).abs() < 1e-12);
        // Step-0 checkpoint is present.
        assert_eq!(pair.observed_by_step[0].step, 0);
    }

    #[test]
    fn swap_symmetry_negates_disparities_and_keeps_the_flag() {
        let ds = tiny_teaser(2.0, 5);
        let cfg = tiny_cfg(3);
        let report = audit(&ds, &cfg).unwrap();
        let pair = &report.pairs[0].early;
        let swapped = pair.swapped();
        assert_eq!(swapped.d_tilde, -pair.d_tilde);
        assert_eq!(swapped.d, -pair.d);
        assert_eq!(swapped.amplified, pair.amplified);
        assert_eq!(swapped.k_ratio, pair.k_ratio);
    }

    #[test]
    fn identical_groups_show_no_systematic_disparity() {
        // Frequency 0 makes both groups distribution-identical.
        let ds = tiny_teaser(0.0, 11);
        let cfg = tiny_cfg(3);
        let report = audit(&ds, &cfg).unwrap();
        let pair = &report.pairs[0];
        assert!(pair.early.d_tilde.abs() < 0.2, "{}", pair.early.d_tilde);
        assert!(pair.early.d.abs() < 0.2, "{}", pair.early.d);
        assert!(!pair.early.amplified);
    }

    #[test]
    fn cell_dataset_relabels_and_filters() {
        let ds = tiny_teaser(1.0, 3);
        let cell = cell_dataset(&ds, (0, 0), (1, 1)).unwrap();
        assert_eq!(cell.n(), 40); // two of four 20-row cells
        assert_eq!(cell.num_classes(), 2);
        assert_eq!(cell.num_groups(), 1);
        assert_eq!(cell.labels.iter().filter(|&&y| y == 0).count(), 20);
        let missing = cell_dataset(&ds.filter_group(0).unwrap(), (1, 0), (0, 1));
        assert!(missing.is_err());
    }

    #[test]
    fn separability_vector_is_complete_and_bounded() {
        let ds = tiny_teaser(1.0, 3);
        let cfg = tiny_cfg(2);
        let sep = measure_separability(&ds, &cfg, 99).unwrap();
        for (name, cell) in [
            ("s_a0_a1", &sep.s_a0_a1),
            ("s_b0_b1", &sep.s_b0_b1),
            ("s_a0_b1", &sep.s_a0_b1),
            ("s_a1_b0", &sep.s_a1_b0),
        ] {
            assert_eq!(cell.accuracy.n(), 2, "{name}");
            for &a in &cell.accuracy.runs {
                assert!((0.0..=1.0).contains(&a), "{name}: {a}");
            }
        }
    }

    #[test]
    fn task_sampler_draws_from_the_grid_deterministically() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        let a = sampler.sample(0, 42).unwrap();
        let b = sampler.sample(0, 42).unwrap();
        assert_eq!(a.frequency, b.frequency);
        assert_eq!(a.ds, b.ds);
        assert!(cfg.sweep.frequency_grid.contains(&a.frequency));
        // Different indices vary the data even at equal frequency.
        let c = sampler.sample(1, 42).unwrap();
        assert_ne!(a.ds, c.ds);
        assert_eq!(a.ds.n(), cfg.task.n);
    }

    #[test]
    fn task_sampler_rejects_non_teaser_sources() {
        let mut cfg = tiny_cfg(1);
        cfg.task.generator = "blobs".to_string();
        assert!(TaskSampler::from_config(&cfg).is_err());
    }

    fn synthetic_records(k: f64, m: usize, seed: u64) -> Vec<TaskRecord> {
        // Varied d_tilde and independent separability noise, d = k * d_tilde
        // exactly; enough variation to keep the design full-rank.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|t| {
                let d_tilde = 0.02 + 0.3 * rng.gen::<f64>();
                let mut cell = |ga, la, gb, lb| CellPairAccuracy {
                    group_a: ga,
                    label_a: la,
                    group_b: gb,
                    label_b: lb,
                    accuracy: RunStats::from_runs(vec![0.8 + 0.2 * rng.gen::<f64>()]).unwrap(),
                    seeds: vec![t as u64],
                };
                TaskRecord {
                    task_id: format!("task{t:03}"),
                    frequency: 1.0,
                    data_seed: t as u64,
                    train_seed: t as u64,
                    d_tilde,
                    d_tilde_se: None,
                    d: k * d_tilde,
                    d_se: None,
                    d_tilde_last: d_tilde,
                    d_last: k * d_tilde,
                    separability: SeparabilityVector {
                        s_a0_a1: cell(0, 0, 0, 1),
                        s_b0_b1: cell(1, 0, 1, 1),
                        s_a0_b1: cell(0, 0, 1, 1),
                        s_a1_b0: cell(0, 1, 1, 0),
                    },
                    observed_by_step: vec![],
                }
            })
            .collect()
    }

    #[test]
    fn exact_proportionality_recovers_k_exactly() {
        let report = AmplificationReport::from_records(synthetic_records(1.0, 12, 3), 1, 0).unwrap();
        assert!((report.k - 1.0).abs() < 1e-10, "{}", report.k);
        assert!((report.r_squared - 1.0).abs() < 1e-10);
        assert!(report.k_se < 1e-8);
        let planted = AmplificationReport::from_records(synthetic_records(1.3, 12, 4), 1, 0).unwrap();
        assert!((planted.k - 1.3).abs() < 1e-10, "{}", planted.k);
    }

    #[test]
    fn headline_k_is_recomputable_from_records() {
        let report = AmplificationReport::from_records(synthetic_records(0.9, 10, 5), 1, 0).unwrap();
        let again =
            AmplificationReport::from_records(report.records.clone(), report.n_runs, report.seed)
                .unwrap();
        assert_eq!(report.k, again.k);
        assert_eq!(report.k_se, again.k_se);
        assert_eq!(
            report.fit.coefficient(DISPARITY_COLUMN).unwrap().0,
            report.k
        );
    }

    #[test]
    fn constant_records_make_an_actionable_singular_design() {
        // Identical d_tilde and identical cells in every record: the
        // d_tilde column is a multiple of each cell column.
        let mut records = synthetic_records(1.0, 8, 6);
        for r in &mut records {
            r.d_tilde = 0.1;
            r.d = 0.13;
            let c = CellPairAccuracy {
                accuracy: RunStats::from_runs(vec![0.9]).unwrap(),
                ..r.separability.s_a0_a1.clone()
            };
            r.separability.s_a0_a1.accuracy = c.accuracy.clone();
            r.separability.s_b0_b1.accuracy = c.accuracy.clone();
            r.separability.s_a0_b1.accuracy = c.accuracy.clone();
            r.separability.s_a1_b0.accuracy = c.accuracy;
        }
        let err = AmplificationReport::from_records(records, 1, 0).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("frequency_grid"), "{err}");
    }

    #[test]
    fn too_few_tasks_is_rejected_before_any_training() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        let err = amplification_sweep(&sampler, 6, &cfg).unwrap_err();
        assert!(err.to_string().contains("more than 6"), "{err}");
    }

    #[test]
    fn tiny_amplification_sweep_end_to_end() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        let report = amplification_sweep(&sampler, 7, &cfg).unwrap();
        assert_eq!(report.records.len(), 7);
        assert!(report.k.is_finite());
        assert!(report.k_se.is_finite());
        // The regression is reproducible from the stored records alone.
        let refit =
            AmplificationReport::from_records(report.records.clone(), report.n_runs, report.seed)
                .unwrap();
        assert_eq!(refit.k, report.k);
        assert_eq!(refit.fit, report.fit);
        // Records carry the by-step series for the step sweep.
        assert!(report.records.iter().all(|r| !r.observed_by_step.is_empty()));
    }

    #[test]
    fn design_sweep_of_length_one_equals_a_plain_sweep() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        let plain = amplification_sweep(&sampler, cfg.sweep.m_tasks, &{
            let mut c = cfg.clone();
            c.train.weight_decay = 1e-4;
            c
        })
        .unwrap();
        let sweep =
            design_sweep(SweepVariable::WeightDecay, &[1e-4], &sampler, &cfg).unwrap();
        assert_eq!(sweep.points.len(), 1);
        assert_eq!(sweep.reports[0], plain);
        assert_eq!(sweep.points[0].k, plain.k);
    }

    #[test]
    fn step_sweep_reports_every_recorded_checkpoint() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        let sweep = design_sweep(SweepVariable::Step, &[1.0], &sampler, &cfg).unwrap();
        assert_eq!(sweep.reports.len(), 1);
        let steps: Vec<f64> = sweep.reports[0].records[0]
            .observed_by_step
            .iter()
            .map(|s| s.step as f64)
            .collect();
        assert_eq!(sweep.grid, steps);
        assert_eq!(sweep.points.len(), steps.len());
        assert!(sweep.grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sweep_grid_validation() {
        let cfg = tiny_cfg(1);
        let sampler = TaskSampler::from_config(&cfg).unwrap();
        for (variable, grid) in [
            (SweepVariable::Width, vec![]),
            (SweepVariable::Width, vec![8.0, 8.0]),
            (SweepVariable::Width, vec![8.5]),
            (SweepVariable::WeightDecay, vec![-0.1]),
            (SweepVariable::GradPenaltyC, vec![-1.0]),
        ] {
            assert!(
                design_sweep(variable, &grid, &sampler, &cfg).is_err(),
                "{variable} {grid:?}"
            );
        }
    }

    #[test]
    fn sweep_variable_round_trips_through_strings() {
        for v in [
            SweepVariable::Width,
            SweepVariable::Step,
            SweepVariable::WeightDecay,
            SweepVariable::GradPenaltyC,
        ] {
            assert_eq!(v.as_str().parse::<SweepVariable>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.as_str()));
        }
        assert!("widths".parse::<SweepVariable>().is_err());
    }

    #[test]
    fn add_data_factor_one_is_a_null_intervention() {
        let ds = tiny_teaser(2.0, 5);
        let reserve = tiny_teaser(2.0, 6).filter_group(1).unwrap();
        let cfg = tiny_cfg(2);
        let report = mitigation_experiment(
            &ds,
            Some(&reserve),
            MitigationStrategy::AddData { factor: 1.0 },
            &cfg,
        )
        .unwrap();
        assert_eq!(report.baseline, report.mitigated);
        for delta in &report.deltas {
            assert_eq!(delta.delta_abs, 0.0);
            assert!(delta.per_run_delta.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn oversample_weight_one_changes_little() {
        let ds = tiny_teaser(2.0, 5);
        let cfg = tiny_cfg(2);
        let report = mitigation_experiment(
            &ds,
            None,
            MitigationStrategy::Oversample { weight: 1.0 },
            &cfg,
        )
        .unwrap();
        // Same distribution, different index stream: statistically null.
        for delta in &report.deltas {
            assert!(delta.delta_abs.abs() < 0.25, "{}", delta.delta_abs);
        }
        // The isolation stage is untouched by the sampler change.
        assert_eq!(report.baseline.isolation, report.mitigated.isolation);
    }

    #[test]
    fn add_data_requires_a_reserve() {
        let ds = tiny_teaser(2.0, 5);
        let cfg = tiny_cfg(1);
        let err = mitigation_experiment(
            &ds,
            None,
            MitigationStrategy::AddData { factor: 1.5 },
            &cfg,
        )
        .unwrap_err();
        assert!(err.to_string().contains("reserve"), "{err}");
    }

    #[test]
    fn pairwise_experiment_shapes_and_self_consistency() {
        let spec = TaskSpec {
            generator: "blobs".to_string(),
            n: 160,
            num_classes: 4,
            spread: 0.4,
            noise: 0.0,
            seed: 2,
            ..TaskSpec::default()
        };
        let ds = spec.generate().unwrap();
        let mut cfg = tiny_cfg(2);
        cfg.train.epochs = 5;
        let models = [
            ModelConfig {
                hidden_widths: vec![8],
                ..ModelConfig::default()
            },
            ModelConfig {
                hidden_widths: vec![16],
                ..ModelConfig::default()
            },
        ];
        let report = pairwise_difficulty_experiment(&ds, &models, &cfg).unwrap();
        assert_eq!(report.pairs.len(), 6); // 4 classes -> 6 pairs
        assert_eq!(report.models.len(), 2);
        assert_eq!(report.models[0].pair_accuracy.len(), 6);
        assert_eq!(report.models[0].difficulty_rank.len(), 6);
        assert_eq!(report.tau.len(), 2);
        assert_eq!(report.tau[0][0], 1.0);
        assert_eq!(report.tau[0][1], report.tau[1][0]);
        assert!(report.tau[0][1].abs() <= 1.0);
        assert_eq!(report.cosine_distance.len(), 6);
        assert!(report.pls_r_squared.is_finite());
        assert_eq!(report.models[0].name, "mlp_8");
        // Deterministic.
        let again = pairwise_difficulty_experiment(&ds, &models, &cfg).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn pairwise_preconditions() {
        let cfg = tiny_cfg(1);
        let two_class = tiny_teaser(1.0, 3);
        let models = [ModelConfig::default(), ModelConfig::default()];
        assert!(pairwise_difficulty_experiment(&two_class, &models, &cfg).is_err());
        let blobs = TaskSpec {
            generator: "blobs".to_string(),
            n: 30,
            num_classes: 3,
            ..TaskSpec::default()
        }
        .generate()
        .unwrap();
        assert!(pairwise_difficulty_experiment(&blobs, &models[..1], &cfg).is_err());
    }

    #[test]
    fn audit_report_round_trips_through_json() {
        let ds = tiny_teaser(1.0, 3);
        let cfg = tiny_cfg(2);
        let report = audit(&ds, &cfg).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: AuditReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }
}
