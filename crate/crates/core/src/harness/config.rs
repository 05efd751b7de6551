//! Experiment configuration: plain-text (TOML) sections, validation, the
//! `--quick` preset, and the resolved-config hash that names every run.
//!
//! A config file holds up to eight sections — `[task]`, `[model]`, `[train]`,
//! `[protocol]`, `[sweep]`, `[mitigation]`, `[pairwise]`, `[output]` — all
//! optional, all keys defaulted. Unknown keys are rejected so typos fail
//! loudly. The same struct serializes canonically (fixed field order, no
//! maps), which makes [`ExperimentConfig::sha256_hex`] a stable identity for
//! "what exactly ran": the hash is printed on every CLI invocation and
//! recorded in the run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{class_slice, load_idx, read_csv, stitch_binary_task, GroupedDataset, TaskSpec};
use crate::error::{Error, Result};
use crate::nn::{Activation, MlpSpec, TrainConfig};

/// Where the experiment's rows come from.
///
/// Exactly one source is active: IDX image/label files when `images` is set,
/// a CSV file when `csv` is set, and the synthetic generator otherwise. File
/// paths are used as written (relative paths resolve against the working
/// directory) and must exist at validation time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    /// Generator family: `"teaser"` or `"blobs"` (ignored for file sources).
    pub generator: String,
    /// Generator row count.
    pub n: usize,
    /// Symmetric label-flip probability.
    pub noise: f64,
    /// Teaser: empty band width around each group's boundary.
    pub margin: f64,
    /// Teaser: group 1's sine-boundary frequency (the difficulty knob).
    pub frequency: f64,
    /// Blobs: class count.
    pub num_classes: usize,
    /// Blobs: per-class Gaussian standard deviation.
    pub spread: f64,
    /// Data seed (generation, stitching subsampling).
    pub seed: u64,
    /// CSV dataset (`x0,..,xD,label,group` with a header), used as-is unless
    /// `class_pairs` asks for stitching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub csv: Option<PathBuf>,
    /// IDX (MNIST-container) image file; requires `labels` and `class_pairs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    /// IDX label file paired with `images`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    /// Two source-class pairs merged into a binary two-group task:
    /// `[[a_label0, a_label1], [b_label0, b_label1]]`. Group 0 is the first
    /// pair, label 0 the first class of each pair.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub class_pairs: Option<[[usize; 2]; 2]>,
    /// Cap on rows per (group, label) cell after stitching.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_cell: Option<usize>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let spec = TaskSpec::default();
        TaskConfig {
            generator: spec.generator,
            n: spec.n,
            noise: spec.noise,
            margin: spec.margin,
            frequency: spec.frequency,
            num_classes: spec.num_classes,
            spread: spec.spread,
            seed: spec.seed,
            csv: None,
            images: None,
            labels: None,
            class_pairs: None,
            per_cell: None,
        }
    }
}

impl TaskConfig {
    /// The generator settings as a [`TaskSpec`] (file fields ignored).
    pub fn generator_spec(&self) -> TaskSpec {
        TaskSpec {
            generator: self.generator.clone(),
            n: self.n,
            noise: self.noise,
            margin: self.margin,
            frequency: self.frequency,
            num_classes: self.num_classes,
            spread: self.spread,
            seed: self.seed,
        }
    }

    fn uses_files(&self) -> bool {
        self.csv.is_some() || self.images.is_some() || self.labels.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_some() != self.labels.is_some() {
            return Err(Error::config(
                "task.images and task.labels must be set together",
            ));
        }
        if self.images.is_some() && self.csv.is_some() {
            return Err(Error::config(
                "task.csv and task.images are mutually exclusive sources",
            ));
        }
        if self.images.is_some() && self.class_pairs.is_none() {
            return Err(Error::config(
                "IDX sources carry no group annotations; set task.class_pairs to stitch \
                 two class pairs into a two-group task",
            ));
        }
        if let Some(pairs) = &self.class_pairs {
            let mut flat: Vec<usize> = pairs.iter().flatten().copied().collect();
            flat.sort_unstable();
            flat.dedup();
            if flat.len() != 4 {
                return Err(Error::config(format!(
                    "task.class_pairs must name four distinct classes, got {pairs:?}"
                )));
            }
        }
        if let Some(cap) = self.per_cell {
            if cap == 0 {
                return Err(Error::config("task.per_cell must be at least 1"));
            }
            if self.class_pairs.is_none() {
                return Err(Error::config(
                    "task.per_cell only applies to stitched tasks; set task.class_pairs",
                ));
            }
        }
        for (key, path) in [
            ("task.csv", &self.csv),
            ("task.images", &self.images),
            ("task.labels", &self.labels),
        ] {
            if let Some(p) = path {
                if !p.is_file() {
                    return Err(Error::config(format!(
                        "{key} refers to a missing file: {}",
                        p.display()
                    )));
                }
            }
        }
        if !self.uses_files() {
            // Cheap generator parameter checks so config errors surface at
            // load time rather than mid-protocol. The generators re-validate.
            match self.generator.as_str() {
                "teaser" | "blobs" => {}
                other => {
                    return Err(Error::config(format!(
                        "task.generator must be \"teaser\" or \"blobs\", got {other:?}"
                    )))
                }
            }
        }
        Ok(())
    }

    /// Materialize the dataset this config describes.
    pub fn load_dataset(&self) -> Result<GroupedDataset> {
        let mut ds = if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            load_idx(images, labels)?
        } else if let Some(csv) = &self.csv {
            read_csv(csv)?
        } else {
            return self.generator_spec().generate();
        };
        if let Some(pairs) = &self.class_pairs {
            let mut slices = Vec::with_capacity(4);
            for &class in pairs.iter().flatten() {
                let mut s = class_slice(&ds, class)?;
                if let Some(cap) = self.per_cell {
                    s.truncate(cap);
                }
                slices.push(s);
            }
            ds = stitch_binary_task(
                (&slices[0], &slices[1]),
                (&slices[2], &slices[3]),
                self.seed,
            )?;
        }
        Ok(ds)
    }

    /// Human-readable input descriptors for the run manifest.
    pub fn describe(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let (Some(images), Some(labels)) = (&self.images, &self.labels) {
            out.push(format!("idx:{}", images.display()));
            out.push(format!("idx:{}", labels.display()));
        } else if let Some(csv) = &self.csv {
            out.push(format!("csv:{}", csv.display()));
        } else {
            let spec = self.generator_spec();
            let mut line = format!(
                "generator:{} n={} noise={} seed={}",
                spec.generator, spec.n, spec.noise, spec.seed
            );
            match spec.generator.as_str() {
                "blobs" => {
                    let _ = write!(line, " num_classes={} spread={}", spec.num_classes, spec.spread);
                }
                _ => {
                    let _ = write!(line, " margin={} frequency={}", spec.margin, spec.frequency);
                }
            }
            out.push(line);
        }
        if let Some(pairs) = &self.class_pairs {
            out.push(format!(
                "stitch:[{},{}]|[{},{}] per_cell={}",
                pairs[0][0],
                pairs[0][1],
                pairs[1][0],
                pairs[1][1],
                self.per_cell.map_or("all".to_string(), |c| c.to_string()),
            ));
        }
        out
    }
}

/// Network architecture minus the data-dependent dimensions, which are
/// resolved against the dataset at run time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    /// Standardize inputs with statistics fixed from the training split.
    pub input_batchnorm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_widths: vec![64],
            activation: Activation::Tanh,
            input_batchnorm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "model.hidden_widths must all be positive, got {:?}",
                self.hidden_widths
            )));
        }
        Ok(())
    }

    /// Fill in the input/output dimensions from a dataset.
    pub fn resolve(&self, ds: &GroupedDataset) -> MlpSpec {
        MlpSpec {
            input_dim: ds.feature_dim,
            hidden_widths: self.hidden_widths.clone(),
            output_dim: ds.num_classes(),
            activation: self.activation,
            input_batchnorm: self.input_batchnorm,
        }
    }
}

/// Protocol-level settings shared by all experiment operations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Independent training runs (seeds) per condition.
    pub n_runs: usize,
    /// Test fraction of each stratified split.
    pub split_fraction: f64,
    /// Master seed; every condition's seed stream is derived from it.
    pub seed: u64,
    /// Work-queue width for independent conditions. Purely an execution
    /// knob: results are identical at any value.
    pub jobs: usize,
    /// Waive the balanced-groups precondition of the audit protocols.
    pub allow_unbalanced: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            n_runs: 10,
            split_fraction: 0.2,
            seed: 0,
            jobs: 1,
            allow_unbalanced: false,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs == 0 {
            return Err(Error::config("protocol.n_runs must be at least 1"));
        }
        if !self.split_fraction.is_finite()
            || self.split_fraction <= 0.0
            || self.split_fraction >= 1.0
        {
            return Err(Error::config(format!(
                "protocol.split_fraction must lie in (0, 1), got {}",
                self.split_fraction
            )));
        }
        if self.jobs == 0 {
            return Err(Error::config("protocol.jobs must be at least 1"));
        }
        Ok(())
    }
}

/// Amplification/design sweep settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Tasks sampled per amplification sweep.
    pub m_tasks: usize,
    /// Difficulty-knob grid the task sampler draws from uniformly.
    pub frequency_grid: Vec<f64>,
    /// Design-sweep variable (`width`, `step`, `weight_decay`,
    /// `grad_penalty_c`); usually supplied on the command line instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    /// Design-sweep grid values.
    pub grid: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            m_tasks: 30,
            frequency_grid: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0],
            variable: None,
            grid: Vec::new(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_tasks == 0 {
            return Err(Error::config("sweep.m_tasks must be at least 1"));
        }
        if self.frequency_grid.is_empty() {
            return Err(Error::config("sweep.frequency_grid must be non-empty"));
        }
        if self
            .frequency_grid
            .iter()
            .any(|f| !f.is_finite() || *f < 0.0)
        {
            return Err(Error::config(format!(
                "sweep.frequency_grid values must be finite and >= 0, got {:?}",
                self.frequency_grid
            )));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "sweep.grid values must be finite, got {:?}",
                self.grid
            )));
        }
        Ok(())
    }
}

/// Mitigation knobs: which group gets help and how much.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MitigationConfig {
    /// Group the mitigation targets (usually the harder group).
    pub target_group: usize,
    /// `add_data` growth factor for the target group.
    pub add_data_factor: f64,
    /// `oversample` sampling weight for the target group's rows.
    pub oversample_weight: f64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        MitigationConfig {
            target_group: 1,
            add_data_factor: 1.6,
            oversample_weight: 2.0,
        }
    }
}

impl MitigationConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.add_data_factor.is_finite() || self.add_data_factor < 1.0 {
            return Err(Error::config(format!(
                "mitigation.add_data_factor must be >= 1, got {}",
                self.add_data_factor
            )));
        }
        if !self.oversample_weight.is_finite() || self.oversample_weight <= 0.0 {
            return Err(Error::config(format!(
                "mitigation.oversample_weight must be > 0, got {}",
                self.oversample_weight
            )));
        }
        Ok(())
    }
}

/// Model roster for the pairwise-difficulty analysis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairwiseConfig {
    /// Hidden-layer layouts compared against each other (at least two).
    pub model_widths: Vec<Vec<usize>>,
}

impl Default for PairwiseConfig {
    fn default() -> Self {
        PairwiseConfig {
            model_widths: vec![vec![16], vec![32], vec![64]],
        }
    }
}

impl PairwiseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_widths.len() < 2 {
            return Err(Error::config(
                "pairwise.model_widths needs at least two model layouts",
            ));
        }
        if self.model_widths.iter().flatten().any(|&w| w == 0) {
            return Err(Error::config(format!(
                "pairwise.model_widths must all be positive, got {:?}",
                self.model_widths
            )));
        }
        Ok(())
    }

    /// The roster as model configs sharing the base activation settings.
    pub fn model_configs(&self, base: &ModelConfig) -> Vec<ModelConfig> {
        self.model_widths
            .iter()
            .map(|widths| ModelConfig {
                hidden_widths: widths.clone(),
                ..base.clone()
            })
            .collect()
    }
}

/// Where run directories land. The CLI lets `--out` and the `AMPLAB_OUT`
/// environment variable override this.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs"),
        }
    }
}

/// The full experiment description: task source, model, optimizer, protocol
/// sizes, and the experiment-specific sections.
///
/// `train.seed` is ignored by the harness protocols, which derive one
/// sampler seed per condition from `protocol.seed` instead; it only matters
/// when a [`TrainConfig`] is used directly.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub sweep: SweepConfig,
    pub mitigation: MitigationConfig,
    pub pairwise: PairwiseConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parse and validate a TOML config.
    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file, resolving nothing: paths inside are used as
    /// written.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        self.sweep.validate()?;
        self.mitigation.validate()?;
        self.pairwise.validate()?;
        Ok(())
    }

    /// Hash of the canonical (JSON) serialization; the identity printed on
    /// every run and recorded in manifests.
    ///
    /// The output root is delivery, not identity: writing the same experiment
    /// somewhere else keeps the hash, so `[output]` is excluded.
    pub fn sha256_hex(&self) -> String {
        let mut canon = self.clone();
        canon.output = OutputConfig::default();
        let bytes = serde_json::to_vec(&canon).expect("config serialization cannot fail");
        let digest = Sha256::digest(&bytes);
        let mut hex = String::with_capacity(64);
        for b in digest {
            let _ = write!(hex, "{b:02x}");
        }
        hex
    }

    /// Shrink the run to smoke-test size: fewer runs, epochs, and tasks, a
    /// smaller generated dataset, and a tighter checkpoint cadence. Not
    /// faithful to the defaults; intended for CI and quick iteration.
    pub fn apply_quick_preset(&mut self) {
        self.protocol.n_runs = self.protocol.n_runs.min(2);
        self.train.epochs = self.train.epochs.min(40);
        self.train.eval_every = self.train.eval_every.min(20);
        self.sweep.m_tasks = self.sweep.m_tasks.min(8);
        if !self.task.uses_files() {
            // Keep the generator's divisibility requirements intact.
            let unit = match self.task.generator.as_str() {
                "blobs" => self.task.num_classes.max(1),
                _ => 4,
            };
            let target = 400usize.div_ceil(unit) * unit;
            if self.task.n > target {
                self.task.n = target;
            }
        }
    }
}
