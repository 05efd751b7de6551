//! Mini-batch SGD with momentum, weight decay, and the optional
//! input-gradient penalty.
//!
//! Training is deterministic: given the initialized model, the datasets, the
//! sampler seed, and the config, every parameter and every checkpoint value
//! is reproduced bitwise. The update order is fixed (see [`sgd_step`]) and
//! all randomness flows through the index stream.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{GroupedDataset, IndexStream, Sampler};
use crate::error::{Error, Result};
use crate::nn::penalty::penalty_backward_with_value;
use crate::nn::{backward_with_loss, GradPenalty, Gradients, Mlp, Standardizer};

fn default_lr() -> f64 {
    0.01
}
fn default_momentum() -> f64 {
    0.9
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_epochs() -> usize {
    500
}
fn default_batch_size() -> usize {
    128
}
fn default_eval_every() -> usize {
    250
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Seed for the mini-batch sampler stream.
    #[serde(default)]
    pub seed: u64,
    /// Input-gradient penalty; absent means plain cross-entropy.
    #[serde(default)]
    pub grad_penalty: Option<GradPenalty>,
    /// Record a checkpoint every this many steps (the final step is always
    /// recorded, as is step 0).
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: default_lr(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            seed: 0,
            grad_penalty: None,
            eval_every: default_eval_every(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(
                "train.lr",
                format!("must be finite and > 0, got {}", self.lr),
            ));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "train.momentum",
                format!("must be in [0, 1), got {}", self.momentum),
            ));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "train.weight_decay",
                format!("must be finite and >= 0, got {}", self.weight_decay),
            ));
        }
        if self.epochs == 0 {
            return Err(Error::invalid("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train.batch_size", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("train.eval_every", "must be at least 1"));
        }
        if let Some(p) = &self.grad_penalty {
            p.validate()?;
        }
        Ok(())
    }
}

/// Accuracy/loss snapshot at one optimization step. Accuracies are
/// per-group, indexed like the dataset's group names; a group with no rows
/// in a split records NaN there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    pub train_acc: Vec<f64>,
    pub test_acc: Vec<f64>,
    /// Mean cross-entropy over the whole training split at this step.
    pub loss: f64,
}

/// The checkpoint series of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub checkpoints: Vec<Checkpoint>,
    pub group_names: Vec<String>,
    pub train_group_sizes: Vec<usize>,
    pub test_group_sizes: Vec<usize>,
}

impl TrainingCurve {
    fn overall(accs: &[f64], sizes: &[usize]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (&a, &n) in accs.iter().zip(sizes) {
            if n > 0 {
                num += a * n as f64;
                den += n as f64;
            }
        }
        num / den
    }

    /// Size-weighted accuracy over all groups on the test split.
    pub fn overall_test_acc(&self, index: usize) -> f64 {
        Self::overall(&self.checkpoints[index].test_acc, &self.test_group_sizes)
    }

    /// Size-weighted accuracy over all groups on the training split.
    pub fn overall_train_acc(&self, index: usize) -> f64 {
        Self::overall(&self.checkpoints[index].train_acc, &self.train_group_sizes)
    }

    /// Checkpoint with the best overall test accuracy; ties keep the
    /// earliest step.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        let mut best_acc = self.overall_test_acc(0);
        for i in 1..self.checkpoints.len() {
            let acc = self.overall_test_acc(i);
            if acc > best_acc {
                best = i;
                best_acc = acc;
            }
        }
        best
    }

    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints
            .last()
            .expect("a curve always holds the step-0 checkpoint")
    }

    /// Test-accuracy difference `group_a - group_b` at each checkpoint.
    pub fn test_disparity_series(&self, group_a: usize, group_b: usize) -> Vec<(usize, f64)> {
        self.checkpoints
            .iter()
            .map(|c| (c.step, c.test_acc[group_a] - c.test_acc[group_b]))
            .collect()
    }

    /// Write `step,group,split,accuracy,loss` rows, one per group and split
    /// per checkpoint. The loss column repeats the checkpoint's training
    /// loss on every row (it is a checkpoint-level scalar).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("step,group,split,accuracy,loss\n");
        for c in &self.checkpoints {
            for (g, name) in self.group_names.iter().enumerate() {
                out.push_str(&format!(
                    "{},{},train,{},{}\n",
                    c.step, name, c.train_acc[g], c.loss
                ));
                out.push_str(&format!(
                    "{},{},test,{},{}\n",
                    c.step, name, c.test_acc[g], c.loss
                ));
            }
        }
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(Error::io(dir))?;
            }
        }
        fs::write(path, out).map_err(Error::io(path))
    }
}

/// One fused momentum-SGD update, in this exact per-parameter order:
/// `g_total = g + weight_decay * theta`, then `v = momentum * v + g_total`,
/// then `theta -= lr * v`. Weight decay applies to biases as well.
pub fn sgd_step(
    mlp: &mut Mlp,
    grads: &Gradients,
    velocity: &mut Gradients,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((layer, g), v) in mlp
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut velocity.layers)
    {
        for ((p, &gi), vi) in layer
            .weights
            .iter_mut()
            .zip(&g.weights)
            .chain(layer.biases.iter_mut().zip(&g.biases))
            .zip(v.weights.iter_mut().chain(&mut v.biases))
        {
            let total = gi + weight_decay * *p;
            *vi = momentum * *vi + total;
            *p -= lr * *vi;
        }
    }
}

fn check_dataset(ds: &GroupedDataset, split: &'static str, mlp: &Mlp) -> Result<()> {
    if ds.n() == 0 {
        return Err(Error::EmptySelection {
            context: split,
            why: "cannot train or evaluate on an empty split".to_string(),
        });
    }
    if ds.feature_dim != mlp.spec.input_dim {
        return Err(Error::shape(
            split,
            format!("{} features per row", mlp.spec.input_dim),
            format!("{}", ds.feature_dim),
        ));
    }
    if ds.num_classes() != mlp.spec.output_dim {
        return Err(Error::shape(
            split,
            format!("{} classes", mlp.spec.output_dim),
            format!("{}", ds.num_classes()),
        ));
    }
    Ok(())
}

/// Incremental training driver. [`train`] runs it to completion; interactive
/// callers step it and read the model between steps.
pub struct Trainer {
    mlp: Mlp,
    velocity: Gradients,
    train_ds: GroupedDataset,
    test_ds: GroupedDataset,
    stream: Box<dyn IndexStream>,
    config: TrainConfig,
    step: usize,
    total_steps: usize,
    curve: TrainingCurve,
    batch_features: Vec<f64>,
    batch_labels: Vec<usize>,
}

impl Trainer {
    /// Validate everything, fit the input standardizer from the training
    /// split when the spec asks for one, and record the step-0 checkpoint.
    pub fn new(
        mlp: &Mlp,
        train_ds: GroupedDataset,
        test_ds: GroupedDataset,
        sampler: &Sampler,
        config: &TrainConfig,
    ) -> Result<Trainer> {
        let stream = sampler.stream(train_ds.n().max(1))?;
        Self::with_stream(mlp, train_ds, test_ds, Box::new(stream), config)
    }

    /// Same as [`Trainer::new`] but with an arbitrary index stream; the seam
    /// used to prove sampler properties (permutation invariance, replay).
    pub fn with_stream(
        mlp: &Mlp,
        train_ds: GroupedDataset,
        test_ds: GroupedDataset,
        stream: Box<dyn IndexStream>,
        config: &TrainConfig,
    ) -> Result<Trainer> {
        config.validate()?;
        mlp.spec.validate()?;
        if mlp.spec.output_dim < 2 {
            return Err(Error::invalid(
                "model spec",
                "classification training needs output_dim >= 2",
            ));
        }
        check_dataset(&train_ds, "training split", mlp)?;
        check_dataset(&test_ds, "test split", mlp)?;
        if let Some(p) = &config.grad_penalty {
            // Fail fast instead of at the first step.
            if p.mode == super::PenaltyMode::Exact
                && mlp.spec.activation == super::Activation::Relu
                && p.lambda > 0.0
            {
                return Err(Error::UnsupportedActivation { activation: "relu" });
            }
        }

        let mut mlp = mlp.clone();
        if mlp.spec.input_batchnorm {
            mlp.standardizer = Some(Standardizer::fit(&train_ds.features, train_ds.feature_dim));
        }

        let steps_per_epoch = (train_ds.n() / config.batch_size).max(1);
        let total_steps = steps_per_epoch * config.epochs;

        let velocity = Gradients::zeros_like(&mlp);
        let curve = TrainingCurve {
            checkpoints: Vec::new(),
            group_names: train_ds.group_names.clone(),
            train_group_sizes: train_ds.group_counts(),
            test_group_sizes: test_ds.group_counts(),
        };
        let mut trainer = Trainer {
            mlp,
            velocity,
            train_ds,
            test_ds,
            stream,
            config: config.clone(),
            step: 0,
            total_steps,
            curve,
            batch_features: Vec::new(),
            batch_labels: Vec::new(),
        };
        trainer.record_checkpoint()?;
        Ok(trainer)
    }

    pub fn mlp(&self) -> &Mlp {
        &self.mlp
    }

    pub fn curve(&self) -> &TrainingCurve {
        &self.curve
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.total_steps
    }

    fn record_checkpoint(&mut self) -> Result<()> {
        let (train_acc, loss) = crate::metrics::accuracy_and_loss(&self.mlp, &self.train_ds)?;
        let (test_acc, _) = crate::metrics::accuracy_and_loss(&self.mlp, &self.test_ds)?;
        self.curve.checkpoints.push(Checkpoint {
            step: self.step,
            train_acc,
            test_acc,
            loss,
        });
        Ok(())
    }

    /// Run one optimizer step; returns `true` while more steps remain.
    /// A non-finite batch loss aborts with a divergence error carrying the
    /// last recorded checkpoint.
    pub fn step_once(&mut self) -> Result<bool> {
        if self.is_finished() {
            return Ok(false);
        }
        let d = self.train_ds.feature_dim;
        let indices = self.stream.next_batch(self.config.batch_size);
        self.batch_features.clear();
        self.batch_labels.clear();
        for &i in &indices {
            self.batch_features
                .extend_from_slice(self.train_ds.feature_row(i));
            self.batch_labels.push(self.train_ds.labels[i]);
        }
        debug_assert_eq!(self.batch_features.len(), indices.len() * d);

        let (mut loss, mut grads) =
            backward_with_loss(&self.mlp, &self.batch_features, &self.batch_labels, None)?;
        if let Some(p) = self.config.grad_penalty {
            if p.lambda > 0.0 {
                let (pval, pgrads) = penalty_backward_with_value(
                    &self.mlp,
                    &self.batch_features,
                    p.lambda,
                    p.c,
                    p.mode,
                )?;
                loss += pval;
                grads.add_scaled(&pgrads, 1.0);
            }
        }
        if !loss.is_finite() {
            // Checkpoints recorded after the loss has already exploded may
            // themselves hold non-finite values; report the last usable one.
            let last_finite = self
                .curve
                .checkpoints
                .iter()
                .rev()
                .find(|c| c.loss.is_finite())
                .cloned()
                .map(Box::new);
            return Err(Error::Divergence {
                step: self.step + 1,
                last_checkpoint: last_finite,
            });
        }
        sgd_step(
            &mut self.mlp,
            &grads,
            &mut self.velocity,
            self.config.lr,
            self.config.momentum,
            self.config.weight_decay,
        );
        self.step += 1;
        if self.step % self.config.eval_every == 0 || self.step == self.total_steps {
            self.record_checkpoint()?;
        }
        Ok(!self.is_finished())
    }

    /// Run the remaining steps to completion.
    pub fn run(&mut self) -> Result<()> {
        while self.step_once()? {}
        Ok(())
    }

    pub fn into_result(self) -> (Mlp, TrainingCurve) {
        (self.mlp, self.curve)
    }
}

/// Train to completion with mini-batches drawn from `sampler`; returns the
/// final model and its checkpoint curve.
pub fn train(
    mlp: &Mlp,
    train_ds: &GroupedDataset,
    test_ds: &GroupedDataset,
    sampler: &Sampler,
    config: &TrainConfig,
) -> Result<(Mlp, TrainingCurve)> {
    let mut trainer = Trainer::new(mlp, train_ds.clone(), test_ds.clone(), sampler, config)?;
    trainer.run()?;
    Ok(trainer.into_result())
}

/// [`train`] with an explicit index stream instead of a sampler.
pub fn train_with_stream(
    mlp: &Mlp,
    train_ds: &GroupedDataset,
    test_ds: &GroupedDataset,
    stream: Box<dyn IndexStream>,
    config: &TrainConfig,
) -> Result<(Mlp, TrainingCurve)> {
    let mut trainer = Trainer::with_stream(mlp, train_ds.clone(), test_ds.clone(), stream, config)?;
    trainer.run()?;
    Ok(trainer.into_result())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{GroupedDataset, Sampler};
    use crate::nn::{init_mlp, Activation, MlpSpec};

    /// Tiny two-group, linearly separable dataset.
    fn toy_dataset(n: usize, seed: u64) -> GroupedDataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        let mut groups = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let x = rng.gen_range(-1.0..1.0);
            let y = if label == 1 {
                rng.gen_range(0.2..1.0)
            } else {
                rng.gen_range(-1.0..-0.2)
            };
            features.extend_from_slice(&[x, y]);
            labels.push(label);
            groups.push(i / (n / 2).max(1));
        }
        GroupedDataset::new(
            features,
            2,
            labels,
            groups,
            vec!["neg".into(), "pos".into()],
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            eval_every: 50,
            ..TrainConfig::default()
        }
    }

    fn spec_2d(hidden: &[usize], batchnorm: bool) -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            hidden_widths: hidden.to_vec(),
            output_dim: 2,
            activation: Activation::Tanh,
            input_batchnorm: batchnorm,
        }
    }

    #[test]
    fn learns_a_separable_problem() {
        let ds = toy_dataset(128, 1);
        let (train_ds, test_ds) = crate::data::stratified_split(&ds, 0.25, 2).unwrap();
        let mlp = init_mlp(&spec_2d(&[8], false), 3).unwrap();
        let (model, curve) = train(
            &mlp,
            &train_ds,
            &test_ds,
            &Sampler::uniform(4),
            &quick_config(30),
        )
        .unwrap();
        let last = curve.checkpoints.len() - 1;
        assert!(
            curve.overall_test_acc(last) > 0.95,
            "final test accuracy {}",
            curve.overall_test_acc(last)
        );
        assert!(model.standardizer.is_none());
    }

    #[test]
    fn training_is_deterministic() {
        let ds = toy_dataset(64, 5);
        let mlp = init_mlp(&spec_2d(&[6], true), 7).unwrap();
        let cfg = quick_config(10);
        let sampler = Sampler::uniform(9);
        let (m1, c1) = train(&mlp, &ds, &ds, &sampler, &cfg).unwrap();
        let (m2, c2) = train(&mlp, &ds, &ds, &sampler, &cfg).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(c1, c2);
        // A different sampler seed must change the trajectory.
        let (m3, _) = train(&mlp, &ds, &ds, &sampler.clone().with_seed(10), &cfg).unwrap();
        assert_ne!(m1, m3);
    }

    #[test]
    fn batchnorm_spec_fits_standardizer_from_train_split() {
        let ds = toy_dataset(64, 6);
        let mlp = init_mlp(&spec_2d(&[4], true), 1).unwrap();
        let (model, _) = train(&mlp, &ds, &ds, &Sampler::uniform(0), &quick_config(2)).unwrap();
        let std = model.standardizer.expect("standardizer fitted");
        let expect = Standardizer::fit(&ds.features, 2);
        assert_eq!(std, expect);
    }

    #[test]
    fn curve_has_step_zero_and_final_step() {
        let ds = toy_dataset(64, 7);
        let mlp = init_mlp(&spec_2d(&[4], false), 1).unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            eval_every: 7,
            ..TrainConfig::default()
        };
        let (_, curve) = train(&mlp, &ds, &ds, &Sampler::uniform(0), &cfg).unwrap();
        // 64/16 = 4 steps per epoch, 12 total; evals at 0, 7, and 12.
        let steps: Vec<usize> = curve.checkpoints.iter().map(|c| c.step).collect();
        assert_eq!(steps, vec![0, 7, 12]);
        assert!(curve.checkpoints.iter().all(|c| c.loss.is_finite()));
    }

    #[test]
    fn sgd_step_matches_hand_computation() {
        // One parameter followed over two steps with momentum and decay.
        let spec = MlpSpec {
            input_dim: 1,
            hidden_widths: vec![],
            output_dim: 1,
            activation: Activation::Tanh,
            input_batchnorm: false,
        };
        let mut mlp = init_mlp(&spec, 0).unwrap();
        mlp.layers[0].weights[0] = 1.0;
        mlp.layers[0].biases[0] = 0.0;
        let mut velocity = Gradients::zeros_like(&mlp);
        let mut grads = Gradients::zeros_like(&mlp);
        grads.layers[0].weights[0] = 0.5;

        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        sgd_step(&mut mlp, &grads, &mut velocity, lr, mu, wd);
        // g = 0.5 + 0.01*1.0 = 0.51; v = 0.51; w = 1 - 0.051 = 0.949
        assert!((mlp.layers[0].weights[0] - 0.949).abs() < 1e-15);

        grads.layers[0].weights[0] = -0.2;
        sgd_step(&mut mlp, &grads, &mut velocity, lr, mu, wd);
        // g = -0.2 + 0.00949 = -0.19051; v = 0.459 - 0.19051 = 0.26849
        // w = 0.949 - 0.026849 = 0.922151
        assert!((mlp.layers[0].weights[0] - 0.922151).abs() < 1e-12);
    }

    #[test]
    fn divergent_loss_reports_last_checkpoint() {
        let ds = toy_dataset(32, 9);
        let mlp = init_mlp(&spec_2d(&[4], false), 2).unwrap();
        let cfg = TrainConfig {
            lr: 1e12, // guaranteed blow-up
            epochs: 50,
            batch_size: 8,
            eval_every: 1,
            ..TrainConfig::default()
        };
        let err = train(&mlp, &ds, &ds, &Sampler::uniform(0), &cfg).unwrap_err();
        match err {
            Error::Divergence {
                step,
                last_checkpoint,
            } => {
                assert!(step >= 1);
                let ckpt = last_checkpoint.expect("step-0 checkpoint is always present");
                assert!(ckpt.step < step);
                assert!(ckpt.loss.is_finite());
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn empty_split_rejected() {
        let ds = toy_dataset(32, 3);
        let empty = ds.subset(&[]);
        let mlp = init_mlp(&spec_2d(&[4], false), 0).unwrap();
        let cfg = quick_config(1);
        assert!(train(&mlp, &empty, &ds, &Sampler::uniform(0), &cfg).is_err());
        assert!(train(&mlp, &ds, &empty, &Sampler::uniform(0), &cfg).is_err());
    }

    #[test]
    fn relu_with_exact_penalty_fails_fast() {
        let ds = toy_dataset(32, 3);
        let spec = MlpSpec {
            activation: Activation::Relu,
            ..spec_2d(&[4], false)
        };
        let mlp = init_mlp(&spec, 0).unwrap();
        let cfg = TrainConfig {
            grad_penalty: Some(GradPenalty {
                lambda: 10.0,
                c: 1.0,
                mode: super::super::PenaltyMode::Exact,
            }),
            ..quick_config(1)
        };
        let err = train(&mlp, &ds, &ds, &Sampler::uniform(0), &cfg).unwrap_err();
        assert!(matches!(err, Error::UnsupportedActivation { .. }));
    }

    #[test]
    fn penalized_training_shrinks_input_gradients() {
        let ds = toy_dataset(128, 11);
        let mlp = init_mlp(&spec_2d(&[8], false), 5).unwrap();
        let plain_cfg = quick_config(30);
        let pen_cfg = TrainConfig {
            grad_penalty: Some(GradPenalty {
                lambda: 10.0,
                c: 0.0, // drive gradients toward zero
                mode: super::super::PenaltyMode::Exact,
            }),
            ..plain_cfg.clone()
        };
        let sampler = Sampler::uniform(1);
        let (plain, _) = train(&mlp, &ds, &ds, &sampler, &plain_cfg).unwrap();
        let (pen, _) = train(&mlp, &ds, &ds, &sampler, &pen_cfg).unwrap();
        let norm = |m: &Mlp| -> f64 {
            let g = crate::nn::input_gradient(m, &ds.features).unwrap();
            g.chunks_exact(2)
                .map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt())
                .sum::<f64>()
                / ds.n() as f64
        };
        let (n_plain, n_pen) = (norm(&plain), norm(&pen));
        assert!(
            n_pen < 0.5 * n_plain,
            "penalty failed to shrink gradients: {n_pen} vs {n_plain}"
        );
    }

    #[test]
    fn config_defaults_fill_in_from_empty_toml() {
        let cfg: TrainConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        let cfg: TrainConfig = toml::from_str("lr = 0.5\nepochs = 3").unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.momentum, 0.9);
    }

    #[test]
    fn curve_csv_round_trip_shape() {
        let ds = toy_dataset(32, 13);
        let mlp = init_mlp(&spec_2d(&[4], false), 0).unwrap();
        let (_, curve) = train(&mlp, &ds, &ds, &Sampler::uniform(0), &quick_config(2)).unwrap();
        let dir = std::env::temp_dir().join(format!("curve-csv-{}", std::process::id()));
        let path = dir.join("curve.csv");
        curve.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,group,split,accuracy,loss"));
        // one train + one test row per group per checkpoint
        assert_eq!(
            text.lines().count(),
            1 + curve.checkpoints.len() * 2 * curve.group_names.len()
        );
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
