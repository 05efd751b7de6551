//! Group-structured dataset construction.
//!
//! A [`GroupedDataset`] is a dense feature matrix where every row carries a
//! class label *and* a group id. All experimental protocols operate on this
//! type: the synthetic two-group generator ([`gen_teaser_task`]), class-pair
//! stitching ([`stitch_binary_task`]), stratified splitting, group balancing,
//! the mitigation helpers ([`augment_group`], [`oversample_weights`]), and
//! the IDX/CSV loaders.
//!
//! Every operation that subsamples or shuffles takes an explicit seed and is
//! a pure function of its inputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Dense feature matrix with per-row class and group annotations.
///
/// Invariants (checked by [`GroupedDataset::new`]): `features.len() ==
/// n * feature_dim`, all entries finite, every label is below
/// `class_names.len()` and every group id below `group_names.len()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedDataset {
    /// Row-major `n x feature_dim` matrix.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// Class id per row, in `[0, num_classes)`.
    pub labels: Vec<usize>,
    /// Group id per row, in `[0, num_groups)`.
    pub groups: Vec<usize>,
    /// Display names; the length defines the class count.
    pub class_names: Vec<String>,
    /// Display names; the length defines the group count.
    pub group_names: Vec<String>,
}

impl GroupedDataset {
    pub fn new(
        features: Vec<f64>,
        feature_dim: usize,
        labels: Vec<usize>,
        groups: Vec<usize>,
        class_names: Vec<String>,
        group_names: Vec<String>,
    ) -> Result<Self> {
        let ds = GroupedDataset {
            features,
            feature_dim,
            labels,
            groups,
            class_names,
            group_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 {
            return Err(Error::invalid("dataset", "feature_dim must be positive"));
        }
        let n = self.labels.len();
        if self.groups.len() != n || self.features.len() != n * self.feature_dim {
            return Err(Error::shape(
                "dataset construction",
                format!("{n} labels, {n} groups, {} feature values", n * self.feature_dim),
                format!(
                    "{} labels, {} groups, {} feature values",
                    self.labels.len(),
                    self.groups.len(),
                    self.features.len()
                ),
            ));
        }
        if self.class_names.is_empty() || self.group_names.is_empty() {
            return Err(Error::invalid("dataset", "class and group name lists must be non-empty"));
        }
        for (i, &x) in self.features.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::invalid(
                    "dataset",
                    format!("non-finite feature value at row {}, column {}", i / self.feature_dim, i % self.feature_dim),
                ));
            }
        }
        for &y in &self.labels {
            if y >= self.num_classes() {
                return Err(Error::LabelOutOfRange {
                    label: y,
                    num_classes: self.num_classes(),
                });
            }
        }
        for &g in &self.groups {
            if g >= self.num_groups() {
                return Err(Error::UnknownGroup {
                    group: g,
                    num_groups: self.num_groups(),
                });
            }
        }
        Ok(())
    }

    /// Number of rows.
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Row count per group.
    pub fn group_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_groups()];
        for &g in &self.groups {
            counts[g] += 1;
        }
        counts
    }

    /// `counts[group][label]` over all rows.
    pub fn cell_counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0usize; self.num_classes()]; self.num_groups()];
        for (&g, &y) in self.groups.iter().zip(&self.labels) {
            counts[g][y] += 1;
        }
        counts
    }

    /// Label histogram of one group.
    pub fn group_label_histogram(&self, group: usize) -> Result<Vec<usize>> {
        if group >= self.num_groups() {
            return Err(Error::UnknownGroup {
                group,
                num_groups: self.num_groups(),
            });
        }
        Ok(self.cell_counts().swap_remove(group))
    }

    /// Indices of rows belonging to `group`.
    pub fn group_indices(&self, group: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.groups[i] == group).collect()
    }

    /// New dataset containing the given rows (in the given order); names are
    /// preserved, so label/group id spaces are unchanged.
    pub fn subset(&self, indices: &[usize]) -> GroupedDataset {
        let mut features = Vec::with_capacity(indices.len() * self.feature_dim);
        let mut labels = Vec::with_capacity(indices.len());
        let mut groups = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
            groups.push(self.groups[i]);
        }
        GroupedDataset {
            features,
            feature_dim: self.feature_dim,
            labels,
            groups,
            class_names: self.class_names.clone(),
            group_names: self.group_names.clone(),
        }
    }

    /// Rows of one group only (names preserved).
    pub fn filter_group(&self, group: usize) -> Result<GroupedDataset> {
        if group >= self.num_groups() {
            return Err(Error::UnknownGroup {
                group,
                num_groups: self.num_groups(),
            });
        }
        let idx = self.group_indices(group);
        if idx.is_empty() {
            return Err(Error::EmptySelection {
                context: "group filter",
                why: format!("group {group} ({}) has no rows", self.group_names[group]),
            });
        }
        Ok(self.subset(&idx))
    }
}

/// Parameters of a synthetic task generator.
///
/// `generator` selects the family: `"teaser"` (two-group binary task with a
/// linear and a sine boundary) or `"blobs"` (single-group multi-class
/// Gaussian blobs, used by the pairwise-difficulty analysis).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub generator: String,
    /// Total row count.
    pub n: usize,
    /// Symmetric label-flip probability, applied after boundary labeling.
    pub noise: f64,
    /// Teaser: width of the empty band around each group's boundary.
    pub margin: f64,
    /// Teaser: sine-boundary frequency of group 1 (the difficulty knob).
    pub frequency: f64,
    /// Blobs: number of classes.
    pub num_classes: usize,
    /// Blobs: per-class Gaussian standard deviation.
    pub spread: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            generator: "teaser".to_string(),
            n: 2000,
            noise: 0.0,
            margin: 0.1,
            frequency: 3.0,
            num_classes: 6,
            spread: 0.35,
            seed: 0,
        }
    }
}

impl TaskSpec {
    /// Run the selected generator.
    pub fn generate(&self) -> Result<GroupedDataset> {
        match self.generator.as_str() {
            "teaser" => gen_teaser_task(self.n, self.margin, self.frequency, self.noise, self.seed),
            "blobs" => gen_blobs_task(self.n, self.num_classes, self.spread, self.noise, self.seed),
            other => Err(Error::config(format!(
                "unknown generator {other:?} (expected \"teaser\" or \"blobs\")"
            ))),
        }
    }
}

/// Amplitude of the sine boundary, as a fraction of the `[-1, 1]` y-range
/// half-width.
pub const TEASER_AMPLITUDE: f64 = 0.5;

/// Two-group, two-class task on `[-1, 1]^2` with controllable per-group
/// difficulty.
///
/// Group 0 is separated by the horizontal line `y = 0`; group 1 by the curve
/// `y = 0.5 * sin(2 * pi * frequency * x)`. Both groups get an empty band of
/// width `margin` normal to their own boundary, and exactly `n/4` rows are
/// generated in each (group, label) cell before `noise` flips labels
/// symmetrically. With `frequency = 0` the two groups are
/// distribution-identical (the null task); higher frequencies make group 1
/// harder while leaving group 0 untouched.
///
/// Note the groups overlap spatially: between the two boundaries the same
/// region carries opposite labels depending on group, so the *combined* task
/// is not perfectly learnable from (x, y) alone even though each group is in
/// isolation.
pub fn gen_teaser_task(
    n: usize,
    margin: f64,
    frequency: f64,
    noise: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if n < 4 || n % 4 != 0 {
        return Err(Error::invalid(
            "task size",
            format!("n must be a positive multiple of 4 for equal (group,label) cells, got {n}"),
        ));
    }
    if !margin.is_finite() || !(0.0..1.0).contains(&margin) {
        return Err(Error::invalid("margin", format!("must be in [0, 1), got {margin}")));
    }
    if !frequency.is_finite() || frequency < 0.0 {
        return Err(Error::invalid("frequency", format!("must be >= 0, got {frequency}")));
    }
    if !noise.is_finite() || !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid("noise", format!("must be in [0, 1], got {noise}")));
    }

    let boundary = |group: usize, x: f64| -> f64 {
        match group {
            0 => 0.0,
            _ => TEASER_AMPLITUDE * (2.0 * std::f64::consts::PI * frequency * x).sin(),
        }
    };

    // Separate streams so the geometry is identical across noise levels.
    let mut geom_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "teaser:geometry", 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "teaser:noise", 0));

    let per_cell = n / 4;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    for group in 0..2 {
        for label in 0..2 {
            for _ in 0..per_cell {
                let x = geom_rng.gen_range(-1.0..1.0);
                let b = boundary(group, x);
                let y = if label == 1 {
                    geom_rng.gen_range((b + margin / 2.0)..1.0)
                } else {
                    geom_rng.gen_range(-1.0..(b - margin / 2.0))
                };
                features.push(x);
                features.push(y);
                labels.push(label);
                groups.push(group);
            }
        }
    }
    for label in labels.iter_mut() {
        if noise_rng.gen::<f64>() < noise {
            *label = 1 - *label;
        }
    }

    GroupedDataset::new(
        features,
        2,
        labels,
        groups,
        vec!["0".to_string(), "1".to_string()],
        vec!["group0".to_string(), "group1".to_string()],
    )
}

/// Single-group multi-class task: `num_classes` isotropic Gaussian blobs with
/// means spaced on the unit circle. Used where the protocols need more than
/// two classes (pairwise difficulty analysis) without external data.
pub fn gen_blobs_task(
    n: usize,
    num_classes: usize,
    spread: f64,
    noise: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("num_classes", format!("need >= 2 classes, got {num_classes}")));
    }
    if n < num_classes || n % num_classes != 0 {
        return Err(Error::invalid(
            "task size",
            format!("n must be a positive multiple of num_classes={num_classes}, got {n}"),
        ));
    }
    if !spread.is_finite() || spread <= 0.0 {
        return Err(Error::invalid("spread", format!("must be > 0, got {spread}")));
    }
    if !noise.is_finite() || !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid("noise", format!("must be in [0, 1], got {noise}")));
    }

    let mut geom_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "blobs:geometry", 0));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "blobs:noise", 0));
    let per_class = n / num_classes;
    let mut features = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for class in 0..num_classes {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / num_classes as f64;
        let (cx, cy) = (angle.cos(), angle.sin());
        for _ in 0..per_class {
            let (gx, gy) = standard_normal_pair(&mut geom_rng);
            features.push(cx + spread * gx);
            features.push(cy + spread * gy);
            labels.push(class);
        }
    }
    for label in labels.iter_mut() {
        if noise_rng.gen::<f64>() < noise {
            // Relabel uniformly among the other classes.
            let other = noise_rng.gen_range(0..num_classes - 1);
            *label = if other >= *label { other + 1 } else { other };
        }
    }

    let groups = vec![0usize; n];
    GroupedDataset::new(
        features,
        2,
        labels,
        groups,
        (0..num_classes).map(|c| c.to_string()).collect(),
        vec!["all".to_string()],
    )
}

/// Box-Muller transform; `rand` ships no Gaussian distribution by itself.
fn standard_normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// Feature rows of a single source class, extracted for stitching.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassSlice {
    /// Row-major `n x feature_dim`.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    /// Display name carried into the stitched dataset's group names.
    pub name: String,
}

impl ClassSlice {
    pub fn n(&self) -> usize {
        if self.feature_dim == 0 {
            0
        } else {
            self.features.len() / self.feature_dim
        }
    }

    /// Keep only the first `n` rows (deterministic truncation).
    pub fn truncate(&mut self, n: usize) {
        if n < self.n() {
            self.features.truncate(n * self.feature_dim);
        }
    }
}

/// Extract all rows of one class as a [`ClassSlice`].
pub fn class_slice(ds: &GroupedDataset, class: usize) -> Result<ClassSlice> {
    if class >= ds.num_classes() {
        return Err(Error::UnknownClass {
            class,
            why: format!("dataset has {} classes", ds.num_classes()),
        });
    }
    let mut features = Vec::new();
    for i in 0..ds.n() {
        if ds.labels[i] == class {
            features.extend_from_slice(ds.feature_row(i));
        }
    }
    if features.is_empty() {
        return Err(Error::EmptySelection {
            context: "class slice",
            why: format!("class {class} ({}) has no rows", ds.class_names[class]),
        });
    }
    Ok(ClassSlice {
        features,
        feature_dim: ds.feature_dim,
        name: ds.class_names[class].clone(),
    })
}

/// Merge two class pairs into one two-group binary task.
///
/// Label 0 is the union of the first slice of each pair, label 1 the union of
/// the second; the group id records which pair a row came from (`pair_a` ->
/// group 0, `pair_b` -> group 1). All four cells are subsampled (seeded,
/// without replacement) to the smallest slice size, so groups end up the same
/// size with identical label distributions and zero group/label correlation.
///
/// The four slices are assumed disjoint (they come from distinct source
/// classes).
pub fn stitch_binary_task(
    pair_a: (&ClassSlice, &ClassSlice),
    pair_b: (&ClassSlice, &ClassSlice),
    seed: u64,
) -> Result<GroupedDataset> {
    let slices = [pair_a.0, pair_a.1, pair_b.0, pair_b.1];
    let dim = slices[0].feature_dim;
    for s in &slices {
        if s.feature_dim != dim {
            return Err(Error::shape(
                "stitch_binary_task",
                format!("feature_dim {dim}"),
                format!("slice {:?} has feature_dim {}", s.name, s.feature_dim),
            ));
        }
        if s.n() == 0 {
            return Err(Error::EmptySelection {
                context: "stitch_binary_task",
                why: format!("slice {:?} is empty", s.name),
            });
        }
    }
    let cell = slices.iter().map(|s| s.n()).min().unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "stitch", 0));
    let mut features = Vec::with_capacity(4 * cell * dim);
    let mut labels = Vec::with_capacity(4 * cell);
    let mut groups = Vec::with_capacity(4 * cell);
    // Cell order: (group 0, label 0), (g0, l1), (g1, l0), (g1, l1).
    for (slot, slice) in slices.iter().enumerate() {
        let mut idx: Vec<usize> = (0..slice.n()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(cell);
        idx.sort_unstable();
        for i in idx {
            features.extend_from_slice(&slice.features[i * dim..(i + 1) * dim]);
            labels.push(slot % 2);
            groups.push(slot / 2);
        }
    }

    GroupedDataset::new(
        features,
        dim,
        labels,
        groups,
        vec!["0".to_string(), "1".to_string()],
        vec![
            format!("{}|{}", pair_a.0.name, pair_a.1.name),
            format!("{}|{}", pair_b.0.name, pair_b.1.name),
        ],
    )
}

/// Split into disjoint train/test sets, stratified by (group, label) cell.
///
/// Each cell contributes `round(test_fraction * cell_size)` rows to the test
/// set, clamped so both splits keep at least one row per cell; cells need at
/// least 2 rows. Deterministic in `seed`.
pub fn stratified_split(
    ds: &GroupedDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(GroupedDataset, GroupedDataset)> {
    if !test_fraction.is_finite() || !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::invalid(
            "test_fraction",
            format!("must be in (0, 1), got {test_fraction}"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for group in 0..ds.num_groups() {
        for label in 0..ds.num_classes() {
            let mut cell: Vec<usize> = (0..ds.n())
                .filter(|&i| ds.groups[i] == group && ds.labels[i] == label)
                .collect();
            if cell.is_empty() {
                continue;
            }
            if cell.len() < 2 {
                return Err(Error::InsufficientData {
                    why: format!(
                        "stratified split needs >= 2 rows per (group,label) cell; \
                         cell (group {group}, label {label}) has {}",
                        cell.len()
                    ),
                });
            }
            cell.shuffle(&mut rng);
            let want = (test_fraction * cell.len() as f64).round() as usize;
            let n_test = want.clamp(1, cell.len() - 1);
            test_idx.extend_from_slice(&cell[..n_test]);
            train_idx.extend_from_slice(&cell[n_test..]);
        }
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((ds.subset(&train_idx), ds.subset(&test_idx)))
}

/// Downsample so every group has the same size *and* the same label
/// histogram: each (group, label) cell is reduced to the minimum count of
/// that label across groups.
///
/// Errors if a label is present in some groups but missing from another
/// (matching is then impossible); see [`balance_group_sizes`] for the
/// size-only fallback.
pub fn balance_groups(ds: &GroupedDataset, seed: u64) -> Result<GroupedDataset> {
    let counts = ds.cell_counts();
    for (g, c) in counts.iter().enumerate() {
        if c.iter().sum::<usize>() == 0 {
            return Err(Error::EmptySelection {
                context: "balance_groups",
                why: format!("group {g} ({}) has no rows", ds.group_names[g]),
            });
        }
    }
    let mut minima = vec![usize::MAX; ds.num_classes()];
    let mut offending = Vec::new();
    for label in 0..ds.num_classes() {
        let min = (0..ds.num_groups()).map(|g| counts[g][label]).min().unwrap();
        let max = (0..ds.num_groups()).map(|g| counts[g][label]).max().unwrap();
        if min == 0 && max > 0 {
            for g in 0..ds.num_groups() {
                if counts[g][label] == 0 {
                    offending.push(format!("(group {g}, label {label})"));
                }
            }
        }
        minima[label] = min;
    }
    if !offending.is_empty() {
        return Err(Error::MatchedDistribution {
            why: format!(
                "label missing from some groups: {}; use size-only balancing if label \
                 distributions need not match",
                offending.join(", ")
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "balance", 0));
    let mut keep = Vec::new();
    for group in 0..ds.num_groups() {
        for label in 0..ds.num_classes() {
            let mut cell: Vec<usize> = (0..ds.n())
                .filter(|&i| ds.groups[i] == group && ds.labels[i] == label)
                .collect();
            cell.shuffle(&mut rng);
            cell.truncate(minima[label]);
            keep.extend_from_slice(&cell);
        }
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Downsample every group to the smallest group size, ignoring labels.
/// The opt-in alternative when label distributions cannot be matched.
pub fn balance_group_sizes(ds: &GroupedDataset, seed: u64) -> Result<GroupedDataset> {
    let counts = ds.group_counts();
    let min = *counts.iter().min().unwrap();
    if min == 0 {
        let g = counts.iter().position(|&c| c == 0).unwrap();
        return Err(Error::EmptySelection {
            context: "balance_group_sizes",
            why: format!("group {g} ({}) has no rows", ds.group_names[g]),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "balance_sizes", 0));
    let mut keep = Vec::new();
    for group in 0..ds.num_groups() {
        let mut idx = ds.group_indices(group);
        idx.shuffle(&mut rng);
        idx.truncate(min);
        keep.extend_from_slice(&idx);
    }
    keep.sort_unstable();
    Ok(ds.subset(&keep))
}

/// Grow one group by drawing extra rows from a reserve pool.
///
/// The target group ends up with `round(factor * original)` rows; other
/// groups are untouched. Draws are without replacement from `reserve`, which
/// must contain only rows of the target group and share the base dataset's
/// schema. Appended rows keep their reserve order after a seeded shuffle.
pub fn augment_group(
    base: &GroupedDataset,
    reserve: &GroupedDataset,
    group: usize,
    factor: f64,
    seed: u64,
) -> Result<GroupedDataset> {
    if group >= base.num_groups() {
        return Err(Error::UnknownGroup {
            group,
            num_groups: base.num_groups(),
        });
    }
    if !factor.is_finite() || factor < 1.0 {
        return Err(Error::invalid("factor", format!("must be >= 1, got {factor}")));
    }
    if reserve.feature_dim != base.feature_dim
        || reserve.num_classes() != base.num_classes()
        || reserve.num_groups() != base.num_groups()
    {
        return Err(Error::shape(
            "augment_group",
            format!(
                "reserve with feature_dim {}, {} classes, {} groups",
                base.feature_dim,
                base.num_classes(),
                base.num_groups()
            ),
            format!(
                "feature_dim {}, {} classes, {} groups",
                reserve.feature_dim,
                reserve.num_classes(),
                reserve.num_groups()
            ),
        ));
    }
    if let Some(&g) = reserve.groups.iter().find(|&&g| g != group) {
        return Err(Error::invalid(
            "reserve",
            format!("must contain only rows of group {group}, found a row of group {g}"),
        ));
    }

    let current = base.group_counts()[group];
    if current == 0 {
        return Err(Error::EmptySelection {
            context: "augment_group",
            why: format!("group {group} has no rows in the base dataset"),
        });
    }
    let target = (factor * current as f64).round() as usize;
    let deficit = target.saturating_sub(current);
    if deficit == 0 {
        return Ok(base.clone());
    }
    if reserve.n() < deficit {
        return Err(Error::InsufficientData {
            why: format!(
                "reserve has {} rows of group {group} but {deficit} are needed \
                 (target {target}, currently {current})",
                reserve.n()
            ),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "augment", 0));
    let mut idx: Vec<usize> = (0..reserve.n()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(deficit);
    idx.sort_unstable();

    let mut out = base.clone();
    for i in idx {
        out.features.extend_from_slice(reserve.feature_row(i));
        out.labels.push(reserve.labels[i]);
        out.groups.push(reserve.groups[i]);
    }
    Ok(out)
}

/// How a [`Sampler`] chooses indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Uniform,
    Weighted,
}

/// Weighted, with-replacement batch index sampler.
///
/// The sampler itself is immutable; call [`Sampler::stream`] to obtain a
/// drawing cursor. Weights are normalized internally, so only ratios matter:
/// a weight-2 row is drawn with exactly the probability of two weight-1
/// copies of that row under uniform sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampler {
    pub mode: SamplerMode,
    /// Per-row weights; empty in uniform mode.
    pub weights: Vec<f64>,
    pub seed: u64,
}

impl Sampler {
    pub fn uniform(seed: u64) -> Self {
        Sampler {
            mode: SamplerMode::Uniform,
            weights: Vec::new(),
            seed,
        }
    }

    pub fn weighted(weights: Vec<f64>, seed: u64) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("sampler weights", "weight list is empty"));
        }
        let mut any_positive = false;
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::invalid(
                    "sampler weights",
                    format!("weight {w} at row {i} (weights must be finite and >= 0)"),
                ));
            }
            any_positive |= w > 0.0;
        }
        if !any_positive {
            return Err(Error::invalid("sampler weights", "at least one weight must be positive"));
        }
        Ok(Sampler {
            mode: SamplerMode::Weighted,
            weights,
            seed,
        })
    }

    /// Same sampler, different seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Start drawing indices in `[0, n_rows)`. Weighted mode requires one
    /// weight per row.
    pub fn stream(&self, n_rows: usize) -> Result<SamplerStream> {
        if n_rows == 0 {
            return Err(Error::EmptySelection {
                context: "sampler stream",
                why: "cannot sample from an empty dataset".to_string(),
            });
        }
        let cumulative = match self.mode {
            SamplerMode::Uniform => Vec::new(),
            SamplerMode::Weighted => {
                if self.weights.len() != n_rows {
                    return Err(Error::shape(
                        "sampler stream",
                        format!("{n_rows} weights"),
                        format!("{}", self.weights.len()),
                    ));
                }
                let mut cumulative = Vec::with_capacity(n_rows);
                let mut total = 0.0;
                for &w in &self.weights {
                    total += w;
                    cumulative.push(total);
                }
                cumulative
            }
        };
        Ok(SamplerStream {
            cumulative,
            n_rows,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }
}

/// Source of mini-batch index streams; implemented by [`SamplerStream`] and
/// by test doubles that replay or remap recorded streams.
pub trait IndexStream {
    fn next_batch(&mut self, batch_size: usize) -> Vec<usize>;
}

///// Drawing cursor over a [`Sampler`]: i.i.d. with-replacement categorical
/// draws by weight.
#[derive(Clone, Debug)]
pub struct SamplerStream {
    /// Cumulative weights; empty for uniform mode.
    cumulative: Vec<f64>,
    n_rows: usize,
    rng: ChaCha8Rng,
}

impl SamplerStream {
    pub fn next_index(&mut self) -> usize {
        if self.cumulative.is_empty() {
            return self.rng.gen_range(0..self.n_rows);
        }
        let total = *self.cumulative.last().unwrap();
        let u = self.rng.gen::<f64>() * total;
        // First index whose cumulative weight exceeds u; zero-weight rows
        // have zero-width intervals and are never selected.
        self.cumulative.partition_point(|&c| c <= u).min(self.n_rows - 1)
    }
}

impl IndexStream for SamplerStream {
    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        (0..batch_size).map(|_| self.next_index()).collect()
    }
}

/// Sampler that draws the target group's rows with the given weight and all
/// other rows with weight 1 (seed 0; reseed with [`Sampler::with_seed`]).
pub fn oversample_weights(ds: &GroupedDataset, group: usize, weight: f64) -> Result<Sampler> {
    if group >= ds.num_groups() {
        return Err(Error::UnknownGroup {
            group,
            num_groups: ds.num_groups(),
        });
    }
    if !weight.is_finite() || weight <= 0.0 {
        return Err(Error::invalid("oversample weight", format!("must be > 0, got {weight}")));
    }
    let weights = ds
        .groups
        .iter()
        .map(|&g| if g == group { weight } else { 1.0 })
        .collect();
    Sampler::weighted(weights, 0)
}

const IDX_MAGIC_IMAGES: u32 = 0x0000_0803;
const IDX_MAGIC_LABELS: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST-family binary format) as a
/// single-group dataset with pixel features scaled to `[0, 1]`.
///
/// Only unsigned-byte data is accepted: magic `0x00000803` for a rank-3 image
/// tensor and `0x00000801` for a rank-1 label vector, all sizes big-endian.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<GroupedDataset> {
    let image_bytes = fs::read(images_path).map_err(Error::io(images_path))?;
    let label_bytes = fs::read(labels_path).map_err(Error::io(labels_path))?;

    let (n_images, rows, cols, pixels) = parse_idx_images(images_path, &image_bytes)?;
    let labels_u8 = parse_idx_labels(labels_path, &label_bytes)?;
    if labels_u8.len() != n_images {
        return Err(Error::file_format(
            labels_path,
            format!("label count {} does not match image count {n_images}", labels_u8.len()),
        ));
    }

    let feature_dim = rows * cols;
    let features: Vec<f64> = pixels.iter().map(|&b| f64::from(b) / 255.0).collect();
    let labels: Vec<usize> = labels_u8.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    GroupedDataset::new(
        features,
        feature_dim,
        labels,
        vec![0; n_images],
        (0..num_classes).map(|c| c.to_string()).collect(),
        vec!["all".to_string()],
    )
}

fn read_be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::file_format(
            path,
            format!("truncated: need 4 bytes at offset {offset}, file has {}", bytes.len()),
        ));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn parse_idx_images<'a>(path: &Path, bytes: &'a [u8]) -> Result<(usize, usize, usize, &'a [u8])> {
    let magic = read_be_u32(path, bytes, 0)?;
    if magic != IDX_MAGIC_IMAGES {
        return Err(Error::file_format(
            path,
            format!("bad magic {magic:#010x} at offset 0 (expected {IDX_MAGIC_IMAGES:#010x} for unsigned-byte images)"),
        ));
    }
    let n = read_be_u32(path, bytes, 4)? as usize;
    let rows = read_be_u32(path, bytes, 8)? as usize;
    let cols = read_be_u32(path, bytes, 12)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::file_format(path, format!("zero image dimensions {rows}x{cols} at offset 8")));
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() != expected {
        return Err(Error::file_format(
            path,
            format!(
                "expected {expected} bytes for {n} images of {rows}x{cols}, file has {} (data starts at offset 16)",
                bytes.len()
            ),
        ));
    }
    Ok((n, rows, cols, &bytes[16..]))
}

fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_be_u32(path, bytes, 0)?;
    if magic != IDX_MAGIC_LABELS {
        return Err(Error::file_format(
            path,
            format!("bad magic {magic:#010x} at offset 0 (expected {IDX_MAGIC_LABELS:#010x} for unsigned-byte labels)"),
        ));
    }
    let n = read_be_u32(path, bytes, 4)? as usize;
    let expected = 8 + n;
    if bytes.len() != expected {
        return Err(Error::file_format(
            path,
            format!("expected {expected} bytes for {n} labels, file has {} (data starts at offset 8)", bytes.len()),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Write an IDX image/label file pair (inverse of [`load_idx`], for tests and
/// fixture tooling).
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    pixels: &[u8],
    rows: usize,
    cols: usize,
    labels: &[u8],
) -> Result<()> {
    let n = labels.len();
    if rows == 0 || cols == 0 || pixels.len() != n * rows * cols {
        return Err(Error::shape(
            "write_idx",
            format!("{n} images of {rows}x{cols} = {} pixel bytes", n * rows * cols),
            format!("{} pixel bytes", pixels.len()),
        ));
    }
    let mut image_bytes = Vec::with_capacity(16 + pixels.len());
    image_bytes.extend_from_slice(&IDX_MAGIC_IMAGES.to_be_bytes());
    image_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    image_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    image_bytes.extend_from_slice(pixels);
    fs::write(images_path, image_bytes).map_err(Error::io(images_path))?;

    let mut label_bytes = Vec::with_capacity(8 + n);
    label_bytes.extend_from_slice(&IDX_MAGIC_LABELS.to_be_bytes());
    label_bytes.extend_from_slice(&(n as u32).to_be_bytes());
    label_bytes.extend_from_slice(labels);
    fs::write(labels_path, label_bytes).map_err(Error::io(labels_path))?;
    Ok(())
}

/// Restrict to the given classes and re-index labels densely in the order of
/// `classes` (e.g. `[1, 7]` maps label 1 -> 0 and label 7 -> 1).
pub fn select_classes(ds: &GroupedDataset, classes: &[usize]) -> Result<GroupedDataset> {
    if classes.is_empty() {
        return Err(Error::invalid("class selection", "class list is empty"));
    }
    let mut remap = vec![None; ds.num_classes()];
    for (new, &class) in classes.iter().enumerate() {
        if class >= ds.num_classes() {
            return Err(Error::UnknownClass {
                class,
                why: format!("dataset has {} classes", ds.num_classes()),
            });
        }
        if remap[class].is_some() {
            return Err(Error::invalid("class selection", format!("class {class} listed twice")));
        }
        remap[class] = Some(new);
    }

    let mut present = vec![false; classes.len()];
    let mut keep = Vec::new();
    for i in 0..ds.n() {
        if let Some(new) = remap[ds.labels[i]] {
            present[new] = true;
            keep.push(i);
        }
    }
    for (new, &class) in classes.iter().enumerate() {
        if !present[new] {
            return Err(Error::UnknownClass {
                class,
                why: "class has no rows in the dataset".to_string(),
            });
        }
    }

    let mut out = ds.subset(&keep);
    out.labels = out.labels.iter().map(|&y| remap[y].unwrap()).collect();
    out.class_names = classes.iter().map(|&c| ds.class_names[c].clone()).collect();
    Ok(out)
}

/// Write the dataset as CSV with header `feature_0..feature_{d-1},label,group`.
/// Feature values are printed with round-trip precision.
pub fn write_csv(ds: &GroupedDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for j in 0..ds.feature_dim {
        let _ = write!(out, "feature_{j},");
    }
    out.push_str("label,group\n");
    for i in 0..ds.n() {
        for &x in ds.feature_row(i) {
            let _ = write!(out, "{x},");
        }
        let _ = writeln!(out, "{},{}", ds.labels[i], ds.groups[i]);
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
    }
    fs::write(path, out).map_err(Error::io(path))
}

/// Read a dataset written by [`write_csv`]. Class and group names are
/// synthesized from the ids found in the file.
pub fn read_csv(path: &Path) -> Result<GroupedDataset> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::file_format(path, "empty file"))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.len() < 3
        || columns[columns.len() - 2] != "label"
        || columns[columns.len() - 1] != "group"
    {
        return Err(Error::file_format(
            path,
            "header must be feature_0..feature_{d-1},label,group".to_string(),
        ));
    }
    let feature_dim = columns.len() - 2;
    for (j, name) in columns[..feature_dim].iter().enumerate() {
        if *name != format!("feature_{j}") {
            return Err(Error::file_format(
                path,
                format!("column {j} named {name:?}, expected \"feature_{j}\""),
            ));
        }
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for (line_no, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::file_format(
                path,
                format!("line {}: expected {} fields, got {}", line_no + 1, columns.len(), fields.len()),
            ));
        }
        for f in &fields[..feature_dim] {
            let x: f64 = f.parse().map_err(|_| {
                Error::file_format(path, format!("line {}: bad feature value {f:?}", line_no + 1))
            })?;
            features.push(x);
        }
        let label: usize = fields[feature_dim].parse().map_err(|_| {
            Error::file_format(path, format!("line {}: bad label {:?}", line_no + 1, fields[feature_dim]))
        })?;
        let group: usize = fields[feature_dim + 1].parse().map_err(|_| {
            Error::file_format(path, format!("line {}: bad group {:?}", line_no + 1, fields[feature_dim + 1]))
        })?;
        labels.push(label);
        groups.push(group);
    }
    if labels.is_empty() {
        return Err(Error::file_format(path, "no data rows"));
    }
    let num_classes = labels.iter().copied().max().unwrap() + 1;
    let num_groups = groups.iter().copied().max().unwrap() + 1;
    GroupedDataset::new(
        features,
        feature_dim,
        labels,
        groups,
        (0..num_classes).map(|c| c.to_string()).collect(),
        (0..num_groups).map(|g| g.to_string()).collect(),
    )
}
