//! Disparity and difficulty measurements: group accuracies, estimated and
//! observed disparities with the amplification ratio, masked pairwise class
//! accuracy, separability cells, Kendall's tau, cosine distance between
//! class means, and rank transforms.
//!
//! Sign convention throughout: disparities are `group_a - group_b`, so a
//! positive value means `group_a` is the better-served group.

use serde::{Deserialize, Serialize};

use crate::data::GroupedDataset;
use crate::error::{Error, Result};
use crate::nn::{forward, Mlp};

/// Below this magnitude of the estimated disparity the ratio `d / d_tilde`
/// is reported as undefined: ratios explode near a zero denominator and the
/// regression estimator is the robust alternative.
pub const DISPARITY_DEGENERACY_THRESHOLD: f64 = 0.005;

/// Mean and standard error of a per-run sample, with the raw values kept
/// for serialization. The standard error is `None` for a single run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub se: Option<f64>,
}

impl RunStats {
    pub fn from_runs(runs: Vec<f64>) -> Result<RunStats> {
        if runs.is_empty() {
            return Err(Error::invalid("run statistics", "no runs provided"));
        }
        if let Some(bad) = runs.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "run statistics",
                format!("non-finite value {bad}"),
            ));
        }
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let se = if runs.len() > 1 {
            let var = runs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            Some((var / n).sqrt())
        } else {
            None
        };
        Ok(RunStats { runs, mean, se })
    }

    pub fn n(&self) -> usize {
        self.runs.len()
    }
}

/// Argmax with ties broken toward the lowest class id.
#[inline]
pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &z) in row.iter().enumerate().skip(1) {
        if z > row[best] {
            best = j;
        }
    }
    best
}

/// Forward the whole dataset in bounded chunks, handing each row's logits to
/// the visitor.
fn for_each_logit_row(
    mlp: &Mlp,
    ds: &GroupedDataset,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    const CHUNK: usize = 512;
    let d = ds.feature_dim;
    let k = mlp.spec.output_dim;
    let mut row = 0;
    while row < ds.n() {
        let end = (row + CHUNK).min(ds.n());
        let logits = forward(mlp, &ds.features[row * d..end * d])?;
        for (i, zrow) in logits.chunks_exact(k).enumerate() {
            visit(row + i, zrow);
        }
        row = end;
    }
    Ok(())
}

/// Per-group accuracy and mean cross-entropy in one pass; used by the
/// training-curve evaluator. Groups with no rows get NaN accuracy.
pub(crate) fn accuracy_and_loss(mlp: &Mlp, ds: &GroupedDataset) -> Result<(Vec<f64>, f64)> {
    if ds.n() == 0 {
        return Err(Error::EmptySelection {
            context: "evaluation",
            why: "cannot evaluate on an empty dataset".to_string(),
        });
    }
    if ds.num_classes() != mlp.spec.output_dim {
        return Err(Error::shape(
            "evaluation",
            format!("{} classes", mlp.spec.output_dim),
            format!("{}", ds.num_classes()),
        ));
    }
    let mut correct = vec![0usize; ds.num_groups()];
    let mut counts = vec![0usize; ds.num_groups()];
    let mut ce = 0.0;
    for_each_logit_row(mlp, ds, |idx, zrow| {
        let g = ds.groups[idx];
        counts[g] += 1;
        if argmax(zrow) == ds.labels[idx] {
            correct[g] += 1;
        }
        let max = zrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = zrow.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        ce += lse - (zrow[ds.labels[idx]] - max);
    })?;
    let acc = correct
        .iter()
        .zip(&counts)
        .map(|(&c, &n)| if n == 0 { f64::NAN } else { c as f64 / n as f64 })
        .collect();
    Ok((acc, ce / ds.n() as f64))
}

/// Fraction of argmax-correct predictions, optionally restricted to one
/// group. Argmax ties break toward the lowest class id.
pub fn group_accuracy(mlp: &Mlp, ds: &GroupedDataset, group: Option<usize>) -> Result<f64> {
    if let Some(g) = group {
        if g >= ds.num_groups() {
            return Err(Error::UnknownGroup {
                group: g,
                num_groups: ds.num_groups(),
            });
        }
        if !ds.groups.contains(&g) {
            return Err(Error::EmptySelection {
                context: "group accuracy",
                why: format!("group {:?} has no rows", ds.group_names[g]),
            });
        }
    }
    if ds.n() == 0 {
        return Err(Error::EmptySelection {
            context: "group accuracy",
            why: "dataset has no rows".to_string(),
        });
    }
    let mut correct = 0usize;
    let mut count = 0usize;
    for_each_logit_row(mlp, ds, |idx, zrow| {
        if group.is_some_and(|g| ds.groups[idx] != g) {
            return;
        }
        count += 1;
        if argmax(zrow) == ds.labels[idx] {
            correct += 1;
        }
    })?;
    Ok(correct as f64 / count as f64)
}

/// Accuracy gap between two groups, each trained and evaluated in isolation
/// (positive means the first group is easier to learn on its own).
pub fn estimated_disparity(acc_alpha_iso: f64, acc_beta_iso: f64) -> f64 {
    acc_alpha_iso - acc_beta_iso
}

/// Accuracy gap between two groups under a single model trained on both.
pub fn observed_disparity(acc_alpha_comb: f64, acc_beta_comb: f64) -> f64 {
    acc_alpha_comb - acc_beta_comb
}

/// The amplification factor `observed / estimated`; `None` when the
/// estimated disparity is within [`DISPARITY_DEGENERACY_THRESHOLD`] of zero.
pub fn amplification_ratio(d: f64, d_tilde: f64) -> Option<f64> {
    if d_tilde.abs() < DISPARITY_DEGENERACY_THRESHOLD {
        None
    } else {
        Some(d / d_tilde)
    }
}

/// Two-stage disparity audit result for one ordered group pair. All
/// accuracy series are paired by run index; per-run raw values are retained
/// in the serialized form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityReport {
    pub group_a: String,
    pub group_b: String,
    /// Stage-one accuracies: models trained on each group in isolation.
    pub acc_a_iso: RunStats,
    pub acc_b_iso: RunStats,
    /// Stage-two accuracies: per-group accuracy of jointly trained models.
    pub acc_a_comb: RunStats,
    pub acc_b_comb: RunStats,
    /// Mean estimated disparity `acc_a_iso - acc_b_iso`.
    pub d_tilde: f64,
    /// Standard error of the per-run estimated disparities (None for N=1).
    pub d_tilde_se: Option<f64>,
    /// Mean observed disparity `acc_a_comb - acc_b_comb`.
    pub d: f64,
    pub d_se: Option<f64>,
    /// `d / d_tilde`, undefined near-zero denominators.
    pub k_ratio: Option<f64>,
    /// True when the observed gap exceeds the estimated gap, in the
    /// direction of the estimated gap, by more than twice the pooled
    /// standard error. Always false when standard errors are unavailable.
    pub amplified: bool,
}

impl DisparityReport {
    /// Assemble from the four per-run accuracy series (equal run counts,
    /// paired by index).
    pub fn from_runs(
        group_a: impl Into<String>,
        group_b: impl Into<String>,
        acc_a_iso: RunStats,
        acc_b_iso: RunStats,
        acc_a_comb: RunStats,
        acc_b_comb: RunStats,
    ) -> Result<DisparityReport> {
        let n = acc_a_iso.n();
        if [&acc_b_iso, &acc_a_comb, &acc_b_comb]
            .iter()
            .any(|s| s.n() != n)
        {
            return Err(Error::IncompleteProtocol {
                why: format!(
                    "accuracy series have mismatched run counts ({}, {}, {}, {})",
                    n,
                    acc_b_iso.n(),
                    acc_a_comb.n(),
                    acc_b_comb.n()
                ),
            });
        }
        let d_tilde_runs: Vec<f64> = acc_a_iso
            .runs
            .iter()
            .zip(&acc_b_iso.runs)
            .map(|(&a, &b)| estimated_disparity(a, b))
            .collect();
        let d_runs: Vec<f64> = acc_a_comb
            .runs
            .iter()
            .zip(&acc_b_comb.runs)
            .map(|(&a, &b)| observed_disparity(a, b))
            .collect();
        let d_tilde_stats = RunStats::from_runs(d_tilde_runs)?;
        let d_stats = RunStats::from_runs(d_runs)?;
        let (d_tilde, d) = (d_tilde_stats.mean, d_stats.mean);
        let amplified = match (d_tilde_stats.se, d_stats.se) {
            (Some(se_t), Some(se_d)) => {
                let pooled = (se_t * se_t + se_d * se_d).sqrt();
                let orient = if d_tilde >= 0.0 { 1.0 } else { -1.0 };
                orient * (d - d_tilde) > 2.0 * pooled
            }
            _ => false,
        };
        Ok(DisparityReport {
            group_a: group_a.into(),
            group_b: group_b.into(),
            acc_a_iso,
            acc_b_iso,
            acc_a_comb,
            acc_b_comb,
            d_tilde,
            d_tilde_se: d_tilde_stats.se,
            d,
            d_se: d_stats.se,
            k_ratio: amplification_ratio(d, d_tilde),
            amplified,
        })
    }

    /// The same audit read from the other group's side: disparities negate,
    /// the ratio and the amplification flag are invariant.
    pub fn swapped(&self) -> DisparityReport {
        DisparityReport::from_runs(
            self.group_b.clone(),
            self.group_a.clone(),
            self.acc_b_iso.clone(),
            self.acc_a_iso.clone(),
            self.acc_b_comb.clone(),
            self.acc_a_comb.clone(),
        )
        .expect("swapping a valid report cannot fail")
    }
}

fn check_class(ds: &GroupedDataset, class: usize) -> Result<()> {
    if class >= ds.num_classes() {
        return Err(Error::UnknownClass {
            class,
            why: format!("dataset has {} classes", ds.num_classes()),
        });
    }
    if !ds.labels.contains(&class) {
        return Err(Error::UnknownClass {
            class,
            why: format!("class {:?} has no rows", ds.class_names[class]),
        });
    }
    Ok(())
}

/// Masked two-class decision: higher of the two logits wins, ties toward
/// the lower class id.
#[inline]
fn masked_pick(zrow: &[f64], i: usize, j: usize) -> usize {
    let (lo, hi) = if i < j { (i, j) } else { (j, i) };
    if zrow[hi] > zrow[lo] {
        hi
    } else {
        lo
    }
}

/// Accuracy over the rows of two classes when the model's outputs are
/// restricted to those two logits before the decision.
pub fn masked_pair_accuracy(
    mlp: &Mlp,
    ds: &GroupedDataset,
    class_i: usize,
    class_j: usize,
) -> Result<f64> {
    if class_i == class_j {
        return Err(Error::invalid(
            "masked pair",
            format!("classes must differ, got ({class_i}, {class_j})"),
        ));
    }
    check_class(ds, class_i)?;
    check_class(ds, class_j)?;
    let mut correct = 0usize;
    let mut count = 0usize;
    for_each_logit_row(mlp, ds, |idx, zrow| {
        let y = ds.labels[idx];
        if y != class_i && y != class_j {
            return;
        }
        count += 1;
        if masked_pick(zrow, class_i, class_j) == y {
            correct += 1;
        }
    })?;
    Ok(correct as f64 / count as f64)
}

/// All masked pair accuracies in one forward pass. Entry `(i, j)` is
/// [`masked_pair_accuracy`] of classes `i` and `j`; the matrix is symmetric
/// and the diagonal is fixed at 1 by convention.
pub fn pairwise_difficulty_matrix(mlp: &Mlp, ds: &GroupedDataset) -> Result<Vec<Vec<f64>>> {
    let k = ds.num_classes();
    if k < 2 {
        return Err(Error::invalid(
            "pairwise difficulty",
            format!("needs at least 2 classes, got {k}"),
        ));
    }
    for class in 0..k {
        check_class(ds, class)?;
    }
    let mut correct = vec![vec![0usize; k]; k];
    let mut count = vec![vec![0usize; k]; k];
    for_each_logit_row(mlp, ds, |idx, zrow| {
        let y = ds.labels[idx];
        for other in 0..k {
            if other == y {
                continue;
            }
            count[y][other] += 1;
            if masked_pick(zrow, y, other) == y {
                correct[y][other] += 1;
            }
        }
    })?;
    let mut matrix = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            // Rows of class i and class j together form the pair population.
            let c = correct[i][j] + correct[j][i];
            let n = count[i][j] + count[j][i];
            let acc = c as f64 / n as f64;
            matrix[i][j] = acc;
            matrix[j][i] = acc;
        }
    }
    Ok(matrix)
}

/// Count inversions (strictly decreasing pairs) via merge sort.
fn merge_count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let (left, right) = v.split_at_mut(mid);
    let mut inv = merge_count_inversions(left, &mut buf[..mid])
        + merge_count_inversions(right, &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, 0, 0);
    while i < left.len() && j < right.len() {
        if right[j] < left[i] {
            inv += (left.len() - i) as u64;
            buf[k] = right[j];
            j += 1;
        } else {
            buf[k] = left[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + left.len() - i].copy_from_slice(&left[i..]);
    buf[k + left.len() - i..n].copy_from_slice(&right[j..]);
    v.copy_from_slice(&buf[..n]);
    inv
}

fn tied_pairs(sorted: &[f64]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Kendall's tau-b (tie-corrected) rank correlation, computed in
/// `O(n log n)` by sorting and inversion counting.
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "kendall tau",
            format!("vectors of equal length ({})", a.len()),
            format!("{}", b.len()),
        ));
    }
    if a.len() < 2 {
        return Err(Error::invalid(
            "kendall tau",
            format!("needs at least 2 observations, got {}", a.len()),
        ));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kendall tau", "non-finite values"));
    }

    let n = a.len() as u64;
    let n0 = n * (n - 1) / 2;

    // Ties are numeric (`==`), but `total_cmp` orders -0.0 before +0.0;
    // canonicalize zeros so each tie block of `a` is contiguous and sorted
    // by `b` throughout, which the inversion count below relies on.
    let canon = |v: f64| if v == 0.0 { 0.0 } else { v };
    let mut order: Vec<usize> = (0..a.len()).collect();
    order.sort_by(|&i, &j| {
        canon(a[i])
            .total_cmp(&canon(a[j]))
            .then(canon(b[i]).total_cmp(&canon(b[j])))
    });

    // Tie counts: within a (n1), within b (n2), within joint (a,b) (n3).
    let mut n1 = 0u64;
    let mut n3 = 0u64;
    {
        let mut a_run = 1u64;
        let mut ab_run = 1u64;
        for w in order.windows(2) {
            let (i, j) = (w[0], w[1]);
            if a[i] == a[j] {
                a_run += 1;
                if b[i] == b[j] {
                    ab_run += 1;
                } else {
                    n3 += ab_run * (ab_run - 1) / 2;
                    ab_run = 1;
                }
            } else {
                n1 += a_run * (a_run - 1) / 2;
                a_run = 1;
                n3 += ab_run * (ab_run - 1) / 2;
                ab_run = 1;
            }
        }
        n1 += a_run * (a_run - 1) / 2;
        n3 += ab_run * (ab_run - 1) / 2;
    }
    let mut b_sorted: Vec<f64> = b.to_vec();
    b_sorted.sort_by(f64::total_cmp);
    let n2 = tied_pairs(&b_sorted);

    let mut b_by_a: Vec<f64> = order.iter().map(|&i| b[i]).collect();
    let mut buf = vec![0.0; b_by_a.len()];
    let swaps = merge_count_inversions(&mut b_by_a, &mut buf);

    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Degenerate {
            what: "kendall tau",
            why: "one of the vectors is constant".to_string(),
        });
    }
    let concordant_minus_discordant =
        n0 as i64 - n1 as i64 - n2 as i64 + n3 as i64 - 2 * swaps as i64;
    Ok((concordant_minus_discordant as f64 / denom).clamp(-1.0, 1.0))
}

/// `1 - cos(mean_i, mean_j)` of the two classes' feature means.
pub fn cosine_distance_class_means(
    ds: &GroupedDataset,
    class_i: usize,
    class_j: usize,
) -> Result<f64> {
    check_class(ds, class_i)?;
    check_class(ds, class_j)?;
    let d = ds.feature_dim;
    let mut means = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for (idx, &label) in ds.labels.iter().enumerate() {
        // Identical classes contribute to both slots (distance 0).
        if label == class_i {
            counts[0] += 1;
            for (m, &x) in means[0].iter_mut().zip(ds.feature_row(idx)) {
                *m += x;
            }
        }
        if label == class_j {
            counts[1] += 1;
            for (m, &x) in means[1].iter_mut().zip(ds.feature_row(idx)) {
                *m += x;
            }
        }
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        for m in mean.iter_mut() {
            *m /= count as f64;
        }
    }
    let norm = |v: &[f64]| v.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(&means[0]), norm(&means[1]));
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Degenerate {
            what: "class mean",
            why: format!(
                "class {} mean has near-zero norm; cosine distance undefined",
                if na < 1e-12 { class_i } else { class_j }
            ),
        });
    }
    let dot: f64 = means[0].iter().zip(&means[1]).map(|(&x, &y)| x * y).sum();
    Ok(1.0 - dot / (na * nb))
}

/// Binary accuracy distinguishing two (group, label) subpopulations,
/// aggregated over runs, with the training seeds recorded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPairAccuracy {
    pub group_a: usize,
    pub label_a: usize,
    pub group_b: usize,
    pub label_b: usize,
    pub accuracy: RunStats,
    pub seeds: Vec<u64>,
}

impl CellPairAccuracy {
    fn matches(&self, first: (usize, usize), second: (usize, usize)) -> bool {
        let own = ((self.group_a, self.label_a), (self.group_b, self.label_b));
        own == (first, second) || own == (second, first)
    }
}

/// The four separability nuisance regressors, in design-matrix column
/// order: within-group-a, within-group-b, and the two diagonal cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityVector {
    /// Group a label 0 vs group a label 1.
    pub s_a0_a1: CellPairAccuracy,
    /// Group b label 0 vs group b label 1.
    pub s_b0_b1: CellPairAccuracy,
    /// Group a label 0 vs group b label 1.
    pub s_a0_b1: CellPairAccuracy,
    /// Group a label 1 vs group b label 0.
    pub s_a1_b0: CellPairAccuracy,
}

impl SeparabilityVector {
    /// Column names in design-matrix order.
    pub const COLUMN_NAMES: [&'static str; 4] = ["s_a0_a1", "s_b0_b1", "s_a0_b1", "s_a1_b0"];

    /// Mean accuracies in design-matrix column order.
    pub fn means(&self) -> [f64; 4] {
        [
            self.s_a0_a1.accuracy.mean,
            self.s_b0_b1.accuracy.mean,
            self.s_a0_b1.accuracy.mean,
            self.s_a1_b0.accuracy.mean,
        ]
    }
}

/// Assemble the separability vector from measured cell pairs (groups are
/// indexed 0 = a, 1 = b; labels are the binary task labels). Cell order in
/// the input does not matter; each required pair must appear exactly once.
pub fn separability_cells(cells: &[CellPairAccuracy]) -> Result<SeparabilityVector> {
    let required: [((usize, usize), (usize, usize), &str); 4] = [
        ((0, 0), (0, 1), "s_a0_a1"),
        ((1, 0), (1, 1), "s_b0_b1"),
        ((0, 0), (1, 1), "s_a0_b1"),
        ((0, 1), (1, 0), "s_a1_b0"),
    ];
    let mut found: Vec<CellPairAccuracy> = Vec::with_capacity(4);
    for (first, second, name) in required {
        let mut hits = cells.iter().filter(|c| c.matches(first, second));
        let cell = hits.next().ok_or_else(|| Error::IncompleteProtocol {
            why: format!(
                "missing separability cell {name} (group {}, label {}) vs (group {}, label {})",
                first.0, first.1, second.0, second.1
            ),
        })?;
        if hits.next().is_some() {
            return Err(Error::IncompleteProtocol {
                why: format!("separability cell {name} measured more than once"),
            });
        }
        found.push(cell.clone());
    }
    let mut it = found.into_iter();
    Ok(SeparabilityVector {
        s_a0_a1: it.next().unwrap(),
        s_b0_b1: it.next().unwrap(),
        s_a0_b1: it.next().unwrap(),
        s_a1_b0: it.next().unwrap(),
    })
}

/// Average ranks, 1-based; tied values share the mean of their positions.
/// `[10, 20, 20, 30]` becomes `[1, 2.5, 2.5, 4]`.
pub fn rank_transform(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        // Positions start..end (0-based) share the average 1-based rank.
        let rank = (start + end + 1) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}
