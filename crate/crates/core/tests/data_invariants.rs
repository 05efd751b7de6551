//! Structural invariants of the dataset operations, checked over randomized
//! group/class/count shapes: balancing really equalizes cells without
//! inventing rows, splitting really partitions while covering every cell,
//! and augmentation touches only the target group.

use amplab_core::data::{
    augment_group, balance_group_sizes, balance_groups, class_slice, stitch_binary_task,
    stratified_split, GroupedDataset,
};
use proptest::prelude::*;

/// Deterministic filler features so row identity is exact.
fn feature(row: usize, dim: usize) -> f64 {
    ((row * 7919 + dim * 104729) % 9973) as f64 / 997.0
}

/// Build a dataset with the given per-(group, label) cell counts.
fn build(cells: &[Vec<usize>], feature_dim: usize) -> GroupedDataset {
    let num_groups = cells.len();
    let num_classes = cells[0].len();
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    let mut row = 0;
    for (g, per_label) in cells.iter().enumerate() {
        for (y, &count) in per_label.iter().enumerate() {
            for _ in 0..count {
                for d in 0..feature_dim {
                    features.push(feature(row, d));
                }
                labels.push(y);
                groups.push(g);
                row += 1;
            }
        }
    }
    GroupedDataset::new(
        features,
        feature_dim,
        labels,
        groups,
        (0..num_classes).map(|y| format!("c{y}")).collect(),
        (0..num_groups).map(|g| format!("g{g}")).collect(),
    )
    .unwrap()
}

/// Rows as exact (bits, label, group) triples for multiset comparison.
fn row_multiset(ds: &GroupedDataset) -> Vec<(Vec<u64>, usize, usize)> {
    let mut rows: Vec<(Vec<u64>, usize, usize)> = (0..ds.n())
        .map(|i| {
            (
                ds.feature_row(i).iter().map(|v| v.to_bits()).collect(),
                ds.labels[i],
                ds.groups[i],
            )
        })
        .collect();
    rows.sort();
    rows
}

fn is_sub_multiset(small: &[(Vec<u64>, usize, usize)], big: &[(Vec<u64>, usize, usize)]) -> bool {
    let mut i = 0;
    for item in small {
        while i < big.len() && &big[i] < item {
            i += 1;
        }
        if i >= big.len() || &big[i] != item {
            return false;
        }
        i += 1;
    }
    true
}

fn cell_shape() -> impl Strategy<Value = Vec<Vec<usize>>> {
    (2..=3usize, 2..=3usize).prop_flat_map(|(groups, classes)| {
        prop::collection::vec(prop::collection::vec(2..9usize, classes), groups)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Balancing equalizes each label's cell across groups (to that label's
    /// minimum) and only ever drops rows, never invents or relabels them.
    #[test]
    fn balancing_equalizes_cells_with_existing_rows(
        cells in cell_shape(),
        seed in 0..1000u64,
    ) {
        let ds = build(&cells, 3);
        let balanced = balance_groups(&ds, seed).unwrap();
        let counts = balanced.cell_counts();
        for y in 0..cells[0].len() {
            let label_min = cells.iter().map(|row| row[y]).min().unwrap();
            for (g, row) in counts.iter().enumerate() {
                prop_assert_eq!(row[y], label_min, "cell ({},{})", g, y);
            }
        }
        prop_assert!(is_sub_multiset(&row_multiset(&balanced), &row_multiset(&ds)));
        // Deterministic in the seed.
        prop_assert_eq!(balance_groups(&ds, seed).unwrap(), balanced);
    }

    /// Size balancing equalizes per-group totals while keeping every label
    /// present in every group.
    #[test]
    fn group_size_balancing_equalizes_totals(
        cells in cell_shape(),
        seed in 0..1000u64,
    ) {
        let ds = build(&cells, 2);
        let balanced = balance_group_sizes(&ds, seed).unwrap();
        let totals = balanced.group_counts();
        let min_total = ds.group_counts().into_iter().min().unwrap();
        for &t in &totals {
            prop_assert_eq!(t, min_total);
        }
        prop_assert!(is_sub_multiset(&row_multiset(&balanced), &row_multiset(&ds)));
    }

    /// A stratified split is a partition that keeps at least one row of
    /// every cell on each side, with per-cell test counts within one row of
    /// the requested fraction.
    #[test]
    fn stratified_split_partitions_and_covers_cells(
        cells in cell_shape(),
        fraction in 0.15..0.85f64,
        seed in 0..1000u64,
    ) {
        let ds = build(&cells, 2);
        let (train, test) = stratified_split(&ds, fraction, seed).unwrap();
        prop_assert_eq!(train.n() + test.n(), ds.n());
        let mut merged = row_multiset(&train);
        merged.extend(row_multiset(&test));
        merged.sort();
        prop_assert_eq!(merged, row_multiset(&ds));
        let (train_cells, test_cells) = (train.cell_counts(), test.cell_counts());
        for g in 0..cells.len() {
            for y in 0..cells[0].len() {
                prop_assert!(train_cells[g][y] >= 1, "cell ({g},{y}) missing from train");
                prop_assert!(test_cells[g][y] >= 1, "cell ({g},{y}) missing from test");
                let want = (cells[g][y] as f64 * fraction).round();
                prop_assert!(
                    (test_cells[g][y] as f64 - want).abs() <= 1.0,
                    "cell ({g},{y}): test count {} vs requested {want}",
                    test_cells[g][y]
                );
            }
        }
    }

    /// Stitching two class pairs yields four equal cells whose labels follow
    /// the slot parity and whose groups index the source pair.
    #[test]
    fn stitching_makes_equal_cells(
        cells in cell_shape(),
        seed in 0..1000u64,
    ) {
        let ds = build(&cells, 3);
        if ds.num_classes() < 2 {
            return Ok(());
        }
        let s0 = class_slice(&ds, 0).unwrap();
        let s1 = class_slice(&ds, 1).unwrap();
        let task = stitch_binary_task((&s0, &s1), (&s1, &s0), seed).unwrap();
        let min = s0.n().min(s1.n());
        prop_assert_eq!(task.n(), 4 * min);
        for row in task.cell_counts() {
            for count in row {
                prop_assert_eq!(count, min);
            }
        }
        prop_assert_eq!(task.num_groups(), 2);
        prop_assert_eq!(task.num_classes(), 2);
    }

    /// Augmentation grows exactly the target group to the rounded factor
    /// and leaves every other group's rows untouched.
    #[test]
    fn augmentation_touches_only_the_target_group(
        cells in cell_shape(),
        factor in 1.0..1.9f64,
        seed in 0..1000u64,
    ) {
        let ds = build(&cells, 2);
        let target = cells.len() - 1;
        // A reserve of fresh target-group rows, same schema, ample size.
        let reserve_rows = 2 * ds.group_counts()[target];
        let reserve = {
            let mut features = Vec::new();
            let mut labels = Vec::new();
            for r in 0..reserve_rows {
                for d in 0..2 {
                    features.push(feature(10_000 + r, d));
                }
                labels.push(r % cells[0].len());
            }
            GroupedDataset::new(
                features,
                2,
                labels,
                vec![target; reserve_rows],
                ds.class_names.clone(),
                ds.group_names.clone(),
            )
            .unwrap()
        };
        let grown = augment_group(&ds, &reserve, target, factor, seed).unwrap();
        let want = (ds.group_counts()[target] as f64 * factor).round() as usize;
        prop_assert_eq!(grown.group_counts()[target], want);
        for g in 0..cells.len() {
            if g == target {
                continue;
            }
            let before = row_multiset(&ds.filter_group(g).unwrap());
            let after = row_multiset(&grown.filter_group(g).unwrap());
            prop_assert_eq!(before, after, "group {} changed", g);
        }
        // Added rows all come from the reserve.
        let mut pool = row_multiset(&ds);
        pool.extend(row_multiset(&reserve));
        pool.sort();
        prop_assert!(is_sub_multiset(&row_multiset(&grown), &pool));
    }

    /// Filtering to one group keeps the schema and exactly that group's
    /// rows.
    #[test]
    fn group_filter_keeps_schema_and_rows(cells in cell_shape()) {
        let ds = build(&cells, 2);
        for g in 0..cells.len() {
            let only = ds.filter_group(g).unwrap();
            prop_assert_eq!(only.n(), ds.group_counts()[g]);
            prop_assert_eq!(&only.group_names, &ds.group_names);
            prop_assert_eq!(&only.class_names, &ds.class_names);
            prop_assert!(only.groups.iter().all(|&gi| gi == g));
            prop_assert!(is_sub_multiset(&row_multiset(&only), &row_multiset(&ds)));
        }
    }
}
