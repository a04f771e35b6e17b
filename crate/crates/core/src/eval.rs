//! Classification and contamination evaluation: MAP labels, Rand and
//! adjusted Rand indices, median-individual response profiles, and the
//! label-vs-cluster report.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::ecm::FitResult;
use crate::math::sigmoid;
use crate::model::{BinaryDataset, MltcnParams};

/// MAP classification: the argmax component per responsibility row, ties
/// broken toward the lowest index.
pub fn map_classify(z: &[Vec<f64>]) -> Vec<usize> {
    z.iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Rand index: the fraction of the n(n-1)/2 observation pairs on which two
/// partitions agree (paired together in both, or apart in both).
pub fn rand_index<T: PartialEq, U: PartialEq>(a: &[T], b: &[U]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must have equal length");
    let n = a.len();
    assert!(n >= 2, "need at least two observations");
    let mut agree = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let together_a = a[i] == a[j];
            let together_b = b[i] == b[j];
            if together_a == together_b {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

/// Adjusted Rand index via the contingency-table form
/// (index - expected) / (max - expected). Identical partitions score 1,
/// including the all-singletons case where the ratio degenerates to 0/0.
pub fn adjusted_rand_index<T, U>(a: &[T], b: &[U]) -> f64
where
    T: Hash + Eq,
    U: Hash + Eq,
{
    assert_eq!(a.len(), b.len(), "partitions must have equal length");
    let n = a.len();
    assert!(n >= 2, "need at least two observations");

    let mut cells: HashMap<(usize, usize), usize> = HashMap::new();
    let mut row_ids: HashMap<&T, usize> = HashMap::new();
    let mut col_ids: HashMap<&U, usize> = HashMap::new();
    let mut row_sums: Vec<usize> = Vec::new();
    let mut col_sums: Vec<usize> = Vec::new();
    for (x, y) in a.iter().zip(b) {
        let next = row_ids.len();
        let r = *row_ids.entry(x).or_insert(next);
        if r == row_sums.len() {
            row_sums.push(0);
        }
        let next = col_ids.len();
        let cdx = *col_ids.entry(y).or_insert(next);
        if cdx == col_sums.len() {
            col_sums.push(0);
        }
        row_sums[r] += 1;
        col_sums[cdx] += 1;
        *cells.entry((r, cdx)).or_insert(0) += 1;
    }

    let comb2 = |x: usize| (x * x.saturating_sub(1) / 2) as f64;
    let index: f64 = cells.values().map(|&v| comb2(v)).sum();
    let sum_rows: f64 = row_sums.iter().map(|&v| comb2(v)).sum();
    let sum_cols: f64 = col_sums.iter().map(|&v| comb2(v)).sum();
    let expected = sum_rows * sum_cols / comb2(n);
    let max = 0.5 * (sum_rows + sum_cols);
    if (max - expected).abs() < 1e-12 {
        return 1.0;
    }
    (index - expected) / (max - expected)
}

/// Median-individual response probabilities p_mg(0) = sigmoid(alpha_mg),
/// one row per component.
pub fn median_profiles(params: &MltcnParams) -> Vec<Vec<f64>> {
    params
        .alpha
        .iter()
        .map(|row| row.iter().map(|&a| sigmoid(a)).collect())
        .collect()
}

/// Empirical response rates of the normal and extreme sub-populations of
/// each component: variable means weighted by z*c (normal) and z*(1-c)
/// (extreme). These are the per-branch columns of the profile tables; the
/// fitted model has a single intercept per component, so the branch split
/// reports observed behavior rather than extra parameters.
pub fn branch_response_rates(
    data: &BinaryDataset,
    z: &[Vec<f64>],
    c: &[Vec<f64>],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let g = z.first().map_or(0, |r| r.len());
    let m = data.n_variables();
    let mut normal = vec![vec![0.0; m]; g];
    let mut extreme = vec![vec![0.0; m]; g];
    for gi in 0..g {
        let mut wn_sum = 0.0;
        let mut we_sum = 0.0;
        for (i, x) in data.rows().enumerate() {
            let wn = z[i][gi] * c[i][gi];
            let we = z[i][gi] * (1.0 - c[i][gi]);
            wn_sum += wn;
            we_sum += we;
            for (mi, &xm) in x.iter().enumerate() {
                normal[gi][mi] += wn * xm as f64;
                extreme[gi][mi] += we * xm as f64;
            }
        }
        for mi in 0..m {
            normal[gi][mi] = if wn_sum > 0.0 { normal[gi][mi] / wn_sum } else { f64::NAN };
            extreme[gi][mi] = if we_sum > 0.0 { extreme[gi][mi] / we_sum } else { f64::NAN };
        }
    }
    (normal, extreme)
}

/// Counts for one (label class, component) cell of the cross-tabulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossCell {
    pub total: usize,
    pub normal: usize,
    pub extreme: usize,
}

/// Label-vs-cluster evaluation of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Distinct true labels, in order of first appearance.
    pub classes: Vec<String>,
    /// cross_tab[class][component], with each cell split into normal and
    /// extreme counts.
    pub cross_tab: Vec<Vec<CrossCell>>,
    pub rand: f64,
    pub ari: f64,
    pub n_extreme: usize,
    /// Observations outside the maximum-agreement matching between
    /// components and label classes.
    pub n_misclassified: usize,
    /// matching[component] = matched class index, for matched components.
    pub matching: Vec<Option<usize>>,
}

/// Builds the cross-tabulation of true labels against (component,
/// normal/extreme), plus Rand, ARI, the extreme count, and the
/// misclassification count under the best component-to-class matching
/// (maximum agreement over injective assignments, so the count is invariant
/// to component relabeling).
pub fn evaluation_report(fit: &FitResult, labels: &[String]) -> EvaluationReport {
    let n = labels.len();
    assert_eq!(
        n,
        fit.map_labels.len(),
        "labels must cover every observation"
    );
    let g = fit.params.g;

    let mut classes: Vec<String> = Vec::new();
    let mut class_of: Vec<usize> = Vec::with_capacity(n);
    for lab in labels {
        let idx = match classes.iter().position(|c| c == lab) {
            Some(i) => i,
            None => {
                classes.push(lab.clone());
                classes.len() - 1
            }
        };
        class_of.push(idx);
    }

    let mut cross = vec![
        vec![
            CrossCell {
                total: 0,
                normal: 0,
                extreme: 0
            };
            g
        ];
        classes.len()
    ];
    for i in 0..n {
        let cell = &mut cross[class_of[i]][fit.map_labels[i]];
        cell.total += 1;
        if fit.extreme_flags[i] {
            cell.extreme += 1;
        } else {
            cell.normal += 1;
        }
    }

    let counts: Vec<Vec<usize>> = cross
        .iter()
        .map(|row| row.iter().map(|c| c.total).collect())
        .collect();
    let (agreement, matching) = best_matching(&counts, g);

    EvaluationReport {
        rand: rand_index(&class_of, &fit.map_labels),
        ari: adjusted_rand_index(&class_of, &fit.map_labels),
        n_extreme: fit.n_extreme(),
        n_misclassified: n - agreement,
        matching,
        classes,
        cross_tab: cross,
    }
}

/// Maximum-agreement injective matching between components and classes by
/// exhaustive search over the smaller side (both are tiny in practice).
fn best_matching(counts: &[Vec<usize>], g: usize) -> (usize, Vec<Option<usize>>) {
    let n_classes = counts.len();
    assert!(
        g.min(n_classes) <= 16,
        "matching search supports at most 16 of the smaller side"
    );
    let mut best_total: i64 = -1;
    let mut best: Vec<Option<usize>> = vec![None; g];
    let mut current: Vec<Option<usize>> = vec![None; g];

    // Depth-first over components. A component is left unmatched only when
    // every class is taken: with nonnegative counts, assigning an available
    // class never loses agreement, so the restriction prunes without
    // changing the maximum.
    fn walk(
        counts: &[Vec<usize>],
        g: usize,
        n_classes: usize,
        comp: usize,
        used: u32,
        total: usize,
        current: &mut Vec<Option<usize>>,
        best_total: &mut i64,
        best: &mut Vec<Option<usize>>,
    ) {
        if comp == g {
            if total as i64 > *best_total {
                *best_total = total as i64;
                best.clone_from(current);
            }
            return;
        }
        if (used.count_ones() as usize) < n_classes {
            for class in 0..n_classes {
                if used & (1 << class) == 0 {
                    current[comp] = Some(class);
                    walk(
                        counts,
                        g,
                        n_classes,
                        comp + 1,
                        used | (1 << class),
                        total + counts[class][comp],
                        current,
                        best_total,
                        best,
                    );
                }
            }
            current[comp] = None;
        } else {
            current[comp] = None;
            walk(
                counts, g, n_classes, comp + 1, used, total, current, best_total, best,
            );
        }
    }

    walk(
        counts,
        g,
        n_classes,
        0,
        0,
        0,
        &mut current,
        &mut best_total,
        &mut best,
    );
    (best_total.max(0) as usize, best)
}
