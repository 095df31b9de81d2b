//! Partition agreement: permutation alignment, accuracy, ARI, macro-F1 and the
//! soft classification error.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Above this many labels the exhaustive search gives way to the Hungarian solver.
const EXACT_MAX_LABELS: usize = 12;

/// Best matching of estimated labels onto truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// `mapping[e]` is the truth label assigned to estimated label `e`.
    pub mapping: BTreeMap<usize, usize>,
    pub matched: usize,
    pub accuracy: f64,
}

impl Alignment {
    pub fn apply(&self, est: &[usize]) -> Vec<usize> {
        est.iter()
            .map(|e| self.mapping.get(e).copied().unwrap_or(usize::MAX))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PartitionMetrics {
    pub accuracy: f64,
    pub ari: f64,
    pub macro_f1: f64,
    pub hce: f64,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::data(format!("label vectors differ in length ({a} vs {b})")));
    }
    Ok(())
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Contingency counts `table[(e, t)]` over the distinct labels of each side.
fn contingency(est: &[usize], truth: &[usize]) -> (Vec<usize>, Vec<usize>, DMatrix<f64>) {
    let el = distinct(est);
    let tl = distinct(truth);
    let mut table = DMatrix::zeros(el.len(), tl.len());
    for (e, t) in est.iter().zip(truth) {
        let i = el.binary_search(e).unwrap();
        let j = tl.binary_search(t).unwrap();
        table[(i, j)] += 1.0;
    }
    (el, tl, table)
}

/// Permutation of estimated labels maximizing agreement with `truth`.
pub fn align_labels(est: &[usize], truth: &[usize]) -> Result<Alignment> {
    check_lengths(est.len(), truth.len())?;
    let n = est.len();
    if n == 0 {
        return Ok(Alignment {
            mapping: BTreeMap::new(),
            matched: 0,
            accuracy: 1.0,
        });
    }
    let (el, tl, table) = contingency(est, truth);
    let m = el.len().max(tl.len());
    let mut square = DMatrix::zeros(m, m);
    square.view_mut((0, 0), table.shape()).copy_from(&table);
    let assign = if m <= EXACT_MAX_LABELS {
        max_assignment_exact(&square)
    } else {
        max_assignment_hungarian(&square)
    };
    let mut mapping = BTreeMap::new();
    let mut matched = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        if i < el.len() {
            matched += square[(i, j)];
            // estimated labels without a truth partner map past the truth range
            let target = if j < tl.len() {
                tl[j]
            } else {
                tl.last().copied().unwrap_or(0) + 1 + j
            };
            mapping.insert(el[i], target);
        }
    }
    let matched = matched as usize;
    Ok(Alignment {
        mapping,
        matched,
        accuracy: matched as f64 / n as f64,
    })
}

/// Exhaustive maximum-weight assignment by dynamic programming over column subsets.
fn max_assignment_exact(w: &DMatrix<f64>) -> Vec<usize> {
    let m = w.nrows();
    let full = 1usize << m;
    let mut best = vec![f64::NEG_INFINITY; full];
    let mut choice = vec![usize::MAX; full];
    best[0] = 0.0;
    for mask in 0..full {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row == m {
            continue;
        }
        for col in 0..m {
            if mask & (1 << col) != 0 {
                continue;
            }
            let next = mask | (1 << col);
            let v = best[mask] + w[(row, col)];
            if v > best[next] {
                best[next] = v;
                choice[next] = col;
            }
        }
    }
    let mut assign = vec![0; m];
    let mut mask = full - 1;
    for row in (0..m).rev() {
        let col = choice[mask];
        assign[row] = col;
        mask &= !(1 << col);
    }
    assign
}

/// Maximum-weight assignment with the O(m^3) Hungarian method (potentials form).
fn max_assignment_hungarian(w: &DMatrix<f64>) -> Vec<usize> {
    let m = w.nrows();
    let wmax = w.max();
    // minimize cost = wmax - w; 1-based arrays with a sentinel column 0
    let cost = |i: usize, j: usize| wmax - w[(i - 1, j - 1)];
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; m];
    for j in 1..=m {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. Two single-cluster partitions give 1.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    check_lengths(a.len(), b.len())?;
    let n = a.len() as f64;
    let (_, _, table) = contingency(a, b);
    let sum_cells: f64 = table.iter().map(|&c| choose2(c)).sum();
    let sum_rows: f64 = table.row_iter().map(|r| choose2(r.sum())).sum();
    let sum_cols: f64 = table.column_iter().map(|c| choose2(c.sum())).sum();
    let total = choose2(n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if max_index == expected {
        // both partitions trivial in the same way
        return Ok(if sum_cells == max_index { 1.0 } else { 0.0 });
    }
    Ok((sum_cells - expected) / (max_index - expected))
}

/// Accuracy, ARI, macro-F1 over truth classes (after alignment) and HCE.
pub fn partition_metrics(est: &[usize], truth: &[usize]) -> Result<PartitionMetrics> {
    let align = align_labels(est, truth)?;
    let ari = adjusted_rand_index(est, truth)?;
    let aligned = align.apply(est);
    let classes = distinct(truth);
    let mut f1_sum = 0.0;
    for &c in &classes {
        let tp = aligned.iter().zip(truth).filter(|(a, t)| **a == c && **t == c).count() as f64;
        let pred = aligned.iter().filter(|a| **a == c).count() as f64;
        let actual = truth.iter().filter(|t| **t == c).count() as f64;
        let f1 = if pred + actual > 0.0 { 2.0 * tp / (pred + actual) } else { 0.0 };
        f1_sum += f1;
    }
    let macro_f1 = if classes.is_empty() { 1.0 } else { f1_sum / classes.len() as f64 };
    Ok(PartitionMetrics {
        accuracy: align.accuracy,
        ari,
        macro_f1,
        hce: 1.0 - align.accuracy,
    })
}

/// `n^{-1} sum_i (1 - gamma[i, tau(truth_i)])` with `tau` the alignment of the hard
/// labels of `gamma` onto the truth.
pub fn soft_classification_error(gamma: &DMatrix<f64>, truth: &[usize]) -> Result<f64> {
    check_lengths(gamma.nrows(), truth.len())?;
    let n = truth.len();
    if n == 0 {
        return Ok(0.0);
    }
    let hard: Vec<usize> = gamma
        .row_iter()
        .map(|r| crate::numeric::argmax(r.iter().copied()))
        .collect();
    let align = align_labels(&hard, truth)?;
    // invert: truth label -> column of gamma
    let inverse: BTreeMap<usize, usize> = align.mapping.iter().map(|(&e, &t)| (t, e)).collect();
    let mut err = 0.0;
    for (i, t) in truth.iter().enumerate() {
        let g = inverse
            .get(t)
            .filter(|&&k| k < gamma.ncols())
            .map(|&k| gamma[(i, k)])
            .unwrap_or(0.0);
        err += 1.0 - g;
    }
    Ok(err / n as f64)
}
