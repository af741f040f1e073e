//! Object-discovery metrics: FG-ARI, Hungarian-matched mIoU and mBO.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Minimum-cost one-to-one assignment. Rectangular inputs are padded with
/// zero-cost dummies; the result has one entry per row, `None` when the row
/// was matched to a dummy column.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };

    // Potentials formulation, 1-based with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; rows];
    for j in 1..=n {
        let i = owner[j];
        if i >= 1 && i <= rows && j <= cols {
            out[i - 1] = Some(j - 1);
        }
    }
    out
}

fn choose2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index over foreground positions only.
pub fn fg_ari(gt: &[usize], pred: &[usize], foreground: &[bool]) -> Result<f64> {
    if gt.len() != pred.len() || gt.len() != foreground.len() {
        return Err(Error::invalid(
            "fg_ari",
            format!("length mismatch: gt {}, pred {}, fg {}", gt.len(), pred.len(), foreground.len()),
        ));
    }
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut a: HashMap<usize, f64> = HashMap::new();
    let mut b: HashMap<usize, f64> = HashMap::new();
    let mut n = 0.0;
    for i in (0..gt.len()).filter(|&i| foreground[i]) {
        *table.entry((gt[i], pred[i])).or_default() += 1.0;
        *a.entry(gt[i]).or_default() += 1.0;
        *b.entry(pred[i]).or_default() += 1.0;
        n += 1.0;
    }
    if n == 0.0 {
        return Err(Error::invalid("fg_ari", "no foreground positions"));
    }
    // Sum small integers in a fixed order so the result does not depend on hash order.
    let sorted_sum = |vals: Vec<f64>| {
        let mut v = vals;
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        v.into_iter().sum::<f64>()
    };
    let index = sorted_sum(table.values().map(|&c| choose2(c)).collect());
    let sum_a = sorted_sum(a.values().map(|&c| choose2(c)).collect());
    let sum_b = sorted_sum(b.values().map(|&c| choose2(c)).collect());
    let total = choose2(n);
    let expected = if total > 0.0 { sum_a * sum_b / total } else { 0.0 };
    let max_index = 0.5 * (sum_a + sum_b);
    let denom = max_index - expected;
    if denom == 0.0 {
        // Both partitions trivial (one cluster each, or all singletons): agreement is perfect.
        return Ok(1.0);
    }
    Ok((index - expected) / denom)
}

pub fn iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou_matrix(gt: &[Vec<bool>], pred: &[Vec<bool>]) -> Vec<Vec<f64>> {
    gt.iter().map(|g| pred.iter().map(|p| iou(g, p)).collect()).collect()
}

/// Mean IoU of Hungarian-matched pairs; unmatched GT masks score 0.
/// `gt` should include the background as a class.
pub fn miou_hungarian(gt: &[Vec<bool>], pred: &[Vec<bool>]) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let ious = iou_matrix(gt, pred);
    let cost: Vec<Vec<f64>> = ious.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let assign = hungarian(&cost);
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(i, j)| j.map_or(0.0, |j| ious[i][j]))
        .sum();
    total / gt.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum MboMode {
    /// Each GT mask takes its best-overlapping prediction.
    #[default]
    PerGt,
    /// Each prediction is assigned to its best-overlapping GT mask; a GT mask
    /// scores the best IoU among predictions assigned to it (0 if none).
    PerPred,
}

impl std::str::FromStr for MboMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-gt" => Ok(MboMode::PerGt),
            "per-pred" => Ok(MboMode::PerPred),
            other => Err(Error::invalid("mbo", format!("unknown mode `{other}` (per-gt | per-pred)"))),
        }
    }
}

/// Mean best overlap over GT object masks.
pub fn mbo(gt: &[Vec<bool>], pred: &[Vec<bool>], mode: MboMode) -> f64 {
    mbo_from_ious(&iou_matrix(gt, pred), mode)
}

/// mBO from a `GT x prediction` IoU matrix.
pub fn mbo_from_ious(ious: &[Vec<f64>], mode: MboMode) -> f64 {
    let rows = ious.len();
    if rows == 0 {
        return 0.0;
    }
    let cols = ious[0].len();
    let per_gt: Vec<f64> = match mode {
        MboMode::PerGt => ious.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect(),
        MboMode::PerPred => {
            let mut best = vec![0.0; rows];
            for j in 0..cols {
                let mut arg = 0;
                for i in 1..rows {
                    if ious[i][j] > ious[arg][j] {
                        arg = i;
                    }
                }
                best[arg] = f64::max(best[arg], ious[arg][j]);
            }
            best
        }
    };
    per_gt.iter().sum::<f64>() / rows as f64
}

/// Merges instance masks that share a category (for class-level mBO).
pub fn merge_by_category(masks: &[Vec<bool>], categories: &[usize]) -> Vec<Vec<bool>> {
    let mut cats: Vec<usize> = categories.to_vec();
    cats.sort_unstable();
    cats.dedup();
    cats.iter()
        .map(|&c| {
            let mut merged = vec![false; masks.first().map_or(0, |m| m.len())];
            for (m, _) in masks.iter().zip(categories).filter(|(_, &mc)| mc == c) {
                for (o, &b) in merged.iter_mut().zip(m) {
                    *o |= b;
                }
            }
            merged
        })
        .collect()
}

/// One boolean mask per label value `0..k`.
pub fn masks_from_labels(labels: &[usize], k: usize) -> Vec<Vec<bool>> {
    (0..k).map(|s| labels.iter().map(|&l| l == s).collect()).collect()
}
