//! Optimal bipartite matching between ground truths and prediction slots.
//!
//! Costs are computed off-tape; the loss is then evaluated at the fixed
//! assignment, so matching never participates in differentiation.

use crate::error::{Error, Result};
use crate::geometry::{box_loss_value, BoxCxCyWh};

/// Brute-force matching refuses more rows than this.
pub const BRUTE_FORCE_MAX_ROWS: usize = 8;

/// `G×N` match costs: one row per ground truth, one column per query.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Shape { shape: vec![rows, cols], len: entries.len() });
        }
        if rows > cols {
            return Err(Error::Capacity { what: "ground truths per query set", got: rows, max: cols });
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("cost matrix has a non-finite entry".into()));
        }
        Ok(CostMatrix { rows, cols, entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged cost matrix".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.entries[r * self.cols + c]
    }
}

/// Ground-truth → query pairs, sorted by ground-truth index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn total_cost(&self, c: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, q)| c.get(r, q)).sum()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Query matched to each ground truth, by ground-truth index.
    pub fn query_for(&self, gt: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == gt).map(|p| p.1)
    }

    pub fn is_valid_for(&self, rows: usize, cols: usize) -> bool {
        let mut seen_r = vec![false; rows];
        let mut seen_c = vec![false; cols];
        self.pairs.len() == rows
            && self.pairs.iter().all(|&(r, c)| {
                r < rows
                    && c < cols
                    && !std::mem::replace(&mut seen_r[r], true)
                    && !std::mem::replace(&mut seen_c[c], true)
            })
    }
}

/// Match cost of every (ground truth, query) pair:
/// `−P_q(class_g) + box_loss(box_q, box_g)`.
///
/// `probs` is `N×K` class probabilities, `boxes` the `N` predicted boxes and
/// `targets` the ground-truth (class, box) list.
pub fn build_cost(probs: &[Vec<f64>], boxes: &[BoxCxCyWh], targets: &[(usize, BoxCxCyWh)]) -> Result<CostMatrix> {
    let n = boxes.len();
    if probs.len() != n {
        return Err(Error::Dimension { op: "build_cost", lhs: vec![probs.len()], rhs: vec![n] });
    }
    if targets.len() > n {
        return Err(Error::Capacity { what: "ground truths per query set", got: targets.len(), max: n });
    }
    let mut entries = Vec::with_capacity(targets.len() * n);
    for (class, gt) in targets {
        for (p, b) in probs.iter().zip(boxes) {
            let prob = *p.get(*class).ok_or(Error::Index { index: *class, extent: p.len() })?;
            entries.push(-prob + box_loss_value(b, gt));
        }
    }
    CostMatrix::new(targets.len(), n, entries)
}

/// Minimum-cost injective assignment of rows to columns.
///
/// Shortest augmenting path formulation with row/column potentials, adding
/// one ground-truth row at a time. Columns are scanned in index order and only
/// strictly better candidates replace the incumbent, so ties resolve to the
/// lowest query index.
pub fn hungarian(c: &CostMatrix) -> Assignment {
    let (n, m) = (c.rows, c.cols);
    if n == 0 {
        return Assignment::default();
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = c.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
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
    let mut pairs: Vec<(usize, usize)> = (1..=m).filter(|&j| owner[j] != 0).map(|j| (owner[j] - 1, j - 1)).collect();
    pairs.sort_unstable();
    Assignment { pairs }
}

/// Exhaustive minimum over all injections; a test oracle for [`hungarian`].
pub fn brute_force_match(c: &CostMatrix) -> Result<Assignment> {
    if c.rows > BRUTE_FORCE_MAX_ROWS {
        return Err(Error::Capacity { what: "rows for brute-force matching", got: c.rows, max: BRUTE_FORCE_MAX_ROWS });
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut current = Vec::with_capacity(c.rows);
    let mut used = vec![false; c.cols];
    search(c, 0, 0.0, &mut current, &mut used, &mut best);
    let pairs = best.1.into_iter().enumerate().collect();
    Ok(Assignment { pairs })
}

fn search(
    c: &CostMatrix,
    row: usize,
    acc: f64,
    current: &mut Vec<usize>,
    used: &mut [bool],
    best: &mut (f64, Vec<usize>),
) {
    if row == c.rows {
        if acc < best.0 {
            *best = (acc, current.clone());
        }
        return;
    }
    for col in 0..c.cols {
        if used[col] {
            continue;
        }
        used[col] = true;
        current.push(col);
        search(c, row + 1, acc + c.get(row, col), current, used, best);
        current.pop();
        used[col] = false;
    }
}
