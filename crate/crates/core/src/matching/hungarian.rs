//! Minimum-cost rectangular assignment (Kuhn–Munkres with shortest
//! augmenting paths and row/column potentials), followed by a pass that
//! picks the lexicographically smallest assignment among all optimal ones.

/// Reduced costs within this distance of zero count as tight.
const TIGHT_TOL: f64 = 1e-10;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Assigns every row to a distinct column minimizing the summed cost.
/// Requires `rows <= cols` and finite costs. Returns the column of each row.
///
/// Among optimal assignments the one whose column sequence is
/// lexicographically smallest is returned, so the result depends only on the
/// matrix.
pub fn solve(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.rows;
    let m = cost.cols;
    assert!(n <= m, "assignment needs rows <= cols ({n} > {m})");
    if n == 0 {
        return Vec::new();
    }

    // 1-based potentials; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![f64::INFINITY; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut assign = vec![0usize; n];
    let mut col_owner: Vec<Option<usize>> = vec![None; m];
    for j in 1..=m {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
            col_owner[j - 1] = Some(owner[j] - 1);
        }
    }
    let duals = Duals {
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    };
    lexicographic_minimum(cost, &duals, &mut assign, &mut col_owner);
    assign
}

struct Duals {
    u: Vec<f64>,
    v: Vec<f64>,
}

impl Duals {
    fn tight(&self, cost: &CostMatrix, i: usize, j: usize) -> bool {
        cost.get(i, j) - self.u[i] - self.v[j] <= TIGHT_TOL
    }

    /// A column with a negative potential is covered by every optimal
    /// assignment (complementary slackness on `sum_i x_ij <= 1`).
    fn forced(&self, j: usize) -> bool {
        self.v[j] < -TIGHT_TOL
    }
}

/// Optimal assignments are exactly the assignments that use tight edges only
/// and cover every forced column. Rows are fixed in order, each to the
/// smallest tight column that still admits such a completion.
fn lexicographic_minimum(
    cost: &CostMatrix,
    duals: &Duals,
    assign: &mut [usize],
    col_owner: &mut [Option<usize>],
) {
    let n = assign.len();
    let m = col_owner.len();
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..m).filter(|&j| duals.tight(cost, i, j)).collect())
        .collect();
    let forced: Vec<bool> = (0..m).map(|j| duals.forced(j)).collect();
    // Already lexicographically minimal when every row has one tight column.
    if tight.iter().all(|t| t.len() == 1) {
        return;
    }
    let mut used = vec![false; m];
    for i in 0..n {
        let mut chosen = None;
        for &c in &tight[i] {
            if used[c] {
                continue;
            }
            used[c] = true;
            if completion_exists(&tight, &forced, &used, i + 1) {
                chosen = Some(c);
                break;
            }
            used[c] = false;
        }
        // The solver's own assignment is always a valid completion, so a
        // column is found; keep it as a fallback against rounding.
        let c = chosen.unwrap_or_else(|| {
            used[assign[i]] = true;
            assign[i]
        });
        assign[i] = c;
    }
    for slot in col_owner.iter_mut() {
        *slot = None;
    }
    for (r, &c) in assign.iter().enumerate() {
        col_owner[c] = Some(r);
    }
}

/// Whether rows `start..` can be matched to unused columns over tight edges
/// while covering every unused forced column. A matching covering the rows
/// and one covering the forced columns together imply one covering both
/// (Mendelsohn–Dulmage), so two independent maximum matchings decide it.
fn completion_exists(tight: &[Vec<usize>], forced: &[bool], used: &[bool], start: usize) -> bool {
    let n = tight.len();
    let m = used.len();
    let rows: Vec<usize> = (start..n).collect();
    let forced_cols: Vec<usize> = (0..m).filter(|&j| forced[j] && !used[j]).collect();
    if forced_cols.len() > rows.len() {
        return false;
    }

    // Rows into columns.
    let mut col_match: Vec<Option<usize>> = vec![None; m];
    for &r in &rows {
        let mut seen = vec![false; m];
        if !augment_row(r, tight, used, &mut col_match, &mut seen) {
            return false;
        }
    }

    // Forced columns into rows.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    for &r in &rows {
        for &j in &tight[r] {
            if forced[j] && !used[j] {
                adj[j].push(r);
            }
        }
    }
    let mut row_match: Vec<Option<usize>> = vec![None; n];
    for &j in &forced_cols {
        let mut seen = vec![false; n];
        if !augment_col(j, &adj, &mut row_match, &mut seen) {
            return false;
        }
    }
    true
}

fn augment_row(
    r: usize,
    tight: &[Vec<usize>],
    used: &[bool],
    col_match: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &j in &tight[r] {
        if used[j] || seen[j] {
            continue;
        }
        seen[j] = true;
        let free = match col_match[j] {
            None => true,
            Some(other) => augment_row(other, tight, used, col_match, seen),
        };
        if free {
            col_match[j] = Some(r);
            return true;
        }
    }
    false
}

fn augment_col(
    j: usize,
    adj: &[Vec<usize>],
    row_match: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &r in &adj[j] {
        if seen[r] {
            continue;
        }
        seen[r] = true;
        let free = match row_match[r] {
            None => true,
            Some(other) => augment_col(other, adj, row_match, seen),
        };
        if free {
            row_match[r] = Some(j);
            return true;
        }
    }
    false
}
