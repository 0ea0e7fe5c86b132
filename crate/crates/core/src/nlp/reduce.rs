//! Null-space elimination of linearised equality constraints.
//!
//! For `A d = -c` (A is m x n, full row rank) a Gauss-Jordan sweep picks one
//! basic column per row. The step is then `d = d0 + Z y` where `y` ranges
//! over the free columns and `Z` has an identity block on them.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, PartialEq)]
pub enum ReduceError {
    RankDeficient { row: usize },
}

/// One row of `Z`: either a unit vector (free variable) or a dense row.
#[derive(Debug, Clone)]
pub enum ZRow {
    Unit(usize),
    Dense(Vec<f64>),
}

#[derive(Debug, Clone)]
enum RowOp {
    Scale { row: usize, factor: f64 },
    Axpy { target: usize, source: usize, factor: f64 },
}

#[derive(Debug, Clone)]
pub struct NullSpace {
    n: usize,
    /// basic column of each constraint row
    pub basic: Vec<usize>,
    /// free columns, in the order of the reduced variables
    pub free: Vec<usize>,
    pub rows: Vec<ZRow>,
    /// particular solution of `A d0 = -c`
    pub d0: DVector<f64>,
    ops: Vec<RowOp>,
}

impl NullSpace {
    pub fn num_free(&self) -> usize {
        self.free.len()
    }

    /// `d0 + Z y`.
    pub fn expand(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut d = self.d0.clone();
        for (k, row) in self.rows.iter().enumerate() {
            d[k] += match row {
                ZRow::Unit(j) => y[*j],
                ZRow::Dense(r) => r.iter().zip(y.iter()).map(|(a, b)| a * b).sum(),
            };
        }
        d
    }

    /// `v' Z` for a sparse row vector given as (column, value) pairs.
    pub fn row_times_z(&self, entries: impl Iterator<Item = (usize, f64)>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, a) in entries {
            if a == 0.0 {
                continue;
            }
            match &self.rows[k] {
                ZRow::Unit(j) => out[*j] += a,
                ZRow::Dense(r) => {
                    for (o, z) in out.iter_mut().zip(r) {
                        *o += a * z;
                    }
                }
            }
        }
    }

    /// `Z' v`.
    pub fn z_transpose_times(&self, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.free.len());
        for (k, row) in self.rows.iter().enumerate() {
            if v[k] == 0.0 {
                continue;
            }
            match row {
                ZRow::Unit(j) => out[*j] += v[k],
                ZRow::Dense(r) => {
                    for (o, z) in out.iter_mut().zip(r) {
                        *o += v[k] * z;
                    }
                }
            }
        }
        out
    }

    /// Minimal-change particular step for another right-hand side: returns
    /// `d` with `A d = -c` and zero free components.
    pub fn particular(&self, c: &DVector<f64>) -> DVector<f64> {
        let mut rhs: Vec<f64> = c.iter().map(|v| -v).collect();
        for op in &self.ops {
            match *op {
                RowOp::Scale { row, factor } => rhs[row] *= factor,
                RowOp::Axpy { target, source, factor } => rhs[target] -= factor * rhs[source],
            }
        }
        let mut d = DVector::zeros(self.n);
        for (r, &b) in self.basic.iter().enumerate() {
            d[b] = rhs[r];
        }
        d
    }
}

/// Eliminate `A d = -c`. `hint[r]`, when given, is the preferred basic
/// column for row `r`; it is taken unless its pivot is much smaller than the
/// largest available one.
pub fn eliminate(a: &DMatrix<f64>, c: &DVector<f64>, hint: Option<&[usize]>) -> Result<NullSpace, ReduceError> {
    let m = a.nrows();
    let n = a.ncols();
    // row-major working copy
    let mut w: Vec<Vec<f64>> = (0..m).map(|r| a.row(r).iter().copied().collect()).collect();
    let mut rhs: Vec<f64> = c.iter().map(|v| -v).collect();
    let mut is_basic = vec![false; n];
    let mut basic = Vec::with_capacity(m);
    let mut ops = Vec::new();
    let scale = a.amax().max(1e-300);
    let mut nz: Vec<usize> = Vec::with_capacity(n);

    for r in 0..m {
        let mut best = None;
        let mut best_abs = 0.0;
        for (j, v) in w[r].iter().enumerate() {
            if !is_basic[j] && v.abs() > best_abs {
                best_abs = v.abs();
                best = Some(j);
            }
        }
        if best_abs <= 1e-12 * scale {
            return Err(ReduceError::RankDeficient { row: r });
        }
        let mut pc = best.expect("nonzero pivot");
        if let Some(h) = hint.and_then(|h| h.get(r)).copied() {
            if h < n && !is_basic[h] && w[r][h].abs() >= 0.1 * best_abs {
                pc = h;
            }
        }
        let inv = 1.0 / w[r][pc];
        nz.clear();
        for j in 0..n {
            if w[r][j] != 0.0 {
                w[r][j] *= inv;
                nz.push(j);
            }
        }
        w[r][pc] = 1.0;
        rhs[r] *= inv;
        ops.push(RowOp::Scale { row: r, factor: inv });
        let pivot_row = w[r].clone();
        for i in 0..m {
            if i == r {
                continue;
            }
            let f = w[i][pc];
            if f == 0.0 {
                continue;
            }
            for &j in &nz {
                w[i][j] -= f * pivot_row[j];
            }
            w[i][pc] = 0.0;
            rhs[i] -= f * rhs[r];
            ops.push(RowOp::Axpy {
                target: i,
                source: r,
                factor: f,
            });
        }
        is_basic[pc] = true;
        basic.push(pc);
    }

    let free: Vec<usize> = (0..n).filter(|j| !is_basic[*j]).collect();
    let mut free_pos = vec![usize::MAX; n];
    for (k, &j) in free.iter().enumerate() {
        free_pos[j] = k;
    }
    let mut rows: Vec<ZRow> = (0..n).map(|j| ZRow::Unit(free_pos[j])).collect();
    let mut d0 = DVector::zeros(n);
    for (r, &b) in basic.iter().enumerate() {
        let dense: Vec<f64> = free.iter().map(|&j| -w[r][j]).collect();
        rows[b] = ZRow::Dense(dense);
        d0[b] = rhs[r];
    }
    Ok(NullSpace {
        n,
        basic,
        free,
        rows,
        d0,
        ops,
    })
}
