use std::collections::HashMap;
use std::hash::{DefaultHasher, Hash, Hasher};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use ndarray::Array2;

use super::CsrMatrix;
use crate::error::{Error, Result};
use crate::stats;

/// Relative threshold under which the diagonal is still accepted as pivot.
const DIAGONAL_PREFERENCE: f64 = 0.1;

/// Sparse LU factors `P A Q = L U` (left-looking, threshold partial pivoting).
///
/// `L` is unit lower triangular with its diagonal stored first in every
/// column, `U` is upper triangular with the pivot stored last. Both are kept
/// in compressed-column form with row indices in pivot order.
#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    l_colptr: Arc<[usize]>,
    l_rows: Arc<[usize]>,
    l_vals: Vec<f64>,
    u_colptr: Arc<[usize]>,
    u_rows: Arc<[usize]>,
    u_vals: Vec<f64>,
    /// original row -> pivot position
    pinv: Arc<[usize]>,
    /// pivot position -> original column
    q: Arc<[usize]>,
}

impl LuFactors {
    /// Factorizes `a` with the given column order (`order[k]` is the original
    /// column eliminated at step `k`); `None` keeps the natural order.
    pub fn factorize(a: &CsrMatrix, order: Option<&[usize]>) -> Result<LuFactors> {
        let start = Instant::now();
        let n = a.nrows();
        if n != a.ncols() {
            return Err(Error::invalid(format!("LU needs a square matrix, got {}x{}", n, a.ncols())));
        }
        let q: Vec<usize> = match order {
            Some(o) => {
                assert_eq!(o.len(), n, "column order has wrong length");
                o.to_vec()
            }
            None => (0..n).collect(),
        };
        // CSR of A^T is CSC of A.
        let csc = a.transpose();

        const NONE: usize = usize::MAX;
        let mut pinv = vec![NONE; n];
        let mut x = vec![0.0; n];
        let mut xi = vec![0usize; n];
        let mut mark = vec![usize::MAX; n];
        let mut stack: Vec<(usize, usize)> = Vec::new();

        let cap = 4 * a.nnz() + n;
        let mut l_colptr = Vec::with_capacity(n + 1);
        let mut l_rows = Vec::with_capacity(cap);
        let mut l_vals = Vec::with_capacity(cap);
        let mut u_colptr = Vec::with_capacity(n + 1);
        let mut u_rows = Vec::with_capacity(cap);
        let mut u_vals = Vec::with_capacity(cap);

        for k in 0..n {
            l_colptr.push(l_rows.len());
            u_colptr.push(u_rows.len());
            let col = q[k];
            let (b_rows, b_vals) = csc.row(col);

            // Nonzero pattern of L \ A[:, col], in topological order xi[top..n].
            let mut top = n;
            for &start_row in b_rows {
                if mark[start_row] == k {
                    continue;
                }
                mark[start_row] = k;
                stack.push((start_row, 0));
                while let Some(&mut (j, ref mut child)) = stack.last_mut() {
                    let jcol = pinv[j];
                    let mut descended = false;
                    if jcol != NONE {
                        let lo = l_colptr[jcol] + 1;
                        let hi = l_colptr.get(jcol + 1).copied().unwrap_or(l_rows.len());
                        while lo + *child < hi {
                            let i = l_rows[lo + *child];
                            *child += 1;
                            if mark[i] != k {
                                mark[i] = k;
                                stack.push((i, 0));
                                descended = true;
                                break;
                            }
                        }
                    }
                    if !descended {
                        stack.pop();
                        top -= 1;
                        xi[top] = j;
                    }
                }
            }

            for &i in &xi[top..n] {
                x[i] = 0.0;
            }
            let mut col_scale = 0.0f64;
            for (&i, &v) in b_rows.iter().zip(b_vals) {
                x[i] = v;
                col_scale = col_scale.max(v.abs());
            }
            for p in top..n {
                let j = xi[p];
                let jcol = pinv[j];
                if jcol == NONE {
                    continue;
                }
                let xj = x[j];
                if xj == 0.0 {
                    continue;
                }
                let hi = l_colptr.get(jcol + 1).copied().unwrap_or(l_rows.len());
                for t in l_colptr[jcol] + 1..hi {
                    x[l_rows[t]] -= l_vals[t] * xj;
                }
            }

            let mut best = NONE;
            let mut best_abs = -1.0;
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    let t = x[i].abs();
                    if t > best_abs {
                        best_abs = t;
                        best = i;
                    }
                } else {
                    u_rows.push(pinv[i]);
                    u_vals.push(x[i]);
                }
            }
            if best == NONE || best_abs <= 1e-14 * col_scale.max(1.0) {
                return Err(Error::Singular { step: k });
            }
            if pinv[col] == NONE && x[col].abs() >= DIAGONAL_PREFERENCE * best_abs {
                best = col;
            }
            let pivot = x[best];
            u_rows.push(k);
            u_vals.push(pivot);
            pinv[best] = k;
            l_rows.push(best);
            l_vals.push(1.0);
            for &i in &xi[top..n] {
                if pinv[i] == NONE {
                    l_rows.push(i);
                    l_vals.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        l_colptr.push(l_rows.len());
        u_colptr.push(u_rows.len());
        for r in l_rows.iter_mut() {
            *r = pinv[*r];
        }

        stats::record_factorization(start.elapsed());
        Ok(LuFactors {
            n,
            l_colptr: l_colptr.into(),
            l_rows: l_rows.into(),
            l_vals,
            u_colptr: u_colptr.into(),
            u_rows: u_rows.into(),
            u_vals,
            pinv: pinv.into(),
            q: q.into(),
        })
    }

    /// Numeric factorization of `a` on the pivot sequence and fill pattern of
    /// `self`, which must have been computed for a matrix with exactly the
    /// pattern of `a`. Returns `None` if some pivot no longer passes the
    /// threshold test; a full factorization is needed then.
    pub fn refactorize(&self, a: &CsrMatrix) -> Option<LuFactors> {
        let start = Instant::now();
        let n = self.n;
        assert_eq!(a.nrows(), n, "refactorization with a matrix of another size");
        let csc = a.transpose();
        // indexed by pivot position
        let mut x = vec![0.0; n];
        let mut l_vals = vec![0.0; self.l_rows.len()];
        let mut u_vals = vec![0.0; self.u_rows.len()];
        for k in 0..n {
            let (rows, vals) = csc.row(self.q[k]);
            let mut col_scale = 0.0f64;
            for (&r, &v) in rows.iter().zip(vals) {
                x[self.pinv[r]] = v;
                col_scale = col_scale.max(v.abs());
            }
            // stored U order is topological
            let (u_lo, u_hi) = (self.u_colptr[k], self.u_colptr[k + 1] - 1);
            for t in u_lo..u_hi {
                let j = self.u_rows[t];
                let xj = std::mem::take(&mut x[j]);
                u_vals[t] = xj;
                if xj != 0.0 {
                    let (lo, hi) = (self.l_colptr[j] + 1, self.l_colptr[j + 1]);
                    for (&r, &l) in self.l_rows[lo..hi].iter().zip(&l_vals[lo..hi]) {
                        x[r] -= l * xj;
                    }
                }
            }
            let pivot = std::mem::take(&mut x[k]);
            u_vals[u_hi] = pivot;
            let (lo, hi) = (self.l_colptr[k], self.l_colptr[k + 1]);
            l_vals[lo] = 1.0;
            let mut largest = pivot.abs();
            for t in lo + 1..hi {
                let v = std::mem::take(&mut x[self.l_rows[t]]);
                largest = largest.max(v.abs());
                l_vals[t] = v / pivot;
            }
            if !(pivot.abs() > 1e-14 * col_scale.max(1.0) && pivot.abs() >= DIAGONAL_PREFERENCE * largest) {
                return None;
            }
        }
        stats::record_factorization(start.elapsed());
        Some(LuFactors {
            n,
            l_colptr: self.l_colptr.clone(),
            l_rows: self.l_rows.clone(),
            l_vals,
            u_colptr: self.u_colptr.clone(),
            u_rows: self.u_rows.clone(),
            u_vals,
            pinv: self.pinv.clone(),
            q: self.q.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Fill of the factors, `nnz(L) + nnz(U)`.
    pub fn nnz(&self) -> usize {
        self.l_vals.len() + self.u_vals.len()
    }

    /// Row permutation: original row -> pivot position.
    pub fn row_permutation(&self) -> &[usize] {
        &self.pinv
    }

    /// Column permutation: pivot position -> original column.
    pub fn column_permutation(&self) -> &[usize] {
        &self.q
    }

    /// Solves `A x = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let rhs = Array2::from_shape_vec((self.n, 1), b.to_vec()).expect("rhs length");
        self.solve(&rhs).into_raw_vec_and_offset().0
    }

    /// Solves `A X = B` for all columns of `B` in one batch.
    pub fn solve(&self, b: &Array2<f64>) -> Array2<f64> {
        let n = self.n;
        assert_eq!(b.nrows(), n, "right-hand side has wrong row count");
        let k = b.ncols();
        stats::record_solve(k);
        if k == 0 || n == 0 {
            return Array2::zeros((n, k));
        }

        let mut y = vec![0.0; n * k];
        for (i, row) in b.rows().into_iter().enumerate() {
            let dst = self.pinv[i] * k;
            for (slot, &v) in y[dst..dst + k].iter_mut().zip(row.iter()) {
                *slot = v;
            }
        }

        for j in 0..n {
            let lo = self.l_colptr[j] + 1;
            let hi = self.l_colptr[j + 1];
            if lo == hi {
                continue;
            }
            let (head, tail) = y.split_at_mut((j + 1) * k);
            let src = &head[j * k..];
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            for t in lo..hi {
                let r = self.l_rows[t] - j - 1;
                let coef = self.l_vals[t];
                for (d, &s) in tail[r * k..(r + 1) * k].iter_mut().zip(src) {
                    *d -= coef * s;
                }
            }
        }

        for j in (0..n).rev() {
            let lo = self.u_colptr[j];
            let hi = self.u_colptr[j + 1] - 1;
            let inv = 1.0 / self.u_vals[hi];
            let (head, tail) = y.split_at_mut(j * k);
            let src = &mut tail[..k];
            for v in src.iter_mut() {
                *v *= inv;
            }
            if src.iter().all(|&v| v == 0.0) {
                continue;
            }
            for t in lo..hi {
                let r = self.u_rows[t];
                let coef = self.u_vals[t];
                for (d, &s) in head[r * k..(r + 1) * k].iter_mut().zip(src.iter()) {
                    *d -= coef * s;
                }
            }
        }

        let mut out = Array2::zeros((n, k));
        for (pos, &col) in self.q.iter().enumerate() {
            for (o, &v) in out.row_mut(col).iter_mut().zip(&y[pos * k..(pos + 1) * k]) {
                *o = v;
            }
        }
        out
    }

    /// Dense `L` and `U` (pivot order), for verification on small systems.
    pub fn dense_factors(&self) -> (Array2<f64>, Array2<f64>) {
        let n = self.n;
        let mut l = Array2::zeros((n, n));
        let mut u = Array2::zeros((n, n));
        for j in 0..n {
            for t in self.l_colptr[j]..self.l_colptr[j + 1] {
                l[[self.l_rows[t], j]] = self.l_vals[t];
            }
            for t in self.u_colptr[j]..self.u_colptr[j + 1] {
                u[[self.u_rows[t], j]] = self.u_vals[t];
            }
        }
        (l, u)
    }

    /// Dense `P A Q` for the original matrix `a`, to compare against `L U`.
    pub fn permuted(&self, a: &CsrMatrix) -> Array2<f64> {
        let n = self.n;
        let mut col_pos = vec![0; n];
        for (pos, &c) in self.q.iter().enumerate() {
            col_pos[c] = pos;
        }
        let mut out = Array2::zeros((n, n));
        for r in 0..n {
            let (cols, vals) = a.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[self.pinv[r], col_pos[c]]] += v;
            }
        }
        out
    }
}

/// Factorizations remembered by matrix pattern, so that later matrices with
/// the same pattern only need the numeric phase.
#[derive(Debug, Default)]
pub struct SymbolicCache {
    entries: Mutex<HashMap<u64, Arc<CachedPattern>>>,
}

#[derive(Debug)]
struct CachedPattern {
    indptr: Vec<usize>,
    indices: Vec<usize>,
    order: Option<Vec<usize>>,
    factors: LuFactors,
}

const CACHE_CAPACITY: usize = 4096;

impl Clone for SymbolicCache {
    /// A clone starts empty.
    fn clone(&self) -> Self {
        SymbolicCache::default()
    }
}

impl SymbolicCache {
    /// Factorizes `a`, reusing the pivot sequence of an earlier matrix with
    /// the same pattern and column order when its pivots remain acceptable.
    pub fn factorize(&self, a: &CsrMatrix, order: Option<&[usize]>) -> Result<LuFactors> {
        let mut h = DefaultHasher::new();
        a.indptr().hash(&mut h);
        a.indices().hash(&mut h);
        order.hash(&mut h);
        let key = h.finish();
        let cached = self.entries.lock().expect("cache lock").get(&key).cloned();
        if let Some(c) = cached {
            if c.indptr == a.indptr() && c.indices == a.indices() && c.order.as_deref() == order {
                if let Some(f) = c.factors.refactorize(a) {
                    return Ok(f);
                }
            }
        }
        let factors = LuFactors::factorize(a, order)?;
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.len() >= CACHE_CAPACITY {
            entries.clear();
        }
        entries.insert(
            key,
            Arc::new(CachedPattern {
                indptr: a.indptr().to_vec(),
                indices: a.indices().to_vec(),
                order: order.map(<[usize]>::to_vec),
                factors: factors.clone(),
            }),
        );
        Ok(factors)
    }
}
