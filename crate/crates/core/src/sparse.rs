//! Linear solves with the ADMM system matrix `diag(w) + rho * D^T D`.
//!
//! The direct path is a simplicial LDL^T factorization (up-looking, with the
//! elimination tree computed once per sparsity pattern) under a nested
//! dissection ordering built from BFS level structures. The iterative path is
//! Jacobi-preconditioned conjugate gradients, used when the factor would not
//! fit in the configured memory cap.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::voxelgrid::DiffOperator;

const NONE: usize = usize::MAX;
const LEAF_SIZE: usize = 32;

/// Fill-reducing ordering of the vertices of an undirected graph.
/// Returns `perm` with `perm[new] = old`.
pub fn nested_dissection(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut order = Vec::with_capacity(n);
    let mut stamp = vec![0u32; n];
    let mut level = vec![NONE; n];
    let mut current = 0u32;
    dissect(
        adj,
        (0..n).collect(),
        &mut order,
        &mut stamp,
        &mut current,
        &mut level,
    );
    debug_assert_eq!(order.len(), n);
    order
}

fn dissect(
    adj: &[Vec<usize>],
    subset: Vec<usize>,
    order: &mut Vec<usize>,
    stamp: &mut [u32],
    current: &mut u32,
    level: &mut [usize],
) {
    if subset.len() <= LEAF_SIZE {
        order.extend(subset);
        return;
    }
    *current += 1;
    let mark = *current;
    for &v in &subset {
        stamp[v] = mark;
        level[v] = NONE;
    }
    // Components of the subset, handled independently.
    let mut components: Vec<Vec<usize>> = Vec::new();
    for &s in &subset {
        if level[s] != NONE {
            continue;
        }
        let comp = bfs_levels(adj, s, mark, stamp, level).0;
        components.push(comp);
    }
    if components.len() > 1 {
        for comp in components {
            dissect(adj, comp, order, stamp, current, level);
        }
        return;
    }
    let comp = components.pop().unwrap_or_default();

    // Pseudo-peripheral start: repeat BFS from the last vertex reached while
    // the eccentricity keeps growing.
    let mut start = comp[0];
    let mut depth = 0;
    for _ in 0..4 {
        for &v in &comp {
            level[v] = NONE;
        }
        let (visited, d) = bfs_levels(adj, start, mark, stamp, level);
        let far = *visited.last().unwrap();
        if d <= depth && depth > 0 {
            break;
        }
        depth = d;
        start = far;
    }
    for &v in &comp {
        level[v] = NONE;
    }
    let (visited, depth) = bfs_levels(adj, start, mark, stamp, level);
    if depth < 2 {
        order.extend(visited);
        return;
    }
    let mut counts = vec![0usize; depth + 1];
    for &v in &visited {
        counts[level[v]] += 1;
    }
    let half = visited.len() / 2;
    let mut acc = 0;
    let mut median = 1;
    for (l, &c) in counts.iter().enumerate() {
        acc += c;
        if acc >= half {
            median = l.clamp(1, depth - 1);
            break;
        }
    }
    let mut left = Vec::new();
    let mut right = Vec::new();
    let mut separator = Vec::new();
    for &v in &visited {
        match level[v].cmp(&median) {
            std::cmp::Ordering::Less => left.push(v),
            std::cmp::Ordering::Greater => right.push(v),
            std::cmp::Ordering::Equal => separator.push(v),
        }
    }
    dissect(adj, left, order, stamp, current, level);
    dissect(adj, right, order, stamp, current, level);
    order.extend(separator);
}

/// BFS restricted to vertices carrying `mark`; returns visit order and depth.
fn bfs_levels(
    adj: &[Vec<usize>],
    start: usize,
    mark: u32,
    stamp: &[u32],
    level: &mut [usize],
) -> (Vec<usize>, usize) {
    let mut visited = vec![start];
    let mut queue = VecDeque::from([start]);
    level[start] = 0;
    let mut depth = 0;
    while let Some(v) = queue.pop_front() {
        for &u in &adj[v] {
            if stamp[u] == mark && level[u] == NONE {
                level[u] = level[v] + 1;
                depth = depth.max(level[u]);
                visited.push(u);
                queue.push_back(u);
            }
        }
    }
    (visited, depth)
}

/// Sparsity pattern of `diag(w) + rho * D^T D` in permuted upper-triangular
/// CSC form, with the elimination tree and factor column counts.
#[derive(Debug, Clone)]
struct SymbolicLdl {
    n: usize,
    perm: Vec<usize>,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    /// Stored-entry position of each vertex's diagonal.
    diag_slot: Vec<usize>,
    /// Stored-entry position of each operator row's off-diagonal.
    edge_slot: Vec<usize>,
    parent: Vec<usize>,
    l_ptr: Vec<usize>,
}

impl SymbolicLdl {
    fn new(op: &DiffOperator) -> Self {
        let n = op.n_cols();
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in op.rows() {
            adj[a].push(b);
            adj[b].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        let perm = nested_dissection(&adj);
        let mut pinv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            pinv[old] = new;
        }

        // Column k of the permuted upper triangle holds rows i <= k.
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); n];
        for old in 0..n {
            let k = pinv[old];
            cols[k].push(k);
            for &nb in &adj[old] {
                let j = pinv[nb];
                if j < k {
                    cols[k].push(j);
                }
            }
        }
        let mut col_ptr = Vec::with_capacity(n + 1);
        col_ptr.push(0);
        let mut row_idx = Vec::new();
        for col in &mut cols {
            col.sort_unstable();
            row_idx.extend_from_slice(col);
            col_ptr.push(row_idx.len());
        }
        let find = |row: usize, col: usize| -> usize {
            let slice = &row_idx[col_ptr[col]..col_ptr[col + 1]];
            col_ptr[col] + slice.binary_search(&row).expect("entry in pattern")
        };
        let diag_slot: Vec<usize> = (0..n).map(|old| find(pinv[old], pinv[old])).collect();
        let edge_slot: Vec<usize> = op
            .rows()
            .iter()
            .map(|&(a, b)| {
                let (i, j) = (pinv[a], pinv[b]);
                find(i.min(j), i.max(j))
            })
            .collect();

        // Elimination tree and column counts.
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for &r in &row_idx[col_ptr[k]..col_ptr[k + 1]] {
                let mut i = r;
                while flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut l_ptr = Vec::with_capacity(n + 1);
        l_ptr.push(0);
        for k in 0..n {
            l_ptr.push(l_ptr[k] + lnz[k]);
        }
        Self {
            n,
            perm,
            col_ptr,
            row_idx,
            diag_slot,
            edge_slot,
            parent,
            l_ptr,
        }
    }

    fn factor_nnz(&self) -> usize {
        self.l_ptr[self.n]
    }
}

/// Numeric LDL^T factor of the permuted system matrix.
#[derive(Debug, Clone)]
struct NumericLdl {
    l_idx: Vec<usize>,
    l_val: Vec<f64>,
    d: Vec<f64>,
}

fn factor_numeric(sym: &SymbolicLdl, values: &[f64]) -> Result<NumericLdl> {
    let n = sym.n;
    let nnz = sym.factor_nnz();
    let mut l_idx = vec![0usize; nnz];
    let mut l_val = vec![0.0; nnz];
    let mut d = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut pattern = vec![0usize; n];
    let mut flag = vec![NONE; n];
    let mut lnz = vec![0usize; n];
    for k in 0..n {
        let mut top = n;
        flag[k] = k;
        for p in sym.col_ptr[k]..sym.col_ptr[k + 1] {
            let mut i = sym.row_idx[p];
            y[i] += values[p];
            let mut len = 0;
            while flag[i] != k {
                pattern[len] = i;
                len += 1;
                flag[i] = k;
                i = sym.parent[i];
            }
            while len > 0 {
                top -= 1;
                len -= 1;
                pattern[top] = pattern[len];
            }
        }
        d[k] = y[k];
        y[k] = 0.0;
        for &i in &pattern[top..n] {
            let yi = y[i];
            y[i] = 0.0;
            let start = sym.l_ptr[i];
            let end = start + lnz[i];
            for p in start..end {
                y[l_idx[p]] -= l_val[p] * yi;
            }
            let l_ki = yi / d[i];
            d[k] -= l_ki * yi;
            l_idx[end] = k;
            l_val[end] = l_ki;
            lnz[i] += 1;
        }
        if !(d[k] > 0.0) || !d[k].is_finite() {
            return Err(Error::LinearSolve(format!(
                "system matrix not positive definite at pivot {k} (d = {})",
                d[k]
            )));
        }
    }
    Ok(NumericLdl { l_idx, l_val, d })
}

/// Which linear solver backs a [`GramSolver`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Direct,
    ConjugateGradient,
}

/// Solver for `(diag(w) + rho * D^T D) x = b` with a fixed operator `D`.
///
/// The ordering and elimination tree are computed once in [`GramSolver::new`];
/// [`GramSolver::refactor`] recomputes only the numeric factor when `w` or
/// `rho` change.
#[derive(Debug, Clone)]
pub struct GramSolver {
    op: DiffOperator,
    kind: SolverKind,
    symbolic: Option<SymbolicLdl>,
    numeric: Option<NumericLdl>,
    diag_w: Vec<f64>,
    rho: f64,
    jacobi: Vec<f64>,
    cg_tol: f64,
    cg_max_iter: usize,
    scratch: Vec<f64>,
}

impl GramSolver {
    /// `factor_mem_cap` bounds the bytes the LDL^T factor may occupy; above
    /// it conjugate gradients are used instead.
    pub fn new(op: &DiffOperator, factor_mem_cap: usize) -> Self {
        let symbolic = SymbolicLdl::new(op);
        let bytes = symbolic.factor_nnz() * (std::mem::size_of::<f64>() + std::mem::size_of::<usize>());
        let (kind, symbolic) = if bytes <= factor_mem_cap {
            (SolverKind::Direct, Some(symbolic))
        } else {
            (SolverKind::ConjugateGradient, None)
        };
        Self {
            op: op.clone(),
            kind,
            symbolic,
            numeric: None,
            diag_w: Vec::new(),
            rho: 0.0,
            jacobi: Vec::new(),
            cg_tol: 1e-12,
            cg_max_iter: 10 * op.n_cols().max(10),
            scratch: vec![0.0; op.n_rows()],
        }
    }

    pub fn kind(&self) -> SolverKind {
        self.kind
    }

    /// Number of stored off-diagonal entries of the factor, if direct.
    pub fn factor_nnz(&self) -> Option<usize> {
        self.symbolic.as_ref().map(SymbolicLdl::factor_nnz)
    }

    pub fn refactor(&mut self, diag_w: &[f64], rho: f64) -> Result<()> {
        if diag_w.len() != self.op.n_cols() {
            return Err(Error::Dimension {
                context: "GramSolver diagonal",
                expected: self.op.n_cols(),
                actual: diag_w.len(),
            });
        }
        self.diag_w = diag_w.to_vec();
        self.rho = rho;
        let mut jacobi = diag_w.to_vec();
        for (&(a, b), &w) in self.op.rows().iter().zip(self.op.weights()) {
            jacobi[a] += rho * w * w;
            jacobi[b] += rho * w * w;
        }
        if let Some(sym) = &self.symbolic {
            let mut values = vec![0.0; sym.row_idx.len()];
            for (old, &slot) in sym.diag_slot.iter().enumerate() {
                values[slot] = jacobi[old];
            }
            for (&slot, &w) in sym.edge_slot.iter().zip(self.op.weights()) {
                values[slot] -= rho * w * w;
            }
            self.numeric = Some(factor_numeric(sym, &values)?);
        }
        self.jacobi = jacobi;
        Ok(())
    }

    /// `out = (diag(w) + rho D^T D) x`.
    pub fn apply(&mut self, x: &[f64], out: &mut [f64]) {
        self.op.apply_into(x, &mut self.scratch);
        self.op.apply_transpose_into(&self.scratch, out);
        for ((o, &w), &xi) in out.iter_mut().zip(&self.diag_w).zip(x) {
            *o = w * xi + self.rho * *o;
        }
    }

    /// Writes the solution of `A x = rhs` into `x`. The iterative path starts
    /// from the incoming contents of `x`.
    pub fn solve(&mut self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        match (&self.symbolic, &self.numeric) {
            (Some(sym), Some(num)) => {
                let n = sym.n;
                let mut work: Vec<f64> = sym.perm.iter().map(|&old| rhs[old]).collect();
                for j in 0..n {
                    let xj = work[j];
                    for p in sym.l_ptr[j]..sym.l_ptr[j + 1] {
                        work[num.l_idx[p]] -= num.l_val[p] * xj;
                    }
                }
                for (w, &d) in work.iter_mut().zip(&num.d) {
                    *w /= d;
                }
                for j in (0..n).rev() {
                    let mut acc = work[j];
                    for p in sym.l_ptr[j]..sym.l_ptr[j + 1] {
                        acc -= num.l_val[p] * work[num.l_idx[p]];
                    }
                    work[j] = acc;
                }
                for (new, &old) in sym.perm.iter().enumerate() {
                    x[old] = work[new];
                }
                Ok(())
            }
            (Some(_), None) => Err(Error::LinearSolve("factor not computed".into())),
            (None, _) => self.solve_cg(rhs, x),
        }
    }

    fn solve_cg(&mut self, rhs: &[f64], x: &mut [f64]) -> Result<()> {
        let n = rhs.len();
        let mut r = vec![0.0; n];
        self.apply(x, &mut r);
        for (ri, &bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
        }
        let b_norm = norm2(rhs).max(f64::MIN_POSITIVE);
        let mut z: Vec<f64> = r.iter().zip(&self.jacobi).map(|(a, d)| a / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        for _ in 0..self.cg_max_iter {
            if norm2(&r) <= self.cg_tol * b_norm {
                return Ok(());
            }
            self.apply(&p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] / self.jacobi[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if norm2(&r) <= 1e-8 * b_norm {
            Ok(())
        } else {
            Err(Error::LinearSolve("conjugate gradients did not converge".into()))
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
