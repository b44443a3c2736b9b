//! Bipartite adjacency operators.
//!
//! Node ordering is users `0..M` followed by items `M..M+N`. Every operator
//! built here is symmetric, so products with the transpose reuse the row
//! storage.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::dataset::Edge;
use crate::error::{Error, Result};

/// Dense row-major matrix used for embeddings and gradients.
pub type Matrix = Array2<f64>;

/// Rows handed to one rayon task. Each output row depends only on its own
/// inputs, so results do not depend on the thread count.
const ROW_CHUNK: usize = 64;

/// Compressed sparse row matrix with sorted, unique column indices.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, row_ptr: vec![0; rows + 1], col_idx: Vec::new(), values: Vec::new() }
    }

    /// Builds from `(row, col, value)` triplets. Duplicates are summed and
    /// zeros dropped.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(r, c, v) in &triplets {
            if r >= rows || c >= cols {
                return Err(Error::OutOfRange(format!("entry ({r}, {c}) in {rows}x{cols} matrix")));
            }
            if !v.is_finite() {
                return Err(Error::NonFinite { term: "sparse matrix entry" });
            }
        }
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0usize; rows + 1];
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            last = Some((r, c));
            row_ptr[r + 1] += 1;
            col_idx.push(c as u32);
            values.push(v);
        }
        for r in 0..rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut m = Self { rows, cols, row_ptr, col_idx, values };
        m.drop_zeros();
        Ok(m)
    }

    fn drop_zeros(&mut self) {
        if self.values.iter().all(|&v| v != 0.0) {
            return;
        }
        let mut row_ptr = vec![0usize; self.rows + 1];
        let mut col_idx = Vec::with_capacity(self.col_idx.len());
        let mut values = Vec::with_capacity(self.values.len());
        for r in 0..self.rows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                if self.values[k] != 0.0 {
                    col_idx.push(self.col_idx[k]);
                    values.push(self.values[k]);
                }
            }
            row_ptr[r + 1] = values.len();
        }
        self.row_ptr = row_ptr;
        self.col_idx = col_idx;
        self.values = values;
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// `(column, value)` pairs of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().map(|&c| c as usize).zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&(c as u32)) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|r| self.row(r).map(|(_, v)| v).sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.rows).flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v))).collect();
        Self::from_triplets(self.cols, self.rows, triplets).expect("transpose of a valid matrix")
    }

    /// First `(row, col)` whose mirrored entry differs bit-for-bit, if any.
    pub fn asymmetry(&self) -> Option<(usize, usize)> {
        if self.rows != self.cols {
            return Some((self.rows, self.cols));
        }
        (0..self.rows).find_map(|r| self.row(r).find(|&(c, v)| self.get(c, r) != v).map(|(c, _)| (r, c)))
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// Sparse × dense product.
    pub fn matmul(&self, x: ArrayView2<'_, f64>) -> Result<Matrix> {
        if x.nrows() != self.cols {
            return Err(Error::Dimension(format!(
                "{}x{} operator applied to {}x{} matrix",
                self.rows,
                self.cols,
                x.nrows(),
                x.ncols()
            )));
        }
        let d = x.ncols();
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; self.rows * d];
        if d > 0 {
            out.par_chunks_mut(ROW_CHUNK * d).enumerate().for_each(|(chunk, block)| {
                for (offset, dst) in block.chunks_mut(d).enumerate() {
                    let r = chunk * ROW_CHUNK + offset;
                    for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                        let v = self.values[k];
                        let src = &xs[self.col_idx[k] as usize * d..][..d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += v * s;
                        }
                    }
                }
            });
        }
        Ok(Matrix::from_shape_vec((self.rows, d), out).expect("shape"))
    }
}

/// Builds the `(M+N)×(M+N)` 0/1 block matrix `[[0, R], [Rᵀ, 0]]`.
pub fn build_adjacency(edges: &[Edge], num_users: usize, num_items: usize) -> Result<SparseMatrix> {
    let n = num_users + num_items;
    let mut triplets = Vec::with_capacity(edges.len() * 2);
    for &(u, i) in edges {
        let (u, i) = (u as usize, i as usize);
        if u >= num_users || i >= num_items {
            return Err(Error::OutOfRange(format!("edge ({u}, {i}) with M={num_users}, N={num_items}")));
        }
        triplets.push((u, num_users + i, 1.0));
        triplets.push((num_users + i, u, 1.0));
    }
    let mut m = SparseMatrix::from_triplets(n, n, triplets)?;
    // Repeated edges are still a single 0/1 entry.
    for v in &mut m.values {
        *v = 1.0;
    }
    Ok(m)
}

/// `D^{-1/2} A D^{-1/2}` with the convention `0^{-1/2} = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: SparseMatrix,
    degrees: Vec<f64>,
}

pub fn normalize_sym(a: &SparseMatrix) -> Result<NormalizedAdjacency> {
    if let Some((row, col)) = a.asymmetry() {
        return Err(Error::Asymmetric { row, col });
    }
    if a.values.iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument("adjacency has negative entries".into()));
    }
    let degrees = a.row_sums();
    let inv_sqrt: Vec<f64> = degrees.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut matrix = a.clone();
    for r in 0..matrix.rows {
        for k in matrix.row_ptr[r]..matrix.row_ptr[r + 1] {
            let c = matrix.col_idx[k] as usize;
            // Same operand order for (r,c) and (c,r) keeps the result bit-symmetric.
            let (lo, hi) = if r <= c { (r, c) } else { (c, r) };
            matrix.values[k] *= inv_sqrt[lo] * inv_sqrt[hi];
        }
    }
    matrix.drop_zeros();
    Ok(NormalizedAdjacency { matrix, degrees })
}

impl NormalizedAdjacency {
    /// Normalized operator of a view's edge list.
    pub fn from_edges(edges: &[Edge], num_users: usize, num_items: usize) -> Result<Self> {
        normalize_sym(&build_adjacency(edges, num_users, num_items)?)
    }

    /// All-zero operator on `n` nodes.
    pub fn empty(n: usize) -> Self {
        Self { matrix: SparseMatrix::zeros(n, n), degrees: vec![0.0; n] }
    }

    pub fn matrix(&self) -> &SparseMatrix {
        &self.matrix
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degrees
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.rows
    }

    const MAGIC: &'static [u8; 8] = b"FRGADJ01";

    /// Binary cache: magic, 32-byte key, dims, then raw little-endian arrays.
    pub fn write_cache<W: Write>(&self, w: &mut W, key: &[u8; 32]) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(key)?;
        let m = &self.matrix;
        w.write_u64::<LittleEndian>(m.rows as u64)?;
        w.write_u64::<LittleEndian>(m.nnz() as u64)?;
        for &p in &m.row_ptr {
            w.write_u64::<LittleEndian>(p as u64)?;
        }
        for &c in &m.col_idx {
            w.write_u32::<LittleEndian>(c)?;
        }
        for &v in &m.values {
            w.write_f64::<LittleEndian>(v)?;
        }
        for &d in &self.degrees {
            w.write_f64::<LittleEndian>(d)?;
        }
        Ok(())
    }

    pub fn read_cache<R: Read>(r: &mut R, key: &[u8; 32]) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Format("not an adjacency cache".into()));
        }
        let mut found = [0u8; 32];
        r.read_exact(&mut found)?;
        if &found != key {
            return Err(Error::HashMismatch { expected: hex::encode(key), found: hex::encode(found) });
        }
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let nnz = r.read_u64::<LittleEndian>()? as usize;
        let row_ptr = (0..=rows).map(|_| r.read_u64::<LittleEndian>().map(|p| p as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let col_idx = (0..nnz).map(|_| r.read_u32::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let values = (0..nnz).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        let degrees = (0..rows).map(|_| r.read_f64::<LittleEndian>()).collect::<std::io::Result<Vec<_>>>()?;
        if row_ptr.last() != Some(&nnz) || col_idx.iter().any(|&c| c as usize >= rows) {
            return Err(Error::Format("corrupt adjacency cache".into()));
        }
        Ok(Self { matrix: SparseMatrix { rows, cols: rows, row_ptr, col_idx, values }, degrees })
    }
}

/// `Ã X`.
pub fn apply(adj: &NormalizedAdjacency, x: ArrayView2<'_, f64>) -> Result<Matrix> {
    adj.matrix.matmul(x)
}

/// `(Σ_{k=0}^{kmax} Ã^k) X` by Horner's scheme: `Y ← X + Ã Y`, never
/// forming a matrix power.
pub fn power_sum_apply(adj: &NormalizedAdjacency, x: ArrayView2<'_, f64>, kmax: usize) -> Result<Matrix> {
    if x.nrows() != adj.num_nodes() {
        return Err(Error::Dimension(format!("{} nodes vs {} rows", adj.num_nodes(), x.nrows())));
    }
    let mut y = x.to_owned();
    for _ in 0..kmax {
        y = apply(adj, y.view())?;
        y += &x;
    }
    Ok(y)
}

/// `Σ_k Ã^k X_k` for coefficient matrices `terms[k]`, also by Horner.
pub(crate) fn polynomial_apply(adj: &NormalizedAdjacency, terms: &[Matrix]) -> Result<Matrix> {
    let (last, rest) = terms.split_last().ok_or_else(|| Error::InvalidArgument("empty polynomial".into()))?;
    let mut y = last.clone();
    for term in rest.iter().rev() {
        y = apply(adj, y.view())?;
        y += term;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_graph(rng: &mut ChaCha8Rng, m: usize, n: usize, p: f64) -> Vec<Edge> {
        let mut edges = Vec::new();
        for u in 0..m as u32 {
            for i in 0..n as u32 {
                if rng.random_bool(p) {
                    edges.push((u, i));
                }
            }
        }
        edges
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_edge_adjacency() {
        let a = build_adjacency(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(a.to_dense(), array![[0.0, 1.0], [1.0, 0.0]]);
        let norm = normalize_sym(&a).unwrap();
        assert_eq!(norm.matrix().get(0, 1), 1.0);
    }

    #[test]
    fn empty_and_row_structure() {
        let a = build_adjacency(&[], 2, 3).unwrap();
        assert_eq!(a.nnz(), 0);
        assert_eq!(a.rows(), 5);
        let a = build_adjacency(&[(0, 0), (0, 1)], 1, 2).unwrap();
        assert_eq!(a.row(0).map(|(c, _)| c).collect::<Vec<_>>(), vec![1, 2]);
        assert!(build_adjacency(&[(1, 0)], 1, 2).is_err());
    }

    #[test]
    fn star_normalization() {
        let norm = NormalizedAdjacency::from_edges(&[(0, 0), (0, 1)], 1, 2).unwrap();
        // Dense hand computation: D = diag(2,1,1), entries 1/sqrt(2*1).
        let mut a = Matrix::zeros((3, 3));
        for (r, c) in [(0, 1), (0, 2), (1, 0), (2, 0)] {
            a[[r, c]] = 1.0;
        }
        let d = [2.0f64, 1.0, 1.0];
        let expected = Matrix::from_shape_fn((3, 3), |(r, c)| a[[r, c]] / (d[r] * d[c]).sqrt());
        assert_abs_diff_eq!(norm.matrix().to_dense(), expected, epsilon = 1e-15);
        assert_abs_diff_eq!(norm.matrix().get(0, 1), std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-15);
    }

    #[test]
    fn isolated_node_is_zero() {
        let norm = NormalizedAdjacency::from_edges(&[(0, 0)], 2, 1).unwrap();
        assert_eq!(norm.matrix().row(1).count(), 0);
        assert_eq!(norm.degrees()[1], 0.0);
        assert!((0..3).all(|r| norm.matrix().get(r, 1) == 0.0));
    }

    #[test]
    fn rejects_asymmetric() {
        let a = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        assert!(matches!(normalize_sym(&a), Err(Error::Asymmetric { .. })));
    }

    #[test]
    fn apply_zero_and_swap() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let zero = NormalizedAdjacency::empty(2);
        assert_eq!(apply(&zero, x.view()).unwrap(), Matrix::zeros((2, 2)));
        let unit = NormalizedAdjacency::from_edges(&[(0, 0)], 1, 1).unwrap();
        assert_eq!(apply(&unit, x.view()).unwrap(), array![[0.0, 1.0], [1.0, 0.0]]);
        assert!(apply(&unit, Matrix::zeros((3, 2)).view()).is_err());
    }

    #[test]
    fn apply_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = random_graph(&mut rng, 8, 12, 0.3);
        let adj = NormalizedAdjacency::from_edges(&edges, 8, 12).unwrap();
        let x = random_matrix(&mut rng, 20, 4);
        let dense = adj.matrix().to_dense().dot(&x);
        let diff = (&apply(&adj, x.view()).unwrap() - &dense).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn power_sum_edge_cases_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let edges = random_graph(&mut rng, 9, 11, 0.25);
        let adj = NormalizedAdjacency::from_edges(&edges, 9, 11).unwrap();
        let x = random_matrix(&mut rng, 20, 3);
        assert_eq!(power_sum_apply(&adj, x.view(), 0).unwrap(), x);
        assert_eq!(power_sum_apply(&NormalizedAdjacency::empty(20), x.view(), 3).unwrap(), x);
        let a = adj.matrix().to_dense();
        let expected = &x + &a.dot(&x) + &a.dot(&a).dot(&x);
        let got = power_sum_apply(&adj, x.view(), 2).unwrap();
        let diff = (&got - &expected).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn polynomial_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let edges = random_graph(&mut rng, 5, 6, 0.4);
        let adj = NormalizedAdjacency::from_edges(&edges, 5, 6).unwrap();
        let terms: Vec<Matrix> = (0..3).map(|_| random_matrix(&mut rng, 11, 2)).collect();
        let a = adj.matrix().to_dense();
        let expected = &terms[0] + &a.dot(&terms[1]) + &a.dot(&a).dot(&terms[2]);
        assert_abs_diff_eq!(polynomial_apply(&adj, &terms).unwrap(), expected, epsilon = 1e-12);
    }

    #[test]
    fn cache_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let adj = NormalizedAdjacency::from_edges(&random_graph(&mut rng, 6, 7, 0.3), 6, 7).unwrap();
        let key = [7u8; 32];
        let mut buf = Vec::new();
        adj.write_cache(&mut buf, &key).unwrap();
        let back = NormalizedAdjacency::read_cache(&mut buf.as_slice(), &key).unwrap();
        assert_eq!(back, adj);
        assert!(matches!(
            NormalizedAdjacency::read_cache(&mut buf.as_slice(), &[0u8; 32]),
            Err(Error::HashMismatch { .. })
        ));
    }
}
