//! Compressed sparse row matrices and structural products.
//!
//! Transposed Jacobians of the supported layers are extremely sparse and
//! their structure is known in closed form, so everything here is built
//! around CSR triplets `(indptr, indices, data)` with explicit-zero entries
//! preserved. Keeping structural zeros makes operation counts a function of
//! the sparsity pattern alone, which the static analyzer relies on: a
//! numeric product and its symbolic plan always agree on the work done.
//!
//! Index widths are fixed: column indices are `u32` (no supported layer
//! exceeds 2^32 columns) and row pointers are `usize` in memory, serialized
//! as `u64`.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::scalar::Scalar;

/// Magic bytes of the CSR serialization format.
const CSR_MAGIC: &[u8; 4] = b"CSR1";

/// Errors raised by CSR construction, products, and serialization.
#[derive(Debug, Error)]
pub enum SparseError {
    #[error("row pointer array must have rows+1 entries, got {got} for {rows} rows")]
    IndptrLength { rows: usize, got: usize },
    #[error("row pointers must start at 0, be non-decreasing, and end at nnz (row {row})")]
    IndptrOrder { row: usize },
    #[error("column index {col} out of bounds for {cols} columns in row {row}")]
    ColumnOutOfBounds { row: usize, col: u32, cols: usize },
    #[error("column indices in row {row} must be strictly increasing")]
    UnsortedRow { row: usize },
    #[error("data length {data} does not match index length {indices}")]
    DataLength { data: usize, indices: usize },
    #[error("matrix shape {rows}x{cols} exceeds the 32-bit column index space")]
    TooLarge { rows: usize, cols: usize },
    #[error(
        "incompatible shapes for {op}: left is {left_rows}x{left_cols}, \
         right is {right_rows}x{right_cols}"
    )]
    IncompatibleShapes {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("vector length {len} does not match matrix columns {cols}")]
    VectorLength { len: usize, cols: usize },
    #[error("product plan does not match operands: {0}")]
    PlanMismatch(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid CSR stream: {0}")]
    Format(String),
    #[error("stream stores {found}-byte scalars, expected {expected}-byte")]
    WidthMismatch { found: u8, expected: u8 },
}

/// Result alias for sparse operations.
pub type Result<T> = std::result::Result<T, SparseError>;

// ---------------------------------------------------------------------------
// Sparsity pattern
// ---------------------------------------------------------------------------

/// Structural part of a CSR matrix: shape plus index arrays, no values.
///
/// Entries present in the pattern may hold any value including an explicit
/// zero; entries absent from the pattern are guaranteed zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
}

impl SparsityPattern {
    /// Builds a pattern after validating the CSR invariants.
    pub fn new(rows: usize, cols: usize, indptr: Vec<usize>, indices: Vec<u32>) -> Result<Self> {
        let p = Self { rows, cols, indptr, indices };
        p.validate()?;
        Ok(p)
    }

    /// Builds a pattern that is valid by construction.
    ///
    /// Used by the analytical builders and product kernels; invariants are
    /// still checked in debug builds.
    pub(crate) fn trusted(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
    ) -> Self {
        let p = Self { rows, cols, indptr, indices };
        debug_assert!(p.validate().is_ok(), "builder produced an invalid pattern");
        p
    }

    fn validate(&self) -> Result<()> {
        if self.cols > u32::MAX as usize || self.rows > u32::MAX as usize {
            return Err(SparseError::TooLarge { rows: self.rows, cols: self.cols });
        }
        if self.indptr.len() != self.rows + 1 {
            return Err(SparseError::IndptrLength { rows: self.rows, got: self.indptr.len() });
        }
        if self.indptr[0] != 0 {
            return Err(SparseError::IndptrOrder { row: 0 });
        }
        for row in 0..self.rows {
            if self.indptr[row] > self.indptr[row + 1] {
                return Err(SparseError::IndptrOrder { row });
            }
        }
        if self.indptr[self.rows] != self.indices.len() {
            return Err(SparseError::IndptrOrder { row: self.rows });
        }
        for row in 0..self.rows {
            let cols = &self.indices[self.indptr[row]..self.indptr[row + 1]];
            for (k, &c) in cols.iter().enumerate() {
                if c as usize >= self.cols {
                    return Err(SparseError::ColumnOutOfBounds { row, col: c, cols: self.cols });
                }
                if k > 0 && cols[k - 1] >= c {
                    return Err(SparseError::UnsortedRow { row });
                }
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored entries, explicit zeros included.
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Column indices stored for `row`.
    pub fn row_indices(&self, row: usize) -> &[u32] {
        &self.indices[self.indptr[row]..self.indptr[row + 1]]
    }

    /// Fraction of the dense shape that is guaranteed zero.
    pub fn guaranteed_zero_fraction(&self) -> f64 {
        let dense = self.rows as f64 * self.cols as f64;
        if dense == 0.0 {
            0.0
        } else {
            1.0 - self.nnz() as f64 / dense
        }
    }
}

// ---------------------------------------------------------------------------
// CSR matrix
// ---------------------------------------------------------------------------

/// Sparse matrix in compressed sparse row form.
///
/// ```
/// use scanprop::sparse::CsrMatrix;
///
/// // ┌ 1 . 2 ┐
/// // └ . 3 . ┘
/// let m = CsrMatrix::<f64>::new(2, 3, vec![0, 2, 3], vec![0, 2, 1], vec![1.0, 2.0, 3.0])?;
/// assert_eq!(m.nnz(), 3);
/// assert_eq!(m.row(1), (&[1u32][..], &[3.0][..]));
/// # Ok::<(), scanprop::sparse::SparseError>(())
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix<T> {
    pattern: SparsityPattern,
    data: Vec<T>,
}

impl<T: Scalar> CsrMatrix<T> {
    /// Builds a matrix after validating the CSR invariants.
    pub fn new(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        data: Vec<T>,
    ) -> Result<Self> {
        if data.len() != indices.len() {
            return Err(SparseError::DataLength { data: data.len(), indices: indices.len() });
        }
        Ok(Self { pattern: SparsityPattern::new(rows, cols, indptr, indices)?, data })
    }

    /// Pairs a validated pattern with its values.
    pub fn from_pattern(pattern: SparsityPattern, data: Vec<T>) -> Result<Self> {
        if data.len() != pattern.nnz() {
            return Err(SparseError::DataLength { data: data.len(), indices: pattern.nnz() });
        }
        Ok(Self { pattern, data })
    }

    pub(crate) fn trusted(
        rows: usize,
        cols: usize,
        indptr: Vec<usize>,
        indices: Vec<u32>,
        data: Vec<T>,
    ) -> Self {
        debug_assert_eq!(data.len(), indices.len());
        Self { pattern: SparsityPattern::trusted(rows, cols, indptr, indices), data }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        Self::trusted(n, n, (0..=n).collect(), (0..n as u32).collect(), vec![T::one(); n])
    }

    /// Converts a dense matrix, storing exactly the nonzero entries.
    pub fn from_dense(dense: ArrayView2<T>) -> Self {
        let (rows, cols) = dense.dim();
        let mut indptr = Vec::with_capacity(rows + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for i in 0..rows {
            for j in 0..cols {
                let v = dense[(i, j)];
                if v != T::zero() {
                    indices.push(j as u32);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::trusted(rows, cols, indptr, indices, data)
    }

    /// Expands to a dense matrix.
    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.rows(), self.cols()));
        for i in 0..self.rows() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                out[(i, j as usize)] = v;
            }
        }
        out
    }

    pub fn rows(&self) -> usize {
        self.pattern.rows
    }

    pub fn cols(&self) -> usize {
        self.pattern.cols
    }

    pub fn nnz(&self) -> usize {
        self.pattern.nnz()
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn indptr(&self) -> &[usize] {
        &self.pattern.indptr
    }

    pub fn indices(&self) -> &[u32] {
        &self.pattern.indices
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Column indices and values stored for `row`.
    pub fn row(&self, row: usize) -> (&[u32], &[T]) {
        let span = self.pattern.indptr[row]..self.pattern.indptr[row + 1];
        (&self.pattern.indices[span.clone()], &self.data[span])
    }

    /// Copy with every explicit zero removed from the structure.
    pub fn compact(&self) -> Self {
        let mut indptr = Vec::with_capacity(self.rows() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for i in 0..self.rows() {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                if v != T::zero() {
                    indices.push(j);
                    data.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::trusted(self.rows(), self.cols(), indptr, indices, data)
    }

    // -- serialization ------------------------------------------------------

    /// Writes the matrix in the `CSR1` binary layout.
    ///
    /// Layout, all little-endian: magic `CSR1`, `u32` rows, `u32` cols,
    /// `u64` nnz, `u8` scalar width (4 or 8), row pointers as `u64 x
    /// (rows+1)`, column indices as `u32 x nnz`, values as `width x nnz`.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CSR_MAGIC)?;
        w.write_all(&(self.rows() as u32).to_le_bytes())?;
        w.write_all(&(self.cols() as u32).to_le_bytes())?;
        w.write_all(&(self.nnz() as u64).to_le_bytes())?;
        w.write_all(&[T::WIDTH])?;
        let mut buf = Vec::with_capacity(8 * (self.rows() + 1));
        for &p in self.indptr() {
            buf.extend_from_slice(&(p as u64).to_le_bytes());
        }
        w.write_all(&buf)?;
        buf.clear();
        for &j in self.indices() {
            buf.extend_from_slice(&j.to_le_bytes());
        }
        w.write_all(&buf)?;
        buf.clear();
        for &v in self.data() {
            v.extend_le(&mut buf);
        }
        w.write_all(&buf)?;
        Ok(())
    }

    /// Reads a matrix written by [`CsrMatrix::write_to`].
    ///
    /// The stored scalar width must match `T`; the structure is re-validated
    /// so a corrupt stream cannot produce an inconsistent matrix.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CSR_MAGIC {
            return Err(SparseError::Format("bad magic".into()));
        }
        let rows = read_u32(r)? as usize;
        let cols = read_u32(r)? as usize;
        let nnz = read_u64(r)?;
        let mut width = [0u8; 1];
        r.read_exact(&mut width)?;
        if width[0] != T::WIDTH {
            return Err(SparseError::WidthMismatch { found: width[0], expected: T::WIDTH });
        }
        let nnz = usize::try_from(nnz).map_err(|_| SparseError::Format("nnz overflow".into()))?;
        let mut indptr = Vec::with_capacity(rows + 1);
        for _ in 0..=rows {
            let p = read_u64(r)?;
            indptr.push(
                usize::try_from(p).map_err(|_| SparseError::Format("indptr overflow".into()))?,
            );
        }
        let mut idx_bytes = vec![0u8; 4 * nnz];
        r.read_exact(&mut idx_bytes)?;
        let indices: Vec<u32> = idx_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        let mut val_bytes = vec![0u8; T::WIDTH as usize * nnz];
        r.read_exact(&mut val_bytes)?;
        let data: Vec<T> =
            val_bytes.chunks_exact(T::WIDTH as usize).map(T::from_le_slice).collect();
        Self::new(rows, cols, indptr, indices, data)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

// ---------------------------------------------------------------------------
// Matrix-vector and mixed-density products
// ---------------------------------------------------------------------------

/// Sparse matrix times dense vector.
pub fn spmv<T: Scalar>(a: &CsrMatrix<T>, v: ArrayView1<T>) -> Result<Array1<T>> {
    if v.len() != a.cols() {
        return Err(SparseError::VectorLength { len: v.len(), cols: a.cols() });
    }
    let mut out = Array1::zeros(a.rows());
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        let mut acc = T::zero();
        for (&j, &x) in cols.iter().zip(vals) {
            acc = acc + x * v[j as usize];
        }
        out[i] = acc;
    }
    Ok(out)
}

/// Sparse matrix times dense matrix.
pub fn spmm_sd<T: Scalar>(a: &CsrMatrix<T>, b: ArrayView2<T>) -> Result<Array2<T>> {
    if b.nrows() != a.cols() {
        return Err(shape_err("sparse*dense", a.rows(), a.cols(), b.nrows(), b.ncols()));
    }
    let mut out = Array2::zeros((a.rows(), b.ncols()));
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        let mut out_row = out.row_mut(i);
        for (&k, &x) in cols.iter().zip(vals) {
            out_row.scaled_add(x, &b.row(k as usize));
        }
    }
    Ok(out)
}

/// Dense matrix times sparse matrix.
pub fn spmm_ds<T: Scalar>(a: ArrayView2<T>, b: &CsrMatrix<T>) -> Result<Array2<T>> {
    if a.ncols() != b.rows() {
        return Err(shape_err("dense*sparse", a.nrows(), a.ncols(), b.rows(), b.cols()));
    }
    let mut out = Array2::zeros((a.nrows(), b.cols()));
    for k in 0..b.rows() {
        let (cols, vals) = b.row(k);
        let a_col = a.column(k);
        for (&j, &x) in cols.iter().zip(vals) {
            let mut out_col = out.column_mut(j as usize);
            out_col.scaled_add(x, &a_col);
        }
    }
    Ok(out)
}

fn shape_err(
    op: &'static str,
    left_rows: usize,
    left_cols: usize,
    right_rows: usize,
    right_cols: usize,
) -> SparseError {
    SparseError::IncompatibleShapes { op, left_rows, left_cols, right_rows, right_cols }
}

// ---------------------------------------------------------------------------
// Sparse-sparse products
// ---------------------------------------------------------------------------

/// Per-row workspace shared by the product kernels.
///
/// `stamp[j] == generation` marks column `j` as present in the current row;
/// clearing is O(1) by bumping the generation.
struct RowWorkspace<T> {
    stamp: Vec<u32>,
    generation: u32,
    acc: Vec<T>,
}

impl<T: Scalar> RowWorkspace<T> {
    fn new(cols: usize) -> Self {
        Self { stamp: vec![0; cols], generation: 0, acc: vec![T::zero(); cols] }
    }

    fn next_row(&mut self) {
        self.generation = self.generation.wrapping_add(1);
        if self.generation == 0 {
            self.stamp.fill(0);
            self.generation = 1;
        }
    }

    fn contains(&self, j: u32) -> bool {
        self.stamp[j as usize] == self.generation
    }

    fn insert(&mut self, j: u32) {
        self.stamp[j as usize] = self.generation;
    }
}

fn check_product_shapes(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<()> {
    if a.1 != b.0 {
        return Err(shape_err(op, a.0, a.1, b.0, b.1));
    }
    Ok(())
}

/// Structural sparse-sparse product `a * b`.
///
/// The output pattern is the boolean product of the operand patterns, so an
/// entry whose contributions cancel numerically is kept as an explicit
/// zero. Contributions to each output entry are accumulated in ascending
/// order of the inner index `k`, matching [`plan_product`] order exactly;
/// [`execute_plan`] therefore reproduces this function bit for bit.
pub fn spgemm<T: Scalar>(a: &CsrMatrix<T>, b: &CsrMatrix<T>) -> Result<CsrMatrix<T>> {
    check_product_shapes("sparse*sparse", (a.rows(), a.cols()), (b.rows(), b.cols()))?;
    let rows = a.rows();
    let cols = b.cols();
    let mut ws = RowWorkspace::<T>::new(cols);
    let mut indptr = Vec::with_capacity(rows + 1);
    let mut indices: Vec<u32> = Vec::new();
    let mut data: Vec<T> = Vec::new();
    indptr.push(0);
    let mut row_cols: Vec<u32> = Vec::new();
    for i in 0..rows {
        ws.next_row();
        row_cols.clear();
        let (a_cols, a_vals) = a.row(i);
        for (&k, &av) in a_cols.iter().zip(a_vals) {
            let (b_cols, b_vals) = b.row(k as usize);
            for (&j, &bv) in b_cols.iter().zip(b_vals) {
                let contrib = av * bv;
                if ws.contains(j) {
                    ws.acc[j as usize] = ws.acc[j as usize] + contrib;
                } else {
                    ws.insert(j);
                    ws.acc[j as usize] = contrib;
                    row_cols.push(j);
                }
            }
        }
        row_cols.sort_unstable();
        for &j in &row_cols {
            indices.push(j);
            data.push(ws.acc[j as usize]);
        }
        indptr.push(indices.len());
    }
    Ok(CsrMatrix::trusted(rows, cols, indptr, indices, data))
}

/// Structural product of two patterns plus the number of contribution
/// pairs, without materializing a contribution list.
///
/// The pair count is exactly the number of scalar multiplications a numeric
/// product performs.
pub fn pattern_product(a: &SparsityPattern, b: &SparsityPattern) -> Result<(SparsityPattern, u64)> {
    check_product_shapes("pattern product", (a.rows, a.cols), (b.rows, b.cols))?;
    let rows = a.rows;
    let cols = b.cols;
    let mut stamp = vec![0u32; cols];
    let mut generation = 0u32;
    let mut indptr = Vec::with_capacity(rows + 1);
    let mut indices: Vec<u32> = Vec::new();
    let mut pairs = 0u64;
    indptr.push(0);
    let mut row_cols: Vec<u32> = Vec::new();
    for i in 0..rows {
        generation = generation.wrapping_add(1);
        if generation == 0 {
            stamp.fill(0);
            generation = 1;
        }
        row_cols.clear();
        for &k in a.row_indices(i) {
            let b_row = b.row_indices(k as usize);
            pairs += b_row.len() as u64;
            for &j in b_row {
                if stamp[j as usize] != generation {
                    stamp[j as usize] = generation;
                    row_cols.push(j);
                }
            }
        }
        row_cols.sort_unstable();
        indices.extend_from_slice(&row_cols);
        indptr.push(indices.len());
    }
    Ok((SparsityPattern::trusted(rows, cols, indptr, indices), pairs))
}

/// Contribution-pair count of a structural product without forming it.
///
/// Each entry `(i, k)` of `a` meets every entry of row `k` of `b`, so the
/// count costs `O(nnz(a))` and equals [`pattern_product`]'s pair count.
pub fn product_pair_count(a: &SparsityPattern, b: &SparsityPattern) -> Result<u64> {
    check_product_shapes("pair count", (a.rows, a.cols), (b.rows, b.cols))?;
    let mut pairs = 0u64;
    for i in 0..a.rows {
        for &k in a.row_indices(i) {
            pairs += b.row_indices(k as usize).len() as u64;
        }
    }
    Ok(pairs)
}

/// Symbolic plan for a sparse-sparse product.
///
/// Records, for every output entry, which operand value pairs contribute to
/// it, so the numeric multiply can be replayed without re-deriving the
/// structure. Pair positions index into the operands' `data` arrays.
#[derive(Debug, Clone)]
pub struct ProductPlan {
    pattern: SparsityPattern,
    left_rows: usize,
    left_cols: usize,
    left_nnz: usize,
    right_rows: usize,
    right_cols: usize,
    right_nnz: usize,
    offsets: Vec<usize>,
    pairs: Vec<(u32, u32)>,
}

impl ProductPlan {
    /// Output pattern of the planned product.
    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    /// Total number of contribution pairs (scalar multiplications).
    pub fn pair_count(&self) -> u64 {
        self.pairs.len() as u64
    }

    /// Contribution pairs for output entry `e`, as positions into the left
    /// and right operand data arrays, in accumulation order.
    pub fn contributions(&self, e: usize) -> &[(u32, u32)] {
        &self.pairs[self.offsets[e]..self.offsets[e + 1]]
    }
}

/// Plans the structural product of two patterns.
///
/// Contributions for each output entry are listed in ascending order of the
/// inner index, the same order [`spgemm`] accumulates in.
pub fn plan_product(a: &SparsityPattern, b: &SparsityPattern) -> Result<ProductPlan> {
    check_product_shapes("plan product", (a.rows, a.cols), (b.rows, b.cols))?;
    if a.nnz() > u32::MAX as usize || b.nnz() > u32::MAX as usize {
        return Err(SparseError::PlanMismatch("operand nnz exceeds 32-bit positions".into()));
    }
    let rows = a.rows;
    let cols = b.cols;
    // Per-column contribution lists for the current row, keyed by stamp.
    let mut stamp = vec![0u32; cols];
    let mut generation = 0u32;
    let mut slot_of: Vec<u32> = vec![0; cols];
    let mut row_lists: Vec<Vec<(u32, u32)>> = Vec::new();
    let mut indptr = Vec::with_capacity(rows + 1);
    let mut indices: Vec<u32> = Vec::new();
    let mut offsets = vec![0usize];
    let mut pairs: Vec<(u32, u32)> = Vec::new();
    indptr.push(0);
    let mut row_cols: Vec<u32> = Vec::new();
    for i in 0..rows {
        generation = generation.wrapping_add(1);
        if generation == 0 {
            stamp.fill(0);
            generation = 1;
        }
        row_cols.clear();
        for (pa, &k) in a.row_indices(i).iter().enumerate() {
            let pa = (a.indptr[i] + pa) as u32;
            let b_start = b.indptr[k as usize];
            for (pb, &j) in b.row_indices(k as usize).iter().enumerate() {
                let pb = (b_start + pb) as u32;
                if stamp[j as usize] != generation {
                    stamp[j as usize] = generation;
                    slot_of[j as usize] = row_cols.len() as u32;
                    row_cols.push(j);
                    if row_lists.len() < row_cols.len() {
                        row_lists.push(Vec::new());
                    }
                    row_lists[row_cols.len() - 1].clear();
                }
                row_lists[slot_of[j as usize] as usize].push((pa, pb));
            }
        }
        let mut order: Vec<u32> = (0..row_cols.len() as u32).collect();
        order.sort_unstable_by_key(|&s| row_cols[s as usize]);
        for &s in &order {
            indices.push(row_cols[s as usize]);
            pairs.extend_from_slice(&row_lists[s as usize]);
            offsets.push(pairs.len());
        }
        indptr.push(indices.len());
    }
    Ok(ProductPlan {
        pattern: SparsityPattern::trusted(rows, cols, indptr, indices),
        left_rows: a.rows,
        left_cols: a.cols,
        left_nnz: a.nnz(),
        right_rows: b.rows,
        right_cols: b.cols,
        right_nnz: b.nnz(),
        offsets,
        pairs,
    })
}

/// Replays a planned product against numeric operands.
///
/// Produces exactly the bits [`spgemm`] would: same output structure, same
/// per-entry accumulation order.
pub fn execute_plan<T: Scalar>(
    plan: &ProductPlan,
    a: &CsrMatrix<T>,
    b: &CsrMatrix<T>,
) -> Result<CsrMatrix<T>> {
    if a.rows() != plan.left_rows
        || a.cols() != plan.left_cols
        || a.nnz() != plan.left_nnz
        || b.rows() != plan.right_rows
        || b.cols() != plan.right_cols
        || b.nnz() != plan.right_nnz
    {
        return Err(SparseError::PlanMismatch(format!(
            "planned for {}x{} ({} nnz) * {}x{} ({} nnz), got {}x{} ({} nnz) * {}x{} ({} nnz)",
            plan.left_rows,
            plan.left_cols,
            plan.left_nnz,
            plan.right_rows,
            plan.right_cols,
            plan.right_nnz,
            a.rows(),
            a.cols(),
            a.nnz(),
            b.rows(),
            b.cols(),
            b.nnz(),
        )));
    }
    let mut data = Vec::with_capacity(plan.pattern.nnz());
    for e in 0..plan.pattern.nnz() {
        let contribs = plan.contributions(e);
        let (&(pa, pb), rest) =
            contribs.split_first().expect("every planned entry has a contribution");
        let mut acc = a.data[pa as usize] * b.data[pb as usize];
        for &(pa, pb) in rest {
            acc = acc + a.data[pa as usize] * b.data[pb as usize];
        }
        data.push(acc);
    }
    CsrMatrix::from_pattern(plan.pattern.clone(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn sample_a() -> CsrMatrix<f64> {
        // ┌ 1 . 2 ┐
        // │ . . 3 │
        // └ 4 5 . ┘
        CsrMatrix::new(3, 3, vec![0, 2, 3, 5], vec![0, 2, 2, 0, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0])
            .unwrap()
    }

    fn sample_b() -> CsrMatrix<f64> {
        // ┌ . 6 ┐
        // │ 7 . │
        // └ 8 9 ┘
        CsrMatrix::new(3, 2, vec![0, 1, 2, 4], vec![1, 0, 0, 1], vec![6.0, 7.0, 8.0, 9.0]).unwrap()
    }

    #[test]
    fn validates_structure() {
        assert!(matches!(
            CsrMatrix::<f64>::new(2, 2, vec![0, 1], vec![0], vec![1.0]),
            Err(SparseError::IndptrLength { .. })
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(1, 2, vec![0, 2], vec![0, 3], vec![1.0, 1.0]),
            Err(SparseError::ColumnOutOfBounds { row: 0, col: 3, .. })
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]),
            Err(SparseError::UnsortedRow { row: 0 })
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(1, 3, vec![0, 2], vec![1, 1], vec![1.0, 1.0]),
            Err(SparseError::UnsortedRow { row: 0 })
        ));
        assert!(matches!(
            CsrMatrix::<f64>::new(2, 2, vec![0, 2, 1], vec![0, 1], vec![1.0, 1.0]),
            Err(SparseError::IndptrOrder { row: 1 })
        ));
    }

    #[test]
    fn dense_round_trip() {
        let d = arr2(&[[1.0, 0.0, 2.0], [0.0, 0.0, 3.0], [4.0, 5.0, 0.0]]);
        let m = CsrMatrix::from_dense(d.view());
        assert_eq!(m, sample_a());
        assert_eq!(m.to_dense(), d);
    }

    #[test]
    fn spmv_matches_dense() {
        let m = sample_a();
        let v = ndarray::arr1(&[1.0, -1.0, 2.0]);
        let got = spmv(&m, v.view()).unwrap();
        assert_eq!(got, m.to_dense().dot(&v));
        assert!(matches!(
            spmv(&m, ndarray::arr1(&[1.0]).view()),
            Err(SparseError::VectorLength { len: 1, cols: 3 })
        ));
    }

    #[test]
    fn spgemm_matches_dense_product() {
        let a = sample_a();
        let b = sample_b();
        let p = spgemm(&a, &b).unwrap();
        assert_eq!(p.to_dense(), a.to_dense().dot(&b.to_dense()));
        assert!(matches!(spgemm(&b, &a), Err(SparseError::IncompatibleShapes { .. })));
    }

    #[test]
    fn spgemm_keeps_cancelled_entries() {
        // Row products cancel: [1, -1] * [[1], [1]] = [0], structurally present.
        let a = CsrMatrix::new(1, 2, vec![0, 2], vec![0, 1], vec![1.0, -1.0]).unwrap();
        let b = CsrMatrix::new(2, 1, vec![0, 1, 2], vec![0, 0], vec![1.0, 1.0]).unwrap();
        let p = spgemm(&a, &b).unwrap();
        assert_eq!(p.nnz(), 1);
        assert_eq!(p.data(), &[0.0]);
        assert_eq!(p.compact().nnz(), 0);
    }

    #[test]
    fn mixed_density_products_match_dense() {
        let a = sample_a();
        let d = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        assert_eq!(spmm_sd(&a, d.view()).unwrap(), a.to_dense().dot(&d));
        let l = arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        assert_eq!(spmm_ds(l.view(), &a).unwrap(), l.dot(&a.to_dense()));
    }

    #[test]
    fn plan_replays_spgemm_exactly() {
        let a = sample_a();
        let b = sample_b();
        let plan = plan_product(a.pattern(), b.pattern()).unwrap();
        let direct = spgemm(&a, &b).unwrap();
        let replayed = execute_plan(&plan, &a, &b).unwrap();
        assert_eq!(direct, replayed);
        assert_eq!(plan.pattern(), direct.pattern());
        // 5 nnz in a, each row of b has 1-2 entries; count checked against spgemm's work.
        let (pat, pairs) = pattern_product(a.pattern(), b.pattern()).unwrap();
        assert_eq!(&pat, direct.pattern());
        assert_eq!(pairs, plan.pair_count());
    }

    #[test]
    fn plan_rejects_foreign_operands() {
        let a = sample_a();
        let b = sample_b();
        let plan = plan_product(a.pattern(), b.pattern()).unwrap();
        let c = CsrMatrix::<f64>::identity(3);
        assert!(matches!(execute_plan(&plan, &a, &c), Err(SparseError::PlanMismatch(_))));
    }

    #[test]
    fn identity_is_neutral() {
        let a = sample_a();
        let i = CsrMatrix::<f64>::identity(3);
        assert_eq!(spgemm(&i, &a).unwrap(), a);
        assert_eq!(spgemm(&a, &i).unwrap(), a);
    }

    #[test]
    fn serialization_round_trips() {
        let a = sample_a();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        // magic + rows + cols + nnz + width + indptr + indices + data
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 1 + 8 * 4 + 4 * 5 + 8 * 5);
        let back = CsrMatrix::<f64>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
        assert!(matches!(
            CsrMatrix::<f32>::read_from(&mut buf.as_slice()),
            Err(SparseError::WidthMismatch { found: 8, expected: 4 })
        ));
        buf[0] = b'X';
        assert!(matches!(
            CsrMatrix::<f64>::read_from(&mut buf.as_slice()),
            Err(SparseError::Format(_))
        ));
    }

    #[test]
    fn guaranteed_zero_fraction_counts_structure() {
        let a = sample_a();
        assert_eq!(a.pattern().guaranteed_zero_fraction(), 1.0 - 5.0 / 9.0);
        assert_eq!(CsrMatrix::<f64>::identity(4).pattern().guaranteed_zero_fraction(), 0.75);
    }
}
