//! Exclusive scans over chains of transposed Jacobians.
//!
//! The composition operator is `diamond(a, b) = b * a`: associative,
//! non-commutative, with the identity matrix as its neutral element. An
//! exclusive scan of `diamond` over `[grad, J_n^T, ..., J_1^T]` leaves the
//! gradient with respect to every intermediate activation in one pass.
//!
//! Three executors share one op vocabulary:
//!
//! - [`linear_scan`]: serial left fold, the reference implementation.
//! - [`blelloch_scan`]: two-phase work-efficient parallel scan. The
//!   down-sweep applies `a[r] <- a[r] diamond T` with the operands in that
//!   order; reversing them is what makes the textbook scan correct for a
//!   non-commutative operator.
//! - [`hybrid_scan`]: truncated up-sweep, a serial bridge that computes the
//!   block prefixes the truncated down-sweep consumes, then the last
//!   `down_levels` of the down-sweep. Trades parallelism for avoiding the
//!   densest matrix-matrix products at the top of the scan tree.
//!
//! All executors return `m` elements for an `m`-element array:
//! `[I, p(1), ..., p(m-1)]` where `p(k)` folds the first `k` elements. The
//! last input element is never folded into any output; chains built from a
//! network's Jacobians carry it so that `p(m-1)` is the gradient at the
//! first layer's input.
//!
//! Every `diamond` application can be traced with its multiply-add count;
//! the static analyzer replays the same schedules symbolically and must
//! agree exactly, so the level and bridge enumeration lives in
//! [`schedule`] and is shared.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, Array2, Array3};
use rayon::prelude::*;
use rayon::ThreadPool;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::sparse::{self, CsrMatrix, SparseError};

/// Errors raised by scan construction and execution.
#[derive(Debug, Error)]
pub enum ScanError {
    #[error("incompatible operands: diamond of {left} by {right}")]
    Incompatible { left: String, right: String },
    #[error("batch sizes differ: {0} vs {1}")]
    BatchMismatch(usize, usize),
    #[error("scan arrays must hold at least one element")]
    EmptyArray,
    #[error("worker count must be at least 1")]
    NoWorkers,
    #[error("{phase} depth {requested} exceeds the maximum {available} for this length")]
    LevelsOutOfRange { phase: &'static str, requested: usize, available: usize },
    #[error("up_levels {up} exceeds down_levels {down}: block prefixes would be unrecoverable")]
    LevelsIncompatible { up: usize, down: usize },
    #[error(transparent)]
    Sparse(#[from] SparseError),
}

/// Result alias for scan operations.
pub type Result<T> = std::result::Result<T, ScanError>;

// ---------------------------------------------------------------------------
// Elements
// ---------------------------------------------------------------------------

/// One slot of a scan array.
///
/// `Identity` is symbolic: it is never materialized as a matrix, it only
/// short-circuits `diamond`. Batched variants carry a leading batch axis
/// and compose slice by slice, so one scan call serves a whole minibatch.
#[derive(Debug, Clone)]
pub enum ScanElement<T> {
    Identity,
    /// Column vector, treated as `d x 1`.
    Vector(Arc<Array1<T>>),
    Dense(Arc<Array2<T>>),
    Sparse(Arc<CsrMatrix<T>>),
    /// `(batch, d)`: one vector per batch slice.
    BatchedVector(Arc<Array2<T>>),
    /// `(batch, r, c)`: one matrix per batch slice.
    BatchedDense(Arc<Array3<T>>),
}

impl<T: Scalar> ScanElement<T> {
    pub fn vector(v: Array1<T>) -> Self {
        Self::Vector(Arc::new(v))
    }

    pub fn dense(m: Array2<T>) -> Self {
        Self::Dense(Arc::new(m))
    }

    pub fn sparse(m: CsrMatrix<T>) -> Self {
        Self::Sparse(Arc::new(m))
    }

    pub fn batched_vector(v: Array2<T>) -> Self {
        Self::BatchedVector(Arc::new(v))
    }

    pub fn batched_dense(m: Array3<T>) -> Self {
        Self::BatchedDense(Arc::new(m))
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    /// `(rows, cols)` with vectors as `d x 1`; `None` for `Identity`.
    pub fn shape(&self) -> Option<(usize, usize)> {
        match self {
            Self::Identity => None,
            Self::Vector(v) => Some((v.len(), 1)),
            Self::Dense(m) => Some(m.dim()),
            Self::Sparse(m) => Some((m.rows(), m.cols())),
            Self::BatchedVector(v) => Some((v.ncols(), 1)),
            Self::BatchedDense(m) => {
                let (_, r, c) = m.dim();
                Some((r, c))
            }
        }
    }

    /// Batch size, if this element carries a batch axis.
    pub fn batch(&self) -> Option<usize> {
        match self {
            Self::BatchedVector(v) => Some(v.nrows()),
            Self::BatchedDense(m) => Some(m.dim().0),
            _ => None,
        }
    }

    fn describe(&self) -> String {
        match self.shape() {
            None => "identity".into(),
            Some((r, c)) => {
                let kind = match self {
                    Self::Vector(_) => "vector",
                    Self::Dense(_) => "dense",
                    Self::Sparse(_) => "sparse",
                    Self::BatchedVector(_) => "batched-vector",
                    Self::BatchedDense(_) => "batched-dense",
                    Self::Identity => unreachable!(),
                };
                match self.batch() {
                    Some(b) => format!("{kind}[{b}x{r}x{c}]"),
                    None => format!("{kind}[{r}x{c}]"),
                }
            }
        }
    }

    /// Largest absolute elementwise difference from `other`.
    ///
    /// Returns infinity when kinds or shapes make the elements
    /// incomparable. Sparse elements are compared through their dense
    /// expansions; intended for validation on modest sizes.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.compare(other, |a, b| (a - b).abs())
    }

    /// Largest elementwise difference from `other`, relative to the larger
    /// magnitude with a floor of one so near-zero entries compare
    /// absolutely.
    pub fn max_rel_diff(&self, other: &Self) -> f64 {
        self.compare(other, |a, b| (a - b).abs() / a.abs().max(b.abs()).max(1.0))
    }

    fn compare(&self, other: &Self, metric: fn(f64, f64) -> f64) -> f64 {
        use ScanElement::*;
        let fold = |it: &mut dyn Iterator<Item = (&T, &T)>| -> f64 {
            it.fold(0.0f64, |m, (&a, &b)| m.max(metric(Scalar::to_f64(a), Scalar::to_f64(b))))
        };
        match (self, other) {
            (Identity, Identity) => 0.0,
            (Vector(a), Vector(b)) if a.len() == b.len() => fold(&mut a.iter().zip(b.iter())),
            (Dense(a), Dense(b)) if a.dim() == b.dim() => fold(&mut a.iter().zip(b.iter())),
            (BatchedVector(a), BatchedVector(b)) if a.dim() == b.dim() => {
                fold(&mut a.iter().zip(b.iter()))
            }
            (BatchedDense(a), BatchedDense(b)) if a.dim() == b.dim() => {
                fold(&mut a.iter().zip(b.iter()))
            }
            (Sparse(a), Sparse(b)) if self.shape() == other.shape() => {
                let (da, db) = (a.to_dense(), b.to_dense());
                fold(&mut da.iter().zip(db.iter()))
            }
            (Sparse(a), Dense(b)) | (Dense(b), Sparse(a)) if a.to_dense().dim() == b.dim() => {
                let da = a.to_dense();
                fold(&mut da.iter().zip(b.iter()))
            }
            _ => f64::INFINITY,
        }
    }
}

// ---------------------------------------------------------------------------
// The operator
// ---------------------------------------------------------------------------

/// Kind of numeric work one `diamond` application performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    /// Matrix-matrix product.
    Mm,
    /// Matrix-vector product.
    Mv,
    /// Identity short-circuit: no numeric work.
    Id,
}

impl OpKind {
    pub fn label(self) -> &'static str {
        match self {
            OpKind::Mm => "mm",
            OpKind::Mv => "mv",
            OpKind::Id => "id",
        }
    }
}

/// Cost of one `diamond` application: multiply-add pairs performed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OpCost {
    pub kind: OpKind,
    pub madds: u64,
}

fn incompatible<T: Scalar>(a: &ScanElement<T>, b: &ScanElement<T>) -> ScanError {
    ScanError::Incompatible { left: a.describe(), right: b.describe() }
}

/// Composition `diamond(a, b) = b * a`, with its cost.
///
/// `a` may be a vector (treated as one column); composing with `Identity`
/// on either side returns the other operand without any multiplication.
pub fn diamond_counted<T: Scalar>(
    a: &ScanElement<T>,
    b: &ScanElement<T>,
) -> Result<(ScanElement<T>, OpCost)> {
    use ScanElement::*;
    if let Identity = a {
        return Ok((b.clone(), OpCost { kind: OpKind::Id, madds: 0 }));
    }
    if let Identity = b {
        return Ok((a.clone(), OpCost { kind: OpKind::Id, madds: 0 }));
    }
    let (a_rows, a_cols) = a.shape().expect("non-identity");
    let (b_rows, b_cols) = b.shape().expect("non-identity");
    if b_cols != a_rows {
        return Err(incompatible(a, b));
    }
    match (a.batch(), b.batch()) {
        (Some(ba), Some(bb)) if ba != bb => return Err(ScanError::BatchMismatch(bb, ba)),
        _ => {}
    }
    let out = match (a, b) {
        // Unbatched numeric cases.
        (Vector(x), Dense(m)) => (
            ScanElement::vector(m.dot(x.as_ref())),
            OpCost { kind: OpKind::Mv, madds: (b_rows * b_cols) as u64 },
        ),
        (Vector(x), Sparse(m)) => (
            ScanElement::vector(sparse::spmv(m, x.view())?),
            OpCost { kind: OpKind::Mv, madds: m.nnz() as u64 },
        ),
        (Dense(x), Dense(m)) => (
            ScanElement::dense(m.dot(x.as_ref())),
            OpCost { kind: OpKind::Mm, madds: (b_rows * a_cols * b_cols) as u64 },
        ),
        (Sparse(x), Dense(m)) => (
            ScanElement::dense(sparse::spmm_ds(m.view(), x)?),
            OpCost { kind: OpKind::Mm, madds: (x.nnz() * b_rows) as u64 },
        ),
        (Dense(x), Sparse(m)) => (
            ScanElement::dense(sparse::spmm_sd(m, x.view())?),
            OpCost { kind: OpKind::Mm, madds: (m.nnz() * a_cols) as u64 },
        ),
        (Sparse(x), Sparse(m)) => {
            let plan = sparse::plan_product(m.pattern(), x.pattern())?;
            let madds = plan.pair_count();
            (
                ScanElement::sparse(sparse::execute_plan(&plan, m, x)?),
                OpCost { kind: OpKind::Mm, madds },
            )
        }
        // A vector acting as the right operand has one column; promote it.
        (Dense(_) | Sparse(_) | Vector(_), Vector(y)) => {
            let m = Array2::from_shape_vec((y.len(), 1), y.to_vec())
                .expect("column promotion is shape-exact");
            return diamond_counted(a, &ScanElement::dense(m));
        }
        // Batched cases: compose per slice, broadcasting unbatched sides.
        (BatchedVector(_) | BatchedDense(_) | Vector(_) | Dense(_), _)
        | (_, BatchedVector(_) | BatchedDense(_)) => {
            return diamond_batched(a, b, a_cols);
        }
        (Identity, _) | (_, Identity) => unreachable!("identity handled above"),
    };
    Ok(out)
}

/// Per-slice composition for elements with a batch axis.
///
/// Sparse operands do not support batching: batched matrices in this crate
/// are small recurrent Jacobians, which are dense.
fn diamond_batched<T: Scalar>(
    a: &ScanElement<T>,
    b: &ScanElement<T>,
    a_cols: usize,
) -> Result<(ScanElement<T>, OpCost)> {
    use ScanElement::*;
    if matches!(a, Sparse(_)) || matches!(b, Sparse(_)) {
        return Err(incompatible(a, b));
    }
    let batch = a.batch().or(b.batch()).expect("at least one batched operand");
    let slice_a = |i: usize| -> ScanElement<T> {
        match a {
            Vector(_) | Dense(_) => a.clone(),
            BatchedVector(v) => ScanElement::vector(v.row(i).to_owned()),
            BatchedDense(m) => ScanElement::dense(m.index_axis(ndarray::Axis(0), i).to_owned()),
            _ => unreachable!("identity and sparse handled by the caller"),
        }
    };
    let slice_b = |i: usize| -> ScanElement<T> {
        match b {
            Vector(_) | Dense(_) => b.clone(),
            BatchedVector(v) => ScanElement::vector(v.row(i).to_owned()),
            BatchedDense(m) => ScanElement::dense(m.index_axis(ndarray::Axis(0), i).to_owned()),
            _ => unreachable!("identity and sparse handled by the caller"),
        }
    };
    let mut madds = 0u64;
    let mut kind = OpKind::Mv;
    // Result is a batched vector when the sliced product is a vector.
    let vector_out = a_cols == 1 && !matches!((a, b), (Dense(_) | BatchedDense(_), _));
    if vector_out {
        let first = slice_b(0).shape().expect("matrix operand").0;
        let mut out = Array2::zeros((batch, first));
        for i in 0..batch {
            let (res, cost) = diamond_counted(&slice_a(i), &slice_b(i))?;
            madds += cost.madds;
            kind = cost.kind;
            match res {
                Vector(v) => out.row_mut(i).assign(&v),
                _ => unreachable!("vector slices compose to vectors"),
            }
        }
        Ok((ScanElement::batched_vector(out), OpCost { kind, madds }))
    } else {
        let rows = slice_b(0).shape().expect("matrix operand").0;
        let mut out = Array3::zeros((batch, rows, a_cols));
        for i in 0..batch {
            let (res, cost) = diamond_counted(&slice_a(i), &slice_b(i))?;
            madds += cost.madds;
            kind = cost.kind;
            match res {
                Dense(m) => out.index_axis_mut(ndarray::Axis(0), i).assign(&m),
                _ => unreachable!("matrix slices compose to matrices"),
            }
        }
        Ok((ScanElement::batched_dense(out), OpCost { kind, madds }))
    }
}

/// Composition `diamond(a, b) = b * a` without cost accounting.
pub fn diamond<T: Scalar>(a: &ScanElement<T>, b: &ScanElement<T>) -> Result<ScanElement<T>> {
    diamond_counted(a, b).map(|(e, _)| e)
}

// ---------------------------------------------------------------------------
// Scan arrays
// ---------------------------------------------------------------------------

/// A chain-compatible sequence of scan elements.
///
/// Treating vectors as single columns, `cols(a[k+1]) == rows(a[k])` must
/// hold for consecutive non-identity elements, and all batched elements
/// must agree on the batch size. Gradient chains put the loss gradient at
/// `a[0]` followed by transposed Jacobians from the last operation to the
/// first.
#[derive(Debug, Clone)]
pub struct ScanArray<T> {
    elems: Vec<ScanElement<T>>,
}

impl<T: Scalar> ScanArray<T> {
    pub fn new(elems: Vec<ScanElement<T>>) -> Result<Self> {
        if elems.is_empty() {
            return Err(ScanError::EmptyArray);
        }
        let mut batch: Option<usize> = None;
        for e in &elems {
            if let Some(b) = e.batch() {
                match batch {
                    Some(prev) if prev != b => return Err(ScanError::BatchMismatch(prev, b)),
                    _ => batch = Some(b),
                }
            }
        }
        // Identity is a wildcard; check adjacent materialized shapes.
        let mut prev_rows: Option<(usize, &ScanElement<T>)> = None;
        for e in &elems {
            if let Some((rows, cols)) = e.shape() {
                if let Some((need, prev)) = prev_rows {
                    if cols != need {
                        return Err(incompatible(prev, e));
                    }
                }
                prev_rows = Some((rows, e));
            }
        }
        Ok(Self { elems })
    }

    pub fn len(&self) -> usize {
        self.elems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elems.is_empty()
    }

    pub fn elements(&self) -> &[ScanElement<T>] {
        &self.elems
    }
}

// ---------------------------------------------------------------------------
// Schedules
// ---------------------------------------------------------------------------

/// Index arithmetic of the scan executors, shared with the static
/// analyzer so predicted and measured op sequences match step for step.
pub mod schedule {
    use super::{Result, ScanError};

    /// Smallest `k` with `2^k >= m`.
    pub fn ceil_log2(m: usize) -> usize {
        assert!(m > 0, "length must be positive");
        m.next_power_of_two().trailing_zeros() as usize
    }

    /// Number of up-sweep levels for an array of length `m`.
    pub fn upsweep_depth(m: usize) -> usize {
        ceil_log2(m).saturating_sub(1)
    }

    /// Number of down-sweep levels for an array of length `m`.
    pub fn downsweep_depth(m: usize) -> usize {
        ceil_log2(m)
    }

    /// One barrier-separated batch of disjoint slot pairs.
    #[derive(Debug, Clone, PartialEq, Eq)]
    pub struct Level {
        /// Tree depth `d`; pair stride is `2^(d+1)`.
        pub d: usize,
        /// `(l, r)` slot pairs; all slots in a level are distinct.
        pub pairs: Vec<(usize, usize)>,
    }

    fn level_pairs(m: usize, d: usize) -> Vec<(usize, usize)> {
        let n = m - 1;
        let step = 1usize << (d + 1);
        let half = 1usize << d;
        let mut pairs = Vec::new();
        let mut i = 0usize;
        while half <= n && i <= n - half {
            pairs.push((i + half - 1, (i + step - 1).min(n)));
            i += step;
        }
        pairs
    }

    /// Up-sweep levels in execution order: `d = 0, 1, ...`.
    pub fn upsweep_levels(m: usize) -> Vec<Level> {
        (0..upsweep_depth(m)).map(|d| Level { d, pairs: level_pairs(m, d) }).collect()
    }

    /// Down-sweep levels in execution order: `d = depth-1, ..., 0`.
    pub fn downsweep_levels(m: usize) -> Vec<Level> {
        (0..downsweep_depth(m)).rev().map(|d| Level { d, pairs: level_pairs(m, d) }).collect()
    }

    /// One serial step of the hybrid bridge.
    ///
    /// `Reduce` extends a slot's aggregate leftward. The remaining ops
    /// maintain a running prefix register `P` and a snapshot register:
    /// `Snapshot` saves `P`, `Advance` folds a slot into `P`,
    /// `PlaceSnapshot` stores the saved prefix into a slot, and
    /// `PlacePrefix` stores `P` itself (used for the final block, whose
    /// elements no later consumer needs).
    #[derive(Debug, Clone, Copy, PartialEq, Eq)]
    pub enum BridgeOp {
        Reduce { src: usize, dst: usize },
        Snapshot,
        Advance { src: usize },
        PlaceSnapshot { slot: usize },
        PlacePrefix { slot: usize },
    }

    /// Serial bridge between a truncated up-sweep and a truncated
    /// down-sweep.
    ///
    /// Simulates which contiguous element range each slot aggregates after
    /// `up_levels` of up-sweep, extends the left-half aggregates that the
    /// `down_levels` tail will read, and walks the running prefix across
    /// the size-`2^down_levels` blocks, placing each block's incoming
    /// prefix at the block's last slot. Requires `up_levels <=
    /// down_levels`: coarser aggregates than the down-sweep's block size
    /// would straddle block boundaries and the per-block prefixes could
    /// not be formed.
    pub fn bridge_ops(m: usize, up_levels: usize, down_levels: usize) -> Result<Vec<BridgeOp>> {
        if up_levels > upsweep_depth(m) {
            return Err(ScanError::LevelsOutOfRange {
                phase: "up-sweep",
                requested: up_levels,
                available: upsweep_depth(m),
            });
        }
        if down_levels > downsweep_depth(m) {
            return Err(ScanError::LevelsOutOfRange {
                phase: "down-sweep",
                requested: down_levels,
                available: downsweep_depth(m),
            });
        }
        if up_levels > down_levels {
            return Err(ScanError::LevelsIncompatible { up: up_levels, down: down_levels });
        }
        let n = m - 1;
        // lo[j]: first element index aggregated into slot j.
        let mut lo: Vec<usize> = (0..m).collect();
        for level in upsweep_levels(m).into_iter().take(up_levels) {
            for (l, r) in level.pairs {
                debug_assert_eq!(lo[r], l + 1, "up-sweep merges adjacent ranges");
                lo[r] = lo[l];
            }
        }
        let mut ops = Vec::new();
        // Extend the left-half aggregates the down-sweep tail reads.
        for d in 0..down_levels {
            for (l, _) in level_pairs(m, d) {
                let start = l + 1 - (1 << d);
                while lo[l] > start {
                    let j = lo[l] - 1;
                    ops.push(BridgeOp::Reduce { src: j, dst: l });
                    lo[l] = lo[j];
                }
                debug_assert_eq!(lo[l], start, "aggregate overshot its block");
            }
        }
        // Largest slot ending each aggregate, keyed by the aggregate start.
        let mut best_end = vec![usize::MAX; m];
        for (e, &start) in lo.iter().enumerate() {
            best_end[start] = e;
        }
        let block = 1usize << down_levels;
        let mut i = 0usize;
        while i <= n {
            let r = (i + block - 1).min(n);
            let last_block = i + block > n;
            if last_block {
                ops.push(BridgeOp::PlacePrefix { slot: r });
            } else {
                ops.push(BridgeOp::Snapshot);
                let mut j = i;
                while j <= r {
                    let e = best_end[j];
                    assert!(e >= j && e <= r, "bridge tiling failed at slot {j}");
                    ops.push(BridgeOp::Advance { src: e });
                    j = e + 1;
                }
                ops.push(BridgeOp::PlaceSnapshot { slot: r });
            }
            i += block;
        }
        Ok(ops)
    }
}

// ---------------------------------------------------------------------------
// Traces
// ---------------------------------------------------------------------------

/// Phase an operation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Linear,
    Upsweep,
    Bridge,
    Downsweep,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Linear => "linear",
            Phase::Upsweep => "up-sweep",
            Phase::Bridge => "bridge",
            Phase::Downsweep => "down-sweep",
        }
    }
}

/// One traced `diamond` application.
#[derive(Debug, Clone, Copy)]
pub struct TraceOp {
    pub phase: Phase,
    /// Tree depth for up/down-sweep ops; meaningless for serial phases.
    pub level: Option<usize>,
    pub l: usize,
    pub r: usize,
    pub kind: OpKind,
    pub madds: u64,
}

/// Execution log of one scan: every `diamond` application in order.
#[derive(Debug, Clone, Default)]
pub struct ScanTrace {
    pub ops: Vec<TraceOp>,
    barriers: usize,
}

impl ScanTrace {
    /// Total `diamond` applications, identity short-circuits included.
    pub fn diamond_ops(&self) -> usize {
        self.ops.len()
    }

    /// Total multiply-add pairs across all ops.
    pub fn total_madds(&self) -> u64 {
        self.ops.iter().map(|o| o.madds).sum()
    }

    /// Barrier-separated parallel levels executed (serial phases count as
    /// one each when non-empty).
    pub fn barrier_levels(&self) -> usize {
        self.barriers
    }

    fn push(&mut self, op: TraceOp) {
        self.ops.push(op);
    }

    fn add_barrier(&mut self) {
        self.barriers += 1;
    }

    /// Writes one CSV row per level: `phase, d, pairs, flop` with flop
    /// counted as two per multiply-add.
    pub fn write_level_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "phase,d,pairs,flop")?;
        let mut rows: Vec<(Phase, Option<usize>, usize, u64)> = Vec::new();
        for op in &self.ops {
            match rows.last_mut() {
                Some((p, d, pairs, flop)) if *p == op.phase && *d == op.level => {
                    *pairs += 1;
                    *flop += 2 * op.madds;
                }
                _ => rows.push((op.phase, op.level, 1, 2 * op.madds)),
            }
        }
        for (phase, d, pairs, flop) in rows {
            let d = d.map_or(String::from("-"), |d| d.to_string());
            writeln!(w, "{},{},{},{}", phase.label(), d, pairs, flop)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Executors
// ---------------------------------------------------------------------------

fn pool_for(workers: usize) -> Arc<ThreadPool> {
    static POOLS: OnceLock<Mutex<HashMap<usize, Arc<ThreadPool>>>> = OnceLock::new();
    let pools = POOLS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut pools = pools.lock().expect("pool registry is never poisoned");
    pools
        .entry(workers)
        .or_insert_with(|| {
            Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .expect("thread pool construction"),
            )
        })
        .clone()
}

/// Serial exclusive scan; the reference all other executors are tested
/// against.
pub fn linear_scan<T: Scalar>(arr: &ScanArray<T>) -> Result<Vec<ScanElement<T>>> {
    linear_scan_traced(arr).map(|(out, _)| out)
}

/// [`linear_scan`] with an execution trace.
pub fn linear_scan_traced<T: Scalar>(
    arr: &ScanArray<T>,
) -> Result<(Vec<ScanElement<T>>, ScanTrace)> {
    let elems = arr.elements();
    let mut out = Vec::with_capacity(elems.len());
    let mut trace = ScanTrace::default();
    out.push(ScanElement::Identity);
    if elems.len() >= 2 {
        let mut acc = elems[0].clone();
        out.push(acc.clone());
        for (k, elem) in elems.iter().enumerate().take(elems.len() - 1).skip(1) {
            let (next, cost) = diamond_counted(&acc, elem)?;
            trace.push(TraceOp {
                phase: Phase::Linear,
                level: None,
                l: k,
                r: k,
                kind: cost.kind,
                madds: cost.madds,
            });
            acc = next;
            out.push(acc.clone());
        }
        trace.add_barrier();
    }
    Ok((out, trace))
}

/// Runs one batch of pairs with `slots[r] <- diamond(slots[l], slots[r])`,
/// in parallel when more than one worker is available.
fn run_upsweep_level<T: Scalar>(
    slots: &mut [ScanElement<T>],
    phase: Phase,
    level: &schedule::Level,
    workers: usize,
    trace: &mut ScanTrace,
) -> Result<()> {
    let results: Vec<(ScanElement<T>, OpCost)> = if workers > 1 && level.pairs.len() > 1 {
        let slots_ref: &[ScanElement<T>] = slots;
        pool_for(workers).install(|| {
            level
                .pairs
                .par_iter()
                .map(|&(l, r)| diamond_counted(&slots_ref[l], &slots_ref[r]))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        level
            .pairs
            .iter()
            .map(|&(l, r)| diamond_counted(&slots[l], &slots[r]))
            .collect::<Result<Vec<_>>>()?
    };
    for (&(l, r), (value, cost)) in level.pairs.iter().zip(results) {
        slots[r] = value;
        trace.push(TraceOp {
            phase,
            level: Some(level.d),
            l,
            r,
            kind: cost.kind,
            madds: cost.madds,
        });
    }
    trace.add_barrier();
    Ok(())
}

/// Runs one down-sweep level: `(a[l], a[r]) <- (a[r], a[r] diamond a[l])`.
///
/// The composed value is `old_l * old_r` — the operand reversal that makes
/// the scan correct for the non-commutative operator.
fn run_downsweep_level<T: Scalar>(
    slots: &mut [ScanElement<T>],
    level: &schedule::Level,
    workers: usize,
    trace: &mut ScanTrace,
) -> Result<()> {
    let results: Vec<(ScanElement<T>, OpCost)> = if workers > 1 && level.pairs.len() > 1 {
        let slots_ref: &[ScanElement<T>] = slots;
        pool_for(workers).install(|| {
            level
                .pairs
                .par_iter()
                .map(|&(l, r)| diamond_counted(&slots_ref[r], &slots_ref[l]))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        level
            .pairs
            .iter()
            .map(|&(l, r)| diamond_counted(&slots[r], &slots[l]))
            .collect::<Result<Vec<_>>>()?
    };
    for (&(l, r), (value, cost)) in level.pairs.iter().zip(results) {
        slots[l] = std::mem::replace(&mut slots[r], value);
        trace.push(TraceOp {
            phase: Phase::Downsweep,
            level: Some(level.d),
            l,
            r,
            kind: cost.kind,
            madds: cost.madds,
        });
    }
    trace.add_barrier();
    Ok(())
}

/// Work-efficient parallel exclusive scan.
///
/// Up-sweep reduces adjacent aggregates; the last slot is then replaced by
/// the symbolic identity and the down-sweep distributes prefixes back.
/// Output equals [`linear_scan`] up to floating-point reassociation.
pub fn blelloch_scan<T: Scalar>(
    arr: &ScanArray<T>,
    workers: usize,
) -> Result<Vec<ScanElement<T>>> {
    blelloch_scan_traced(arr, workers).map(|(out, _)| out)
}

/// [`blelloch_scan`] with an execution trace.
pub fn blelloch_scan_traced<T: Scalar>(
    arr: &ScanArray<T>,
    workers: usize,
) -> Result<(Vec<ScanElement<T>>, ScanTrace)> {
    if workers == 0 {
        return Err(ScanError::NoWorkers);
    }
    let mut slots = arr.elements().to_vec();
    let m = slots.len();
    let mut trace = ScanTrace::default();
    for level in schedule::upsweep_levels(m) {
        run_upsweep_level(&mut slots, Phase::Upsweep, &level, workers, &mut trace)?;
    }
    slots[m - 1] = ScanElement::Identity;
    for level in schedule::downsweep_levels(m) {
        run_downsweep_level(&mut slots, &level, workers, &mut trace)?;
    }
    Ok((slots, trace))
}

/// Scan with a truncated tree and a serial middle segment.
///
/// Runs `up_levels` of up-sweep, a serial bridge that produces exactly the
/// block prefixes the down-sweep tail consumes, then the final
/// `down_levels` of down-sweep. `(full, full)` reproduces
/// [`blelloch_scan`]'s op sequence exactly; `(0, 0)` reproduces
/// [`linear_scan`]'s.
pub fn hybrid_scan<T: Scalar>(
    arr: &ScanArray<T>,
    up_levels: usize,
    down_levels: usize,
    workers: usize,
) -> Result<Vec<ScanElement<T>>> {
    hybrid_scan_traced(arr, up_levels, down_levels, workers).map(|(out, _)| out)
}

/// [`hybrid_scan`] with an execution trace.
pub fn hybrid_scan_traced<T: Scalar>(
    arr: &ScanArray<T>,
    up_levels: usize,
    down_levels: usize,
    workers: usize,
) -> Result<(Vec<ScanElement<T>>, ScanTrace)> {
    if workers == 0 {
        return Err(ScanError::NoWorkers);
    }
    let mut slots = arr.elements().to_vec();
    let m = slots.len();
    let bridge = schedule::bridge_ops(m, up_levels, down_levels)?;
    let mut trace = ScanTrace::default();
    for level in schedule::upsweep_levels(m).into_iter().take(up_levels) {
        run_upsweep_level(&mut slots, Phase::Upsweep, &level, workers, &mut trace)?;
    }
    let mut prefix = ScanElement::Identity;
    let mut snapshot = ScanElement::Identity;
    let mut bridge_ran = false;
    for op in bridge {
        match op {
            schedule::BridgeOp::Reduce { src, dst } => {
                let (value, cost) = diamond_counted(&slots[src], &slots[dst])?;
                slots[dst] = value;
                trace.push(TraceOp {
                    phase: Phase::Bridge,
                    level: None,
                    l: src,
                    r: dst,
                    kind: cost.kind,
                    madds: cost.madds,
                });
                bridge_ran = true;
            }
            schedule::BridgeOp::Snapshot => snapshot = prefix.clone(),
            schedule::BridgeOp::Advance { src } => {
                let (value, cost) = diamond_counted(&prefix, &slots[src])?;
                prefix = value;
                trace.push(TraceOp {
                    phase: Phase::Bridge,
                    level: None,
                    l: src,
                    r: src,
                    kind: cost.kind,
                    madds: cost.madds,
                });
                bridge_ran = true;
            }
            schedule::BridgeOp::PlaceSnapshot { slot } => {
                slots[slot] = snapshot.clone();
            }
            schedule::BridgeOp::PlacePrefix { slot } => {
                slots[slot] = prefix.clone();
            }
        }
    }
    if bridge_ran {
        trace.add_barrier();
    }
    let tail = schedule::downsweep_levels(m);
    for level in tail.into_iter().skip(downsweep_skip(m, down_levels)) {
        run_downsweep_level(&mut slots, &level, workers, &mut trace)?;
    }
    Ok((slots, trace))
}

fn downsweep_skip(m: usize, down_levels: usize) -> usize {
    schedule::downsweep_depth(m) - down_levels
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn vec_elem(v: &[f64]) -> ScanElement<f64> {
        ScanElement::vector(arr1(v))
    }

    fn dense_elem(m: &Array2<f64>) -> ScanElement<f64> {
        ScanElement::dense(m.clone())
    }

    fn random_chain(dims: &[usize], seed: u64) -> ScanArray<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // dims[k] is the row count of a[k+1]; a[0] has dims[0] entries... the
        // chain walks dims backwards so cols(a[k+1]) = rows(a[k]).
        let head = Array1::from_shape_fn(dims[0], |_| rng.random_range(-1.0..1.0));
        let mut elems = vec![ScanElement::vector(head)];
        for k in 1..dims.len() {
            let m = Array2::from_shape_fn((dims[k], dims[k - 1]), |_| rng.random_range(-1.0..1.0));
            elems.push(ScanElement::dense(m));
        }
        ScanArray::new(elems).unwrap()
    }

    fn assert_outputs_close(a: &[ScanElement<f64>], b: &[ScanElement<f64>], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            let diff = x.max_rel_diff(y);
            assert!(diff <= tol, "slot {k}: diff {diff} > {tol}");
        }
    }

    #[test]
    fn diamond_identity_short_circuits() {
        let v = vec_elem(&[1.0, 2.0]);
        let (out, cost) = diamond_counted(&v, &ScanElement::Identity).unwrap();
        assert_eq!(out.max_abs_diff(&v), 0.0);
        assert_eq!(cost, OpCost { kind: OpKind::Id, madds: 0 });
        let m = dense_elem(&arr2(&[[1.0, 0.0], [1.0, 1.0]]));
        let (out, cost) = diamond_counted(&ScanElement::Identity, &m).unwrap();
        assert_eq!(out.max_abs_diff(&m), 0.0);
        assert_eq!(cost.madds, 0);
    }

    #[test]
    fn diamond_applies_right_to_left() {
        let v = vec_elem(&[1.0, 2.0]);
        let m = dense_elem(&arr2(&[[1.0, 0.0], [1.0, 1.0]]));
        let (out, cost) = diamond_counted(&v, &m).unwrap();
        assert_eq!(out.max_abs_diff(&vec_elem(&[1.0, 3.0])), 0.0);
        assert_eq!(cost, OpCost { kind: OpKind::Mv, madds: 4 });
    }

    #[test]
    fn diamond_rejects_incompatible_shapes() {
        let v = vec_elem(&[1.0, 2.0, 3.0]);
        let m = dense_elem(&arr2(&[[1.0, 0.0], [1.0, 1.0]]));
        assert!(matches!(diamond(&v, &m), Err(ScanError::Incompatible { .. })));
    }

    #[test]
    fn diamond_is_associative_within_4_ulp() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mk = |rng: &mut ChaCha8Rng| {
                Array2::from_shape_fn((3, 3), |_| rng.random_range(-1.0f64..1.0))
            };
            let (a, b, c) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let left = diamond(&dense_elem(&a), &diamond(&dense_elem(&b), &dense_elem(&c)).unwrap());
            let right = diamond(&diamond(&dense_elem(&a), &dense_elem(&b)).unwrap(), &dense_elem(&c));
            // Reassociation error is measured in ulps of the accumulated
            // magnitude |c||b||a|, the scale at which the roundings occur.
            let bound = c.mapv(f64::abs).dot(&b.mapv(f64::abs)).dot(&a.mapv(f64::abs));
            match (left.unwrap(), right.unwrap()) {
                (ScanElement::Dense(l), ScanElement::Dense(r)) => {
                    for ((x, y), m) in l.iter().zip(r.iter()).zip(bound.iter()) {
                        let ulp = next_up(*m) - m;
                        assert!((x - y).abs() <= 4.0 * ulp, "{x} vs {y} at magnitude {m}");
                    }
                }
                _ => panic!("dense chain composes to dense"),
            }
        }
    }

    fn next_up(x: f64) -> f64 {
        f64::from_bits(x.abs().to_bits() + 1)
    }

    #[test]
    fn linear_scan_of_scalar_chain() {
        // The last element only pads the array; no output folds it in.
        let arr = ScanArray::new(vec![
            vec_elem(&[2.0]),
            dense_elem(&arr2(&[[3.0]])),
            dense_elem(&arr2(&[[4.0]])),
            dense_elem(&arr2(&[[7.0]])),
        ])
        .unwrap();
        let out = linear_scan(&arr).unwrap();
        assert!(out[0].is_identity());
        for (k, want) in [(1usize, 2.0), (2, 6.0), (3, 24.0)] {
            assert_eq!(out[k].max_abs_diff(&vec_elem(&[want])), 0.0, "slot {k}");
        }
    }

    #[test]
    fn linear_scan_of_short_arrays() {
        let grad = vec_elem(&[1.0, -2.0]);
        let arr = ScanArray::new(vec![grad.clone()]).unwrap();
        let out = linear_scan(&arr).unwrap();
        assert_eq!(out.len(), 1);
        assert!(out[0].is_identity());
        // With one matrix appended the gradient itself appears at slot 1.
        let arr = ScanArray::new(vec![
            grad.clone(),
            dense_elem(&arr2(&[[1.0, 2.0], [3.0, 4.0]])),
        ])
        .unwrap();
        let out = linear_scan(&arr).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out[0].is_identity());
        assert_eq!(out[1].max_abs_diff(&grad), 0.0);
    }

    #[test]
    fn linear_scan_matches_stepwise_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grad = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let jacs: Vec<Array2<f64>> = (0..5)
            .map(|_| Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut elems = vec![ScanElement::vector(grad.clone())];
        elems.extend(jacs.iter().map(|j| ScanElement::dense(j.clone())));
        let out = linear_scan(&ScanArray::new(elems).unwrap()).unwrap();
        // Chain rule applied one step at a time: g <- J^T g.
        let mut g = grad;
        for (k, j) in jacs.iter().take(4).enumerate() {
            g = j.dot(&g);
            let diff = out[k + 2].max_abs_diff(&ScanElement::vector(g.clone()));
            assert!(diff <= 1e-12, "step {k}: diff {diff}");
        }
    }

    #[test]
    fn blelloch_all_identity_array() {
        let arr = ScanArray::new(vec![ScanElement::<f64>::Identity; 8]).unwrap();
        let out = blelloch_scan(&arr, 1).unwrap();
        assert!(out.iter().all(|e| e.is_identity()));
    }

    #[test]
    fn blelloch_length8_trace_counts() {
        let arr = random_chain(&[3, 3, 3, 3, 3, 3, 3, 3], 21);
        let (out, trace) = blelloch_scan_traced(&arr, 1).unwrap();
        // Two up-sweep levels (4 + 2 pairs) and three down-sweep levels
        // (1 + 2 + 4 pairs): 13 compositions across 5 barriers.
        assert_eq!(trace.diamond_ops(), 13);
        assert_eq!(trace.barrier_levels(), 5);
        let up: Vec<usize> = trace
            .ops
            .iter()
            .filter(|o| o.phase == Phase::Upsweep)
            .map(|o| o.level.unwrap())
            .collect();
        assert_eq!(up, vec![0, 0, 0, 0, 1, 1]);
        let down: Vec<usize> = trace
            .ops
            .iter()
            .filter(|o| o.phase == Phase::Downsweep)
            .map(|o| o.level.unwrap())
            .collect();
        assert_eq!(down, vec![2, 1, 1, 0, 0, 0, 0]);
        let (linear, _) = linear_scan_traced(&arr).unwrap();
        assert_outputs_close(&out, &linear, 1e-12);
    }

    #[test]
    fn blelloch_matches_linear_on_long_chains() {
        let dims: Vec<usize> = std::iter::repeat(20).take(101).collect();
        let arr = random_chain(&dims, 33);
        let linear = linear_scan(&arr).unwrap();
        for workers in [1, 4] {
            let out = blelloch_scan(&arr, workers).unwrap();
            assert_outputs_close(&out, &linear, 1e-9);
        }
    }

    #[test]
    fn blelloch_work_and_level_bounds() {
        for m in [2usize, 4, 8, 16, 64, 256, 1024] {
            let arr = ScanArray::new(vec![ScanElement::<f64>::Identity; m]).unwrap();
            let (_, trace) = blelloch_scan_traced(&arr, 1).unwrap();
            assert!(trace.diamond_ops() <= 2 * m, "m={m}");
            let levels = schedule::ceil_log2(m);
            assert_eq!(trace.barrier_levels(), (levels - 1) + levels, "m={m}");
        }
    }

    #[test]
    fn downsweep_reversal_is_load_bearing() {
        // Re-run the down-sweep with textbook operand order; on a chain of
        // non-commuting matrices the result must diverge from linear_scan.
        // The chain is all square matrices so the unreversed variant stays
        // shape-valid and the divergence is purely numeric.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let elems: Vec<ScanElement<f64>> = (0..4)
            .map(|_| {
                ScanElement::dense(Array2::from_shape_fn((2, 2), |_| rng.random_range(-1.0..1.0)))
            })
            .collect();
        let arr = ScanArray::new(elems).unwrap();
        let mut slots = arr.elements().to_vec();
        let m = slots.len();
        for level in schedule::upsweep_levels(m) {
            for (l, r) in level.pairs {
                slots[r] = diamond(&slots[l], &slots[r]).unwrap();
            }
        }
        slots[m - 1] = ScanElement::Identity;
        for level in schedule::downsweep_levels(m) {
            for (l, r) in level.pairs {
                // Textbook order: new a[r] = T diamond a[r] instead of
                // a[r] diamond T.
                let t = slots[l].clone();
                slots[l] = slots[r].clone();
                slots[r] = diamond(&t, &slots[r]).unwrap();
            }
        }
        let linear = linear_scan(&arr).unwrap();
        // The last slot is a dense matrix in both runs; the unreversed
        // variant composes its factors in the wrong order there.
        let div = slots[m - 1].max_abs_diff(&linear[m - 1]);
        assert!(div.is_finite() && div > 1e-3, "unreversed down-sweep agreed with linear: {div}");
    }

    #[test]
    fn hybrid_full_config_replays_blelloch() {
        let arr = random_chain(&[3; 11], 41);
        let m = arr.len();
        let (up, down) = (schedule::upsweep_depth(m), schedule::downsweep_depth(m));
        let (h_out, h_trace) = hybrid_scan_traced(&arr, up, down, 1).unwrap();
        let (b_out, b_trace) = blelloch_scan_traced(&arr, 1).unwrap();
        assert_outputs_close(&h_out, &b_out, 0.0);
        assert_eq!(h_trace.diamond_ops(), b_trace.diamond_ops());
        for (x, y) in h_trace.ops.iter().zip(&b_trace.ops) {
            assert_eq!((x.l, x.r, x.madds), (y.l, y.r, y.madds));
        }
    }

    #[test]
    fn hybrid_zero_config_replays_linear() {
        let arr = random_chain(&[4; 10], 43);
        let (h_out, h_trace) = hybrid_scan_traced(&arr, 0, 0, 1).unwrap();
        let (l_out, l_trace) = linear_scan_traced(&arr).unwrap();
        assert_outputs_close(&h_out, &l_out, 0.0);
        assert_eq!(h_trace.total_madds(), l_trace.total_madds());
    }

    #[test]
    fn hybrid_mid_configs_match_linear() {
        let arr = random_chain(&[5; 22], 47);
        let linear = linear_scan(&arr).unwrap();
        let m = arr.len();
        for (up, down) in [(3, 4), (1, 2), (2, 2), (0, 5), (2, 4)] {
            assert!(down <= schedule::downsweep_depth(m));
            let out = hybrid_scan(&arr, up, down, 1).unwrap();
            assert_outputs_close(&out, &linear, 1e-10);
        }
    }

    #[test]
    fn hybrid_rejects_bad_level_configs() {
        // Length 16: up-sweep depth 3, down-sweep depth 4.
        let arr = random_chain(&[2; 16], 51);
        assert!(matches!(
            hybrid_scan(&arr, 3, 2, 1),
            Err(ScanError::LevelsIncompatible { up: 3, down: 2 })
        ));
        assert!(matches!(
            hybrid_scan(&arr, 9, 9, 1),
            Err(ScanError::LevelsOutOfRange { phase: "up-sweep", .. })
        ));
        assert!(matches!(
            hybrid_scan(&arr, 2, 9, 1),
            Err(ScanError::LevelsOutOfRange { phase: "down-sweep", .. })
        ));
        assert!(matches!(blelloch_scan(&arr, 0), Err(ScanError::NoWorkers)));
    }

    #[test]
    fn batched_scan_equals_per_sample_scans() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        let (batch, dim, t) = (3usize, 4usize, 6usize);
        let grads = Array2::from_shape_fn((batch, dim), |_| rng.random_range(-1.0..1.0));
        let jacs: Vec<Array3<f64>> = (0..t)
            .map(|_| Array3::from_shape_fn((batch, dim, dim), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut elems = vec![ScanElement::batched_vector(grads.clone())];
        elems.extend(jacs.iter().map(|j| ScanElement::batched_dense(j.clone())));
        let batched_out = blelloch_scan(&ScanArray::new(elems).unwrap(), 1).unwrap();
        for s in 0..batch {
            let mut elems = vec![ScanElement::vector(grads.row(s).to_owned())];
            elems.extend(
                jacs.iter()
                    .map(|j| ScanElement::dense(j.index_axis(ndarray::Axis(0), s).to_owned())),
            );
            let single = linear_scan(&ScanArray::new(elems).unwrap()).unwrap();
            for k in 1..single.len() {
                let got = match &batched_out[k] {
                    ScanElement::BatchedVector(v) => ScanElement::vector(v.row(s).to_owned()),
                    other => panic!("expected batched vector, got {}", other.describe()),
                };
                let diff = got.max_abs_diff(&single[k]);
                assert!(diff <= 1e-12, "sample {s} slot {k}: {diff}");
            }
        }
    }

    #[test]
    fn sparse_chain_scans_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let dim = 6;
        let mut elems =
            vec![ScanElement::vector(Array1::from_shape_fn(dim, |_| rng.random_range(-1.0..1.0)))];
        for _ in 0..9 {
            // Roughly half the entries are structural zeros.
            let dense = Array2::from_shape_fn((dim, dim), |_| {
                if rng.random_bool(0.5) {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                }
            });
            elems.push(ScanElement::sparse(CsrMatrix::from_dense(dense.view())));
        }
        let arr = ScanArray::new(elems).unwrap();
        let linear = linear_scan(&arr).unwrap();
        let blelloch = blelloch_scan(&arr, 1).unwrap();
        assert_outputs_close(&blelloch, &linear, 1e-12);
        let hybrid = hybrid_scan(&arr, 1, 2, 1).unwrap();
        assert_outputs_close(&hybrid, &linear, 1e-12);
    }

    proptest! {
        #[test]
        fn schedule_pairs_are_disjoint_and_bounded(m in 1usize..700) {
            let mut all = schedule::upsweep_levels(m);
            all.extend(schedule::downsweep_levels(m));
            let mut ops = 0usize;
            for level in &all {
                let mut seen = std::collections::HashSet::new();
                for &(l, r) in &level.pairs {
                    prop_assert!(l < r, "l {l} >= r {r}");
                    prop_assert!(r < m);
                    prop_assert!(seen.insert(l), "slot {l} repeated in level");
                    prop_assert!(seen.insert(r), "slot {r} repeated in level");
                }
                ops += level.pairs.len();
            }
            prop_assert!(ops <= 2 * m, "{ops} ops exceed 2m for m={m}");
        }

        #[test]
        fn executors_agree_on_random_chains(
            len in 1usize..24,
            dim_seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(dim_seed);
            let dims: Vec<usize> = (0..len).map(|_| rng.random_range(1..6)).collect();
            let arr = random_chain(&dims, dim_seed ^ 0xabcd);
            let linear = linear_scan(&arr).unwrap();
            let blelloch = blelloch_scan(&arr, 1).unwrap();
            for (k, (a, b)) in blelloch.iter().zip(&linear).enumerate() {
                let diff = a.max_abs_diff(b);
                prop_assert!(diff <= 1e-9, "blelloch slot {k}: {diff}");
            }
            let m = arr.len();
            let down = rng.random_range(0..=schedule::downsweep_depth(m));
            let up = rng.random_range(0..=down.min(schedule::upsweep_depth(m)));
            let hybrid = hybrid_scan(&arr, up, down, 1).unwrap();
            for (k, (a, b)) in hybrid.iter().zip(&linear).enumerate() {
                let diff = a.max_abs_diff(b);
                prop_assert!(diff <= 1e-9, "hybrid ({up},{down}) slot {k}: {diff}");
            }
        }
    }
}
