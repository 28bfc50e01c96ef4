//! Static cost and memory analysis of gradient scan chains.
//!
//! The analyzer predicts, before any numeric work, the multiply-add count of
//! every `diamond` application a scan executor would perform on a chain of
//! layer transposed Jacobians. It operates on sparsity patterns alone: a
//! pattern-level product yields the exact pair count of the numeric sparse
//! kernel, and the replay walks the same schedules as the executors, so each
//! predicted step maps one-to-one onto a measured trace op with FLOP equal
//! to twice the op's multiply-adds. Alongside the scan, every report costs
//! the layer-by-layer backward pass, one transposed-Jacobian-vector product
//! per layer, as the baseline the scan is compared against.
//!
//! Patterns are static worst cases. A ReLU Jacobian is a full diagonal even
//! though some units are inactive at run time, and a max-pooling Jacobian
//! keeps every window position even though only the argmax carries a
//! derivative. Convolution patterns keep exactly the in-image taps; a
//! pruning mask (a density of kept weights) thins them the same way it thins
//! the runtime matrices.

use std::io::Write;
use std::sync::Arc;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::scalar::Scalar;
use crate::scan::{schedule, OpCost, OpKind, Phase, ScanArray, ScanElement, ScanError};
use crate::sparse::{pattern_product, product_pair_count, CsrMatrix, SparseError, SparsityPattern};

/// Errors produced by the analysis module.
#[derive(Debug, Error)]
pub enum AnalysisError {
    /// The chain description is structurally invalid.
    #[error("invalid chain: {0}")]
    Chain(String),
    #[error(transparent)]
    Sparse(#[from] SparseError),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

// ---------------------------------------------------------------------------
// Chains
// ---------------------------------------------------------------------------

/// One network operation, described by shape alone.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// 3x3 same-padding convolution over a `height x width` image.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        /// Fraction of kept weights; `None` leaves the kernel unpruned.
        density: Option<f64>,
    },
    /// Elementwise ReLU over `dim` activations.
    Relu { dim: usize },
    /// Channelwise max-pooling with a `win_h x win_w` window and equal
    /// stride; trailing rows or columns that do not fill a window are
    /// dropped.
    Maxpool { channels: usize, in_h: usize, in_w: usize, win_h: usize, win_w: usize },
    /// Operation whose transposed Jacobian is fully dense.
    Dense { in_dim: usize, out_dim: usize },
}

impl Layer {
    /// Flat activation count entering the layer.
    pub fn in_dim(&self) -> usize {
        match *self {
            Layer::Conv3x3 { in_channels, height, width, .. } => in_channels * height * width,
            Layer::Relu { dim } => dim,
            Layer::Maxpool { channels, in_h, in_w, .. } => channels * in_h * in_w,
            Layer::Dense { in_dim, .. } => in_dim,
        }
    }

    /// Flat activation count leaving the layer.
    pub fn out_dim(&self) -> usize {
        match *self {
            Layer::Conv3x3 { out_channels, height, width, .. } => out_channels * height * width,
            Layer::Relu { dim } => dim,
            Layer::Maxpool { channels, in_h, in_w, win_h, win_w } => {
                channels * (in_h / win_h) * (in_w / win_w)
            }
            Layer::Dense { out_dim, .. } => out_dim,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let fail = |what: &str| {
            Err(AnalysisError::Chain(format!("layer {index}: {what}")))
        };
        match *self {
            Layer::Conv3x3 { in_channels, out_channels, height, width, density } => {
                if in_channels == 0 || out_channels == 0 {
                    return fail("channel counts must be positive");
                }
                if height == 0 || width == 0 {
                    return fail("spatial dimensions must be positive");
                }
                if let Some(d) = density {
                    if !(d > 0.0 && d <= 1.0) {
                        return fail("density must lie in (0, 1]");
                    }
                }
            }
            Layer::Relu { dim } => {
                if dim == 0 {
                    return fail("dimension must be positive");
                }
            }
            Layer::Maxpool { channels, in_h, in_w, win_h, win_w } => {
                if channels == 0 || in_h == 0 || in_w == 0 {
                    return fail("input dimensions must be positive");
                }
                if win_h == 0 || win_w == 0 || win_h > in_h || win_w > in_w {
                    return fail("window must be positive and fit the input");
                }
            }
            Layer::Dense { in_dim, out_dim } => {
                if in_dim == 0 || out_dim == 0 {
                    return fail("dimensions must be positive");
                }
            }
        }
        Ok(())
    }
}

/// A forward chain of layers plus the seed fixing pruning masks and the
/// synthetic values of materialized matrices.
#[derive(Debug, Clone)]
pub struct ChainSpec {
    layers: Vec<Layer>,
    seed: u64,
}

impl ChainSpec {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        if layers.is_empty() {
            return Err(AnalysisError::Chain("chain has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            layer.validate(k)?;
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(AnalysisError::Chain(format!(
                    "layer {k} emits {} activations but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, seed })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

/// The convolutional spine of VGG-11 on 32x32 images: eight 3x3
/// convolutions with ReLUs, five 2x2 max-pools, spatial size halving per
/// block down to 1x1 over 512 channels.
pub fn vgg11_conv_preset(conv_density: Option<f64>) -> ChainSpec {
    let blocks: &[&[usize]] = &[&[64], &[128], &[256, 256], &[512, 512], &[512, 512]];
    let mut layers = Vec::new();
    let mut channels = 3usize;
    let mut side = 32usize;
    for block in blocks {
        for &out in *block {
            layers.push(Layer::Conv3x3 {
                in_channels: channels,
                out_channels: out,
                height: side,
                width: side,
                density: conv_density,
            });
            layers.push(Layer::Relu { dim: out * side * side });
            channels = out;
        }
        layers.push(Layer::Maxpool { channels, in_h: side, in_w: side, win_h: 2, win_w: 2 });
        side /= 2;
    }
    ChainSpec::new(layers, 0x7667_3131).expect("preset chain is well formed")
}

// ---------------------------------------------------------------------------
// Patterns
// ---------------------------------------------------------------------------

/// Pruning mask over a 3x3 kernel bank, flattened as `(o, j, p, q)`.
fn conv_mask(seed: u64, stream: u64, in_channels: usize, out_channels: usize, density: f64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    (0..out_channels * in_channels * 9).map(|_| rng.random_bool(density)).collect()
}

/// Structural pattern of a 3x3 convolution's transposed Jacobian.
///
/// Row `(j*h + y)*w + x` holds one column per output channel and in-image
/// tap whose kernel weight survives `mask`; out-of-image taps are omitted
/// entirely, so this equals the runtime builder's matrix with explicit
/// zeros compacted away. Works for any positive spatial size.
fn conv_pattern(
    in_channels: usize,
    out_channels: usize,
    h: usize,
    w: usize,
    mask: Option<&[bool]>,
) -> SparsityPattern {
    let keep = |o: usize, j: usize, p: usize, q: usize| {
        mask.is_none_or(|m| m[((o * in_channels + j) * 3 + p) * 3 + q])
    };
    let mut indptr = Vec::with_capacity(in_channels * h * w + 1);
    let mut indices: Vec<u32> = Vec::new();
    indptr.push(0);
    for j in 0..in_channels {
        for y in 0..h {
            for x in 0..w {
                for o in 0..out_channels {
                    for k in 0..3usize {
                        // The output row is y+k-1, kept only in-image.
                        let Some(oy) = (y + k).checked_sub(1) else { continue };
                        if oy >= h {
                            continue;
                        }
                        for d in 0..3usize {
                            let Some(ox) = (x + d).checked_sub(1) else { continue };
                            if ox >= w {
                                continue;
                            }
                            if keep(o, j, 2 - k, 2 - d) {
                                indices.push(((o * h + oy) * w + ox) as u32);
                            }
                        }
                    }
                }
                indptr.push(indices.len());
            }
        }
    }
    SparsityPattern::new(in_channels * h * w, out_channels * h * w, indptr, indices)
        .expect("convolution pattern is valid CSR")
}

fn diagonal_pattern(dim: usize) -> SparsityPattern {
    SparsityPattern::new(dim, dim, (0..=dim).collect(), (0..dim as u32).collect())
        .expect("diagonal pattern is valid CSR")
}

/// Structural pattern of a max-pooling transposed Jacobian: every window
/// position may carry the derivative, so each pooled input row holds its
/// window's output column; unpooled remainder rows are empty.
fn maxpool_pattern(
    channels: usize,
    in_h: usize,
    in_w: usize,
    win_h: usize,
    win_w: usize,
) -> SparsityPattern {
    let (out_h, out_w) = (in_h / win_h, in_w / win_w);
    let mut indptr = Vec::with_capacity(channels * in_h * in_w + 1);
    let mut indices: Vec<u32> = Vec::new();
    indptr.push(0);
    for c in 0..channels {
        for y in 0..in_h {
            for x in 0..in_w {
                if y < out_h * win_h && x < out_w * win_w {
                    indices.push(((c * out_h + y / win_h) * out_w + x / win_w) as u32);
                }
                indptr.push(indices.len());
            }
        }
    }
    SparsityPattern::new(channels * in_h * in_w, channels * out_h * out_w, indptr, indices)
        .expect("pooling pattern is valid CSR")
}

fn dense_pattern(rows: usize, cols: usize) -> SparsityPattern {
    let indptr = (0..=rows).map(|i| i * cols).collect();
    let indices = (0..rows).flat_map(|_| 0..cols as u32).collect();
    SparsityPattern::new(rows, cols, indptr, indices).expect("dense pattern is valid CSR")
}

fn layer_pattern(layer: &Layer, seed: u64, index: usize) -> SparsityPattern {
    match *layer {
        Layer::Conv3x3 { in_channels, out_channels, height, width, density } => {
            let mask = density
                .map(|d| conv_mask(seed, index as u64 + 1, in_channels, out_channels, d));
            conv_pattern(in_channels, out_channels, height, width, mask.as_deref())
        }
        Layer::Relu { dim } => diagonal_pattern(dim),
        Layer::Maxpool { channels, in_h, in_w, win_h, win_w } => {
            maxpool_pattern(channels, in_h, in_w, win_h, win_w)
        }
        Layer::Dense { in_dim, out_dim } => dense_pattern(in_dim, out_dim),
    }
}

/// Transposed-Jacobian patterns in scan order: index 0 is the last layer's,
/// matching slot `a[1]` of the gradient scan array.
pub fn chain_patterns(chain: &ChainSpec) -> Vec<SparsityPattern> {
    chain
        .layers
        .iter()
        .enumerate()
        .rev()
        .map(|(index, layer)| layer_pattern(layer, chain.seed, index))
        .collect()
}

/// Builds a numeric scan array with exactly the analyzer's patterns and
/// seeded synthetic values, for checking predictions against executor
/// traces.
pub fn materialize<T: Scalar>(chain: &ChainSpec) -> Result<ScanArray<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(chain.seed ^ 0x9E37_79B9_7F4A_7C15);
    let head = ndarray::Array1::from_shape_fn(chain.output_dim(), |_| {
        T::from_f64(rng.random_range(0.25..1.75))
    });
    let mut elems = vec![ScanElement::vector(head)];
    for pattern in chain_patterns(chain) {
        let data = (0..pattern.nnz()).map(|_| T::from_f64(rng.random_range(0.25..1.75))).collect();
        elems.push(ScanElement::sparse(CsrMatrix::from_pattern(pattern, data)?));
    }
    Ok(ScanArray::new(elems)?)
}

// ---------------------------------------------------------------------------
// Symbolic replay
// ---------------------------------------------------------------------------

/// Scan executor whose op sequence the analyzer replays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanKind {
    Linear,
    Blelloch,
    Hybrid { up_levels: usize, down_levels: usize },
}

/// Pattern-level stand-in for a scan element.
#[derive(Debug, Clone)]
enum PatElem {
    Identity,
    /// Column vector of the given length.
    Vector(usize),
    Matrix(Arc<SparsityPattern>),
}

impl PatElem {
    fn describe(&self) -> String {
        match self {
            PatElem::Identity => "identity".into(),
            PatElem::Vector(d) => format!("vector[{d}x1]"),
            PatElem::Matrix(p) => format!("pattern[{}x{}]", p.rows(), p.cols()),
        }
    }
}

/// Pattern-level `diamond(a, b) = b * a` with the numeric kernels' exact
/// multiply-add counts.
fn pat_diamond(a: &PatElem, b: &PatElem) -> Result<(PatElem, OpCost)> {
    use PatElem::*;
    match (a, b) {
        (Identity, e) | (e, Identity) => Ok((e.clone(), OpCost { kind: OpKind::Id, madds: 0 })),
        (Vector(d), Matrix(p)) => {
            if p.cols() != *d {
                return Err(AnalysisError::Chain(format!(
                    "cannot compose {} after {}",
                    b.describe(),
                    a.describe()
                )));
            }
            Ok((Vector(p.rows()), OpCost { kind: OpKind::Mv, madds: p.nnz() as u64 }))
        }
        (Matrix(pa), Matrix(pb)) => {
            // The result holds at most min(pairs, dense shape) entries; when
            // even that conservative bound passes 32-bit positions, the
            // union is unrepresentable downstream and is refused before
            // allocation.
            let pairs = product_pair_count(pb, pa)?;
            let dense = (pb.rows() as u64).saturating_mul(pa.cols() as u64);
            if pairs.min(dense) > u64::from(u32::MAX) {
                return Err(AnalysisError::Chain(format!(
                    "aggregate pattern of a {}x{} product exceeds 32-bit entry \
                     positions; use fewer up-sweep levels",
                    pb.rows(),
                    pa.cols()
                )));
            }
            let (pattern, pairs) = pattern_product(pb, pa)?;
            Ok((Matrix(Arc::new(pattern)), OpCost { kind: OpKind::Mm, madds: pairs }))
        }
        (Vector(_), Vector(_)) | (Matrix(_), Vector(_)) => Err(AnalysisError::Chain(format!(
            "cannot compose {} after {}",
            b.describe(),
            a.describe()
        ))),
    }
}

/// Cost preview of [`pat_diamond`] that never materializes a product
/// pattern; matrix-matrix arms cost `O(nnz)` instead of forming the union.
fn pat_diamond_cost(a: &PatElem, b: &PatElem) -> Result<OpCost> {
    use PatElem::*;
    match (a, b) {
        (Matrix(pa), Matrix(pb)) => {
            let pairs = product_pair_count(pb, pa)?;
            Ok(OpCost { kind: OpKind::Mm, madds: pairs })
        }
        _ => pat_diamond(a, b).map(|(_, cost)| cost),
    }
}

/// Phase of a predicted step: a scan executor phase, or the baseline
/// layer-by-layer backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportPhase {
    Scan(Phase),
    Baseline,
}

impl ReportPhase {
    pub fn label(self) -> &'static str {
        match self {
            ReportPhase::Scan(p) => p.label(),
            ReportPhase::Baseline => "baseline",
        }
    }
}

/// Predicted cost of one step, FLOP counted as two per multiply-add.
///
/// `step` numbers execution order within the record's group: scan records
/// share the indexing of the executor's trace ops, baseline records are
/// numbered separately. `critical` marks critical-path steps: every op of a
/// serial phase, and the most expensive op of each parallel level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopRecord {
    pub step: usize,
    pub phase: ReportPhase,
    pub kind: OpKind,
    pub flop: u64,
    pub critical: bool,
}

/// Analyzer output: scan records in trace order, then baseline records.
#[derive(Debug, Clone)]
pub struct FlopReport {
    records: Vec<FlopRecord>,
}

impl FlopReport {
    pub fn records(&self) -> &[FlopRecord] {
        &self.records
    }

    pub fn scan_records(&self) -> impl Iterator<Item = &FlopRecord> {
        self.records.iter().filter(|r| r.phase != ReportPhase::Baseline)
    }

    pub fn baseline_records(&self) -> impl Iterator<Item = &FlopRecord> {
        self.records.iter().filter(|r| r.phase == ReportPhase::Baseline)
    }

    /// Largest predicted FLOP of any single scan step.
    pub fn max_scan_flop(&self) -> u64 {
        self.scan_records().map(|r| r.flop).max().unwrap_or(0)
    }

    /// Largest predicted FLOP of any single baseline step.
    pub fn max_baseline_flop(&self) -> u64 {
        self.baseline_records().map(|r| r.flop).max().unwrap_or(0)
    }

    /// Critical-path FLOP of the scan: serial steps plus each parallel
    /// level's most expensive op.
    pub fn critical_scan_flop(&self) -> u64 {
        self.scan_records().filter(|r| r.critical).map(|r| r.flop).sum()
    }

    /// Total FLOP of the baseline backward pass, which is fully serial.
    pub fn total_baseline_flop(&self) -> u64 {
        self.baseline_records().map(|r| r.flop).sum()
    }

    /// Writes `step, phase, kind, flop, critical` rows, critical as 0/1.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "step,phase,kind,flop,critical")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step,
                r.phase.label(),
                r.kind.label(),
                r.flop,
                u8::from(r.critical)
            )?;
        }
        Ok(())
    }
}

/// Why a budgeted replay stopped early.
enum Halt {
    /// The running critical-path lower bound exceeded the armed budget.
    Budget,
    Fail(AnalysisError),
}

impl From<AnalysisError> for Halt {
    fn from(e: AnalysisError) -> Self {
        Halt::Fail(e)
    }
}

/// Record accumulator that defers critical-path marking to group closes.
///
/// When a budget is armed, the replay tracks a running lower bound on the
/// final critical-path FLOP (closed groups plus the open group's current
/// contribution) so hopeless configurations stop before forming their next
/// product pattern.
struct Replay {
    records: Vec<FlopRecord>,
    group_start: usize,
    budget: Option<u64>,
    closed_critical: u64,
    open_serial: u64,
    open_parallel_max: u64,
}

impl Replay {
    fn new(budget: Option<u64>) -> Self {
        Replay {
            records: Vec::new(),
            group_start: 0,
            budget,
            closed_critical: 0,
            open_serial: 0,
            open_parallel_max: 0,
        }
    }

    fn record(&mut self, phase: Phase, cost: OpCost) {
        let step = self.records.len();
        let flop = 2 * cost.madds;
        self.open_serial += flop;
        self.open_parallel_max = self.open_parallel_max.max(flop);
        self.records.push(FlopRecord {
            step,
            phase: ReportPhase::Scan(phase),
            kind: cost.kind,
            flop,
            critical: true,
        });
    }

    /// Whether adding an op of `flop` to the open group keeps the
    /// critical-path lower bound within budget. Serial groups contribute
    /// their sum, parallel groups their maximum.
    fn within_budget(&self, flop: u64, serial: bool) -> bool {
        let Some(budget) = self.budget else { return true };
        let open = if serial {
            self.open_serial.saturating_add(flop)
        } else {
            self.open_parallel_max.max(flop)
        };
        self.closed_critical.saturating_add(open) <= budget
    }

    /// Halts hopeless budgeted replays before the next product pattern is
    /// formed; unbudgeted replays never halt.
    fn precheck(
        &self,
        a: &PatElem,
        b: &PatElem,
        serial: bool,
    ) -> Result<(), Halt> {
        if self.budget.is_some() {
            let cost = pat_diamond_cost(a, b)?;
            if !self.within_budget(2 * cost.madds, serial) {
                return Err(Halt::Budget);
            }
        }
        Ok(())
    }

    /// Ends a barrier-synchronized level: only its most expensive op (the
    /// first, on ties) stays on the critical path.
    fn close_parallel_group(&mut self) {
        let group = &mut self.records[self.group_start..];
        if let Some(max) = group.iter().map(|r| r.flop).max() {
            let mut seen = false;
            for r in group.iter_mut() {
                r.critical = !seen && r.flop == max;
                seen = seen || r.critical;
            }
        }
        self.closed_critical += self.open_parallel_max;
        self.open_serial = 0;
        self.open_parallel_max = 0;
        self.group_start = self.records.len();
    }

    /// Ends a serial phase: every op stays critical.
    fn close_serial_group(&mut self) {
        self.closed_critical += self.open_serial;
        self.open_serial = 0;
        self.open_parallel_max = 0;
        self.group_start = self.records.len();
    }
}

fn replay_up_level(
    slots: &mut [PatElem],
    level: &schedule::Level,
    rep: &mut Replay,
) -> Result<(), Halt> {
    for &(l, r) in &level.pairs {
        rep.precheck(&slots[l], &slots[r], false)?;
        let (value, cost) = pat_diamond(&slots[l], &slots[r])?;
        slots[r] = value;
        rep.record(Phase::Upsweep, cost);
    }
    rep.close_parallel_group();
    Ok(())
}

fn replay_down_level(
    slots: &mut [PatElem],
    level: &schedule::Level,
    rep: &mut Replay,
) -> Result<(), Halt> {
    for &(l, r) in &level.pairs {
        rep.precheck(&slots[r], &slots[l], false)?;
        let (value, cost) = pat_diamond(&slots[r], &slots[l])?;
        slots[l] = std::mem::replace(&mut slots[r], value);
        rep.record(Phase::Downsweep, cost);
    }
    rep.close_parallel_group();
    Ok(())
}

/// Replays the chosen executor's op sequence on patterns alone, stopping
/// early only when an armed budget is exceeded.
fn replay_scan_bounded(
    patterns: &[SparsityPattern],
    head_dim: usize,
    kind: ScanKind,
    budget: Option<u64>,
) -> Result<Vec<FlopRecord>, Halt> {
    let mut slots: Vec<PatElem> = Vec::with_capacity(patterns.len() + 1);
    slots.push(PatElem::Vector(head_dim));
    slots.extend(patterns.iter().map(|p| PatElem::Matrix(Arc::new(p.clone()))));
    let m = slots.len();
    let mut rep = Replay::new(budget);
    match kind {
        ScanKind::Linear => {
            if m >= 2 {
                let mut acc = slots[0].clone();
                for slot in slots.iter().take(m - 1).skip(1) {
                    rep.precheck(&acc, slot, true)?;
                    let (next, cost) = pat_diamond(&acc, slot)?;
                    rep.record(Phase::Linear, cost);
                    acc = next;
                }
                rep.close_serial_group();
            }
        }
        ScanKind::Blelloch => {
            for level in schedule::upsweep_levels(m) {
                replay_up_level(&mut slots, &level, &mut rep)?;
            }
            slots[m - 1] = PatElem::Identity;
            for level in schedule::downsweep_levels(m) {
                replay_down_level(&mut slots, &level, &mut rep)?;
            }
        }
        ScanKind::Hybrid { up_levels, down_levels } => {
            let bridge = schedule::bridge_ops(m, up_levels, down_levels)
                .map_err(AnalysisError::from)?;
            for level in schedule::upsweep_levels(m).into_iter().take(up_levels) {
                replay_up_level(&mut slots, &level, &mut rep)?;
            }
            let mut prefix = PatElem::Identity;
            let mut snapshot = PatElem::Identity;
            let mut bridge_ran = false;
            for op in bridge {
                match op {
                    schedule::BridgeOp::Reduce { src, dst } => {
                        rep.precheck(&slots[src], &slots[dst], true)?;
                        let (value, cost) = pat_diamond(&slots[src], &slots[dst])?;
                        slots[dst] = value;
                        rep.record(Phase::Bridge, cost);
                        bridge_ran = true;
                    }
                    schedule::BridgeOp::Snapshot => snapshot = prefix.clone(),
                    schedule::BridgeOp::Advance { src } => {
                        rep.precheck(&prefix, &slots[src], true)?;
                        let (value, cost) = pat_diamond(&prefix, &slots[src])?;
                        prefix = value;
                        rep.record(Phase::Bridge, cost);
                        bridge_ran = true;
                    }
                    schedule::BridgeOp::PlaceSnapshot { slot } => slots[slot] = snapshot.clone(),
                    schedule::BridgeOp::PlacePrefix { slot } => slots[slot] = prefix.clone(),
                }
            }
            if bridge_ran {
                rep.close_serial_group();
            }
            let skip = schedule::downsweep_depth(m) - down_levels;
            for level in schedule::downsweep_levels(m).into_iter().skip(skip) {
                replay_down_level(&mut slots, &level, &mut rep)?;
            }
        }
    }
    Ok(rep.records)
}

/// Replays the chosen executor's op sequence on patterns alone.
fn replay_scan(
    patterns: &[SparsityPattern],
    head_dim: usize,
    kind: ScanKind,
) -> Result<Vec<FlopRecord>> {
    match replay_scan_bounded(patterns, head_dim, kind, None) {
        Ok(records) => Ok(records),
        Err(Halt::Fail(e)) => Err(e),
        Err(Halt::Budget) => unreachable!("no budget armed"),
    }
}

fn report_from_patterns(
    patterns: &[SparsityPattern],
    head_dim: usize,
    kind: ScanKind,
) -> Result<FlopReport> {
    let mut records = replay_scan(patterns, head_dim, kind)?;
    for (step, pattern) in patterns.iter().enumerate() {
        records.push(FlopRecord {
            step,
            phase: ReportPhase::Baseline,
            kind: OpKind::Mv,
            flop: 2 * pattern.nnz() as u64,
            critical: true,
        });
    }
    Ok(FlopReport { records })
}

/// Predicts the per-step FLOP of running `kind` over the chain's gradient
/// scan array, plus the baseline backward pass.
pub fn flops_of_chain(chain: &ChainSpec, kind: ScanKind) -> Result<FlopReport> {
    let patterns = chain_patterns(chain);
    report_from_patterns(&patterns, chain.output_dim(), kind)
}

// ---------------------------------------------------------------------------
// Closed-form models
// ---------------------------------------------------------------------------

/// Exact step and work counts of the tree scan on `n + 1` slots with `p`
/// workers.
///
/// A level of `q` pairs takes `ceil(q/p)` barrier-separated steps; work is
/// the total number of `diamond` applications across both sweeps.
pub fn step_work_counts(n: usize, p: usize) -> (usize, u64) {
    assert!(p > 0, "worker count must be positive");
    let m = n + 1;
    let mut steps = 0usize;
    let mut work = 0u64;
    for level in schedule::upsweep_levels(m).into_iter().chain(schedule::downsweep_levels(m)) {
        steps += level.pairs.len().div_ceil(p);
        work += level.pairs.len() as u64;
    }
    (steps, work)
}

/// Peak-memory models of the two strategies on an `n`-element chain of `l`
/// layers: the scan holds `max(ceil(n/p), 1)` Jacobians of size `m_jacob`
/// per worker, while recomputation with a checkpoint every `k` layers holds
/// `l/k + k` activations of size `m_x`.
pub fn space_models(n: usize, p: usize, l: usize, k: usize, m_jacob: f64, m_x: f64) -> (f64, f64) {
    assert!(p > 0, "worker count must be positive");
    assert!(k > 0, "checkpoint interval must be positive");
    let held = n.div_ceil(p).max(1) as f64;
    (held * m_jacob, (l as f64 / k as f64 + k as f64) * m_x)
}

// ---------------------------------------------------------------------------
// Level sweep
// ---------------------------------------------------------------------------

/// One sweep candidate with its predicted critical-path FLOP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepPoint {
    pub up_levels: usize,
    pub down_levels: usize,
    pub critical_flop: u64,
}

/// Configurations whose running critical-path FLOP exceeds this multiple of
/// the best completed configuration are abandoned mid-replay. Deep up-sweeps
/// on large chains form aggregate patterns that densify combinatorially;
/// those runs cost orders of magnitude more than the winner, so the slack
/// never discards a contender.
const SWEEP_SLACK: u64 = 16;

/// Evaluates hybrid level configurations and returns them sorted by
/// predicted critical-path FLOP, cheapest first.
///
/// The default family is the serial `(0, 0)`, the `(u, u+1)` ladder, and
/// the full tree; `exhaustive` tries every valid pair instead. Replay is
/// branch-and-bound: a configuration whose running critical-path FLOP
/// passes [`SWEEP_SLACK`] times the best completed one stops before forming
/// its next product pattern and is omitted from the result, so the minimum
/// is always exact.
pub fn sweep_levels(chain: &ChainSpec, exhaustive: bool) -> Result<Vec<SweepPoint>> {
    sweep_levels_with_slack(chain, exhaustive, SWEEP_SLACK)
}

fn sweep_levels_with_slack(
    chain: &ChainSpec,
    exhaustive: bool,
    slack: u64,
) -> Result<Vec<SweepPoint>> {
    let patterns = chain_patterns(chain);
    let head_dim = chain.output_dim();
    let m = patterns.len() + 1;
    let (up_max, down_max) = (schedule::upsweep_depth(m), schedule::downsweep_depth(m));
    let mut configs: Vec<(usize, usize)> = Vec::new();
    if exhaustive {
        for u in 0..=up_max {
            for d in u..=down_max {
                configs.push((u, d));
            }
        }
    } else {
        configs.push((0, 0));
        for u in 0..=up_max {
            if u + 1 <= down_max {
                configs.push((u, u + 1));
            }
        }
        configs.push((up_max, down_max));
        configs.sort_unstable();
        configs.dedup();
    }
    let mut out: Vec<SweepPoint> = Vec::new();
    let mut best: Option<u64> = None;
    for (up_levels, down_levels) in configs {
        let budget = best.map(|b| b.saturating_mul(slack));
        let kind = ScanKind::Hybrid { up_levels, down_levels };
        match replay_scan_bounded(&patterns, head_dim, kind, budget) {
            Ok(records) => {
                let critical_flop =
                    records.iter().filter(|r| r.critical).map(|r| r.flop).sum();
                best = Some(best.map_or(critical_flop, |b| b.min(critical_flop)));
                out.push(SweepPoint { up_levels, down_levels, critical_flop });
            }
            Err(Halt::Budget) => {}
            Err(Halt::Fail(e)) => return Err(e),
        }
    }
    out.sort_by_key(|s| (s.critical_flop, s.up_levels, s.down_levels));
    Ok(out)
}
