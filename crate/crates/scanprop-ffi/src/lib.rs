//! C interface to the scanprop gradient scan library.
//!
//! The surface follows the usual C conventions: opaque handles behind
//! pointers, a status code from every fallible call, outputs through
//! pointer arguments, and an explicit `_free` per handle type. Handles are
//! not thread-safe; share them across threads only behind external
//! synchronization. All numeric data crosses the boundary as `double`.
//!
//! Every entry point catches panics, so a library bug reports
//! `SCANPROP_STATUS_INTERNAL` instead of unwinding into C. The message of
//! the most recent failing call on the current thread is available through
//! [`scanprop_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use ndarray::{Array1, Array4, ArrayView1};

use scanprop::datagen;
use scanprop::jacobians::{conv3x3_tjac, maxpool_forward, maxpool_tjac, relu_tjac, ConvSpec};
use scanprop::scan::{
    blelloch_scan_traced, hybrid_scan_traced, linear_scan_traced, ScanArray, ScanElement,
    ScanTrace,
};
use scanprop::sparse::{spmv, CsrMatrix};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanpropStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation; see [`scanprop_last_error`].
    InvalidArgument = 2,
    /// Buffer or operand sizes do not line up.
    ShapeMismatch = 3,
    /// A file could not be written.
    IoError = 4,
    /// The library panicked; this is a bug in scanprop.
    Internal = 5,
}

/// Scan executor selector for [`scanprop_chain_backward`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanpropExecutor {
    /// Serial left-to-right fold.
    Linear = 0,
    /// Work-efficient two-phase tree scan.
    Blelloch = 1,
    /// Truncated tree with a serial bridge; reads the level arguments.
    Hybrid = 2,
}

/// Sparse matrix in compressed sparse row form, named by the transposed
/// Jacobians it stores. Create with the `scanprop_*_tjac` builders or
/// [`scanprop_csr_new`]; release with [`scanprop_csr_free`].
pub struct ScanpropCsr {
    inner: Arc<CsrMatrix<f64>>,
}

/// Gradients produced by one backward scan, plus its operation counters.
/// Release with [`scanprop_scan_result_free`].
pub struct ScanpropScanResult {
    /// `None` holds the scan's symbolic identity prefix at position 0.
    outputs: Vec<Option<Array1<f64>>>,
    diamond_ops: u64,
    levels: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: ScanpropStatus, message: impl Into<String>) -> ScanpropStatus {
    let owned = CString::new(message.into()).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
    status
}

/// Runs an entry-point body, converting panics into `Internal`.
fn guarded(body: impl FnOnce() -> ScanpropStatus) -> ScanpropStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(ScanpropStatus::Internal, "scanprop panicked; please report this"),
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scanprop_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the current thread's most recent error message into `buf`.
///
/// Returns the full message length including the trailing NUL, or 0 when no
/// call has failed yet. When `buf` is non-null, up to `cap` bytes are
/// written and the output is always NUL-terminated; pass a null `buf` to
/// query the required size.
#[no_mangle]
pub unsafe extern "C" fn scanprop_last_error(buf: *mut c_char, cap: u64) -> u64 {
    LAST_ERROR.with(|slot| {
        let slot = slot.borrow();
        let Some(message) = slot.as_ref() else { return 0 };
        let bytes = message.as_bytes_with_nul();
        if !buf.is_null() && cap > 0 {
            let written = bytes.len().min(cap as usize);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, written);
            *buf.add(written - 1) = 0;
        }
        bytes.len() as u64
    })
}

unsafe fn write_handle<T>(out: *mut *mut T, value: T) -> ScanpropStatus {
    *out = Box::into_raw(Box::new(value));
    ScanpropStatus::Ok
}

/// Scan failures split into operand-shape problems and bad run parameters.
fn scan_status(e: &scanprop::scan::ScanError) -> ScanpropStatus {
    use scanprop::scan::ScanError;
    match e {
        ScanError::Incompatible { .. } | ScanError::BatchMismatch(..) | ScanError::Sparse(_) => {
            ScanpropStatus::ShapeMismatch
        }
        _ => ScanpropStatus::InvalidArgument,
    }
}

// ---------------------------------------------------------------------------
// CSR handles
// ---------------------------------------------------------------------------

/// Builds a CSR matrix from raw parts.
///
/// `indptr` holds `rows + 1` ascending offsets into `indices`/`data`, both
/// of length `nnz`; column indices must stay below `cols` and ascend within
/// each row. The arrays are copied, so the caller keeps ownership of its
/// buffers.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_new(
    rows: u64,
    cols: u64,
    indptr: *const u64,
    indptr_len: u64,
    indices: *const u32,
    data: *const f64,
    nnz: u64,
    out: *mut *mut ScanpropCsr,
) -> ScanpropStatus {
    guarded(|| {
        if indptr.is_null() || indices.is_null() || data.is_null() || out.is_null() {
            return fail(ScanpropStatus::NullArgument, "csr_new requires non-null arrays");
        }
        if indptr_len != rows + 1 {
            return fail(
                ScanpropStatus::ShapeMismatch,
                format!("indptr holds {indptr_len} offsets, expected rows + 1 = {}", rows + 1),
            );
        }
        let indptr = std::slice::from_raw_parts(indptr, indptr_len as usize)
            .iter()
            .map(|&v| v as usize)
            .collect();
        let indices = std::slice::from_raw_parts(indices, nnz as usize).to_vec();
        let data = std::slice::from_raw_parts(data, nnz as usize).to_vec();
        match CsrMatrix::new(rows as usize, cols as usize, indptr, indices, data) {
            Ok(m) => write_handle(out, ScanpropCsr { inner: Arc::new(m) }),
            Err(e) => fail(ScanpropStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Releases a CSR handle. A null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_free(csr: *mut ScanpropCsr) {
    if !csr.is_null() {
        drop(Box::from_raw(csr));
    }
}

/// Row count of the matrix; 0 when `csr` is null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_rows(csr: *const ScanpropCsr) -> u64 {
    csr.as_ref().map_or(0, |c| c.inner.rows() as u64)
}

/// Column count of the matrix; 0 when `csr` is null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_cols(csr: *const ScanpropCsr) -> u64 {
    csr.as_ref().map_or(0, |c| c.inner.cols() as u64)
}

/// Stored entry count of the matrix; 0 when `csr` is null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_nnz(csr: *const ScanpropCsr) -> u64 {
    csr.as_ref().map_or(0, |c| c.inner.nnz() as u64)
}

/// Dense-matrix-times-vector product `y = M x`.
///
/// `x` must hold `cols` values and `y` must have room for `rows`. For a
/// transposed Jacobian this is exactly one backward gradient step.
#[no_mangle]
pub unsafe extern "C" fn scanprop_csr_spmv(
    csr: *const ScanpropCsr,
    x: *const f64,
    x_len: u64,
    y: *mut f64,
    y_len: u64,
) -> ScanpropStatus {
    guarded(|| {
        let Some(csr) = csr.as_ref() else {
            return fail(ScanpropStatus::NullArgument, "spmv requires a matrix handle");
        };
        if x.is_null() || y.is_null() {
            return fail(ScanpropStatus::NullArgument, "spmv requires non-null vectors");
        }
        if x_len as usize != csr.inner.cols() || (y_len as usize) < csr.inner.rows() {
            return fail(
                ScanpropStatus::ShapeMismatch,
                format!(
                    "spmv of a {}x{} matrix got x of {x_len} and y capacity {y_len}",
                    csr.inner.rows(),
                    csr.inner.cols()
                ),
            );
        }
        let x = ArrayView1::from_shape(x_len as usize, std::slice::from_raw_parts(x, x_len as usize))
            .expect("slice length matches the view shape");
        match spmv(&csr.inner, x) {
            Ok(result) => {
                std::ptr::copy_nonoverlapping(
                    result.as_slice().expect("owned arrays are contiguous").as_ptr(),
                    y,
                    result.len(),
                );
                ScanpropStatus::Ok
            }
            Err(e) => fail(ScanpropStatus::ShapeMismatch, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Jacobian builders
// ---------------------------------------------------------------------------

/// Transposed Jacobian of a 3x3 same-padding convolution.
///
/// `weights` holds `out_channels * in_channels * 9` values in
/// `(out, in, ky, kx)` row-major order. The result is
/// `(in_channels * height * width) x (out_channels * height * width)`.
/// Requires `height >= 3` and `width >= 3`.
#[no_mangle]
pub unsafe extern "C" fn scanprop_conv3x3_tjac(
    in_channels: u64,
    out_channels: u64,
    height: u64,
    width: u64,
    weights: *const f64,
    weights_len: u64,
    out: *mut *mut ScanpropCsr,
) -> ScanpropStatus {
    guarded(|| {
        if weights.is_null() || out.is_null() {
            return fail(ScanpropStatus::NullArgument, "conv3x3_tjac requires weights and out");
        }
        let expected = out_channels * in_channels * 9;
        if weights_len != expected {
            return fail(
                ScanpropStatus::ShapeMismatch,
                format!("kernel holds {weights_len} weights, expected {expected}"),
            );
        }
        let weights = std::slice::from_raw_parts(weights, weights_len as usize).to_vec();
        let weights = Array4::from_shape_vec(
            (out_channels as usize, in_channels as usize, 3, 3),
            weights,
        )
        .expect("length was checked against the shape");
        let spec = match ConvSpec::new(
            in_channels as usize,
            out_channels as usize,
            height as usize,
            width as usize,
            weights,
        ) {
            Ok(spec) => spec,
            Err(e) => return fail(ScanpropStatus::InvalidArgument, e.to_string()),
        };
        write_handle(out, ScanpropCsr { inner: Arc::new(conv3x3_tjac(&spec)) })
    })
}

/// Transposed Jacobian of elementwise ReLU at the pre-activation `x`: a
/// `len x len` diagonal of zeros and ones.
#[no_mangle]
pub unsafe extern "C" fn scanprop_relu_tjac(
    x: *const f64,
    len: u64,
    out: *mut *mut ScanpropCsr,
) -> ScanpropStatus {
    guarded(|| {
        if x.is_null() || out.is_null() {
            return fail(ScanpropStatus::NullArgument, "relu_tjac requires x and out");
        }
        let x = std::slice::from_raw_parts(x, len as usize);
        write_handle(out, ScanpropCsr { inner: Arc::new(relu_tjac(x)) })
    })
}

/// Transposed Jacobian of non-overlapping max pooling over `input`.
///
/// `input` holds `channels * in_h * in_w` values; window dims must divide
/// the image dims. When `pooled` is non-null it receives the forward
/// output, `channels * (in_h / win_h) * (in_w / win_w)` values.
#[no_mangle]
pub unsafe extern "C" fn scanprop_maxpool_tjac(
    input: *const f64,
    channels: u64,
    in_h: u64,
    in_w: u64,
    win_h: u64,
    win_w: u64,
    pooled: *mut f64,
    pooled_len: u64,
    out: *mut *mut ScanpropCsr,
) -> ScanpropStatus {
    guarded(|| {
        if input.is_null() || out.is_null() {
            return fail(ScanpropStatus::NullArgument, "maxpool_tjac requires input and out");
        }
        let input =
            std::slice::from_raw_parts(input, (channels * in_h * in_w) as usize);
        let (forward, spec) = match maxpool_forward(
            input,
            channels as usize,
            in_h as usize,
            in_w as usize,
            win_h as usize,
            win_w as usize,
        ) {
            Ok(pair) => pair,
            Err(e) => return fail(ScanpropStatus::InvalidArgument, e.to_string()),
        };
        if !pooled.is_null() {
            if (pooled_len as usize) < forward.len() {
                return fail(
                    ScanpropStatus::ShapeMismatch,
                    format!("pooled capacity {pooled_len} holds fewer than {}", forward.len()),
                );
            }
            std::ptr::copy_nonoverlapping(forward.as_ptr(), pooled, forward.len());
        }
        match maxpool_tjac::<f64>(&spec) {
            Ok(m) => write_handle(out, ScanpropCsr { inner: Arc::new(m) }),
            Err(e) => fail(ScanpropStatus::InvalidArgument, e.to_string()),
        }
    })
}

// ---------------------------------------------------------------------------
// Backward scan
// ---------------------------------------------------------------------------

/// Runs one backward pass as an exclusive scan over a Jacobian chain.
///
/// `jacobians` lists `count` transposed Jacobians in scan order, the last
/// network layer's first, so `jacobians[0]` composes directly with `grad`
/// (the loss gradient, `grad_len == scanprop_csr_cols(jacobians[0])`).
/// `up_levels`/`down_levels` are read only by the hybrid executor and
/// `workers` caps tree-level parallelism; pass 1 for serial execution.
///
/// On success the result holds `count + 1` scan outputs: position 0 is the
/// symbolic identity (dimension 0), and position `k` of `1..=count` is the
/// gradient propagated through the first `k - 1` Jacobians, so position 1
/// echoes `grad`. The handles in `jacobians` stay owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn scanprop_chain_backward(
    jacobians: *const *const ScanpropCsr,
    count: u64,
    grad: *const f64,
    grad_len: u64,
    executor: ScanpropExecutor,
    up_levels: u64,
    down_levels: u64,
    workers: u64,
    out: *mut *mut ScanpropScanResult,
) -> ScanpropStatus {
    guarded(|| {
        if jacobians.is_null() || grad.is_null() || out.is_null() {
            return fail(
                ScanpropStatus::NullArgument,
                "chain_backward requires jacobians, grad, and out",
            );
        }
        let handles = std::slice::from_raw_parts(jacobians, count as usize);
        let grad = std::slice::from_raw_parts(grad, grad_len as usize);
        let mut elems = Vec::with_capacity(count as usize + 1);
        elems.push(ScanElement::vector(Array1::from(grad.to_vec())));
        for (k, handle) in handles.iter().enumerate() {
            let Some(handle) = handle.as_ref() else {
                return fail(ScanpropStatus::NullArgument, format!("jacobians[{k}] is null"));
            };
            elems.push(ScanElement::Sparse(Arc::clone(&handle.inner)));
        }
        let arr = match ScanArray::new(elems) {
            Ok(arr) => arr,
            Err(e) => return fail(scan_status(&e), e.to_string()),
        };
        let run: Result<(Vec<ScanElement<f64>>, ScanTrace), _> = match executor {
            ScanpropExecutor::Linear => linear_scan_traced(&arr),
            ScanpropExecutor::Blelloch => blelloch_scan_traced(&arr, workers as usize),
            ScanpropExecutor::Hybrid => hybrid_scan_traced(
                &arr,
                up_levels as usize,
                down_levels as usize,
                workers as usize,
            ),
        };
        let (outputs, trace) = match run {
            Ok(pair) => pair,
            Err(e) => return fail(scan_status(&e), e.to_string()),
        };
        let mut collected = Vec::with_capacity(outputs.len());
        for element in outputs {
            match element {
                ScanElement::Identity => collected.push(None),
                ScanElement::Vector(v) => collected.push(Some((*v).clone())),
                other => {
                    return fail(
                        ScanpropStatus::Internal,
                        format!("scan produced a non-vector output: {other:?}"),
                    )
                }
            }
        }
        write_handle(
            out,
            ScanpropScanResult {
                outputs: collected,
                diamond_ops: trace.diamond_ops() as u64,
                levels: trace.barrier_levels() as u64,
            },
        )
    })
}

/// Releases a scan result. A null pointer is ignored.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_free(result: *mut ScanpropScanResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

/// Number of scan outputs (chain length plus one); 0 when `result` is null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_count(result: *const ScanpropScanResult) -> u64 {
    result.as_ref().map_or(0, |r| r.outputs.len() as u64)
}

/// Length of output `index`; 0 for the identity at position 0, for an
/// out-of-range index, or for a null `result`.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_dim(
    result: *const ScanpropScanResult,
    index: u64,
) -> u64 {
    result
        .as_ref()
        .and_then(|r| r.outputs.get(index as usize))
        .and_then(|o| o.as_ref())
        .map_or(0, |v| v.len() as u64)
}

/// Copies output `index` into `buf`, which must hold at least its
/// dimension. Position 0 is the symbolic identity and cannot be copied.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_copy(
    result: *const ScanpropScanResult,
    index: u64,
    buf: *mut f64,
    cap: u64,
) -> ScanpropStatus {
    guarded(|| {
        let Some(result) = result.as_ref() else {
            return fail(ScanpropStatus::NullArgument, "copy requires a result handle");
        };
        if buf.is_null() {
            return fail(ScanpropStatus::NullArgument, "copy requires a buffer");
        }
        let Some(output) = result.outputs.get(index as usize) else {
            return fail(
                ScanpropStatus::InvalidArgument,
                format!("index {index} out of range for {} outputs", result.outputs.len()),
            );
        };
        let Some(vector) = output.as_ref() else {
            return fail(
                ScanpropStatus::InvalidArgument,
                "position 0 holds the symbolic identity, not a gradient",
            );
        };
        if (cap as usize) < vector.len() {
            return fail(
                ScanpropStatus::ShapeMismatch,
                format!("buffer capacity {cap} holds fewer than {}", vector.len()),
            );
        }
        std::ptr::copy_nonoverlapping(
            vector.as_slice().expect("owned arrays are contiguous").as_ptr(),
            buf,
            vector.len(),
        );
        ScanpropStatus::Ok
    })
}

/// Total `diamond` applications the scan performed; 0 when null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_diamond_ops(
    result: *const ScanpropScanResult,
) -> u64 {
    result.as_ref().map_or(0, |r| r.diamond_ops)
}

/// Barrier-separated levels the scan executed; 0 when null.
#[no_mangle]
pub unsafe extern "C" fn scanprop_scan_result_levels(result: *const ScanpropScanResult) -> u64 {
    result.as_ref().map_or(0, |r| r.levels)
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Synthesizes `n` bitstreams of `t` steps and writes them to `path` in the
/// BPDS format. Deterministic in `seed`.
#[no_mangle]
pub unsafe extern "C" fn scanprop_gen_bits(
    t: u64,
    n: u64,
    seed: u64,
    path: *const c_char,
) -> ScanpropStatus {
    guarded(|| {
        if path.is_null() {
            return fail(ScanpropStatus::NullArgument, "gen_bits requires a path");
        }
        let path = match CStr::from_ptr(path).to_str() {
            Ok(p) => p,
            Err(_) => return fail(ScanpropStatus::InvalidArgument, "path is not valid UTF-8"),
        };
        let dataset = match datagen::gen_bitstreams(t as usize, n as usize, seed) {
            Ok(ds) => datagen::Dataset::Bits(ds),
            Err(e) => return fail(ScanpropStatus::InvalidArgument, e.to_string()),
        };
        let file = match std::fs::File::create(path) {
            Ok(f) => f,
            Err(e) => return fail(ScanpropStatus::IoError, e.to_string()),
        };
        let mut writer = std::io::BufWriter::new(file);
        match datagen::write_dataset(&mut writer, &dataset) {
            Ok(()) => ScanpropStatus::Ok,
            Err(e) => fail(ScanpropStatus::IoError, e.to_string()),
        }
    })
}
