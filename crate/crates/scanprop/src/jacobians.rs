//! Analytical transposed Jacobians of common layers.
//!
//! Back-propagation through a layer multiplies the upstream gradient by the
//! layer's transposed Jacobian. For convolution, ReLU, and max-pooling that
//! matrix is almost entirely guaranteed zeros with a closed-form structure,
//! so the builders here emit CSR directly from layer metadata; nothing is
//! ever densified. Recurrent cells get dense builders since their hidden
//! dimension is small. A central-difference oracle cross-checks every
//! builder in the tests.
//!
//! Flat index convention throughout: channel-major then row-major, that is
//! `index = (c*h + y)*w + x`.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

/// Errors raised by Jacobian builders.
#[derive(Debug, Error)]
pub enum JacobianError {
    #[error("timestep {t} outside tape range 1..={steps}")]
    TimestepOutOfRange { t: usize, steps: usize },
    #[error("tape holds no gate record at timestep {t}")]
    IncompleteTape { t: usize },
    #[error("pooled input index {index} appears twice in channel {channel}")]
    MalformedPoolIndices { channel: usize, index: usize },
    #[error("invalid layer spec: {0}")]
    InvalidSpec(String),
}

/// Result alias for Jacobian builders.
pub type Result<T> = std::result::Result<T, JacobianError>;

// ---------------------------------------------------------------------------
// 3x3 convolution
// ---------------------------------------------------------------------------

/// A 3x3 convolution with unit padding and unit stride.
///
/// The spatial output size equals the input size, so the transposed
/// Jacobian has shape `(c_i*h*w) x (c_o*h*w)`.
#[derive(Debug, Clone)]
pub struct ConvSpec<T> {
    in_channels: usize,
    out_channels: usize,
    height: usize,
    width: usize,
    weights: Array4<T>,
}

impl<T: Scalar> ConvSpec<T> {
    /// Builds a spec; `weights` has shape `(c_o, c_i, 3, 3)`.
    ///
    /// Spatial sizes below 3 are rejected: the builder's wrapped edge
    /// entries would collide on narrower images.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        height: usize,
        width: usize,
        weights: Array4<T>,
    ) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(JacobianError::InvalidSpec("channel counts must be positive".into()));
        }
        if height < 3 || width < 3 {
            return Err(JacobianError::InvalidSpec(format!(
                "spatial size {height}x{width} below the 3x3 minimum"
            )));
        }
        if weights.dim() != (out_channels, in_channels, 3, 3) {
            return Err(JacobianError::InvalidSpec(format!(
                "weights shaped {:?}, expected ({out_channels}, {in_channels}, 3, 3)",
                weights.dim()
            )));
        }
        Ok(Self { in_channels, out_channels, height, width, weights })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn weights(&self) -> &Array4<T> {
        &self.weights
    }

    /// Flat input dimension `c_i*h*w`.
    pub fn input_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    /// Flat output dimension `c_o*h*w`.
    pub fn output_len(&self) -> usize {
        self.out_channels * self.height * self.width
    }

    /// Stored entries of the transposed Jacobian: `3w(3h-2) c_i c_o`.
    pub fn tjac_nnz(&self) -> usize {
        3 * self.width * (3 * self.height - 2) * self.in_channels * self.out_channels
    }
}

/// Transposed Jacobian of a 3x3 convolution, straight to CSR.
///
/// Row `(j*h + y)*w + x` lists, for every output channel `o` and every
/// in-image vertical tap, three horizontally adjacent output positions.
/// Horizontal taps that fall outside the image keep their (wrapped) slot in
/// the pattern but carry an explicit zero, so the pattern depends only on
/// the shape: the per-row entry count is `6c_o` on the top and bottom image
/// rows and `9c_o` elsewhere, and vertical taps are trimmed to the image.
/// In-image entries hold `weights[o, j, 2-k, 1-d]` for output row offset
/// `k-1` and column offset `d` from the input pixel.
pub fn conv3x3_tjac<T: Scalar>(spec: &ConvSpec<T>) -> CsrMatrix<T> {
    let (h, w) = (spec.height, spec.width);
    let (ci, co) = (spec.in_channels, spec.out_channels);
    let m_out = spec.output_len() as i64;
    let nnz = spec.tjac_nnz();
    let mut indptr = Vec::with_capacity(spec.input_len() + 1);
    let mut indices = Vec::with_capacity(nnz);
    let mut data = Vec::with_capacity(nnz);
    indptr.push(0);
    let mut row_buf: Vec<(u32, T)> = Vec::with_capacity(9 * co);
    for j in 0..ci {
        for y in 0..h {
            // k indexes the surviving vertical taps; the output row is y+k-1.
            let k_range = if y == 0 {
                1..3usize
            } else if y == h - 1 {
                0..2
            } else {
                0..3
            };
            for x in 0..w {
                row_buf.clear();
                for o in 0..co {
                    for k in k_range.clone() {
                        let out_row = (o * h + y + k) as i64 - 1;
                        for d in 0..3i64 {
                            let raw = out_row * w as i64 + x as i64 + d - 1;
                            let col = raw.rem_euclid(m_out) as u32;
                            let xs = x as i64 + d - 1;
                            let v = if (0..w as i64).contains(&xs) {
                                spec.weights[(o, j, 2 - k, (2 - d) as usize)]
                            } else {
                                T::zero()
                            };
                            row_buf.push((col, v));
                        }
                    }
                }
                row_buf.sort_unstable_by_key(|&(col, _)| col);
                for &(col, v) in &row_buf {
                    indices.push(col);
                    data.push(v);
                }
                indptr.push(indices.len());
            }
        }
    }
    CsrMatrix::trusted(spec.input_len(), spec.output_len(), indptr, indices, data)
}

/// Direct evaluation of the convolution, used by the oracle tests and the
/// builder benchmarks.
pub fn conv3x3_forward<T: Scalar>(spec: &ConvSpec<T>, input: &[T]) -> Vec<T> {
    assert_eq!(input.len(), spec.input_len(), "input length mismatch");
    let (h, w) = (spec.height as i64, spec.width as i64);
    let mut out = vec![T::zero(); spec.output_len()];
    for o in 0..spec.out_channels {
        for r in 0..h {
            for s in 0..w {
                let mut acc = T::zero();
                for j in 0..spec.in_channels {
                    for p in 0..3i64 {
                        for q in 0..3i64 {
                            let yy = r + p - 1;
                            let xx = s + q - 1;
                            if (0..h).contains(&yy) && (0..w).contains(&xx) {
                                let xi = (j as i64 * h + yy) * w + xx;
                                acc = acc
                                    + spec.weights[(o, j, p as usize, q as usize)]
                                        * input[xi as usize];
                            }
                        }
                    }
                }
                out[((o as i64 * h + r) * w + s) as usize] = acc;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Transposed Jacobian of elementwise ReLU at `x`: a diagonal 0/1 matrix.
///
/// The derivative at exactly zero is taken as zero.
pub fn relu_tjac<T: Scalar>(x: &[T]) -> CsrMatrix<T> {
    let d = x.len();
    let data = x.iter().map(|&v| if v > T::zero() { T::one() } else { T::zero() }).collect();
    CsrMatrix::trusted(d, d, (0..=d).collect(), (0..d as u32).collect(), data)
}

/// Elementwise ReLU.
pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

// ---------------------------------------------------------------------------
// Max-pooling
// ---------------------------------------------------------------------------

/// Non-overlapping max-pooling: stride equals the window.
///
/// `pool_indices` records, per output element in channel-major order, the
/// within-channel flat input index that won the max. The Jacobian builder
/// trusts these indices; it never re-derives the argmax.
#[derive(Debug, Clone)]
pub struct PoolSpec {
    channels: usize,
    in_h: usize,
    in_w: usize,
    win_h: usize,
    win_w: usize,
    pool_indices: Vec<u32>,
}

impl PoolSpec {
    pub fn new(
        channels: usize,
        in_h: usize,
        in_w: usize,
        win_h: usize,
        win_w: usize,
        pool_indices: Vec<u32>,
    ) -> Result<Self> {
        if channels == 0 || win_h == 0 || win_w == 0 {
            return Err(JacobianError::InvalidSpec("zero-sized pool".into()));
        }
        if in_h % win_h != 0 || in_w % win_w != 0 {
            return Err(JacobianError::InvalidSpec(format!(
                "window {win_h}x{win_w} does not tile input {in_h}x{in_w}"
            )));
        }
        let expected = channels * (in_h / win_h) * (in_w / win_w);
        if pool_indices.len() != expected {
            return Err(JacobianError::InvalidSpec(format!(
                "{} pool indices for {} outputs",
                pool_indices.len(),
                expected
            )));
        }
        if let Some(&bad) = pool_indices.iter().find(|&&i| i as usize >= in_h * in_w) {
            return Err(JacobianError::InvalidSpec(format!(
                "pool index {bad} outside a {in_h}x{in_w} channel"
            )));
        }
        Ok(Self { channels, in_h, in_w, win_h, win_w, pool_indices })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn in_h(&self) -> usize {
        self.in_h
    }

    pub fn in_w(&self) -> usize {
        self.in_w
    }

    pub fn out_h(&self) -> usize {
        self.in_h / self.win_h
    }

    pub fn out_w(&self) -> usize {
        self.in_w / self.win_w
    }

    pub fn pool_indices(&self) -> &[u32] {
        &self.pool_indices
    }

    /// Flat input dimension `c*h_i*w_i`.
    pub fn input_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Flat output dimension `c*h_o*w_o`.
    pub fn output_len(&self) -> usize {
        self.channels * self.out_h() * self.out_w()
    }
}

/// Transposed Jacobian of max-pooling: one unit entry per output element,
/// in the row of the pooled input.
///
/// Fails if two outputs of the same channel claim the same input element.
pub fn maxpool_tjac<T: Scalar>(spec: &PoolSpec) -> Result<CsrMatrix<T>> {
    let per_chan_in = spec.in_h * spec.in_w;
    let (out_h, out_w) = (spec.out_h(), spec.out_w());
    // mapping[input flat index] = output flat index + 1, 0 meaning unpooled.
    let mut mapping = vec![0u32; spec.input_len()];
    for c in 0..spec.channels {
        for y in 0..out_h {
            for x in 0..out_w {
                let out_flat = ((c * out_h + y) * out_w + x) as u32;
                let pooled = spec.pool_indices[out_flat as usize] as usize;
                let in_flat = c * per_chan_in + pooled;
                if mapping[in_flat] != 0 {
                    return Err(JacobianError::MalformedPoolIndices {
                        channel: c,
                        index: pooled,
                    });
                }
                mapping[in_flat] = out_flat + 1;
            }
        }
    }
    let nnz = spec.output_len();
    let mut indptr = Vec::with_capacity(spec.input_len() + 1);
    let mut indices = Vec::with_capacity(nnz);
    indptr.push(0);
    for &m in &mapping {
        if m != 0 {
            indices.push(m - 1);
        }
        indptr.push(indices.len());
    }
    let data = vec![T::one(); indices.len()];
    Ok(CsrMatrix::trusted(spec.input_len(), spec.output_len(), indptr, indices, data))
}

/// Runs max-pooling and records which input won each window.
///
/// Ties go to the first maximal element in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    input: &[T],
    channels: usize,
    in_h: usize,
    in_w: usize,
    win_h: usize,
    win_w: usize,
) -> Result<(Vec<T>, PoolSpec)> {
    if input.len() != channels * in_h * in_w {
        return Err(JacobianError::InvalidSpec(format!(
            "input length {} for {channels} channels of {in_h}x{in_w}",
            input.len()
        )));
    }
    if win_h == 0 || win_w == 0 || in_h % win_h != 0 || in_w % win_w != 0 {
        return Err(JacobianError::InvalidSpec(format!(
            "window {win_h}x{win_w} does not tile input {in_h}x{in_w}"
        )));
    }
    let (out_h, out_w) = (in_h / win_h, in_w / win_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    let mut pool_indices = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let chan = &input[c * in_h * in_w..(c + 1) * in_h * in_w];
        for y in 0..out_h {
            for x in 0..out_w {
                let mut best = None::<(T, usize)>;
                for dy in 0..win_h {
                    for dx in 0..win_w {
                        let flat = (y * win_h + dy) * in_w + x * win_w + dx;
                        let v = chan[flat];
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, flat));
                        }
                    }
                }
                let (v, flat) = best.expect("window is non-empty");
                out.push(v);
                pool_indices.push(flat as u32);
            }
        }
    }
    let spec = PoolSpec::new(channels, in_h, in_w, win_h, win_w, pool_indices)?;
    Ok((out, spec))
}

// ---------------------------------------------------------------------------
// Recurrent cells
// ---------------------------------------------------------------------------

/// Gate values of one GRU step, needed to rebuild its Jacobian.
///
/// `m` is the hidden half of the candidate pre-activation,
/// `m = W_hn h_prev + b_hn`, kept separately because the reset gate
/// multiplies it inside the tanh.
#[derive(Debug, Clone)]
pub struct GruGates<T> {
    pub r: Array1<T>,
    pub z: Array1<T>,
    pub n: Array1<T>,
    pub m: Array1<T>,
}

/// Forward-pass record of a recurrent cell over one sequence.
///
/// Holds `h_0..h_T`, the inputs `x_1..x_T`, and for GRU cells the gate
/// values of each step. Jacobian builders read states off the tape instead
/// of re-running the forward pass.
#[derive(Debug, Clone)]
pub struct CellTape<T> {
    inputs: Vec<Array1<T>>,
    hidden: Vec<Array1<T>>,
    gates: Vec<GruGates<T>>,
}

impl<T: Scalar> CellTape<T> {
    /// Starts a tape at the initial hidden state.
    pub fn new(h0: Array1<T>) -> Self {
        Self { inputs: Vec::new(), hidden: vec![h0], gates: Vec::new() }
    }

    /// Records one plain-RNN step.
    pub fn push_step(&mut self, x: Array1<T>, h: Array1<T>) {
        debug_assert!(self.gates.is_empty(), "tape mixes gated and ungated steps");
        self.inputs.push(x);
        self.hidden.push(h);
    }

    /// Records one GRU step with its gate values.
    pub fn push_gru_step(&mut self, x: Array1<T>, h: Array1<T>, gates: GruGates<T>) {
        debug_assert_eq!(self.gates.len() + 1, self.hidden.len(), "tape mixes step kinds");
        self.inputs.push(x);
        self.hidden.push(h);
        self.gates.push(gates);
    }

    /// Number of recorded timesteps `T`.
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    /// Hidden state `h_t` for `t` in `0..=T`.
    pub fn hidden(&self, t: usize) -> &Array1<T> {
        &self.hidden[t]
    }

    /// Input `x_t` for `t` in `1..=T`.
    pub fn input(&self, t: usize) -> &Array1<T> {
        &self.inputs[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(JacobianError::TimestepOutOfRange { t, steps: self.steps() });
        }
        Ok(())
    }

    /// Gate record of step `t`, if this is a GRU tape.
    pub fn gru_gates(&self, t: usize) -> Result<&GruGates<T>> {
        self.check_step(t)?;
        self.gates.get(t - 1).ok_or(JacobianError::IncompleteTape { t })
    }
}

/// Transposed Jacobian of a tanh RNN step at timestep `t`:
/// `W_hh^T` with column `j` scaled by `1 - h_t[j]^2`.
pub fn rnn_tjac<T: Scalar>(
    tape: &CellTape<T>,
    t: usize,
    w_hh: ArrayView2<T>,
) -> Result<Array2<T>> {
    tape.check_step(t)?;
    let h_t = tape.hidden(t);
    let d = h_t.len();
    assert_eq!(w_hh.dim(), (d, d), "hidden weights must be square");
    let mut out = Array2::zeros((d, d));
    for j in 0..d {
        let g = T::one() - h_t[j] * h_t[j];
        for i in 0..d {
            out[(i, j)] = w_hh[(j, i)] * g;
        }
    }
    Ok(out)
}

/// Transposed Jacobian of a GRU step at timestep `t`.
///
/// With sigmoid gates `r`, `z`, candidate `n = tanh(W_in x + b_in + r*m)`,
/// and `h = (1-z)*n + z*h_prev`, the hidden-to-hidden Jacobian transpose is
///
/// ```text
/// (W_hr^T*(r(1-r)m)^T + W_hn^T*r^T) * ((1-n^2)(1-z))^T
///   + W_hz^T*(z(1-z)(h_prev-n))^T + diag(z)
/// ```
///
/// where `M*v^T` scales column `j` of `M` by `v[j]`.
pub fn gru_tjac<T: Scalar>(
    tape: &CellTape<T>,
    t: usize,
    w_hr: ArrayView2<T>,
    w_hz: ArrayView2<T>,
    w_hn: ArrayView2<T>,
) -> Result<Array2<T>> {
    let gates = tape.gru_gates(t)?;
    let h_prev = tape.hidden(t - 1);
    let d = h_prev.len();
    for w in [&w_hr, &w_hz, &w_hn] {
        assert_eq!(w.dim(), (d, d), "hidden weights must be square");
    }
    let one = T::one();
    let mut out = Array2::zeros((d, d));
    for j in 0..d {
        let (r, z, n, m) = (gates.r[j], gates.z[j], gates.n[j], gates.m[j]);
        let through_n = (one - n * n) * (one - z);
        let f_r = r * (one - r) * m * through_n;
        let f_n = r * through_n;
        let f_z = z * (one - z) * (h_prev[j] - n);
        for i in 0..d {
            out[(i, j)] = w_hr[(j, i)] * f_r + w_hn[(j, i)] * f_n + w_hz[(j, i)] * f_z;
        }
        out[(j, j)] = out[(j, j)] + z;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Numeric oracle
// ---------------------------------------------------------------------------

/// Central-difference transposed Jacobian of `f` at `x`.
///
/// Row `i` of the result is the sensitivity of every output to input `i`.
/// Quadratic in the problem size; test and benchmark use only.
pub fn numeric_tjac<T, F>(f: F, x: &[T], eps: T) -> Array2<T>
where
    T: Scalar,
    F: Fn(&[T]) -> Vec<T>,
{
    let out_len = f(x).len();
    let mut jac = Array2::zeros((x.len(), out_len));
    let mut probe = x.to_vec();
    let two_eps = eps + eps;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe);
        probe[i] = x[i] - eps;
        let minus = f(&probe);
        probe[i] = x[i];
        assert_eq!(plus.len(), out_len, "f must have a fixed output length");
        for j in 0..out_len {
            jac[(i, j)] = (plus[j] - minus[j]) / two_eps;
        }
    }
    jac
}
