//! Recurrent-network training with scan-based back-propagation.
//!
//! The forward pass records hidden states (and gate values for the GRU)
//! on a [`CellTape`]. The backward pass seeds the scan with the loss
//! gradient at the last hidden state, runs the chosen executor over the
//! chain of transposed step Jacobians to recover every `grad h_t`, and
//! contracts each timestep's local parameter Jacobian with it. Each
//! timestep is treated as a layer with tied parameters, so per-timestep
//! contributions to the shared weights are summed.
//!
//! The executors are interchangeable: swapping them changes gradients
//! only by floating-point reassociation, which is what the convergence
//! harness demonstrates.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datagen::{self, Dataset};
use crate::jacobians::{gru_tjac, rnn_tjac, CellTape, GruGates, JacobianError};
use crate::scalar::Scalar;
use crate::scan::{
    blelloch_scan, hybrid_scan, linear_scan, ScanArray, ScanElement, ScanError,
};

/// Errors raised by training and its configuration plumbing.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("bad config: {0}")]
    Config(String),
    #[error("bad batch: {0}")]
    Batch(String),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
    #[error(transparent)]
    Data(#[from] datagen::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result alias for training operations.
pub type Result<T> = std::result::Result<T, TrainError>;

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

fn uniform_init<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<T> {
    Array2::from_shape_fn((rows, cols), |_| T::from_f64(rng.random_range(-bound..bound)))
}

fn uniform_init_1d<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, bound: f64) -> Array1<T> {
    Array1::from_shape_fn(len, |_| T::from_f64(rng.random_range(-bound..bound)))
}

/// Parameters of a tanh RNN cell with a linear classifier head.
///
/// `h_t = tanh(W_ih x_t + b_ih + W_hh h_{t-1} + b_hh)`, logits
/// `W_out h_T + b_out`. The same struct doubles as its own gradient
/// container.
#[derive(Debug, Clone)]
pub struct RnnParams<T> {
    pub w_ih: Array2<T>,
    pub w_hh: Array2<T>,
    pub b_ih: Array1<T>,
    pub b_hh: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

impl<T: Scalar> RnnParams<T> {
    /// Seeded uniform initialization in `(-1/sqrt(h), 1/sqrt(h))`.
    pub fn new(hidden: usize, input: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: uniform_init(&mut rng, hidden, input, bound),
            w_hh: uniform_init(&mut rng, hidden, hidden, bound),
            b_ih: uniform_init_1d(&mut rng, hidden, bound),
            b_hh: uniform_init_1d(&mut rng, hidden, bound),
            w_out: uniform_init(&mut rng, classes, hidden, bound),
            b_out: uniform_init_1d(&mut rng, classes, bound),
        }
    }

    pub fn zeros(hidden: usize, input: usize, classes: usize) -> Self {
        Self {
            w_ih: Array2::zeros((hidden, input)),
            w_hh: Array2::zeros((hidden, hidden)),
            b_ih: Array1::zeros(hidden),
            b_hh: Array1::zeros(hidden),
            w_out: Array2::zeros((classes, hidden)),
            b_out: Array1::zeros(classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.nrows()
    }

    /// Flat views over every tensor, in a fixed order shared with
    /// [`Self::flat_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        vec![
            self.w_ih.as_slice().expect("owned arrays are contiguous"),
            self.w_hh.as_slice().expect("owned arrays are contiguous"),
            self.b_ih.as_slice().expect("owned arrays are contiguous"),
            self.b_hh.as_slice().expect("owned arrays are contiguous"),
            self.w_out.as_slice().expect("owned arrays are contiguous"),
            self.b_out.as_slice().expect("owned arrays are contiguous"),
        ]
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        vec![
            self.w_ih.as_slice_mut().expect("owned arrays are contiguous"),
            self.w_hh.as_slice_mut().expect("owned arrays are contiguous"),
            self.b_ih.as_slice_mut().expect("owned arrays are contiguous"),
            self.b_hh.as_slice_mut().expect("owned arrays are contiguous"),
            self.w_out.as_slice_mut().expect("owned arrays are contiguous"),
            self.b_out.as_slice_mut().expect("owned arrays are contiguous"),
        ]
    }
}

/// Parameters of a GRU cell with a linear classifier head.
///
/// Gates follow the reset-before-candidate form with the candidate's
/// recurrent term `M_t = W_hn h_{t-1} + b_hn` kept separate so the tape
/// can store it for the step Jacobian:
/// `r = sigma(W_ir x + b_ir + W_hr h + b_hr)`, `z` likewise,
/// `n = tanh(W_in x + b_in + r o M)`, `h' = (1-z) o n + z o h`.
#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub w_ir: Array2<T>,
    pub w_iz: Array2<T>,
    pub w_in: Array2<T>,
    pub w_hr: Array2<T>,
    pub w_hz: Array2<T>,
    pub w_hn: Array2<T>,
    pub b_ir: Array1<T>,
    pub b_iz: Array1<T>,
    pub b_in: Array1<T>,
    pub b_hr: Array1<T>,
    pub b_hz: Array1<T>,
    pub b_hn: Array1<T>,
    pub w_out: Array2<T>,
    pub b_out: Array1<T>,
}

impl<T: Scalar> GruParams<T> {
    /// Seeded uniform initialization in `(-1/sqrt(h), 1/sqrt(h))`.
    pub fn new(hidden: usize, input: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ir: uniform_init(&mut rng, hidden, input, bound),
            w_iz: uniform_init(&mut rng, hidden, input, bound),
            w_in: uniform_init(&mut rng, hidden, input, bound),
            w_hr: uniform_init(&mut rng, hidden, hidden, bound),
            w_hz: uniform_init(&mut rng, hidden, hidden, bound),
            w_hn: uniform_init(&mut rng, hidden, hidden, bound),
            b_ir: uniform_init_1d(&mut rng, hidden, bound),
            b_iz: uniform_init_1d(&mut rng, hidden, bound),
            b_in: uniform_init_1d(&mut rng, hidden, bound),
            b_hr: uniform_init_1d(&mut rng, hidden, bound),
            b_hz: uniform_init_1d(&mut rng, hidden, bound),
            b_hn: uniform_init_1d(&mut rng, hidden, bound),
            w_out: uniform_init(&mut rng, classes, hidden, bound),
            b_out: uniform_init_1d(&mut rng, classes, bound),
        }
    }

    pub fn zeros(hidden: usize, input: usize, classes: usize) -> Self {
        Self {
            w_ir: Array2::zeros((hidden, input)),
            w_iz: Array2::zeros((hidden, input)),
            w_in: Array2::zeros((hidden, input)),
            w_hr: Array2::zeros((hidden, hidden)),
            w_hz: Array2::zeros((hidden, hidden)),
            w_hn: Array2::zeros((hidden, hidden)),
            b_ir: Array1::zeros(hidden),
            b_iz: Array1::zeros(hidden),
            b_in: Array1::zeros(hidden),
            b_hr: Array1::zeros(hidden),
            b_hz: Array1::zeros(hidden),
            b_hn: Array1::zeros(hidden),
            w_out: Array2::zeros((classes, hidden)),
            b_out: Array1::zeros(classes),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hr.nrows()
    }

    /// Flat views over every tensor, in a fixed order shared with
    /// [`Self::flat_mut`].
    pub fn flat(&self) -> Vec<&[T]> {
        let all = [
            &self.w_ir, &self.w_iz, &self.w_in, &self.w_hr, &self.w_hz, &self.w_hn,
        ];
        let mut out: Vec<&[T]> =
            all.iter().map(|a| a.as_slice().expect("owned arrays are contiguous")).collect();
        for b in [&self.b_ir, &self.b_iz, &self.b_in, &self.b_hr, &self.b_hz, &self.b_hn] {
            out.push(b.as_slice().expect("owned arrays are contiguous"));
        }
        out.push(self.w_out.as_slice().expect("owned arrays are contiguous"));
        out.push(self.b_out.as_slice().expect("owned arrays are contiguous"));
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [T]> {
        let Self {
            w_ir, w_iz, w_in, w_hr, w_hz, w_hn,
            b_ir, b_iz, b_in, b_hr, b_hz, b_hn,
            w_out, b_out,
        } = self;
        vec![
            w_ir.as_slice_mut().expect("owned arrays are contiguous"),
            w_iz.as_slice_mut().expect("owned arrays are contiguous"),
            w_in.as_slice_mut().expect("owned arrays are contiguous"),
            w_hr.as_slice_mut().expect("owned arrays are contiguous"),
            w_hz.as_slice_mut().expect("owned arrays are contiguous"),
            w_hn.as_slice_mut().expect("owned arrays are contiguous"),
            b_ir.as_slice_mut().expect("owned arrays are contiguous"),
            b_iz.as_slice_mut().expect("owned arrays are contiguous"),
            b_in.as_slice_mut().expect("owned arrays are contiguous"),
            b_hr.as_slice_mut().expect("owned arrays are contiguous"),
            b_hz.as_slice_mut().expect("owned arrays are contiguous"),
            b_hn.as_slice_mut().expect("owned arrays are contiguous"),
            w_out.as_slice_mut().expect("owned arrays are contiguous"),
            b_out.as_slice_mut().expect("owned arrays are contiguous"),
        ]
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &Array1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps = logits.mapv(|v| (v - max).exp());
    let sum = exps.sum();
    exps.mapv(|v| v / sum)
}

/// Cross-entropy of a probability vector against a hard label.
pub fn cross_entropy<T: Scalar>(probs: &Array1<T>, label: u8) -> T {
    -probs[usize::from(label)].ln()
}

/// Runs the tanh RNN over one bitstream, recording the tape.
pub fn rnn_forward<T: Scalar>(params: &RnnParams<T>, bits: &[u8], h0: Array1<T>) -> CellTape<T> {
    let mut tape = CellTape::new(h0);
    for &bit in bits {
        let x = Array1::from_elem(1, T::from_f64(f64::from(bit)));
        let s = params.w_ih.dot(&x) + &params.b_ih + params.w_hh.dot(tape.hidden(tape.steps()))
            + &params.b_hh;
        let h = s.mapv(|v| v.tanh());
        tape.push_step(x, h);
    }
    tape
}

/// Runs the GRU over one feature sequence (`frames x coeffs`, flattened
/// row-major), recording gate values on the tape.
pub fn gru_forward<T: Scalar>(
    params: &GruParams<T>,
    frames: &[T],
    coeffs: usize,
    h0: Array1<T>,
) -> CellTape<T> {
    let mut tape = CellTape::new(h0);
    for frame in frames.chunks_exact(coeffs) {
        let x = Array1::from_vec(frame.to_vec());
        let h_prev = tape.hidden(tape.steps()).clone();
        let r = (params.w_ir.dot(&x) + &params.b_ir + params.w_hr.dot(&h_prev) + &params.b_hr)
            .mapv(sigmoid);
        let z = (params.w_iz.dot(&x) + &params.b_iz + params.w_hz.dot(&h_prev) + &params.b_hz)
            .mapv(sigmoid);
        let m = params.w_hn.dot(&h_prev) + &params.b_hn;
        let n = (params.w_in.dot(&x) + &params.b_in + &r * &m).mapv(|v| v.tanh());
        let h = (z.mapv(|v| T::one() - v)) * &n + &z * &h_prev;
        tape.push_gru_step(x, h, GruGates { r, z, n, m });
    }
    tape
}

/// Classifier output for a finished tape: `(loss, probabilities)`.
pub fn classify<T: Scalar>(
    w_out: &Array2<T>,
    b_out: &Array1<T>,
    tape: &CellTape<T>,
    label: u8,
) -> (T, Array1<T>) {
    let logits = w_out.dot(tape.hidden(tape.steps())) + b_out;
    let probs = softmax(&logits);
    (cross_entropy(&probs, label), probs)
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Which scan executor drives the backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Executor {
    Linear,
    Blelloch { workers: usize },
    Hybrid { up: usize, down: usize, workers: usize },
}

impl Executor {
    /// Parses `linear`, `blelloch`, or `hybrid:U,D`.
    pub fn parse(method: &str, workers: usize) -> Result<Self> {
        match method {
            "linear" => Ok(Self::Linear),
            "blelloch" => Ok(Self::Blelloch { workers }),
            other => match other.strip_prefix("hybrid:") {
                Some(levels) => {
                    let (up, down) = levels.split_once(',').ok_or_else(|| {
                        TrainError::Config(format!("method {other:?} wants hybrid:U,D"))
                    })?;
                    let parse = |s: &str| {
                        s.trim().parse::<usize>().map_err(|e| {
                            TrainError::Config(format!("bad hybrid level {s:?}: {e}"))
                        })
                    };
                    Ok(Self::Hybrid { up: parse(up)?, down: parse(down)?, workers })
                }
                None => Err(TrainError::Config(format!("unknown method {other:?}"))),
            },
        }
    }

    pub fn run<T: Scalar>(&self, arr: &ScanArray<T>) -> crate::scan::Result<Vec<ScanElement<T>>> {
        match *self {
            Self::Linear => linear_scan(arr),
            Self::Blelloch { workers } => blelloch_scan(arr, workers),
            Self::Hybrid { up, down, workers } => hybrid_scan(arr, up, down, workers),
        }
    }
}

/// Runs the scan over a batch of per-sample Jacobian chains.
///
/// `seeds` is `(batch, hidden)`; `jacs[k]` is the batched transposed step
/// Jacobian for timestep `T-k`. A trailing `(dh_1/dh_0)^T` element pads
/// the array so the exclusive scan's last output is `grad h_1`. Returns
/// `grad h_t` for `t = 1..=T`, indexed `t-1`.
fn scan_hidden_grads<T: Scalar>(
    seeds: Array2<T>,
    jacs: Vec<Array3<T>>,
    executor: &Executor,
) -> Result<Vec<Array2<T>>> {
    let steps = jacs.len();
    let mut elems = Vec::with_capacity(steps + 1);
    elems.push(ScanElement::batched_vector(seeds));
    elems.extend(jacs.into_iter().map(ScanElement::batched_dense));
    let out = executor.run(&ScanArray::new(elems)?)?;
    let mut grads = vec![Array2::zeros((0, 0)); steps];
    for (k, elem) in out.into_iter().enumerate().skip(1) {
        let t = steps + 1 - k;
        match elem {
            ScanElement::BatchedVector(v) => grads[t - 1] = (*v).clone(),
            other => {
                return Err(TrainError::Batch(format!(
                    "scan output {k} is not a batched vector: {:?}",
                    other.shape()
                )))
            }
        }
    }
    Ok(grads)
}

fn batch_seeds<T: Scalar>(
    w_out: &Array2<T>,
    b_out: &Array1<T>,
    tapes: &[CellTape<T>],
    labels: &[u8],
    grads_out: &mut Array2<T>,
    grads_b: &mut Array1<T>,
) -> (Array2<T>, T) {
    let batch = tapes.len();
    let hidden = tapes[0].hidden(0).len();
    let scale = T::from_f64(1.0 / batch as f64);
    let mut seeds = Array2::zeros((batch, hidden));
    let mut loss_sum = T::zero();
    for (s, (tape, &label)) in tapes.iter().zip(labels).enumerate() {
        let (loss, probs) = classify(w_out, b_out, tape, label);
        loss_sum = loss_sum + loss;
        let mut dlogits = probs;
        dlogits[usize::from(label)] = dlogits[usize::from(label)] - T::one();
        dlogits.mapv_inplace(|v| v * scale);
        let h_last = tape.hidden(tape.steps());
        for (c, &dl) in dlogits.iter().enumerate() {
            grads_b[c] = grads_b[c] + dl;
            for (j, &hj) in h_last.iter().enumerate() {
                grads_out[(c, j)] = grads_out[(c, j)] + dl * hj;
            }
        }
        seeds.row_mut(s).assign(&w_out.t().dot(&dlogits));
    }
    (seeds, loss_sum * scale)
}

fn check_batch<T: Scalar>(tapes: &[CellTape<T>], labels: &[u8]) -> Result<usize> {
    if tapes.is_empty() || tapes.len() != labels.len() {
        return Err(TrainError::Batch(format!(
            "{} tapes vs {} labels",
            tapes.len(),
            labels.len()
        )));
    }
    let steps = tapes[0].steps();
    if steps == 0 || tapes.iter().any(|t| t.steps() != steps) {
        return Err(TrainError::Batch("tapes must share a positive step count".into()));
    }
    Ok(steps)
}

/// Scan-based backward pass for a batch of RNN tapes.
///
/// Returns mean-loss gradients for every parameter and the mean loss.
pub fn backward_rnn<T: Scalar>(
    params: &RnnParams<T>,
    tapes: &[CellTape<T>],
    labels: &[u8],
    executor: &Executor,
) -> Result<(RnnParams<T>, T)> {
    let steps = check_batch(tapes, labels)?;
    let batch = tapes.len();
    let hidden = params.hidden();
    let mut grads = RnnParams::zeros(hidden, params.w_ih.ncols(), params.w_out.nrows());
    let (seeds, loss) =
        batch_seeds(&params.w_out, &params.b_out, tapes, labels, &mut grads.w_out, &mut grads.b_out);
    // jacs[k] stacks (dh_t/dh_{t-1})^T at t = steps - k across the batch.
    let mut jacs = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = steps - k;
        let mut stack = Array3::zeros((batch, hidden, hidden));
        for (s, tape) in tapes.iter().enumerate() {
            stack
                .index_axis_mut(Axis(0), s)
                .assign(&rnn_tjac(tape, t, params.w_hh.view())?);
        }
        jacs.push(stack);
    }
    let h_grads = scan_hidden_grads(seeds, jacs, executor)?;
    for (s, tape) in tapes.iter().enumerate() {
        for t in 1..=steps {
            let h_t = tape.hidden(t);
            let h_prev = tape.hidden(t - 1);
            let x = tape.input(t);
            let g = h_grads[t - 1].row(s);
            for i in 0..hidden {
                // Pre-activation gradient of tanh.
                let ds = (T::one() - h_t[i] * h_t[i]) * g[i];
                grads.b_ih[i] = grads.b_ih[i] + ds;
                grads.b_hh[i] = grads.b_hh[i] + ds;
                for (j, &xj) in x.iter().enumerate() {
                    grads.w_ih[(i, j)] = grads.w_ih[(i, j)] + ds * xj;
                }
                for (j, &hj) in h_prev.iter().enumerate() {
                    grads.w_hh[(i, j)] = grads.w_hh[(i, j)] + ds * hj;
                }
            }
        }
    }
    Ok((grads, loss))
}

/// Scan-based backward pass for a batch of GRU tapes.
pub fn backward_gru<T: Scalar>(
    params: &GruParams<T>,
    tapes: &[CellTape<T>],
    labels: &[u8],
    executor: &Executor,
) -> Result<(GruParams<T>, T)> {
    let steps = check_batch(tapes, labels)?;
    let batch = tapes.len();
    let hidden = params.hidden();
    let mut grads = GruParams::zeros(hidden, params.w_ir.ncols(), params.w_out.nrows());
    let (seeds, loss) =
        batch_seeds(&params.w_out, &params.b_out, tapes, labels, &mut grads.w_out, &mut grads.b_out);
    let mut jacs = Vec::with_capacity(steps);
    for k in 0..steps {
        let t = steps - k;
        let mut stack = Array3::zeros((batch, hidden, hidden));
        for (s, tape) in tapes.iter().enumerate() {
            stack.index_axis_mut(Axis(0), s).assign(&gru_tjac(
                tape,
                t,
                params.w_hr.view(),
                params.w_hz.view(),
                params.w_hn.view(),
            )?);
        }
        jacs.push(stack);
    }
    let h_grads = scan_hidden_grads(seeds, jacs, executor)?;
    for (s, tape) in tapes.iter().enumerate() {
        for t in 1..=steps {
            let gates = tape.gru_gates(t)?;
            let h_prev = tape.hidden(t - 1);
            let x = tape.input(t);
            let g = h_grads[t - 1].row(s);
            for i in 0..hidden {
                let (r, z, n, m) = (gates.r[i], gates.z[i], gates.n[i], gates.m[i]);
                let dn = (T::one() - z) * g[i];
                let dz = (h_prev[i] - n) * g[i];
                // Pre-activation gradients.
                let dn_pre = (T::one() - n * n) * dn;
                let dr_pre = r * (T::one() - r) * m * dn_pre;
                let dz_pre = z * (T::one() - z) * dz;
                let dm = r * dn_pre;
                grads.b_in[i] = grads.b_in[i] + dn_pre;
                grads.b_ir[i] = grads.b_ir[i] + dr_pre;
                grads.b_hr[i] = grads.b_hr[i] + dr_pre;
                grads.b_iz[i] = grads.b_iz[i] + dz_pre;
                grads.b_hz[i] = grads.b_hz[i] + dz_pre;
                grads.b_hn[i] = grads.b_hn[i] + dm;
                for (j, &xj) in x.iter().enumerate() {
                    grads.w_in[(i, j)] = grads.w_in[(i, j)] + dn_pre * xj;
                    grads.w_ir[(i, j)] = grads.w_ir[(i, j)] + dr_pre * xj;
                    grads.w_iz[(i, j)] = grads.w_iz[(i, j)] + dz_pre * xj;
                }
                for (j, &hj) in h_prev.iter().enumerate() {
                    grads.w_hr[(i, j)] = grads.w_hr[(i, j)] + dr_pre * hj;
                    grads.w_hz[(i, j)] = grads.w_hz[(i, j)] + dz_pre * hj;
                    grads.w_hn[(i, j)] = grads.w_hn[(i, j)] + dm * hj;
                }
            }
        }
    }
    Ok((grads, loss))
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Adam with bias correction; epsilon is added after the square root.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: T) -> Self {
        Self {
            lr,
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "tensor counts differ");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
            self.v = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = T::one() - b1.powi(self.step as i32);
        let bc2 = T::one() - b2.powi(self.step as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.len(), g.len(), "parameter and gradient lengths differ");
            for k in 0..p.len() {
                m[k] = b1 * m[k] + (T::one() - b1) * g[k];
                v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] = p[k] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// SGD with classical momentum: `v <- mu v + g`, `p <- p - lr v`.
#[derive(Debug, Clone)]
pub struct SgdMomentum<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdMomentum<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len(), "tensor counts differ");
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| vec![T::zero(); g.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            assert_eq!(p.len(), g.len(), "parameter and gradient lengths differ");
            for k in 0..p.len() {
                v[k] = self.momentum * v[k] + g[k];
                p[k] = p[k] - self.lr * v[k];
            }
        }
    }
}

/// Either optimizer behind one step call.
#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(SgdMomentum<T>),
}

impl<T: Scalar> Optimizer<T> {
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        match self {
            Self::Adam(a) => a.step(params, grads),
            Self::Sgd(s) => s.step(params, grads),
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// Training configuration, parsed from `key = value` text.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub method: String,
    pub t: Option<usize>,
    pub b: usize,
    pub epochs: usize,
    pub lr: Option<f64>,
    pub seed: u64,
    pub hidden_size: usize,
    pub dataset_path: Option<String>,
    pub precision: String,
    pub workers: usize,
    pub optimizer: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: "linear".into(),
            t: None,
            b: 16,
            epochs: 1,
            lr: None,
            seed: 42,
            hidden_size: 20,
            dataset_path: None,
            precision: "f32".into(),
            workers: 1,
            optimizer: "adam".into(),
        }
    }
}

/// Parses `key = value` lines; `#` starts a comment, unknown keys are
/// rejected.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| TrainError::Config(format!("line {}: missing '='", lineno + 1)))?;
        let (key, value) = (key.trim().to_lowercase(), value.trim());
        let bad = |e: &dyn std::fmt::Display| {
            TrainError::Config(format!("line {}: bad {key}: {e}", lineno + 1))
        };
        match key.as_str() {
            "method" => config.method = value.to_string(),
            "t" => config.t = Some(value.parse().map_err(|e| bad(&e))?),
            "b" => config.b = value.parse().map_err(|e| bad(&e))?,
            "epochs" => config.epochs = value.parse().map_err(|e| bad(&e))?,
            "lr" => config.lr = Some(value.parse().map_err(|e| bad(&e))?),
            "seed" => config.seed = value.parse().map_err(|e| bad(&e))?,
            "hidden_size" => config.hidden_size = value.parse().map_err(|e| bad(&e))?,
            "dataset_path" => config.dataset_path = Some(value.to_string()),
            "precision" => config.precision = value.to_string(),
            "workers" => config.workers = value.parse().map_err(|e| bad(&e))?,
            "optimizer" => config.optimizer = value.to_string(),
            other => {
                return Err(TrainError::Config(format!(
                    "line {}: unknown key {other:?}",
                    lineno + 1
                )))
            }
        }
    }
    if config.b == 0 {
        return Err(TrainError::Config("b must be at least 1".into()));
    }
    Ok(config)
}

/// One metrics row per training iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub iteration: usize,
    pub loss: f64,
    pub wall_ms: f64,
    pub method: String,
}

/// Writes metrics as `epoch,iteration,loss,wall_ms,method` CSV.
pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricsRow]) -> std::io::Result<()> {
    writeln!(w, "epoch,iteration,loss,wall_ms,method")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.epoch, r.iteration, r.loss, r.wall_ms, r.method)?;
    }
    Ok(())
}

/// Loads the dataset named by the config and trains on it.
pub fn train(config: &TrainConfig) -> Result<Vec<MetricsRow>> {
    let path = config
        .dataset_path
        .as_ref()
        .ok_or_else(|| TrainError::Config("dataset_path is required".into()))?;
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let dataset = datagen::read_dataset(&mut file)?;
    train_on(config, &dataset)
}

/// Trains on an in-memory dataset; bit datasets train the RNN, feature
/// datasets the GRU.
pub fn train_on(config: &TrainConfig, dataset: &Dataset) -> Result<Vec<MetricsRow>> {
    match config.precision.as_str() {
        "f32" => run_training::<f32>(config, dataset),
        "f64" => run_training::<f64>(config, dataset),
        other => Err(TrainError::Config(format!("unknown precision {other:?}"))),
    }
}

fn truncated_len(config: &TrainConfig, full: usize) -> Result<usize> {
    match config.t {
        None => Ok(full),
        Some(t) if t >= 1 && t <= full => Ok(t),
        Some(t) => {
            Err(TrainError::Config(format!("t={t} outside the dataset's 1..={full} range")))
        }
    }
}

fn make_optimizer<T: Scalar>(config: &TrainConfig, default_lr: f64) -> Result<Optimizer<T>> {
    let lr = T::from_f64(config.lr.unwrap_or(default_lr));
    match config.optimizer.as_str() {
        "adam" => Ok(Optimizer::Adam(Adam::new(lr))),
        "sgd" => Ok(Optimizer::Sgd(SgdMomentum::new(lr, T::from_f64(0.9)))),
        other => Err(TrainError::Config(format!("unknown optimizer {other:?}"))),
    }
}

fn run_training<T: Scalar>(config: &TrainConfig, dataset: &Dataset) -> Result<Vec<MetricsRow>> {
    let executor = Executor::parse(&config.method, config.workers)?;
    let hidden = config.hidden_size;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(u64::MAX); // distinct from datagen sample streams
    let mut rows = Vec::new();
    let mut iteration = 0usize;
    match dataset {
        Dataset::Bits(ds) => {
            let t = truncated_len(config, ds.t)?;
            let mut params =
                RnnParams::<T>::new(hidden, 1, datagen::BIT_CLASSES, config.seed);
            let mut opt = make_optimizer::<T>(config, 1e-5)?;
            for epoch in 0..config.epochs {
                let mut order: Vec<usize> = (0..ds.n()).collect();
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(config.b) {
                    let start = Instant::now();
                    let mut tapes = Vec::with_capacity(chunk.len());
                    let mut labels = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let (bits, label) = ds.sample(i);
                        tapes.push(rnn_forward(&params, &bits[..t], Array1::zeros(hidden)));
                        labels.push(label);
                    }
                    let (grads, loss) = backward_rnn(&params, &tapes, &labels, &executor)?;
                    opt.step(&mut params.flat_mut(), &grads.flat());
                    rows.push(MetricsRow {
                        epoch,
                        iteration,
                        loss: Scalar::to_f64(loss),
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        method: config.method.clone(),
                    });
                    iteration += 1;
                }
            }
        }
        Dataset::Features(ds) => {
            let frames = truncated_len(config, ds.frames)?;
            let classes =
                usize::from(ds.labels.iter().copied().max().unwrap_or(0)) + 1;
            let mut params = GruParams::<T>::new(hidden, ds.coeffs, classes, config.seed);
            let mut opt = make_optimizer::<T>(config, 3e-4)?;
            for epoch in 0..config.epochs {
                let mut order: Vec<usize> = (0..ds.n()).collect();
                order.shuffle(&mut shuffle_rng);
                for chunk in order.chunks(config.b) {
                    let start = Instant::now();
                    let mut tapes = Vec::with_capacity(chunk.len());
                    let mut labels = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let (block, label) = ds.sample(i);
                        let block: Vec<T> = block[..frames * ds.coeffs]
                            .iter()
                            .map(|&v| T::from_f64(f64::from(v)))
                            .collect();
                        tapes.push(gru_forward(&params, &block, ds.coeffs, Array1::zeros(hidden)));
                        labels.push(label);
                    }
                    let (grads, loss) = backward_gru(&params, &tapes, &labels, &executor)?;
                    opt.step(&mut params.flat_mut(), &grads.flat());
                    rows.push(MetricsRow {
                        epoch,
                        iteration,
                        loss: Scalar::to_f64(loss),
                        wall_ms: start.elapsed().as_secs_f64() * 1e3,
                        method: config.method.clone(),
                    });
                    iteration += 1;
                }
            }
        }
    }
    Ok(rows)
}
