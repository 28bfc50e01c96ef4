//! Synthetic datasets for the recurrent-network benchmarks.
//!
//! Two generators: class-conditional Bernoulli bitstreams for the
//! sequence-classification task, and class-conditional Gaussian feature
//! sequences normalized to zero mean and unit variance per coefficient.
//! Every sample is drawn from its own counter-derived RNG stream, so
//! generation is order-independent and a dataset is a pure function of
//! `(shape, seed)`.

use std::io::{Read, Write};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

/// Errors raised by dataset generation and (de)serialization.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset parameter out of range: {0}")]
    Range(String),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Result alias for dataset operations.
pub type Result<T> = std::result::Result<T, DataError>;

const MAGIC: &[u8; 4] = b"BPDS";
const VERSION: u32 = 1;

/// Number of classes in the bitstream task.
pub const BIT_CLASSES: usize = 10;

/// Bit probability for class `c`: `0.05 + 0.1 * c`.
pub fn bit_probability(class: u8) -> f64 {
    0.05 + 0.1 * f64::from(class)
}

/// Bitstream classification dataset: `n` samples of `t` bits each.
///
/// Sample `i` occupies `bits[i*t .. (i+1)*t]`; each bit is 0 or 1 and the
/// label is the class whose Bernoulli rate generated the stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamDataset {
    pub t: usize,
    pub seed: u64,
    pub bits: Vec<u8>,
    pub labels: Vec<u8>,
}

impl BitstreamDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Bits and label of sample `i`.
    pub fn sample(&self, i: usize) -> (&[u8], u8) {
        (&self.bits[i * self.t..(i + 1) * self.t], self.labels[i])
    }
}

/// Real-valued sequence dataset: `n` samples of `frames x coeffs` each,
/// stored row-major per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub frames: usize,
    pub coeffs: usize,
    pub seed: u64,
    pub features: Vec<f32>,
    pub labels: Vec<u8>,
}

impl FeatureDataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Feature block (`frames * coeffs` values, row-major) and label of
    /// sample `i`.
    pub fn sample(&self, i: usize) -> (&[f32], u8) {
        let len = self.frames * self.coeffs;
        (&self.features[i * len..(i + 1) * len], self.labels[i])
    }
}

/// Either dataset kind, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Bits(BitstreamDataset),
    Features(FeatureDataset),
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generates `n` bitstreams of length `t`.
///
/// Each sample draws its class uniformly from `0..10`, then `t` i.i.d.
/// bits at rate `0.05 + 0.1 * class`, all from a per-sample RNG stream.
pub fn gen_bitstreams(t: usize, n: usize, seed: u64) -> Result<BitstreamDataset> {
    if t == 0 || n == 0 {
        return Err(DataError::Range(format!("t={t}, n={n}: both must be at least 1")));
    }
    let mut bits = vec![0u8; n * t];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let class = rng.random_range(0..BIT_CLASSES) as u8;
        labels[i] = class;
        let p = bit_probability(class);
        for bit in &mut bits[i * t..(i + 1) * t] {
            *bit = u8::from(rng.random_bool(p));
        }
    }
    Ok(BitstreamDataset { t, seed, bits, labels })
}

/// Generates `n` feature sequences of `frames x coeffs` values.
///
/// Sample features start as Gaussian with the class shifting the mean by
/// `0.1 * class`, then each coefficient column is normalized to zero mean
/// and unit variance across the whole dataset.
pub fn gen_feature_sequences(
    frames: usize,
    coeffs: usize,
    n: usize,
    classes: usize,
    seed: u64,
) -> Result<FeatureDataset> {
    if frames == 0 || coeffs == 0 || n == 0 {
        return Err(DataError::Range(format!(
            "frames={frames}, coeffs={coeffs}, n={n}: all must be at least 1"
        )));
    }
    if classes == 0 || classes > 256 {
        return Err(DataError::Range(format!("classes={classes} not in 1..=256")));
    }
    let len = frames * coeffs;
    let mut features = vec![0f32; n * len];
    let mut labels = vec![0u8; n];
    for i in 0..n {
        let mut rng = sample_rng(seed, i);
        let class = rng.random_range(0..classes) as u8;
        labels[i] = class;
        let shift = 0.1 * f32::from(class);
        for v in &mut features[i * len..(i + 1) * len] {
            let z: f32 = rng.sample(StandardNormal);
            *v = z + shift;
        }
    }
    // Per-coefficient normalization over all n*frames rows.
    let rows = (n * frames) as f64;
    for c in 0..coeffs {
        let mut sum = 0f64;
        let mut sq = 0f64;
        for v in features.iter().skip(c).step_by(coeffs) {
            sum += f64::from(*v);
            sq += f64::from(*v) * f64::from(*v);
        }
        let mean = sum / rows;
        let var = (sq / rows - mean * mean).max(0.0);
        let inv_std = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        for v in features.iter_mut().skip(c).step_by(coeffs) {
            *v = ((f64::from(*v) - mean) * inv_std) as f32;
        }
    }
    Ok(FeatureDataset { frames, coeffs, seed, features, labels })
}

/// Writes a dataset in the `BPDS` binary layout.
///
/// Header: magic, u32 version, u8 kind (0 bits, 1 float features), u32 n,
/// u32 t-or-frames, u32 coeffs, u64 seed; then the payload row-major and
/// one u8 label per sample. All integers little-endian.
pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    match ds {
        Dataset::Bits(b) => {
            w.write_all(&[0u8])?;
            w.write_all(&(b.n() as u32).to_le_bytes())?;
            w.write_all(&(b.t as u32).to_le_bytes())?;
            w.write_all(&1u32.to_le_bytes())?;
            w.write_all(&b.seed.to_le_bytes())?;
            w.write_all(&b.bits)?;
            w.write_all(&b.labels)?;
        }
        Dataset::Features(f) => {
            w.write_all(&[1u8])?;
            w.write_all(&(f.n() as u32).to_le_bytes())?;
            w.write_all(&(f.frames as u32).to_le_bytes())?;
            w.write_all(&(f.coeffs as u32).to_le_bytes())?;
            w.write_all(&f.seed.to_le_bytes())?;
            for v in &f.features {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&f.labels)?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(DataError::Format(format!("unsupported version {version}")));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind)?;
    let n = read_u32(r)? as usize;
    let t_or_f = read_u32(r)? as usize;
    let coeffs = read_u32(r)? as usize;
    let seed = read_u64(r)?;
    match kind[0] {
        0 => {
            if coeffs != 1 {
                return Err(DataError::Format(format!("bit dataset with {coeffs} coefficients")));
            }
            let mut bits = vec![0u8; n * t_or_f];
            r.read_exact(&mut bits)?;
            if let Some(bad) = bits.iter().find(|&&b| b > 1) {
                return Err(DataError::Format(format!("bit value {bad} outside 0..=1")));
            }
            let mut labels = vec![0u8; n];
            r.read_exact(&mut labels)?;
            if let Some(&bad) = labels.iter().find(|&&c| usize::from(c) >= BIT_CLASSES) {
                return Err(DataError::Format(format!("label {bad} outside 0..=9")));
            }
            Ok(Dataset::Bits(BitstreamDataset { t: t_or_f, seed, bits, labels }))
        }
        1 => {
            let mut payload = vec![0u8; n * t_or_f * coeffs * 4];
            r.read_exact(&mut payload)?;
            let features =
                payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            let mut labels = vec![0u8; n];
            r.read_exact(&mut labels)?;
            Ok(Dataset::Features(FeatureDataset {
                frames: t_or_f,
                coeffs,
                seed,
                features,
                labels,
            }))
        }
        k => Err(DataError::Format(format!("unknown dataset kind {k}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bitstreams_are_deterministic_and_in_range() {
        let a = gen_bitstreams(64, 100, 7).unwrap();
        let b = gen_bitstreams(64, 100, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.bits.iter().all(|&b| b <= 1));
        assert!(a.labels.iter().all(|&c| usize::from(c) < BIT_CLASSES));
        let c = gen_bitstreams(64, 100, 8).unwrap();
        assert_ne!(a, c, "seed must matter");
    }

    #[test]
    fn bitstream_rates_track_class_probabilities() {
        let (t, n) = (200usize, 2000usize);
        let ds = gen_bitstreams(t, n, 11).unwrap();
        let mut ones = [0u64; BIT_CLASSES];
        let mut counts = [0u64; BIT_CLASSES];
        for i in 0..n {
            let (bits, label) = ds.sample(i);
            counts[usize::from(label)] += bits.len() as u64;
            ones[usize::from(label)] += bits.iter().map(|&b| u64::from(b)).sum::<u64>();
        }
        for c in 0..BIT_CLASSES {
            assert!(counts[c] > 0, "class {c} never drawn");
            let p = bit_probability(c as u8);
            let mean = ones[c] as f64 / counts[c] as f64;
            let sigma = (p * (1.0 - p) / counts[c] as f64).sqrt();
            assert!(
                (mean - p).abs() <= 3.0 * sigma,
                "class {c}: mean {mean} vs p {p} (3 sigma = {})",
                3.0 * sigma
            );
        }
    }

    #[test]
    fn label_distribution_is_roughly_uniform() {
        let ds = gen_bitstreams(4, 5000, 3).unwrap();
        let mut counts = [0f64; BIT_CLASSES];
        for &c in &ds.labels {
            counts[usize::from(c)] += 1.0;
        }
        let expect = ds.n() as f64 / BIT_CLASSES as f64;
        let sigma = (ds.n() as f64 * 0.1 * 0.9).sqrt();
        for (c, &count) in counts.iter().enumerate() {
            assert!((count - expect).abs() <= 3.0 * sigma, "class {c}: {count} vs {expect}");
        }
    }

    #[test]
    fn features_are_normalized_per_coefficient() {
        let ds = gen_feature_sequences(50, 6, 200, 10, 17).unwrap();
        let rows = (ds.n() * ds.frames) as f64;
        for c in 0..ds.coeffs {
            let vals: Vec<f64> =
                ds.features.iter().skip(c).step_by(ds.coeffs).map(|&v| f64::from(v)).collect();
            let mean = vals.iter().sum::<f64>() / rows;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / rows;
            assert!(mean.abs() <= 3.0 / rows.sqrt(), "coefficient {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "coefficient {c} variance {var}");
        }
    }

    #[test]
    fn feature_classes_shift_the_raw_mean() {
        // Before normalization the shift is 0.1 per class; after global
        // normalization higher classes must still sit above lower ones.
        let ds = gen_feature_sequences(40, 4, 400, 4, 23).unwrap();
        let mut sums = vec![0f64; 4];
        let mut counts = vec![0f64; 4];
        for i in 0..ds.n() {
            let (block, label) = ds.sample(i);
            sums[usize::from(label)] += block.iter().map(|&v| f64::from(v)).sum::<f64>();
            counts[usize::from(label)] += block.len() as f64;
        }
        let means: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / c).collect();
        for c in 1..4 {
            assert!(means[c] > means[c - 1], "class means not ordered: {means:?}");
        }
    }

    #[test]
    fn benchmark_shapes_are_accepted() {
        for (frames, coeffs) in [(259usize, 38usize), (517, 24), (1034, 12)] {
            let ds = gen_feature_sequences(frames, coeffs, 2, 11, 1).unwrap();
            assert_eq!(ds.features.len(), 2 * frames * coeffs);
        }
    }

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(gen_bitstreams(0, 5, 1).is_err());
        assert!(gen_bitstreams(5, 0, 1).is_err());
        assert!(gen_feature_sequences(5, 0, 2, 10, 1).is_err());
        assert!(gen_feature_sequences(5, 2, 2, 0, 1).is_err());
    }

    #[test]
    fn round_trips_both_kinds() {
        let bits = Dataset::Bits(gen_bitstreams(16, 9, 5).unwrap());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &bits).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), bits);

        let feats = Dataset::Features(gen_feature_sequences(7, 3, 5, 6, 5).unwrap());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &feats).unwrap();
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), feats);
    }

    #[test]
    fn write_is_byte_stable_for_a_seed() {
        let mk = || {
            let mut buf = Vec::new();
            let ds = Dataset::Bits(gen_bitstreams(32, 20, 99).unwrap());
            write_dataset(&mut buf, &ds).unwrap();
            buf
        };
        assert_eq!(mk(), mk());
    }

    #[test]
    fn read_rejects_corrupt_headers() {
        let mut buf = Vec::new();
        write_dataset(&mut buf, &Dataset::Bits(gen_bitstreams(4, 2, 1).unwrap())).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(DataError::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 7; // kind byte
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(DataError::Format(_))));
        let mut bad = buf;
        bad.truncate(20);
        assert!(matches!(read_dataset(&mut bad.as_slice()), Err(DataError::Io(_))));
    }
}
