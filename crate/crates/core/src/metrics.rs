//! Communication and computation accounting.
//!
//! Model messages carry the prunable weights through a [`SparsePayload`]
//! followed by the biases as a dense `f32` block. Biases are never pruned, so
//! they always cost `4·n_bias` bytes.
//!
//! Payload wire layout (little-endian): 4-byte magic, `u32 total_len`,
//! `u32 nnz`, then the body:
//!
//! | magic  | body                                           |
//! |--------|------------------------------------------------|
//! | `FPSP` | `nnz` × `u32` indices, then `nnz` × `f32`       |
//! | `FPBM` | `⌈total_len/8⌉` bitmap bytes, then `nnz` × `f32`|
//! | `FPDN` | `total_len` × `f32`                             |

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::nn::{forward, Layer, ModelSpec, ModelState};

pub const HEADER_BYTES: usize = 12;
const MAGIC_COO: &[u8; 4] = b"FPSP";
const MAGIC_BITMAP: &[u8; 4] = b"FPBM";
const MAGIC_DENSE: &[u8; 4] = b"FPDN";

/// Payload encoding choice. `Auto` uses COO unless that would exceed the
/// dense size, in which case the dense encoding is sent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codec {
    #[default]
    Auto,
    Coo,
    Bitmap,
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum PayloadBody {
    Coo { indices: Vec<u32>, values: Vec<f32> },
    Bitmap { bitmap: Vec<u8>, values: Vec<f32> },
    Dense { values: Vec<f32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsePayload {
    pub total_len: u32,
    pub nnz: u32,
    pub body: PayloadBody,
}

fn to_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Codec(format!("{n} does not fit in u32")))
}

impl SparsePayload {
    /// Encodes the on-mask entries of `values`.
    pub fn encode(values: &[f64], mask: &Mask, codec: Codec) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::LayoutMismatch(format!(
                "{} values but mask of {} bits",
                values.len(),
                mask.len()
            )));
        }
        let total_len = to_u32(values.len())?;
        let nnz = mask.count_ones();
        let codec = match codec {
            Codec::Auto if coo_bytes(nnz) > dense_bytes(values.len()) => Codec::Dense,
            Codec::Auto => Codec::Coo,
            c => c,
        };
        let kept = || {
            values
                .iter()
                .zip(mask.bits())
                .filter(|(_, &b)| b)
                .map(|(&v, _)| v as f32)
                .collect::<Vec<f32>>()
        };
        let body = match codec {
            Codec::Coo | Codec::Auto => PayloadBody::Coo {
                indices: mask
                    .bits()
                    .iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| i as u32)
                    .collect(),
                values: kept(),
            },
            Codec::Bitmap => {
                let mut bitmap = vec![0u8; values.len().div_ceil(8)];
                for (i, &b) in mask.bits().iter().enumerate() {
                    if b {
                        bitmap[i / 8] |= 1 << (i % 8);
                    }
                }
                PayloadBody::Bitmap {
                    bitmap,
                    values: kept(),
                }
            }
            Codec::Dense => PayloadBody::Dense {
                values: values
                    .iter()
                    .zip(mask.bits())
                    .map(|(&v, &b)| if b { v as f32 } else { 0.0 })
                    .collect(),
            },
        };
        Ok(Self {
            total_len,
            nnz: to_u32(nnz)?,
            body,
        })
    }

    pub fn byte_len(&self) -> usize {
        HEADER_BYTES
            + match &self.body {
                PayloadBody::Coo { indices, values } => 4 * indices.len() + 4 * values.len(),
                PayloadBody::Bitmap { bitmap, values } => bitmap.len() + 4 * values.len(),
                PayloadBody::Dense { values } => 4 * values.len(),
            }
    }

    /// Dense reconstruction, zero off-mask.
    pub fn decode(&self) -> Vec<f32> {
        let n = self.total_len as usize;
        match &self.body {
            PayloadBody::Coo { indices, values } => {
                let mut out = vec![0.0; n];
                for (&i, &v) in indices.iter().zip(values) {
                    out[i as usize] = v;
                }
                out
            }
            PayloadBody::Bitmap { bitmap, values } => {
                let mut out = vec![0.0; n];
                let mut vals = values.iter();
                for (i, slot) in out.iter_mut().enumerate() {
                    if bitmap[i / 8] & (1 << (i % 8)) != 0 {
                        *slot = *vals.next().unwrap();
                    }
                }
                out
            }
            PayloadBody::Dense { values } => values.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.byte_len());
        let magic = match self.body {
            PayloadBody::Coo { .. } => MAGIC_COO,
            PayloadBody::Bitmap { .. } => MAGIC_BITMAP,
            PayloadBody::Dense { .. } => MAGIC_DENSE,
        };
        out.extend_from_slice(magic);
        out.extend_from_slice(&self.total_len.to_le_bytes());
        out.extend_from_slice(&self.nnz.to_le_bytes());
        let put_f32 = |out: &mut Vec<u8>, vs: &[f32]| {
            for v in vs {
                out.extend_from_slice(&v.to_le_bytes());
            }
        };
        match &self.body {
            PayloadBody::Coo { indices, values } => {
                for i in indices {
                    out.extend_from_slice(&i.to_le_bytes());
                }
                put_f32(&mut out, values);
            }
            PayloadBody::Bitmap { bitmap, values } => {
                out.extend_from_slice(bitmap);
                put_f32(&mut out, values);
            }
            PayloadBody::Dense { values } => put_f32(&mut out, values),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_BYTES {
            return Err(Error::Codec("payload shorter than header".into()));
        }
        let word = |at: usize| {
            u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
        };
        let total_len = word(4);
        let nnz = word(8);
        let (n, k) = (total_len as usize, nnz as usize);
        if k > n {
            return Err(Error::Codec(format!("nnz {k} exceeds total_len {n}")));
        }
        let rest = &bytes[HEADER_BYTES..];
        let floats = |b: &[u8]| -> Vec<f32> {
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let expect = |len: usize| -> Result<()> {
            if rest.len() != len {
                return Err(Error::Codec(format!(
                    "body is {} bytes, expected {len}",
                    rest.len()
                )));
            }
            Ok(())
        };
        let body = match &bytes[..4] {
            m if m == MAGIC_COO => {
                expect(8 * k)?;
                let indices: Vec<u32> = rest[..4 * k]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                if indices.windows(2).any(|w| w[0] >= w[1])
                    || indices.last().is_some_and(|&i| i >= total_len)
                {
                    return Err(Error::Codec(
                        "COO indices must be strictly increasing and below total_len".into(),
                    ));
                }
                PayloadBody::Coo {
                    indices,
                    values: floats(&rest[4 * k..]),
                }
            }
            m if m == MAGIC_BITMAP => {
                let nb = n.div_ceil(8);
                expect(nb + 4 * k)?;
                let bitmap = rest[..nb].to_vec();
                let ones: u32 = bitmap.iter().map(|b| b.count_ones()).sum();
                if ones != nnz {
                    return Err(Error::Codec(format!(
                        "bitmap has {ones} bits set, header says {nnz}"
                    )));
                }
                PayloadBody::Bitmap {
                    bitmap,
                    values: floats(&rest[nb..]),
                }
            }
            m if m == MAGIC_DENSE => {
                expect(4 * n)?;
                PayloadBody::Dense {
                    values: floats(rest),
                }
            }
            m => return Err(Error::Codec(format!("unknown payload magic {m:?}"))),
        };
        Ok(Self {
            total_len,
            nnz,
            body,
        })
    }
}

/// COO payload bytes for `nnz` kept entries.
pub fn coo_bytes(nnz: usize) -> usize {
    HEADER_BYTES + 8 * nnz
}

pub fn dense_bytes(total: usize) -> usize {
    HEADER_BYTES + 4 * total
}

pub fn bitmap_bytes(total: usize, nnz: usize) -> usize {
    HEADER_BYTES + total.div_ceil(8) + 4 * nnz
}

/// Bytes of a payload for `nnz` of `total` entries under `codec`, without encoding.
pub fn payload_bytes(total: usize, nnz: usize, codec: Codec) -> usize {
    match codec {
        Codec::Auto => coo_bytes(nnz).min(dense_bytes(total)),
        Codec::Coo => coo_bytes(nnz),
        Codec::Bitmap => bitmap_bytes(total, nnz),
        Codec::Dense => dense_bytes(total),
    }
}

/// COO encoding of a model's prunable weights under `mask`.
pub fn encode_sparse(state: &ModelState, mask: &Mask) -> Result<SparsePayload> {
    state.check_mask(mask)?;
    SparsePayload::encode(&state.prunable_values(), mask, Codec::Coo)
}

/// Bytes to ship one model: weight payload plus dense biases.
pub fn message_bytes(state: &ModelState, mask: Option<&Mask>, codec: Codec) -> Result<usize> {
    let ones;
    let mask = match mask {
        Some(m) => m,
        None => {
            ones = Mask::ones(state.num_prunable());
            &ones
        }
    };
    let payload = SparsePayload::encode(&state.prunable_values(), mask, codec)?;
    Ok(payload.byte_len() + 4 * state.num_bias())
}

/// Parameter-count compression: `total_params / nnz`.
pub fn compression_rate(total_params: usize, nnz: usize) -> Result<f64> {
    if nnz == 0 {
        return Err(Error::InvalidArgument(
            "compression rate undefined for nnz = 0".into(),
        ));
    }
    Ok(total_params as f64 / nnz as f64)
}

/// Byte-level compression against shipping every parameter as dense `f32`.
pub fn wire_compression(total_params: usize, payload: &SparsePayload) -> f64 {
    (4 * total_params) as f64 / payload.byte_len() as f64
}

/// Multiply-accumulates of one forward pass for one sample.
pub fn flops_forward(spec: &ModelSpec) -> Result<u64> {
    let shapes = spec.activation_shapes()?;
    let mut total = 0u64;
    for (l, layer) in spec.layers.iter().enumerate() {
        total += match *layer {
            Layer::Dense {
                in_dim, out_dim, ..
            } => (in_dim * out_dim) as u64,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => {
                let out = &shapes[l + 1];
                (in_channels * out_channels * kernel_size * kernel_size * out[1] * out[2]) as u64
            }
            _ => 0,
        };
    }
    Ok(total)
}

/// Per-layer MACs, in the order layers appear.
pub fn layer_flops(spec: &ModelSpec) -> Result<Vec<(usize, u64)>> {
    let shapes = spec.activation_shapes()?;
    let mut out = Vec::new();
    for (l, layer) in spec.layers.iter().enumerate() {
        let v = match *layer {
            Layer::Dense {
                in_dim, out_dim, ..
            } => (in_dim * out_dim) as u64,
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                ..
            } => {
                let o = &shapes[l + 1];
                (in_channels * out_channels * kernel_size * kernel_size * o[1] * o[2]) as u64
            }
            _ => continue,
        };
        out.push((l, v));
    }
    Ok(out)
}

const EVAL_CHUNK: usize = 256;

/// Top-1 accuracy and mean cross-entropy on a dataset.
pub fn evaluate(spec: &ModelSpec, state: &ModelState, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut correct = 0usize;
    let mut loss = 0.0;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let logits = forward(spec, state, &x)?;
        let c = spec.num_classes;
        for (n, &label) in y.iter().enumerate() {
            let z = &logits.data()[n * c..(n + 1) * c];
            let mut best = 0;
            for k in 1..c {
                if z[k] > z[best] {
                    best = k;
                }
            }
            correct += usize::from(best == label);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[label];
        }
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, loss / n))
}

/// Metrics of one communication round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub train_loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Kept prunable weights of the distributed global model.
    pub model_nnz: usize,
    /// `1 − model_nnz / total_prunable`, against the original architecture.
    pub sparsity: f64,
    pub flops_per_forward: u64,
    pub wallclock_ms: u64,
    pub lr: f64,
    pub clients: Vec<usize>,
    /// Per-layer channel bitmaps once a structured mask is frozen.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel_mask: Option<Vec<String>>,
}

impl RoundReport {
    /// Copy with the host-dependent field cleared, for trajectory comparisons.
    pub fn without_wallclock(&self) -> Self {
        Self {
            wallclock_ms: 0,
            ..self.clone()
        }
    }
}

/// One row of the per-cell CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub round: usize,
    pub strategy: String,
    pub kappa: f64,
    /// Dirichlet concentration, or `iid`.
    pub alpha: String,
    pub seed: u64,
    pub accuracy: f64,
    pub loss: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub sparsity: f64,
    pub flops: u64,
    pub wallclock_ms: u64,
}

impl CsvRow {
    pub fn from_report(
        r: &RoundReport,
        strategy: &str,
        kappa: f64,
        alpha: &str,
        seed: u64,
    ) -> Self {
        Self {
            round: r.round,
            strategy: strategy.to_string(),
            kappa,
            alpha: alpha.to_string(),
            seed,
            accuracy: r.test_accuracy,
            loss: r.train_loss,
            bytes_up: r.bytes_up,
            bytes_down: r.bytes_down,
            sparsity: r.sparsity,
            flops: r.flops_per_forward,
            wallclock_ms: r.wallclock_ms,
        }
    }
}

/// Mean test accuracy over the last `window` rounds.
pub fn final_accuracy(accuracies: &[f64], window: usize) -> Option<f64> {
    if accuracies.is_empty() || window == 0 {
        return None;
    }
    let tail = &accuracies[accuracies.len().saturating_sub(window)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

/// First round whose accuracy reaches `fraction` of `target`.
pub fn rounds_to_fraction(accuracies: &[f64], target: f64, fraction: f64) -> Option<usize> {
    accuracies.iter().position(|&a| a >= fraction * target)
}

/// First round from which accuracy stays at or above `fraction` of `target`.
pub fn settling_round(accuracies: &[f64], target: f64, fraction: f64) -> usize {
    let t = fraction * target;
    accuracies.iter().rposition(|&a| a < t).map_or(0, |i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;

    fn flat_state(values: &[f64]) -> ModelState {
        let spec = ModelSpec {
            layers: vec![Layer::Dense {
                in_dim: 1,
                out_dim: values.len(),
                bias: false,
            }],
            input_shape: vec![1],
            num_classes: values.len().max(2),
        };
        ModelState::new(values.to_vec(), spec.layout()).unwrap()
    }

    #[test]
    fn coo_example() {
        let s = flat_state(&[1.0, 0.0, 3.0]);
        let p = encode_sparse(&s, &Mask::from_bits(vec![true, false, true])).unwrap();
        match &p.body {
            PayloadBody::Coo { indices, values } => {
                assert_eq!(indices, &[0, 2]);
                assert_eq!(values, &[1.0, 3.0]);
            }
            _ => panic!("expected COO"),
        }
        assert_eq!(p.byte_len(), 12 + 16);
        assert_eq!(p.to_bytes().len(), p.byte_len());
    }

    #[test]
    fn empty_mask_is_header_only() {
        let s = flat_state(&[1.0, 2.0]);
        let p = encode_sparse(&s, &Mask::from_bits(vec![false, false])).unwrap();
        assert_eq!(p.nnz, 0);
        assert_eq!(p.byte_len(), 12);
        assert_eq!(&p.to_bytes()[..4], b"FPSP");
    }

    #[test]
    fn bytes_roundtrip_each_codec() {
        let vals = [0.5, -1.25, 0.0, 3.0, 7.5, -2.0, 1.0, 0.25, 9.0];
        let mask = Mask::from_bits(vec![
            true, false, false, true, true, false, false, true, true,
        ]);
        for codec in [Codec::Coo, Codec::Bitmap, Codec::Dense, Codec::Auto] {
            let p = SparsePayload::encode(&vals, &mask, codec).unwrap();
            let bytes = p.to_bytes();
            assert_eq!(bytes.len(), p.byte_len());
            let back = SparsePayload::from_bytes(&bytes).unwrap();
            assert_eq!(back, p);
            let dense = back.decode();
            for (i, (&v, &k)) in vals.iter().zip(mask.bits()).enumerate() {
                assert_eq!(dense[i], if k { v as f32 } else { 0.0 });
            }
        }
    }

    #[test]
    fn from_bytes_rejects_corruption() {
        let p = SparsePayload::encode(
            &[1.0, 2.0, 3.0],
            &Mask::from_bits(vec![true, true, false]),
            Codec::Coo,
        )
        .unwrap();
        let mut b = p.to_bytes();
        b[12..16].copy_from_slice(&5u32.to_le_bytes()); // index 5 >= total_len... and order broken
        assert!(SparsePayload::from_bytes(&b).is_err());
        let mut b = p.to_bytes();
        b.pop();
        assert!(SparsePayload::from_bytes(&b).is_err());
        let mut b = p.to_bytes();
        b[0] = b'Z';
        assert!(SparsePayload::from_bytes(&b).is_err());
    }

    #[test]
    fn compression_examples() {
        assert_eq!(compression_rate(1000, 20).unwrap(), 50.0);
        assert_eq!(compression_rate(1000, 500).unwrap(), 2.0);
        assert_eq!(compression_rate(77, 77).unwrap(), 1.0);
        assert!(compression_rate(10, 0).is_err());
    }

    #[test]
    fn wire_ratio_examples() {
        let vals = vec![1.0; 1000];
        let mut bits = vec![false; 1000];
        bits[..20].iter_mut().for_each(|b| *b = true);
        let p = SparsePayload::encode(&vals, &Mask::from_bits(bits), Codec::Coo).unwrap();
        assert_eq!(p.byte_len(), 172);
        assert!((wire_compression(1000, &p) - 4000.0 / 172.0).abs() < 1e-12);

        let full = SparsePayload::encode(&vals, &Mask::ones(1000), Codec::Coo).unwrap();
        assert!(wire_compression(1000, &full) < 1.0);

        let auto = SparsePayload::encode(&vals, &Mask::ones(1000), Codec::Auto).unwrap();
        assert!(matches!(auto.body, PayloadBody::Dense { .. }));
        assert_eq!(wire_compression(1000, &auto), 4000.0 / 4012.0);
    }

    #[test]
    fn flops_examples() {
        assert_eq!(flops_forward(&ModelSpec::mlp(10, &[], 5)).unwrap(), 50);
        let spec = ModelSpec {
            layers: vec![
                Layer::Conv2d {
                    in_channels: 4,
                    out_channels: 8,
                    kernel_size: 3,
                    bias: true,
                },
                Layer::Flatten,
                Layer::Dense {
                    in_dim: 8 * 64,
                    out_dim: 2,
                    bias: true,
                },
            ],
            input_shape: vec![4, 8, 8],
            num_classes: 2,
        };
        let per = layer_flops(&spec).unwrap();
        assert_eq!(per[0], (0, 18432));
        assert_eq!(flops_forward(&spec).unwrap(), 18432 + 1024);
    }

    #[test]
    fn evaluate_is_pure_and_perfect_on_identity() {
        let spec = ModelSpec {
            layers: vec![Layer::Dense {
                in_dim: 2,
                out_dim: 2,
                bias: false,
            }],
            input_shape: vec![2],
            num_classes: 2,
        };
        let state = ModelState::new(vec![1.0, 0.0, 0.0, 1.0], spec.layout()).unwrap();
        let x =
            crate::tensor::Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0], vec![1.0, -1.0]])
                .unwrap();
        let data = Dataset::new(x, vec![0, 1, 0], 2).unwrap();
        let a = evaluate(&spec, &state, &data).unwrap();
        assert_eq!(a.0, 1.0);
        assert_eq!(evaluate(&spec, &state, &data).unwrap(), a);
    }

    #[test]
    fn message_counts_biases_dense() {
        let spec = ModelSpec::mlp(4, &[3], 2);
        let s = init_weights(&spec, 0).unwrap();
        let n = s.num_prunable();
        let bytes = message_bytes(&s, None, Codec::Auto).unwrap();
        assert_eq!(bytes, dense_bytes(n) + 4 * 5);
    }

    #[test]
    fn report_json_roundtrip() {
        let r = RoundReport {
            round: 3,
            test_accuracy: 0.8125,
            test_loss: 0.1 + 0.2,
            train_loss: 1.0 / 3.0,
            bytes_up: 10,
            bytes_down: 20,
            model_nnz: 5,
            sparsity: 0.5,
            flops_per_forward: 100,
            wallclock_ms: 7,
            lr: 0.1,
            clients: vec![1, 4],
            channel_mask: Some(vec!["101".into()]),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<RoundReport>(&s).unwrap(), r);
    }

    #[test]
    fn convergence_summaries() {
        let acc = [0.1, 0.5, 0.8, 0.9, 0.9];
        assert_eq!(final_accuracy(&acc, 2), Some(0.9));
        assert!((final_accuracy(&acc, 100).unwrap() - 0.64).abs() < 1e-12);
        assert_eq!(final_accuracy(&[], 3), None);
        assert_eq!(rounds_to_fraction(&acc, 0.9, 0.95), Some(3));
        assert_eq!(rounds_to_fraction(&acc, 2.0, 0.95), None);
        let dip = [0.9, 0.2, 0.9, 0.9];
        assert_eq!(rounds_to_fraction(&dip, 0.9, 0.95), Some(0));
        assert_eq!(settling_round(&dip, 0.9, 0.95), 2);
        assert_eq!(settling_round(&dip, 0.1, 0.95), 0);
    }
}
