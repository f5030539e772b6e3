//! Channel-wise structured pruning with Early-Bird mask freezing.
//!
//! Channels are the output units of every weighted layer except the final
//! classifier: rows of a dense weight matrix, filters of a conv kernel. A
//! channel's score is the L1 norm of the weights that produce it. Once the
//! mask stops moving (every queued mask is within Hamming distance `ε` of the
//! newest one) it is frozen, and [`regroup`] deletes the pruned channels to
//! produce a physically smaller model computing the same function.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_kappa, kept_count, top_k_bits};
use crate::nn::{Layer, ModelSpec, ModelState, ParamRole};

/// Scores for the output channels of one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelScores {
    pub layer: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerChannelMask {
    /// Index of the layer in `ModelSpec::layers`.
    pub layer: usize,
    pub bits: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMask {
    pub layers: Vec<LayerChannelMask>,
    pub kept_fraction: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ChannelMask {
    pub fn total_bits(&self) -> usize {
        self.layers.iter().map(|l| l.bits.len()).sum()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.bits.iter().filter(|&&b| b).count())
            .collect()
    }

    pub fn is_all_ones(&self) -> bool {
        self.layers.iter().all(|l| l.bits.iter().all(|&b| b))
    }

    /// Every channel kept, for the prunable layers of `spec`.
    pub fn ones(spec: &ModelSpec) -> Self {
        let layers = channel_layers(spec)
            .into_iter()
            .map(|(layer, c)| LayerChannelMask {
                layer,
                bits: vec![true; c],
            })
            .collect();
        Self {
            layers,
            kept_fraction: 1.0,
            warnings: Vec::new(),
        }
    }

    /// Per-layer bitmaps as `0`/`1` strings, for experiment output.
    pub fn to_bitmaps(&self) -> Vec<String> {
        self.layers
            .iter()
            .map(|l| l.bits.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect()
    }
}

/// `(layer index, output channels)` for every channel-prunable layer.
pub fn channel_layers(spec: &ModelSpec) -> Vec<(usize, usize)> {
    let weighted: Vec<(usize, usize)> = spec
        .layers
        .iter()
        .enumerate()
        .filter_map(|(l, layer)| match *layer {
            Layer::Dense { out_dim, .. } => Some((l, out_dim)),
            Layer::Conv2d { out_channels, .. } => Some((l, out_channels)),
            _ => None,
        })
        .collect();
    // The classifier's outputs are the classes and are never pruned.
    weighted[..weighted.len().saturating_sub(1)].to_vec()
}

/// L1 norm of each output channel's weights.
pub fn channel_importance(spec: &ModelSpec, state: &ModelState) -> Result<Vec<ChannelScores>> {
    state.check_spec(spec)?;
    let mut out = Vec::new();
    for (layer, channels) in channel_layers(spec) {
        let block = state
            .layout
            .iter()
            .find(|b| b.layer == layer && b.role == ParamRole::Weight)
            .expect("weighted layer has a weight block");
        let w = &state.params[block.range()];
        let per = w.len() / channels;
        let scores = w
            .chunks(per)
            .map(|c| c.iter().map(|v| v.abs()).sum())
            .collect();
        out.push(ChannelScores { layer, scores });
    }
    Ok(out)
}

/// Per-layer top-`⌈κ·C⌉` channels; at least one channel always survives.
pub fn channel_mask_from_scores(scores: &[ChannelScores], kappa: f64) -> Result<ChannelMask> {
    check_kappa(kappa)?;
    let mut warnings = Vec::new();
    let layers = scores
        .iter()
        .map(|s| {
            let mut k = kept_count(kappa, s.scores.len());
            if k == 0 {
                warnings.push(format!(
                    "layer {}: kappa {kappa} keeps no channel of {}; clamped to 1",
                    s.layer,
                    s.scores.len()
                ));
                k = 1;
            }
            LayerChannelMask {
                layer: s.layer,
                bits: top_k_bits(&s.scores, k),
            }
        })
        .collect();
    Ok(ChannelMask {
        layers,
        kept_fraction: kappa,
        warnings,
    })
}

/// Fraction of differing bits between two congruent channel masks.
pub fn hamming_distance(a: &ChannelMask, b: &ChannelMask) -> Result<f64> {
    let congruent = a.layers.len() == b.layers.len()
        && a.layers
            .iter()
            .zip(&b.layers)
            .all(|(x, y)| x.layer == y.layer && x.bits.len() == y.bits.len());
    if !congruent {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", shape_of(a)),
            actual: format!("{:?}", shape_of(b)),
        });
    }
    let total = a.total_bits();
    if total == 0 {
        return Ok(0.0);
    }
    let diff: usize = a
        .layers
        .iter()
        .zip(&b.layers)
        .map(|(x, y)| x.bits.iter().zip(&y.bits).filter(|(p, q)| p != q).count())
        .sum();
    Ok(diff as f64 / total as f64)
}

fn shape_of(m: &ChannelMask) -> Vec<(usize, usize)> {
    m.layers.iter().map(|l| (l.layer, l.bits.len())).collect()
}

/// FIFO of the most recent channel masks, newest at the back.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskHistory {
    capacity: usize,
    entries: VecDeque<(usize, ChannelMask)>,
}

impl MaskHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::new(),
        }
    }

    pub fn push(&mut self, epoch: usize, mask: ChannelMask) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((epoch, mask));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn newest(&self) -> Option<&ChannelMask> {
        self.entries.back().map(|(_, m)| m)
    }

    pub fn masks(&self) -> impl Iterator<Item = &ChannelMask> {
        self.entries.iter().map(|(_, m)| m)
    }

    pub fn epochs(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(e, _)| *e)
    }

    /// Largest distance between the newest mask and any older queued mask;
    /// `None` until at least two masks are queued.
    pub fn max_distance_to_newest(&self) -> Option<f64> {
        let newest = self.newest()?;
        if self.entries.len() < 2 {
            return None;
        }
        let max = self
            .masks()
            .take(self.entries.len() - 1)
            // Incongruent masks cannot be stable.
            .map(|m| hamming_distance(newest, m).unwrap_or(1.0))
            .fold(0.0, f64::max);
        Some(max)
    }
}

/// Early-Bird test: the newest mask becomes the frozen mask when it lies within
/// `epsilon` of every other queued mask.
pub fn ebt_check(history: &MaskHistory, epsilon: f64) -> Option<ChannelMask> {
    match history.max_distance_to_newest() {
        Some(d) if d < epsilon => history.newest().cloned(),
        _ => None,
    }
}

fn check_channel_mask(spec: &ModelSpec, mask: &ChannelMask) -> Result<()> {
    let expected = channel_layers(spec);
    if expected.len() != mask.layers.len() {
        return Err(Error::InconsistentMask(format!(
            "mask covers {} layers, model has {} channel-prunable layers",
            mask.layers.len(),
            expected.len()
        )));
    }
    for ((layer, channels), m) in expected.iter().zip(&mask.layers) {
        if m.layer != *layer || m.bits.len() != *channels {
            return Err(Error::InconsistentMask(format!(
                "expected {channels} channels for layer {layer}, mask has {} for layer {}",
                m.bits.len(),
                m.layer
            )));
        }
        if !m.bits.iter().any(|&b| b) {
            return Err(Error::InconsistentMask(format!(
                "layer {layer} keeps no channel"
            )));
        }
    }
    Ok(())
}

/// The big model with pruned channels silenced: their weights and biases set
/// to zero, so they emit exactly zero after ReLU.
pub fn mask_channels(
    spec: &ModelSpec,
    state: &ModelState,
    mask: &ChannelMask,
) -> Result<ModelState> {
    state.check_spec(spec)?;
    check_channel_mask(spec, mask)?;
    let mut out = state.clone();
    for m in &mask.layers {
        for b in state.layout.iter().filter(|b| b.layer == m.layer) {
            let per = b.len() / m.bits.len();
            for (c, &keep) in m.bits.iter().enumerate() {
                if !keep {
                    let start = b.offset + c * per;
                    out.params[start..start + per]
                        .iter_mut()
                        .for_each(|p| *p = 0.0);
                }
            }
        }
    }
    Ok(out)
}

/// Deletes pruned channels and the matching input slices of the next layer.
pub fn regroup(
    spec: &ModelSpec,
    state: &ModelState,
    mask: &ChannelMask,
) -> Result<(ModelSpec, ModelState)> {
    let shapes = spec.activation_shapes()?;
    state.check_spec(spec)?;
    check_channel_mask(spec, mask)?;

    // Which channels of the current activation survive, and how many
    // contiguous features each channel spans.
    let input = &spec.input_shape;
    let (mut keep_in, mut group) = if input.len() == 3 {
        (vec![true; input[0]], input[1] * input[2])
    } else {
        (vec![true; input[0]], 1)
    };

    let mut masks = mask.layers.iter().peekable();
    let mut layers = Vec::with_capacity(spec.layers.len());
    let mut params = Vec::new();
    let mut blocks = state.layout.iter().peekable();

    for (l, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
            } => {
                let keep_out = match masks.peek() {
                    Some(m) if m.layer == l => masks.next().unwrap().bits.clone(),
                    _ => vec![true; out_dim],
                };
                let cols: Vec<usize> = (0..in_dim).filter(|&i| keep_in[i / group]).collect();
                let rows: Vec<usize> = (0..out_dim).filter(|&o| keep_out[o]).collect();
                let w = &state.params[blocks.next().unwrap().range()];
                for &o in &rows {
                    params.extend(cols.iter().map(|&i| w[o * in_dim + i]));
                }
                if bias {
                    let b = &state.params[blocks.next().unwrap().range()];
                    params.extend(rows.iter().map(|&o| b[o]));
                }
                layers.push(Layer::Dense {
                    in_dim: cols.len(),
                    out_dim: rows.len(),
                    bias,
                });
                keep_in = keep_out;
                group = 1;
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                bias,
            } => {
                let keep_out = match masks.peek() {
                    Some(m) if m.layer == l => masks.next().unwrap().bits.clone(),
                    _ => vec![true; out_channels],
                };
                let kk = kernel_size * kernel_size;
                let w = &state.params[blocks.next().unwrap().range()];
                let ins: Vec<usize> = (0..in_channels).filter(|&c| keep_in[c]).collect();
                let outs: Vec<usize> = (0..out_channels).filter(|&o| keep_out[o]).collect();
                for &o in &outs {
                    for &c in &ins {
                        let start = (o * in_channels + c) * kk;
                        params.extend_from_slice(&w[start..start + kk]);
                    }
                }
                if bias {
                    let b = &state.params[blocks.next().unwrap().range()];
                    params.extend(outs.iter().map(|&o| b[o]));
                }
                layers.push(Layer::Conv2d {
                    in_channels: ins.len(),
                    out_channels: outs.len(),
                    kernel_size,
                    bias,
                });
                keep_in = keep_out;
                group = shapes[l + 1][1] * shapes[l + 1][2];
            }
            Layer::Relu => layers.push(Layer::Relu),
            Layer::Flatten => layers.push(Layer::Flatten),
        }
    }

    let kept_inputs = spec.input_shape.clone();
    let small = ModelSpec {
        layers,
        input_shape: kept_inputs,
        num_classes: spec.num_classes,
    };
    small.validate()?;
    let state = ModelState::new(params, small.layout())?;
    Ok((small, state))
}
