//! Small sequential networks (dense, conv2d, relu, flatten) with hand-written
//! reverse-mode differentiation.
//!
//! Every pass is generic over [`Real`], so the same backward code yields
//! gradients in `f64` and Hessian-vector products in [`Dual`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::scalar::{Dual, Real};
use crate::tensor::Tensor;

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense {
        in_dim: usize,
        out_dim: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    /// Stride-1, same-padded 2-D convolution with an odd square kernel.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        #[serde(default = "default_true")]
        bias: bool,
    },
    Relu,
    Flatten,
}

fn default_true() -> bool {
    true
}

impl Layer {
    pub fn has_weights(&self) -> bool {
        matches!(self, Layer::Dense { .. } | Layer::Conv2d { .. })
    }

    fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<Layer>,
    /// Per-sample input shape: `[features]` or `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Location of one parameter tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub layer: usize,
    pub role: ParamRole,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

impl ModelSpec {
    /// Multi-layer perceptron `input → hidden... → classes` with ReLU between layers.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize) -> Self {
        let mut layers = Vec::new();
        let mut prev = input_dim;
        for &h in hidden {
            layers.push(Layer::Dense {
                in_dim: prev,
                out_dim: h,
                bias: true,
            });
            layers.push(Layer::Relu);
            prev = h;
        }
        layers.push(Layer::Dense {
            in_dim: prev,
            out_dim: num_classes,
            bias: true,
        });
        Self {
            layers,
            input_shape: vec![input_dim],
            num_classes,
        }
    }

    /// Conv stack over `[channels, side, side]` inputs followed by a dense head.
    pub fn cnn(
        in_channels: usize,
        side: usize,
        conv_channels: &[usize],
        kernel_size: usize,
        num_classes: usize,
    ) -> Self {
        let mut layers = Vec::new();
        let mut prev = in_channels;
        for &c in conv_channels {
            layers.push(Layer::Conv2d {
                in_channels: prev,
                out_channels: c,
                kernel_size,
                bias: true,
            });
            layers.push(Layer::Relu);
            prev = c;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            in_dim: prev * side * side,
            out_dim: num_classes,
            bias: true,
        });
        Self {
            layers,
            input_shape: vec![in_channels, side, side],
            num_classes,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Per-sample activation shapes: entry 0 is the input, entry `l + 1` the
    /// output of layer `l`. Fails on any dimension incompatibility.
    pub fn activation_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let bad = |l: usize, msg: String| Error::InvalidSpec(format!("layer {l}: {msg}"));
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} must be non-empty and positive",
                self.input_shape
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("num_classes must be at least 2".into()));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (l, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap();
            let next = match *layer {
                Layer::Dense {
                    in_dim, out_dim, ..
                } => {
                    if in_dim == 0 || out_dim == 0 {
                        return Err(bad(l, "dense dimensions must be positive".into()));
                    }
                    if cur.len() != 1 || cur[0] != in_dim {
                        return Err(bad(
                            l,
                            format!("dense expects input [{in_dim}], got {cur:?}"),
                        ));
                    }
                    vec![out_dim]
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_size,
                    ..
                } => {
                    if in_channels == 0 || out_channels == 0 {
                        return Err(bad(l, "conv channels must be positive".into()));
                    }
                    if kernel_size % 2 == 0 {
                        return Err(bad(l, format!("kernel size {kernel_size} must be odd")));
                    }
                    if cur.len() != 3 || cur[0] != in_channels {
                        return Err(bad(
                            l,
                            format!("conv2d expects input [{in_channels}, H, W], got {cur:?}"),
                        ));
                    }
                    vec![out_channels, cur[1], cur[2]]
                }
                Layer::Relu => cur.clone(),
                Layer::Flatten => vec![cur.iter().product()],
            };
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out.as_slice() != [self.num_classes] {
            return Err(Error::InvalidSpec(format!(
                "final output {out:?} does not match num_classes {}",
                self.num_classes
            )));
        }
        if !self.layers.iter().any(Layer::has_weights) {
            return Err(Error::InvalidSpec("no prunable weight layer".into()));
        }
        Ok(shapes)
    }

    pub fn validate(&self) -> Result<()> {
        self.activation_shapes().map(|_| ())
    }

    /// Parameter layout: for each weighted layer its weight block, then its bias block.
    pub fn layout(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (l, layer) in self.layers.iter().enumerate() {
            let (wshape, bias_len) = match *layer {
                Layer::Dense {
                    in_dim,
                    out_dim,
                    bias,
                } => (vec![out_dim, in_dim], bias.then_some(out_dim)),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel_size,
                    bias,
                } => (
                    vec![out_channels, in_channels, kernel_size, kernel_size],
                    bias.then_some(out_channels),
                ),
                _ => continue,
            };
            let block = ParamBlock {
                layer: l,
                role: ParamRole::Weight,
                offset,
                shape: wshape,
            };
            offset += block.len();
            blocks.push(block);
            if let Some(n) = bias_len {
                blocks.push(ParamBlock {
                    layer: l,
                    role: ParamRole::Bias,
                    offset,
                    shape: vec![n],
                });
                offset += n;
            }
        }
        blocks
    }

    pub fn num_params(&self) -> usize {
        self.layout().iter().map(ParamBlock::len).sum()
    }

    pub fn num_prunable(&self) -> usize {
        self.layout()
            .iter()
            .filter(|b| b.role == ParamRole::Weight)
            .map(ParamBlock::len)
            .sum()
    }

    /// Human-readable name of the parameter owning flat index `i`.
    pub fn param_name(&self, i: usize) -> String {
        for b in self.layout() {
            if b.range().contains(&i) {
                let role = match b.role {
                    ParamRole::Weight => "weight",
                    ParamRole::Bias => "bias",
                };
                return format!("layer {} ({}) {role}", b.layer, self.layers[b.layer].kind());
            }
        }
        format!("parameter {i}")
    }
}

/// Flat parameter vector together with its layout table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<f64>,
    pub layout: Vec<ParamBlock>,
}

impl ModelState {
    pub fn new(params: Vec<f64>, layout: Vec<ParamBlock>) -> Result<Self> {
        let mut expect = 0;
        for b in &layout {
            if b.offset != expect {
                return Err(Error::LayoutMismatch(format!(
                    "block for layer {} starts at {} but previous block ends at {expect}",
                    b.layer, b.offset
                )));
            }
            expect += b.len();
        }
        if expect != params.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout covers {expect} parameters but vector holds {}",
                params.len()
            )));
        }
        Ok(Self { params, layout })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        let layout = spec.layout();
        let n = layout.iter().map(ParamBlock::len).sum();
        Self {
            params: vec![0.0; n],
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn weight_blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.layout.iter().filter(|b| b.role == ParamRole::Weight)
    }

    pub fn num_prunable(&self) -> usize {
        self.weight_blocks().map(ParamBlock::len).sum()
    }

    pub fn num_bias(&self) -> usize {
        self.len() - self.num_prunable()
    }

    /// Weight entries concatenated in layout order.
    pub fn prunable_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_prunable());
        for b in self.weight_blocks() {
            out.extend_from_slice(&self.params[b.range()]);
        }
        out
    }

    /// Bias entries concatenated in layout order.
    pub fn bias_values(&self) -> Vec<f64> {
        self.layout
            .iter()
            .filter(|b| b.role == ParamRole::Bias)
            .flat_map(|b| self.params[b.range()].iter().copied())
            .collect()
    }

    /// Flat indices (into `params`) of the prunable entries, in mask order.
    pub fn prunable_indices(&self) -> Vec<usize> {
        self.weight_blocks().flat_map(ParamBlock::range).collect()
    }

    /// Expands a prunable-layout mask to one flag per parameter; biases are always kept.
    pub fn expand_mask(&self, mask: &Mask) -> Result<Vec<bool>> {
        self.check_mask(mask)?;
        let mut full = vec![true; self.len()];
        let mut bits = mask.bits().iter();
        for b in self.weight_blocks() {
            for i in b.range() {
                full[i] = *bits.next().unwrap();
            }
        }
        Ok(full)
    }

    pub fn check_mask(&self, mask: &Mask) -> Result<()> {
        if mask.len() != self.num_prunable() {
            return Err(Error::LayoutMismatch(format!(
                "mask has {} bits but model has {} prunable weights",
                mask.len(),
                self.num_prunable()
            )));
        }
        Ok(())
    }

    pub fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(Error::LayoutMismatch(
                "state layout does not match model spec".into(),
            ));
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

/// Layer-wise fan-in scaled normal weights (variance `1 / fan_in`), zero biases.
pub fn init_weights(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ModelState::zeros(spec);
    for b in spec.layout() {
        if b.role != ParamRole::Weight {
            continue;
        }
        let fan_in: usize = b.shape[1..].iter().product();
        let std = (1.0 / fan_in as f64).sqrt();
        for p in &mut state.params[b.range()] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = std * z;
        }
    }
    Ok(state)
}

fn check_batch(spec: &ModelSpec, x: &Tensor) -> Result<()> {
    let shape = x.shape();
    if shape.len() < 2 || shape[1..] != spec.input_shape[..] {
        return Err(Error::ShapeMismatch {
            expected: format!("[batch, {:?}]", spec.input_shape),
            actual: format!("{shape:?}"),
        });
    }
    Ok(())
}

/// Activations recorded by a forward pass; `acts[l]` is the input to layer `l`.
struct Trace<S> {
    acts: Vec<Vec<S>>,
}

fn forward_trace<S: Real>(
    spec: &ModelSpec,
    shapes: &[Vec<usize>],
    layout: &[ParamBlock],
    params: &[S],
    input: Vec<S>,
    batch: usize,
) -> Trace<S> {
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(input);
    let mut blocks = layout.iter().peekable();
    for (l, layer) in spec.layers.iter().enumerate() {
        let x = acts.last().unwrap();
        let y = match *layer {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
            } => {
                let w = &params[blocks.next().unwrap().range()];
                let b = if bias {
                    Some(&params[blocks.next().unwrap().range()])
                } else {
                    None
                };
                dense_forward(x, w, b, batch, in_dim, out_dim)
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel_size,
                bias,
            } => {
                let w = &params[blocks.next().unwrap().range()];
                let b = if bias {
                    Some(&params[blocks.next().unwrap().range()])
                } else {
                    None
                };
                let (h, wd) = (shapes[l][1], shapes[l][2]);
                conv_forward(
                    x,
                    w,
                    b,
                    batch,
                    ConvDims {
                        cin: in_channels,
                        cout: out_channels,
                        k: kernel_size,
                        h,
                        w: wd,
                    },
                )
            }
            Layer::Relu => x
                .iter()
                .map(|&v| if v.value() > 0.0 { v } else { S::zero() })
                .collect(),
            Layer::Flatten => x.clone(),
        };
        acts.push(y);
    }
    Trace { acts }
}

fn dense_forward<S: Real>(
    x: &[S],
    w: &[S],
    b: Option<&[S]>,
    batch: usize,
    in_dim: usize,
    out_dim: usize,
) -> Vec<S> {
    let mut y = Vec::with_capacity(batch * out_dim);
    for n in 0..batch {
        let xr = &x[n * in_dim..(n + 1) * in_dim];
        for o in 0..out_dim {
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.map_or(S::zero(), |b| b[o]);
            for (&wi, &xi) in wr.iter().zip(xr) {
                acc += wi * xi;
            }
            y.push(acc);
        }
    }
    y
}

#[derive(Clone, Copy)]
struct ConvDims {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
}

fn conv_forward<S: Real>(x: &[S], w: &[S], b: Option<&[S]>, batch: usize, d: ConvDims) -> Vec<S> {
    let ConvDims {
        cin,
        cout,
        k,
        h,
        w: wd,
    } = d;
    let pad = k / 2;
    let plane = h * wd;
    let mut y = vec![S::zero(); batch * cout * plane];
    for n in 0..batch {
        for o in 0..cout {
            let out = &mut y[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            if let Some(b) = b {
                out.iter_mut().for_each(|v| *v = b[o]);
            }
            for c in 0..cin {
                let xin = &x[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                let kern = &w[(o * cin + c) * k * k..(o * cin + c + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = kern[ky * k + kx];
                        for i in 0..h {
                            let yi = i + ky;
                            if yi < pad || yi - pad >= h {
                                continue;
                            }
                            let si = yi - pad;
                            for j in 0..wd {
                                let xj = j + kx;
                                if xj < pad || xj - pad >= wd {
                                    continue;
                                }
                                out[i * wd + j] += wv * xin[si * wd + (xj - pad)];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
fn cross_entropy<S: Real>(logits: &[S], labels: &[usize], classes: usize) -> (S, Vec<S>) {
    let batch = labels.len();
    let inv = S::from_f64(1.0 / batch as f64);
    let mut total = S::zero();
    let mut dlogits = Vec::with_capacity(logits.len());
    for (n, &label) in labels.iter().enumerate() {
        let z = &logits[n * classes..(n + 1) * classes];
        // lse(z) = m + ln Σ exp(z - m) holds for any constant m.
        let m = z
            .iter()
            .map(|v| v.value())
            .fold(f64::NEG_INFINITY, f64::max);
        let m = S::from_f64(m);
        let exps: Vec<S> = z.iter().map(|&v| (v - m).exp()).collect();
        let mut sum = S::zero();
        for &e in &exps {
            sum += e;
        }
        total += m + sum.ln() - z[label];
        for (c, &e) in exps.iter().enumerate() {
            let p = e / sum;
            let t = if c == label { p - S::from_f64(1.0) } else { p };
            dlogits.push(t * inv);
        }
    }
    (total * inv, dlogits)
}

fn backward<S: Real>(
    spec: &ModelSpec,
    shapes: &[Vec<usize>],
    layout: &[ParamBlock],
    params: &[S],
    trace: &Trace<S>,
    mut dy: Vec<S>,
    batch: usize,
) -> Vec<S> {
    let mut grad = vec![S::zero(); params.len()];
    // Blocks are consumed back to front.
    let mut blocks: Vec<&ParamBlock> = layout.iter().collect();
    for (l, layer) in spec.layers.iter().enumerate().rev() {
        let x = &trace.acts[l];
        dy = match *layer {
            Layer::Dense {
                in_dim,
                out_dim,
                bias,
            } => {
                if bias {
                    let bb = blocks.pop().unwrap();
                    let gb = &mut grad[bb.range()];
                    for n in 0..batch {
                        for o in 0..out_dim {
                            gb[o] += dy[n * out_dim + o];
                        }
                    }
                }
                let wb = blocks.pop().unwrap();
                let w = &params[wb.range()];
                let mut dx = vec![S::zero(); batch * in_dim];
                let gw = &mut grad[wb.range()];
                for n in 0..batch {
                    let xr = &x[n * in_dim..(n + 1) * in_dim];
                    let dxr = &mut dx[n * in_dim..(n + 1) * in_dim];
                    for o in 0..out_dim {
                        let g = dy[n * out_dim + o];
                        let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
                        let wr = &w[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gwr[i] += g * xr[i];
                            dxr[i] += g * wr[i];
                        }
                    }
                }
                dx
            }
            Layer::Conv2d {
                in_channels: cin,
                out_channels: cout,
                kernel_size: k,
                bias,
            } => {
                let (h, wd) = (shapes[l][1], shapes[l][2]);
                let plane = h * wd;
                if bias {
                    let bb = blocks.pop().unwrap();
                    let gb = &mut grad[bb.range()];
                    for n in 0..batch {
                        for o in 0..cout {
                            for v in &dy[(n * cout + o) * plane..(n * cout + o + 1) * plane] {
                                gb[o] += *v;
                            }
                        }
                    }
                }
                let wb = blocks.pop().unwrap();
                let w = &params[wb.range()];
                let gw = &mut grad[wb.range()];
                let pad = k / 2;
                let mut dx = vec![S::zero(); batch * cin * plane];
                for n in 0..batch {
                    for o in 0..cout {
                        let g = &dy[(n * cout + o) * plane..(n * cout + o + 1) * plane];
                        for c in 0..cin {
                            let xin = &x[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                            let dxin = &mut dx[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                            let kidx = (o * cin + c) * k * k;
                            for ky in 0..k {
                                for kx in 0..k {
                                    let wv = w[kidx + ky * k + kx];
                                    let mut acc = S::zero();
                                    for i in 0..h {
                                        let yi = i + ky;
                                        if yi < pad || yi - pad >= h {
                                            continue;
                                        }
                                        let si = yi - pad;
                                        for j in 0..wd {
                                            let xj = j + kx;
                                            if xj < pad || xj - pad >= wd {
                                                continue;
                                            }
                                            let src = si * wd + (xj - pad);
                                            let gv = g[i * wd + j];
                                            acc += gv * xin[src];
                                            dxin[src] += gv * wv;
                                        }
                                    }
                                    gw[ky * k + kx + kidx] += acc;
                                }
                            }
                        }
                    }
                }
                dx
            }
            Layer::Relu => dy
                .iter()
                .zip(x)
                .map(|(&g, &v)| if v.value() > 0.0 { g } else { S::zero() })
                .collect(),
            Layer::Flatten => dy,
        };
    }
    grad
}

fn check_labels(spec: &ModelSpec, x: &Tensor, y: &[usize]) -> Result<()> {
    if y.is_empty() || x.rows() == 0 {
        return Err(Error::EmptyBatch);
    }
    if y.len() != x.rows() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", x.rows()),
            actual: format!("{}", y.len()),
        });
    }
    if let Some(&label) = y.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: spec.num_classes,
        });
    }
    Ok(())
}

/// Loss and parameter gradient with parameters of any [`Real`] type.
pub fn loss_and_grad_generic<S: Real>(
    spec: &ModelSpec,
    params: &[S],
    batch_x: &Tensor,
    batch_y: &[usize],
) -> Result<(S, Vec<S>)> {
    let shapes = spec.activation_shapes()?;
    check_batch(spec, batch_x)?;
    check_labels(spec, batch_x, batch_y)?;
    let layout = spec.layout();
    let n: usize = layout.iter().map(ParamBlock::len).sum();
    if params.len() != n {
        return Err(Error::LayoutMismatch(format!(
            "expected {n} parameters, got {}",
            params.len()
        )));
    }
    let batch = batch_x.rows();
    let input = batch_x.data().iter().map(|&v| S::from_f64(v)).collect();
    let trace = forward_trace(spec, &shapes, &layout, params, input, batch);
    let (loss, dlogits) = cross_entropy(trace.acts.last().unwrap(), batch_y, spec.num_classes);
    let grad = backward(spec, &shapes, &layout, params, &trace, dlogits, batch);
    Ok((loss, grad))
}

/// Logits of shape `[batch, num_classes]`.
pub fn forward(spec: &ModelSpec, state: &ModelState, batch_x: &Tensor) -> Result<Tensor> {
    let shapes = spec.activation_shapes()?;
    state.check_spec(spec)?;
    check_batch(spec, batch_x)?;
    let batch = batch_x.rows();
    let trace = forward_trace(
        spec,
        &shapes,
        &state.layout,
        &state.params,
        batch_x.data().to_vec(),
        batch,
    );
    Tensor::new(
        vec![batch, spec.num_classes],
        trace.acts.into_iter().last().unwrap(),
    )
}

/// Mean cross-entropy over the batch and its gradient with respect to every parameter.
pub fn loss_and_grad(
    spec: &ModelSpec,
    state: &ModelState,
    batch_x: &Tensor,
    batch_y: &[usize],
) -> Result<(f64, Vec<f64>)> {
    state.check_spec(spec)?;
    loss_and_grad_generic(spec, &state.params, batch_x, batch_y)
}

/// A differentiable scalar objective over a flat parameter vector.
pub trait Objective {
    fn dim(&self) -> usize;
    fn gradient<S: Real>(&self, w: &[S]) -> Result<Vec<S>>;
}

/// Mean cross-entropy of a network on a fixed batch.
pub struct NetworkLoss<'a> {
    pub spec: &'a ModelSpec,
    pub batch_x: &'a Tensor,
    pub batch_y: &'a [usize],
}

impl Objective for NetworkLoss<'_> {
    fn dim(&self) -> usize {
        self.spec.num_params()
    }

    fn gradient<S: Real>(&self, w: &[S]) -> Result<Vec<S>> {
        loss_and_grad_generic(self.spec, w, self.batch_x, self.batch_y).map(|(_, g)| g)
    }
}

/// Exact Hessian-vector product `H(w)·v`, by pushing dual numbers through the
/// reverse pass.
pub fn hessian_vector_product<O: Objective>(obj: &O, w: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    if w.len() != v.len() || w.len() != obj.dim() {
        return Err(Error::LayoutMismatch(format!(
            "point has {} entries, direction {}, objective expects {}",
            w.len(),
            v.len(),
            obj.dim()
        )));
    }
    let duals: Vec<Dual> = w.iter().zip(v).map(|(&a, &b)| Dual::new(a, b)).collect();
    Ok(obj.gradient(&duals)?.into_iter().map(|d| d.eps).collect())
}

/// One SGD step. With a mask, pruned positions are held at exactly zero.
pub fn sgd_step(
    spec: &ModelSpec,
    state: &ModelState,
    grad: &[f64],
    lr: f64,
    mask: Option<&Mask>,
) -> Result<ModelState> {
    if grad.len() != state.len() {
        return Err(Error::LayoutMismatch(format!(
            "gradient has {} entries, model has {}",
            grad.len(),
            state.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {}",
            spec.param_name(i)
        )));
    }
    let keep = mask.map(|m| state.expand_mask(m)).transpose()?;
    let mut next = state.clone();
    match keep {
        None => {
            for (p, g) in next.params.iter_mut().zip(grad) {
                *p -= lr * g;
            }
        }
        Some(keep) => {
            for ((p, g), k) in next.params.iter_mut().zip(grad).zip(keep) {
                *p = if k { *p - lr * g } else { 0.0 };
            }
        }
    }
    Ok(next)
}
