//! Small dense network engine for the split model.
//!
//! The split model is two bottom stacks (one per party), a linear interactive
//! layer over the concatenation `[active_bottom_out ‖ passive_bottom_out]`,
//! and a top stack ending in one sigmoid unit. Parameters flatten to a
//! [`WeightVector`] whose layout names every tensor, which is what the
//! parameter servers aggregate and what checkpoints store.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{self, DecodeError, Reader};

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("label {0} is not 0 or 1")]
    Label(f64),
    #[error("weight layouts differ")]
    Layout,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

/// Row-major matrix of f64.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(shape_err("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · wᵀ` for `self: B×in`, `w: out×in`.
    pub fn matmul_bt(&self, w: &Tensor2) -> Result<Tensor2, NnError> {
        if self.cols != w.cols {
            return Err(shape_err(format!(
                "{:?} · {:?}ᵀ",
                self.shape(),
                w.shape()
            )));
        }
        let mut out = Tensor2::zeros(self.rows, w.rows);
        for b in 0..self.rows {
            let x = self.row(b);
            for o in 0..w.rows {
                out.data[b * w.rows + o] = dot(x, w.row(o));
            }
        }
        Ok(out)
    }

    /// `self · w` for `self: B×out`, `w: out×in`.
    pub fn matmul(&self, w: &Tensor2) -> Result<Tensor2, NnError> {
        if self.cols != w.rows {
            return Err(shape_err(format!("{:?} · {:?}", self.shape(), w.shape())));
        }
        let mut out = Tensor2::zeros(self.rows, w.cols);
        for b in 0..self.rows {
            for o in 0..self.cols {
                let g = self.get(b, o);
                if g == 0.0 {
                    continue;
                }
                let dst = &mut out.data[b * w.cols..(b + 1) * w.cols];
                for (d, wv) in dst.iter_mut().zip(w.row(o)) {
                    *d += g * wv;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · x` for `self: B×out`, `x: B×in`, giving `out×in`.
    pub fn t_matmul(&self, x: &Tensor2) -> Result<Tensor2, NnError> {
        if self.rows != x.rows {
            return Err(shape_err(format!("{:?}ᵀ · {:?}", self.shape(), x.shape())));
        }
        let mut out = Tensor2::zeros(self.cols, x.cols);
        for b in 0..self.rows {
            let xr = x.row(b);
            for o in 0..self.cols {
                let g = self.get(b, o);
                if g == 0.0 {
                    continue;
                }
                let dst = &mut out.data[o * x.cols..(o + 1) * x.cols];
                for (d, xv) in dst.iter_mut().zip(xr) {
                    *d += g * xv;
                }
            }
        }
        Ok(out)
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for b in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(b)) {
                *o += v;
            }
        }
        out
    }

    pub fn add_row_vector(&mut self, v: &[f64]) {
        for b in 0..self.rows {
            for (x, bv) in self.data[b * self.cols..(b + 1) * self.cols].iter_mut().zip(v) {
                *x += bv;
            }
        }
    }

    pub fn add(&self, other: &Tensor2) -> Result<Tensor2, NnError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor2) -> Result<Tensor2, NnError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(&self, other: &Tensor2, f: impl Fn(f64, f64) -> f64) -> Result<Tensor2, NnError> {
        if self.shape() != other.shape() {
            return Err(shape_err(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor2 {
        self.map(|v| v * k)
    }

    /// `[self ‖ other]` along columns.
    pub fn hconcat(&self, other: &Tensor2) -> Result<Tensor2, NnError> {
        if self.rows != other.rows {
            return Err(shape_err("hconcat row mismatch"));
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for b in 0..self.rows {
            data.extend_from_slice(self.row(b));
            data.extend_from_slice(other.row(b));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols,
            data,
        })
    }

    /// Splits columns into `[0, at)` and `[at, cols)`.
    pub fn split_cols(&self, at: usize) -> (Tensor2, Tensor2) {
        let mut left = Tensor2::zeros(self.rows, at);
        let mut right = Tensor2::zeros(self.rows, self.cols - at);
        for b in 0..self.rows {
            let row = self.row(b);
            left.data[b * at..(b + 1) * at].copy_from_slice(&row[..at]);
            right.data[b * (self.cols - at)..(b + 1) * (self.cols - at)].copy_from_slice(&row[at..]);
        }
        (left, right)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Gelu => 0.5 * z * (1.0 + (GELU_C * (z + GELU_A * z * z * z)).tanh()),
        }
    }

    /// `da/dz` at pre-activation `z` with output `a`.
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Gelu => {
                let t = (GELU_C * (z + GELU_A * z * z * z)).tanh();
                0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * z * z)
            }
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Sigmoid => 2,
            Activation::Gelu => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Relu,
            2 => Activation::Sigmoid,
            3 => Activation::Gelu,
            _ => return None,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        })
    }
}

impl FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "gelu" => Ok(Activation::Gelu),
            other => Err(format!("unknown activation {other:?}")),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer `a = act(x·Wᵀ + b)` with `W: out×in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output).max(1) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            weights: Tensor2 {
                rows: output,
                cols: input,
                data,
            },
            bias: vec![0.0; output],
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows
    }

    /// Returns `(z, a)`.
    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2), NnError> {
        let mut z = x.matmul_bt(&self.weights)?;
        z.add_row_vector(&self.bias);
        let a = z.map(|v| self.activation.apply(v));
        Ok((z, a))
    }
}

/// Gradients of one layer, shaped like the layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Tensor2,
    pub bias: Vec<f64>,
}

/// Per-layer inputs and pre-activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    inputs: Vec<Tensor2>,
    preacts: Vec<Tensor2>,
    outputs: Vec<Tensor2>,
}

/// A stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Self {
        Self { layers }
    }

    /// `dims = [in, h1, ..., out]`, every layer using `activation` except the
    /// last which uses `last`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], activation: Activation, last: Activation, rng: &mut R) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { last } else { activation };
                DenseLayer::init(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, DenseLayer::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, DenseLayer::output_dim)
    }

    pub fn forward(&self, input: &Tensor2) -> Result<(Tensor2, ForwardCache), NnError> {
        if !self.layers.is_empty() && input.cols() != self.input_dim() {
            return Err(shape_err(format!(
                "input has {} columns, stack expects {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let mut cache = ForwardCache {
            inputs: Vec::with_capacity(self.layers.len()),
            preacts: Vec::with_capacity(self.layers.len()),
            outputs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = input.clone();
        for layer in &self.layers {
            let (z, a) = layer.forward(&x)?;
            cache.inputs.push(x);
            cache.preacts.push(z);
            cache.outputs.push(a.clone());
            x = a;
        }
        Ok((x, cache))
    }

    /// Reverse-mode pass. Returns per-layer gradients and `∂L/∂input`.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Tensor2) -> Result<(Vec<LayerGrad>, Tensor2), NnError> {
        if let Some(out) = cache.outputs.last() {
            if out.shape() != upstream.shape() {
                return Err(shape_err(format!(
                    "upstream {:?} vs output {:?}",
                    upstream.shape(),
                    out.shape()
                )));
            }
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.preacts[i];
            let a = &cache.outputs[i];
            let act = layer.activation;
            let mut dz = g;
            for ((d, &zv), &av) in dz.data.iter_mut().zip(&z.data).zip(&a.data) {
                *d *= act.derivative(zv, av);
            }
            let dw = dz.t_matmul(&cache.inputs[i])?;
            let db = dz.col_sums();
            g = dz.matmul(&layer.weights)?;
            grads.push(LayerGrad {
                weights: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok((grads, g))
    }
}

/// Mean binary cross-entropy and its gradient with respect to `pred`.
/// Predictions are clamped to `[1e-12, 1 − 1e-12]`.
pub fn bce_loss(pred: &Tensor2, labels: &[f64]) -> Result<(f64, Tensor2), NnError> {
    if pred.cols() != 1 || pred.rows() != labels.len() {
        return Err(shape_err(format!(
            "predictions {:?} for {} labels",
            pred.shape(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(NnError::Label(bad));
    }
    const EPS: f64 = 1e-12;
    let batch = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(pred.rows(), 1);
    for (i, &y) in labels.iter().enumerate() {
        let p = pred.data[i].clamp(EPS, 1.0 - EPS);
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        grad.data[i] = (p - y) / (p * (1.0 - p)) / batch;
    }
    Ok((loss / batch, grad))
}

/// One named tensor inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    /// Set on weight entries; bias entries carry `None`.
    pub activation: Option<Activation>,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Layout {
    pub entries: Vec<LayoutEntry>,
}

impl Layout {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    fn push(&mut self, name: String, rows: usize, cols: usize, activation: Option<Activation>) {
        let offset = self.total_len();
        self.entries.push(LayoutEntry {
            name,
            offset,
            rows,
            cols,
            activation,
        });
    }

    fn push_layer(&mut self, prefix: &str, layer: &DenseLayer) {
        self.push(format!("{prefix}.w"), layer.output_dim(), layer.input_dim(), Some(layer.activation));
        self.push(format!("{prefix}.b"), layer.output_dim(), 1, None);
    }

    pub fn concat(&self, other: &Layout) -> Layout {
        let mut out = self.clone();
        for e in &other.entries {
            out.push(e.name.clone(), e.rows, e.cols, e.activation);
        }
        out
    }
}

/// Flat parameters (or gradients) with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total_len()];
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn concat(&self, other: &WeightVector) -> WeightVector {
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        WeightVector {
            layout: self.layout.concat(&other.layout),
            values,
        }
    }

    /// Serialized as the layout header followed by big-endian binary64 values.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(64 + self.values.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        wire::put_u32(&mut buf, self.layout.entries.len() as u32);
        for e in &self.layout.entries {
            wire::put_bytes(&mut buf, e.name.as_bytes());
            wire::put_u64(&mut buf, e.offset as u64);
            wire::put_u64(&mut buf, e.rows as u64);
            wire::put_u64(&mut buf, e.cols as u64);
            wire::put_u8(&mut buf, e.activation.map_or(0xff, Activation::tag));
        }
        wire::put_u64(&mut buf, self.values.len() as u64);
        for &v in &self.values {
            wire::put_f64(&mut buf, v);
        }
        buf
    }

    pub fn from_checkpoint(buf: &[u8]) -> Result<Self, NnError> {
        let mut r = Reader::new(buf);
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(NnError::Checkpoint("bad magic".into()));
        }
        let n = r.u32()?;
        let mut layout = Layout::default();
        for _ in 0..n {
            let name = String::from_utf8(r.bytes()?.to_vec())
                .map_err(|_| NnError::Checkpoint("non-utf8 name".into()))?;
            let offset = r.u64()? as usize;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let tag = r.u8()?;
            let activation = match tag {
                0xff => None,
                t => Some(
                    Activation::from_tag(t)
                        .ok_or_else(|| NnError::Checkpoint(format!("activation tag {t}")))?,
                ),
            };
            if offset != layout.total_len() {
                return Err(NnError::Checkpoint(format!("entry {name} not contiguous")));
            }
            layout.push(name, rows, cols, activation);
        }
        let count = r.u64()? as usize;
        if count != layout.total_len() {
            return Err(NnError::Checkpoint("value count disagrees with layout".into()));
        }
        let values = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        r.finish()?;
        Ok(Self { layout, values })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DVFLCKPT";

/// `params − lr·grads`.
pub fn sgd_step(params: &WeightVector, grads: &WeightVector, lr: f64) -> Result<WeightVector, NnError> {
    if params.layout != grads.layout {
        return Err(NnError::Layout);
    }
    Ok(WeightVector {
        layout: params.layout.clone(),
        values: params
            .values
            .iter()
            .zip(&grads.values)
            .map(|(p, g)| p - lr * g)
            .collect(),
    })
}

fn layer_layout(layout: &mut Layout, prefix: &str, layers: &[DenseLayer]) {
    for (i, l) in layers.iter().enumerate() {
        layout.push_layer(&format!("{prefix}.{i}"), l);
    }
}

fn flatten_layers<'a>(values: &mut Vec<f64>, layers: impl IntoIterator<Item = &'a DenseLayer>) {
    for l in layers {
        values.extend_from_slice(l.weights.data());
        values.extend_from_slice(&l.bias);
    }
}

fn flatten_grads<'a>(values: &mut Vec<f64>, grads: impl IntoIterator<Item = &'a LayerGrad>) {
    for g in grads {
        values.extend_from_slice(g.weights.data());
        values.extend_from_slice(&g.bias);
    }
}

fn load_layers<'a>(values: &[f64], mut pos: usize, layers: impl IntoIterator<Item = &'a mut DenseLayer>) -> usize {
    for l in layers {
        let nw = l.weights.data.len();
        l.weights.data.copy_from_slice(&values[pos..pos + nw]);
        pos += nw;
        let nb = l.bias.len();
        l.bias.copy_from_slice(&values[pos..pos + nb]);
        pos += nb;
    }
    pos
}

/// Active party's share: bottom stack, interactive layer, top stack.
#[derive(Clone, Debug, PartialEq)]
pub struct ActiveModel {
    pub bottom: Mlp,
    pub interactive: DenseLayer,
    pub top: Mlp,
}

/// Gradients of every active parameter from one step.
#[derive(Clone, Debug)]
pub struct ActiveGrads {
    pub bottom: Vec<LayerGrad>,
    pub interactive: LayerGrad,
    pub top: Vec<LayerGrad>,
}

impl ActiveModel {
    pub fn layout(&self) -> Layout {
        let mut layout = Layout::default();
        layer_layout(&mut layout, "active_bottom", &self.bottom.layers);
        layout.push_layer("interactive", &self.interactive);
        layer_layout(&mut layout, "top", &self.top.layers);
        layout
    }

    pub fn weights(&self) -> WeightVector {
        let mut values = Vec::new();
        flatten_layers(
            &mut values,
            self.bottom
                .layers
                .iter()
                .chain(std::iter::once(&self.interactive))
                .chain(&self.top.layers),
        );
        WeightVector {
            layout: self.layout(),
            values,
        }
    }

    pub fn set_weights(&mut self, w: &WeightVector) -> Result<(), NnError> {
        if w.layout != self.layout() {
            return Err(NnError::Layout);
        }
        load_layers(
            &w.values,
            0,
            self.bottom
                .layers
                .iter_mut()
                .chain(std::iter::once(&mut self.interactive))
                .chain(self.top.layers.iter_mut()),
        );
        Ok(())
    }

    pub fn grads_vector(&self, grads: &ActiveGrads) -> WeightVector {
        let mut values = Vec::new();
        flatten_grads(
            &mut values,
            grads
                .bottom
                .iter()
                .chain(std::iter::once(&grads.interactive))
                .chain(&grads.top),
        );
        WeightVector {
            layout: self.layout(),
            values,
        }
    }

    /// Output width of the active bottom, i.e. where the passive slice of the
    /// interactive weights starts.
    pub fn split_point(&self) -> usize {
        self.bottom.output_dim()
    }

    /// Interactive weight columns belonging to each party.
    pub fn interactive_slices(&self) -> (Tensor2, Tensor2) {
        self.interactive.weights.split_cols(self.split_point())
    }
}

/// Passive party's share: its bottom stack.
#[derive(Clone, Debug, PartialEq)]
pub struct PassiveModel {
    pub bottom: Mlp,
}

impl PassiveModel {
    pub fn layout(&self) -> Layout {
        let mut layout = Layout::default();
        layer_layout(&mut layout, "passive_bottom", &self.bottom.layers);
        layout
    }

    pub fn weights(&self) -> WeightVector {
        let mut values = Vec::new();
        flatten_layers(&mut values, &self.bottom.layers);
        WeightVector {
            layout: self.layout(),
            values,
        }
    }

    pub fn set_weights(&mut self, w: &WeightVector) -> Result<(), NnError> {
        if w.layout != self.layout() {
            return Err(NnError::Layout);
        }
        load_layers(&w.values, 0, self.bottom.layers.iter_mut());
        Ok(())
    }

    pub fn grads_vector(&self, grads: &[LayerGrad]) -> WeightVector {
        let mut values = Vec::new();
        flatten_grads(&mut values, grads);
        WeightVector {
            layout: self.layout(),
            values,
        }
    }
}

/// Architecture and training hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub active_in: usize,
    pub passive_in: usize,
    pub active_bottom: Vec<usize>,
    pub passive_bottom: Vec<usize>,
    pub bottom_activation: Activation,
    pub interactive_out: usize,
    pub top_hidden: Vec<usize>,
    pub top_activation: Activation,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            active_in: 62,
            passive_in: 61,
            active_bottom: vec![32, 16],
            passive_bottom: vec![32, 16],
            bottom_activation: Activation::Relu,
            interactive_out: 32,
            top_hidden: vec![16],
            top_activation: Activation::Relu,
            lr: 0.05,
            batch: 16,
            epochs: 10,
            seed: 2022,
        }
    }
}

impl ModelConfig {
    pub fn with_inputs(active_in: usize, passive_in: usize) -> Self {
        Self {
            active_in,
            passive_in,
            ..Self::default()
        }
    }
}

/// Both parties' parameters in one value. Only tests, the centralized
/// reference trainer and evaluation hold all four parts together.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    pub active_bottom: Mlp,
    pub passive_bottom: Mlp,
    pub interactive: DenseLayer,
    pub top: Mlp,
}

/// Gradients of a full split model.
#[derive(Clone, Debug)]
pub struct SplitGrads {
    pub active: ActiveGrads,
    pub passive: Vec<LayerGrad>,
}

/// A training batch with both parties' features for the same ids.
#[derive(Clone, Debug)]
pub struct JointBatch {
    pub active: Tensor2,
    pub passive: Tensor2,
    pub labels: Vec<f64>,
}

impl SplitModel {
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let dims = |input: usize, hidden: &[usize]| {
            let mut d = vec![input];
            d.extend_from_slice(hidden);
            d
        };
        let act = cfg.bottom_activation;
        let active_bottom = Mlp::init(&dims(cfg.active_in, &cfg.active_bottom), act, act, &mut rng);
        let passive_bottom = Mlp::init(&dims(cfg.passive_in, &cfg.passive_bottom), act, act, &mut rng);
        let joint = active_bottom.output_dim() + passive_bottom.output_dim();
        let interactive = DenseLayer::init(joint, cfg.interactive_out, Activation::Identity, &mut rng);
        let mut top_dims = dims(cfg.interactive_out, &cfg.top_hidden);
        top_dims.push(1);
        let top = Mlp::init(&top_dims, cfg.top_activation, Activation::Sigmoid, &mut rng);
        Self {
            active_bottom,
            passive_bottom,
            interactive,
            top,
        }
    }

    pub fn check(&self) -> Result<(), NnError> {
        let joint = self.active_bottom.output_dim() + self.passive_bottom.output_dim();
        if self.interactive.input_dim() != joint {
            return Err(shape_err("interactive input != bottom outputs"));
        }
        if self.interactive.activation != Activation::Identity {
            return Err(shape_err("interactive layer must be linear"));
        }
        if self.top.input_dim() != self.interactive.output_dim() || self.top.output_dim() != 1 {
            return Err(shape_err("top stack must map interactive output to one unit"));
        }
        Ok(())
    }

    pub fn into_parties(self) -> (ActiveModel, PassiveModel) {
        (
            ActiveModel {
                bottom: self.active_bottom,
                interactive: self.interactive,
                top: self.top,
            },
            PassiveModel {
                bottom: self.passive_bottom,
            },
        )
    }

    pub fn from_parties(active: ActiveModel, passive: PassiveModel) -> Self {
        Self {
            active_bottom: active.bottom,
            passive_bottom: passive.bottom,
            interactive: active.interactive,
            top: active.top,
        }
    }

    /// Active parameters followed by passive parameters.
    pub fn weights(&self) -> WeightVector {
        let (a, p) = self.clone().into_parties();
        a.weights().concat(&p.weights())
    }

    /// Rebuilds a model from a layout produced by [`Self::weights`].
    pub fn from_weights(w: &WeightVector) -> Result<Self, NnError> {
        let mut active_bottom = Vec::new();
        let mut passive_bottom = Vec::new();
        let mut top = Vec::new();
        let mut interactive = None;
        let entries = &w.layout.entries;
        if entries.len() % 2 != 0 {
            return Err(NnError::Checkpoint("odd entry count".into()));
        }
        for pair in entries.chunks(2) {
            let (we, be) = (&pair[0], &pair[1]);
            let (Some(prefix), Some(bprefix)) = (we.name.strip_suffix(".w"), be.name.strip_suffix(".b")) else {
                return Err(NnError::Checkpoint(format!("unexpected entries {} / {}", we.name, be.name)));
            };
            if prefix != bprefix || be.rows != we.rows {
                return Err(NnError::Checkpoint(format!("bias {} does not match {}", be.name, we.name)));
            }
            let layer = DenseLayer {
                weights: Tensor2::from_vec(we.rows, we.cols, w.values[we.offset..we.offset + we.len()].to_vec())?,
                bias: w.values[be.offset..be.offset + be.len()].to_vec(),
                activation: we
                    .activation
                    .ok_or_else(|| NnError::Checkpoint(format!("{} lacks activation", we.name)))?,
            };
            let component = prefix.split('.').next().unwrap_or("");
            match component {
                "active_bottom" => active_bottom.push(layer),
                "passive_bottom" => passive_bottom.push(layer),
                "top" => top.push(layer),
                "interactive" => interactive = Some(layer),
                other => return Err(NnError::Checkpoint(format!("unknown component {other}"))),
            }
        }
        let model = Self {
            active_bottom: Mlp::new(active_bottom),
            passive_bottom: Mlp::new(passive_bottom),
            interactive: interactive.ok_or_else(|| NnError::Checkpoint("no interactive layer".into()))?,
            top: Mlp::new(top),
        };
        model.check()?;
        Ok(model)
    }

    /// Single-process forward: bottoms, concatenation, interactive, top.
    pub fn predict(&self, active: &Tensor2, passive: &Tensor2) -> Result<Tensor2, NnError> {
        let (ha, _) = self.active_bottom.forward(active)?;
        let (hp, _) = self.passive_bottom.forward(passive)?;
        let (_, z) = self.interactive.forward(&ha.hconcat(&hp)?)?;
        Ok(self.top.forward(&z)?.0)
    }

    /// Loss and gradients of every parameter, computed over the concatenated
    /// bottom outputs in one process.
    pub fn loss_and_grads(&self, batch: &JointBatch) -> Result<(f64, SplitGrads), NnError> {
        let (ha, cache_a) = self.active_bottom.forward(&batch.active)?;
        let (hp, cache_p) = self.passive_bottom.forward(&batch.passive)?;
        let joint = ha.hconcat(&hp)?;
        let (_, z) = self.interactive.forward(&joint)?;
        let (pred, cache_top) = self.top.forward(&z)?;
        let (loss, dpred) = bce_loss(&pred, &batch.labels)?;
        let (top_grads, dz) = self.top.backward(&cache_top, &dpred)?;
        let interactive = LayerGrad {
            weights: dz.t_matmul(&joint)?,
            bias: dz.col_sums(),
        };
        let djoint = dz.matmul(&self.interactive.weights)?;
        let (dha, dhp) = djoint.split_cols(ha.cols());
        let (bottom_a, _) = self.active_bottom.backward(&cache_a, &dha)?;
        let (bottom_p, _) = self.passive_bottom.backward(&cache_p, &dhp)?;
        Ok((
            loss,
            SplitGrads {
                active: ActiveGrads {
                    bottom: bottom_a,
                    interactive,
                    top: top_grads,
                },
                passive: bottom_p,
            },
        ))
    }

    pub fn grads_vector(&self, grads: &SplitGrads) -> WeightVector {
        let (a, p) = self.clone().into_parties();
        a.grads_vector(&grads.active).concat(&p.grads_vector(&grads.passive))
    }
}

/// One plain SGD step of the whole split model in a single process; the
/// oracle the distributed trainer is compared against.
pub fn centralized_reference_step(
    model: &SplitModel,
    batch: &JointBatch,
    lr: f64,
) -> Result<(f64, SplitModel), NnError> {
    let (loss, grads) = model.loss_and_grads(batch)?;
    let params = model.weights();
    let updated = sgd_step(&params, &model.grads_vector(&grads), lr)?;
    let mut next = model.clone();
    let (mut a, mut p) = next.clone().into_parties();
    let na = a.layout().total_len();
    a.set_weights(&WeightVector {
        layout: a.layout(),
        values: updated.values[..na].to_vec(),
    })?;
    p.set_weights(&WeightVector {
        layout: p.layout(),
        values: updated.values[na..].to_vec(),
    })?;
    next = SplitModel::from_parties(a, p);
    Ok((loss, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn random_tensor(rows: usize, cols: usize, r: &mut ChaCha20Rng) -> Tensor2 {
        Tensor2::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_layer_sigmoid_is_half() {
        let layer = DenseLayer {
            weights: Tensor2::zeros(3, 4),
            bias: vec![0.0; 3],
            activation: Activation::Sigmoid,
        };
        let (out, _) = Mlp::new(vec![layer]).forward(&Tensor2::from_rows(&[[1.0, -2.0, 3.0, 4.0]]).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identity_layer_is_affine() {
        let layer = DenseLayer {
            weights: Tensor2::from_rows(&[[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]]).unwrap(),
            bias: vec![0.1, 0.2, 0.3],
            activation: Activation::Identity,
        };
        let x = Tensor2::from_rows(&[[1.0, 1.0], [2.0, -1.0]]).unwrap();
        let (_, a) = layer.forward(&x).unwrap();
        let expect = Tensor2::from_rows(&[[3.1, 7.2, -0.2], [0.1, 2.2, -2.2]]).unwrap();
        for (x, y) in a.data().iter().zip(expect.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let mut r = rng(1);
        let stack = Mlp::init(&[5, 7, 4, 3], Activation::Gelu, Activation::Sigmoid, &mut r);
        let x = random_tensor(6, 5, &mut r);
        let (out, _) = stack.forward(&x).unwrap();
        for b in 0..6 {
            let mut h: Vec<f64> = x.row(b).to_vec();
            for layer in &stack.layers {
                let mut next = Vec::new();
                for o in 0..layer.output_dim() {
                    let mut z = layer.bias[o];
                    for i in 0..layer.input_dim() {
                        z += layer.weights.get(o, i) * h[i];
                    }
                    next.push(layer.activation.apply(z));
                }
                h = next;
            }
            for (o, v) in h.iter().enumerate() {
                assert!((out.get(b, o) - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut r = rng(2);
        let stack = Mlp::init(&[3, 2], Activation::Relu, Activation::Relu, &mut r);
        assert!(matches!(stack.forward(&Tensor2::zeros(1, 4)), Err(NnError::Shape(_))));
        let (_, cache) = stack.forward(&Tensor2::zeros(2, 3)).unwrap();
        assert!(matches!(stack.backward(&cache, &Tensor2::zeros(2, 3)), Err(NnError::Shape(_))));
        assert!(Tensor2::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn zero_upstream_and_linearity() {
        let mut r = rng(3);
        let stack = Mlp::init(&[4, 6, 3], Activation::Gelu, Activation::Identity, &mut r);
        let x = random_tensor(5, 4, &mut r);
        let (_, cache) = stack.forward(&x).unwrap();
        let (g0, d0) = stack.backward(&cache, &Tensor2::zeros(5, 3)).unwrap();
        assert!(d0.data().iter().all(|&v| v == 0.0));
        assert!(g0.iter().all(|g| g.weights.data().iter().all(|&v| v == 0.0) && g.bias.iter().all(|&v| v == 0.0)));

        let up = random_tensor(5, 3, &mut r);
        let (g1, d1) = stack.backward(&cache, &up).unwrap();
        let (g2, d2) = stack.backward(&cache, &up.scale(2.0)).unwrap();
        for (a, b) in d1.data().iter().zip(d2.data()) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.weights.data().iter().zip(b.weights.data()) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bce_examples() {
        let pred = Tensor2::from_vec(4, 1, vec![0.5; 4]).unwrap();
        let (loss, _) = bce_loss(&pred, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);

        let exact = Tensor2::from_vec(2, 1, vec![1.0, 0.0]).unwrap();
        let (loss, _) = bce_loss(&exact, &[1.0, 0.0]).unwrap();
        assert!(loss < 1e-11);

        assert_eq!(bce_loss(&pred, &[0.0, 1.0, 2.0, 0.0]).unwrap_err(), NnError::Label(2.0));
        assert!(bce_loss(&pred, &[0.0]).is_err());
    }

    #[test]
    fn bce_matches_scalar_loop() {
        let mut r = rng(4);
        let p: Vec<f64> = (0..32).map(|_| r.gen_range(0.01..0.99)).collect();
        let y: Vec<f64> = (0..32).map(|_| f64::from(r.gen_range(0..2u8))).collect();
        let (loss, grad) = bce_loss(&Tensor2::from_vec(32, 1, p.clone()).unwrap(), &y).unwrap();
        let mut expect = 0.0;
        for i in 0..32 {
            expect += if y[i] == 1.0 { -p[i].ln() } else { -(1.0 - p[i]).ln() };
        }
        assert!((loss - expect / 32.0).abs() < 1e-12);
        for i in 0..32 {
            let g = if y[i] == 1.0 { -1.0 / p[i] } else { 1.0 / (1.0 - p[i]) } / 32.0;
            assert!((grad.data()[i] - g).abs() < 1e-9);
        }
    }

    #[test]
    fn sgd_examples() {
        let layout = Layout {
            entries: vec![LayoutEntry {
                name: "x.w".into(),
                offset: 0,
                rows: 1,
                cols: 2,
                activation: Some(Activation::Identity),
            }],
        };
        let p = WeightVector {
            layout: layout.clone(),
            values: vec![1.0, 2.0],
        };
        let g = WeightVector {
            layout: layout.clone(),
            values: vec![10.0, -10.0],
        };
        assert_eq!(sgd_step(&p, &g, 0.0).unwrap(), p);
        assert_eq!(sgd_step(&p, &g, 0.05).unwrap().values, vec![0.5, 2.5]);
        let half = sgd_step(&sgd_step(&p, &g, 0.025).unwrap(), &g, 0.025).unwrap();
        let full = sgd_step(&p, &g, 0.05).unwrap();
        for (a, b) in half.values.iter().zip(&full.values) {
            assert!((a - b).abs() < 1e-15);
        }
        let other = WeightVector::zeros(Layout::default());
        assert_eq!(sgd_step(&p, &other, 0.1).unwrap_err(), NnError::Layout);
    }

    #[test]
    fn default_architecture() {
        let model = SplitModel::init(&ModelConfig::with_inputs(62, 61));
        model.check().unwrap();
        assert_eq!(model.interactive.input_dim(), 32);
        assert_eq!(model.interactive.output_dim(), 32);
        assert_eq!(model.top.layers.len(), 2);
        assert_eq!(model.top.layers[1].activation, Activation::Sigmoid);
        let bound = (6.0f64 / (62.0 + 32.0)).sqrt();
        assert!(model.active_bottom.layers[0].weights.max_abs() <= bound);
    }

    #[test]
    fn weights_and_checkpoint_round_trip() {
        let model = SplitModel::init(&ModelConfig::with_inputs(5, 3));
        let w = model.weights();
        let back = SplitModel::from_weights(&WeightVector::from_checkpoint(&w.to_checkpoint()).unwrap()).unwrap();
        assert_eq!(back, model);
        let bytes = w.to_checkpoint();
        assert!(WeightVector::from_checkpoint(&bytes[..bytes.len() - 3]).is_err());
        let (mut a, p) = model.clone().into_parties();
        let mut wa = a.weights();
        wa.values[0] = 42.0;
        a.set_weights(&wa).unwrap();
        assert_eq!(a.bottom.layers[0].weights.data()[0], 42.0);
        assert_eq!(a.set_weights(&p.weights()).unwrap_err(), NnError::Layout);
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::with_inputs(9, 4);
        assert_eq!(SplitModel::init(&cfg), SplitModel::init(&cfg));
        let other = ModelConfig { seed: 1, ..cfg.clone() };
        assert_ne!(SplitModel::init(&cfg), SplitModel::init(&other));
    }

    #[test]
    fn degenerate_passive_input() {
        let model = SplitModel::init(&ModelConfig::with_inputs(4, 0));
        let out = model.predict(&Tensor2::zeros(3, 4), &Tensor2::zeros(3, 0)).unwrap();
        assert_eq!(out.shape(), (3, 1));
        assert!(out.all_finite());
    }

    #[test]
    fn config_parses_from_toml() {
        let cfg: ModelConfig = toml::from_str("active_in = 3\npassive_in = 2\ntop_activation = \"gelu\"\nlr = 0.1\n").unwrap();
        assert_eq!(cfg.active_in, 3);
        assert_eq!(cfg.top_activation, Activation::Gelu);
        assert_eq!(cfg.batch, 16);
        assert!(toml::from_str::<ModelConfig>("bogus = 1\n").is_err());
    }
    fn rel_err(a: f64, b: f64) -> f64 {
        let m = a.abs().max(b.abs());
        if m < 1e-8 {
            (a - b).abs()
        } else {
            (a - b).abs() / m
        }
    }

    #[test]
    fn gradient_check_each_activation() {
        for (seed, act) in [Activation::Identity, Activation::Relu, Activation::Sigmoid, Activation::Gelu]
            .into_iter()
            .enumerate()
        {
            let mut r = rng(10 + seed as u64);
            let stack = Mlp::init(&[4, 5, 3], act, act, &mut r);
            let x = random_tensor(6, 4, &mut r);
            let up = random_tensor(6, 3, &mut r);
            let objective = |s: &Mlp, x: &Tensor2| -> f64 {
                let (out, _) = s.forward(x).unwrap();
                out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
            };
            let (_, cache) = stack.forward(&x).unwrap();
            let (grads, dx) = stack.backward(&cache, &up).unwrap();
            let h = 1e-5;
            for (li, layer) in stack.layers.iter().enumerate() {
                for k in 0..layer.weights.data().len() {
                    let mut plus = stack.clone();
                    plus.layers[li].weights.data_mut()[k] += h;
                    let mut minus = stack.clone();
                    minus.layers[li].weights.data_mut()[k] -= h;
                    let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                    let e = rel_err(grads[li].weights.data()[k], fd);
                    assert!(e < 1e-4, "{act} layer {li} w{k}: {e}");
                }
                for k in 0..layer.bias.len() {
                    let mut plus = stack.clone();
                    plus.layers[li].bias[k] += h;
                    let mut minus = stack.clone();
                    minus.layers[li].bias[k] -= h;
                    let fd = (objective(&plus, &x) - objective(&minus, &x)) / (2.0 * h);
                    assert!(rel_err(grads[li].bias[k], fd) < 1e-4, "{act} layer {li} b{k}");
                }
            }
            for k in 0..x.data().len() {
                let mut xp = x.clone();
                xp.data_mut()[k] += h;
                let mut xm = x.clone();
                xm.data_mut()[k] -= h;
                let fd = (objective(&stack, &xp) - objective(&stack, &xm)) / (2.0 * h);
                assert!(rel_err(dx.data()[k], fd) < 1e-4, "{act} input {k}");
            }
        }
    }

    fn joint_batch(rows: usize, a: usize, p: usize, r: &mut ChaCha20Rng) -> JointBatch {
        JointBatch {
            active: random_tensor(rows, a, r),
            passive: random_tensor(rows, p, r),
            labels: (0..rows).map(|_| f64::from(r.gen_range(0..2u8))).collect(),
        }
    }

    fn model_loss(w: &WeightVector, batch: &JointBatch) -> f64 {
        let m = SplitModel::from_weights(w).unwrap();
        let pred = m.predict(&batch.active, &batch.passive).unwrap();
        bce_loss(&pred, &batch.labels).unwrap().0
    }

    #[test]
    fn gradient_check_split_model() {
        let mut r = rng(20);
        let cfg = ModelConfig {
            bottom_activation: Activation::Gelu,
            ..ModelConfig::with_inputs(7, 5)
        };
        let model = SplitModel::init(&cfg);
        let batch = joint_batch(8, 7, 5, &mut r);
        let (_, grads) = model.loss_and_grads(&batch).unwrap();
        let analytic = model.grads_vector(&grads);
        let w = model.weights();
        let h = 1e-5;
        for _ in 0..200 {
            let k = r.gen_range(0..w.len());
            let mut plus = w.clone();
            plus.values[k] += h;
            let mut minus = w.clone();
            minus.values[k] -= h;
            let fd = (model_loss(&plus, &batch) - model_loss(&minus, &batch)) / (2.0 * h);
            let e = rel_err(analytic.values[k], fd);
            assert!(e < 1e-4, "param {k}: analytic {} fd {fd}", analytic.values[k]);
        }
    }

    #[test]
    fn reference_step_is_deterministic_and_learns() {
        let mut r = rng(30);
        let cfg = ModelConfig {
            lr: 0.5,
            ..ModelConfig::with_inputs(2, 2)
        };
        let mut rows_a = Vec::new();
        let mut rows_p = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..32 {
            let x: [f64; 4] = std::array::from_fn(|_| r.gen_range(-1.0..1.0));
            labels.push(if x[0] + x[2] > 0.0 { 1.0 } else { 0.0 });
            rows_a.push([x[0], x[1]]);
            rows_p.push([x[2], x[3]]);
        }
        let batch = JointBatch {
            active: Tensor2::from_rows(&rows_a).unwrap(),
            passive: Tensor2::from_rows(&rows_p).unwrap(),
            labels,
        };
        let run = || {
            let mut model = SplitModel::init(&cfg);
            let mut losses = Vec::new();
            for _ in 0..50 {
                let (loss, next) = centralized_reference_step(&model, &batch, cfg.lr).unwrap();
                losses.push(loss);
                model = next;
            }
            (losses, model)
        };
        let (l1, m1) = run();
        let (l2, m2) = run();
        assert_eq!(l1, l2);
        assert_eq!(m1, m2);
        assert!(l1[49] < l1[0] * 0.6, "{} -> {}", l1[0], l1[49]);
    }
}
