//! Multi-head feed-forward classifier.
//!
//! A [`Model`] is a ReLU trunk shared by every task followed by one linear
//! head per task. Logits of the selected heads are concatenated in task
//! order, so prediction over all heads needs no task identifier.
//!
//! Gradients are computed analytically: [`Model::forward`] returns a
//! [`ForwardCache`] and [`Model::backward`] consumes it together with the
//! gradient of the loss with respect to the logits.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows. Fails on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has dimension {}, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// Copies columns `cols` into a new matrix.
    pub fn columns(&self, cols: Range<usize>) -> Matrix {
        let width = cols.len();
        let mut out = Matrix::zeros(self.rows, width);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[cols.clone()]);
        }
        out
    }

    /// Adds `src` into columns starting at `offset`.
    pub fn add_columns(&mut self, offset: usize, src: &Matrix) {
        debug_assert_eq!(self.rows, src.rows);
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[offset..offset + src.cols];
            for (d, s) in dst.iter_mut().zip(src.row(i)) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Fully connected layer computing `x W + b`, with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub(crate) inputs: usize,
    pub(crate) outputs: usize,
    pub(crate) weights: Vec<f64>,
    pub(crate) bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    /// Uniform weights in `±bound`, zero bias.
    fn uniform<R: Rng + ?Sized>(inputs: usize, outputs: usize, bound: f64, rng: &mut R) -> Self {
        let weights = (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self { inputs, outputs, weights, bias: vec![0.0; outputs] }
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = Matrix::zeros(x.rows, self.outputs);
        for i in 0..x.rows {
            let yr = y.row_mut(i);
            yr.copy_from_slice(&self.bias);
            for (k, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wr = &self.weights[k * self.outputs..(k + 1) * self.outputs];
                for (yv, wv) in yr.iter_mut().zip(wr) {
                    *yv += xv * wv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad`; returns dL/dx when asked.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Dense, want_dx: bool) -> Option<Matrix> {
        for i in 0..x.rows {
            let dyr = dy.row(i);
            for (b, d) in grad.bias.iter_mut().zip(dyr) {
                *b += d;
            }
            for (k, &xv) in x.row(i).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let gr = &mut grad.weights[k * self.outputs..(k + 1) * self.outputs];
                for (g, d) in gr.iter_mut().zip(dyr) {
                    *g += xv * d;
                }
            }
        }
        if !want_dx {
            return None;
        }
        let mut dx = Matrix::zeros(x.rows, self.inputs);
        for i in 0..x.rows {
            let dyr = dy.row(i);
            let dxr = dx.row_mut(i);
            for (k, dxv) in dxr.iter_mut().enumerate() {
                let wr = &self.weights[k * self.outputs..(k + 1) * self.outputs];
                *dxv = wr.iter().zip(dyr).map(|(w, d)| w * d).sum();
            }
        }
        Some(dx)
    }
}

/// Contiguous interval of task indices `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadRange {
    pub start: usize,
    pub end: usize,
}

impl HeadRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn single(task: usize) -> Self {
        Self { start: task, end: task + 1 }
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, task: usize) -> bool {
        (self.start..self.end).contains(&task)
    }
}

/// Shared ReLU trunk plus one linear head per task.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_dim: usize,
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    /// Bumped on every parameter mutation; ties a cache to the parameters it saw.
    generation: u64,
}

/// Activations recorded by [`Model::forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    range: HeadRange,
    /// Layer inputs: `acts[0]` is the batch, `acts[i]` the post-ReLU output of trunk layer `i-1`.
    acts: Vec<Matrix>,
}

impl ForwardCache {
    pub fn head_range(&self) -> HeadRange {
        self.range
    }

    /// Trunk output (the features the heads read).
    pub fn features(&self) -> &Matrix {
        self.acts.last().expect("cache holds at least the input")
    }
}

/// Gradients with the same layout as a [`Model`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) trunk: Vec<Dense>,
    pub(crate) heads: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            trunk: model.trunk.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
            heads: model.heads.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        let pairs = self.trunk.iter_mut().zip(&other.trunk).chain(self.heads.iter_mut().zip(&other.heads));
        for (a, b) in pairs {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    /// Flat view in checkpoint order (trunk then heads, weights before bias).
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.trunk, &self.heads)
    }

    pub fn head(&self, task: usize) -> &Dense {
        &self.heads[task]
    }

    pub fn trunk_layer(&self, i: usize) -> &Dense {
        &self.trunk[i]
    }

    /// Errors with the path of the first non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        for (group, layers) in [("trunk", &self.trunk), ("head", &self.heads)] {
            for (li, l) in layers.iter().enumerate() {
                if let Some(j) = l.weights.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { path: format!("{group}[{li}].weights[{j}]") });
                }
                if let Some(j) = l.bias.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { path: format!("{group}[{li}].bias[{j}]") });
                }
            }
        }
        Ok(())
    }
}

fn flatten(trunk: &[Dense], heads: &[Dense]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in trunk.iter().chain(heads) {
        out.extend_from_slice(&l.weights);
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Model {
    /// Trunk with the given hidden widths and no heads. Weights use a seeded
    /// fan-in uniform (He bound `sqrt(6/fan_in)` for ReLU layers).
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            trunk.push(Dense::uniform(fan_in, width, (6.0 / fan_in as f64).sqrt(), rng));
            fan_in = width;
        }
        Self { input_dim, trunk, heads: Vec::new(), generation: 0 }
    }

    /// A model whose every parameter is zero.
    pub fn zeros(input_dim: usize, hidden: &[usize], head_sizes: &[usize]) -> Self {
        let mut fan_in = input_dim;
        let mut trunk = Vec::new();
        for &w in hidden {
            trunk.push(Dense::zeros(fan_in, w));
            fan_in = w;
        }
        let heads = head_sizes.iter().map(|&k| Dense::zeros(fan_in, k)).collect();
        Self { input_dim, trunk, heads, generation: 0 }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn feature_dim(&self) -> usize {
        self.trunk.last().map_or(self.input_dim, |l| l.outputs)
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.trunk.iter().map(|l| l.outputs).collect()
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.outputs).collect()
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.iter().map(|h| h.outputs).sum()
    }

    pub fn all_heads(&self) -> HeadRange {
        HeadRange::new(0, self.heads.len())
    }

    /// Global class offset of the first class of head `task`.
    pub fn class_offset(&self, task: usize) -> usize {
        self.heads[..task].iter().map(|h| h.outputs).sum()
    }

    /// Global class indices covered by `range`.
    pub fn class_span(&self, range: HeadRange) -> Range<usize> {
        let start = self.class_offset(range.start);
        start..start + self.heads[range.start..range.end].iter().map(|h| h.outputs).sum::<usize>()
    }

    pub fn trunk(&self) -> &[Dense] {
        &self.trunk
    }

    pub fn heads(&self) -> &[Dense] {
        &self.heads
    }

    /// Appends a head with `num_classes` outputs. Existing parameters are untouched.
    pub fn add_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) -> Result<()> {
        if num_classes == 0 {
            return Err(Error::invalid("a head needs at least one class"));
        }
        let fan_in = self.feature_dim();
        self.heads.push(Dense::uniform(fan_in, num_classes, 1.0 / (fan_in as f64).sqrt(), rng));
        self.generation += 1;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.trunk.iter().chain(&self.heads).map(Dense::num_params).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        flatten(&self.trunk, &self.heads)
    }

    /// Overwrites all parameters from a flat vector in [`Model::to_flat`] order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in self.trunk.iter_mut().chain(self.heads.iter_mut()) {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        self.generation += 1;
        Ok(())
    }

    /// Parameter `index` in flat order.
    pub fn param(&self, index: usize) -> f64 {
        let (layer, j) = self.locate(index);
        let l = self.layer(layer);
        if j < l.weights.len() {
            l.weights[j]
        } else {
            l.bias[j - l.weights.len()]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (layer, j) = self.locate(index);
        let l = if layer < self.trunk.len() { &mut self.trunk[layer] } else { &mut self.heads[layer - self.trunk.len()] };
        if j < l.weights.len() {
            l.weights[j] = value;
        } else {
            let nw = l.weights.len();
            l.bias[j - nw] = value;
        }
        self.generation += 1;
    }

    fn layer(&self, i: usize) -> &Dense {
        if i < self.trunk.len() {
            &self.trunk[i]
        } else {
            &self.heads[i - self.trunk.len()]
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (i, l) in self.trunk.iter().chain(&self.heads).enumerate() {
            if index < l.num_params() {
                return (i, index);
            }
            index -= l.num_params();
        }
        panic!("parameter index out of range");
    }

    /// Hash of the parameter bits, for cheap before/after comparisons.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over the little-endian bytes.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.to_flat() {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Trunk forward pass only.
    pub fn features(&self, inputs: &Matrix) -> Result<Matrix> {
        self.check_inputs(inputs)?;
        let mut h = inputs.clone();
        for l in &self.trunk {
            h = l.forward(&h);
            relu(&mut h);
        }
        Ok(h)
    }

    fn check_inputs(&self, inputs: &Matrix) -> Result<()> {
        if inputs.rows == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if inputs.cols != self.input_dim {
            return Err(Error::invalid(format!(
                "input dimension {} does not match model input {}",
                inputs.cols, self.input_dim
            )));
        }
        Ok(())
    }

    fn check_range(&self, range: HeadRange) -> Result<()> {
        if range.is_empty() || range.end > self.heads.len() {
            return Err(Error::invalid(format!(
                "head range {}..{} outside the model's {} heads",
                range.start,
                range.end,
                self.heads.len()
            )));
        }
        Ok(())
    }

    /// Concatenated logits of the heads in `range`.
    pub fn logits(&self, inputs: &Matrix, range: HeadRange) -> Result<Matrix> {
        self.check_range(range)?;
        let h = self.features(inputs)?;
        Ok(self.head_logits(&h, range))
    }

    fn head_logits(&self, h: &Matrix, range: HeadRange) -> Matrix {
        let width: usize = self.heads[range.start..range.end].iter().map(|l| l.outputs).sum();
        let mut out = Matrix::zeros(h.rows, width);
        let mut off = 0;
        for head in &self.heads[range.start..range.end] {
            out.add_columns(off, &head.forward(h));
            off += head.outputs;
        }
        out
    }

    /// Logits plus the cache needed by [`Model::backward`].
    pub fn forward(&self, inputs: &Matrix, range: HeadRange) -> Result<(Matrix, ForwardCache)> {
        self.check_range(range)?;
        self.check_inputs(inputs)?;
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        acts.push(inputs.clone());
        for l in &self.trunk {
            let mut h = l.forward(acts.last().unwrap());
            relu(&mut h);
            acts.push(h);
        }
        let logits = self.head_logits(acts.last().unwrap(), range);
        Ok((logits, ForwardCache { generation: self.generation, range, acts }))
    }

    /// Gradients of the loss given its gradient with respect to the logits
    /// produced by the forward call that made `cache`. Heads outside the
    /// cached range get zero gradient. With `heads_only`, the trunk is not
    /// back-propagated through and its gradient stays zero.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix, heads_only: bool) -> Result<Gradients> {
        if cache.generation != self.generation {
            return Err(Error::Contract("backward called with a cache from different parameters".into()));
        }
        let range = cache.range;
        let width: usize = self.heads[range.start..range.end].iter().map(|l| l.outputs).sum();
        let feats = cache.features();
        if dlogits.rows != feats.rows || dlogits.cols != width {
            return Err(Error::Contract(format!(
                "logit gradient is {}x{}, forward produced {}x{}",
                dlogits.rows, dlogits.cols, feats.rows, width
            )));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut dh = (!heads_only).then(|| Matrix::zeros(feats.rows, self.feature_dim()));
        let mut off = 0;
        for t in range.start..range.end {
            let head = &self.heads[t];
            let dy = dlogits.columns(off..off + head.outputs);
            off += head.outputs;
            if let Some(dx) = head.backward(feats, &dy, &mut grads.heads[t], dh.is_some()) {
                let dh = dh.as_mut().unwrap();
                for (a, b) in dh.data.iter_mut().zip(&dx.data) {
                    *a += b;
                }
            }
        }
        let Some(mut delta) = dh else { return Ok(grads) };
        for i in (0..self.trunk.len()).rev() {
            // ReLU derivative from the post-activation.
            for (d, a) in delta.data.iter_mut().zip(&cache.acts[i + 1].data) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let next = self.trunk[i].backward(&cache.acts[i], &delta, &mut grads.trunk[i], i > 0);
            match next {
                Some(d) => delta = d,
                None => break,
            }
        }
        Ok(grads)
    }

    /// Serializes to the binary checkpoint layout (little-endian):
    ///
    /// ```text
    /// magic "GDCK" | u32 version=1 | u32 input_dim
    /// u32 n_trunk | n_trunk x u32 width | u32 n_heads | n_heads x u32 classes
    /// u64 n_params | n_params x f64   (trunk then heads; weights in x out row-major, then bias)
    /// ```
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.trunk.len() as u32).to_le_bytes())?;
        for l in &self.trunk {
            w.write_all(&(l.outputs as u32).to_le_bytes())?;
        }
        w.write_all(&(self.heads.len() as u32).to_le_bytes())?;
        for h in &self.heads {
            w.write_all(&(h.outputs as u32).to_le_bytes())?;
        }
        let flat = self.to_flat();
        w.write_all(&(flat.len() as u64).to_le_bytes())?;
        for v in flat {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_dim = read_u32(&mut r)? as usize;
        let n_trunk = read_u32(&mut r)? as usize;
        let hidden = (0..n_trunk).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let n_heads = read_u32(&mut r)? as usize;
        let heads = (0..n_heads).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let mut model = Model::zeros(input_dim, &hidden, &heads);
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let n = u64::from_le_bytes(buf) as usize;
        if n != model.num_params() {
            return Err(Error::Checkpoint(format!("expected {} parameters, header says {n}", model.num_params())));
        }
        let mut flat = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            flat.push(f64::from_le_bytes(buf));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: format!("checkpoint parameter {i}") });
        }
        model.set_flat(&flat)?;
        model.generation = 0;
        Ok(model)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GDCK";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn relu(m: &mut Matrix) {
    m.data.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// `softmax(z / gamma)`, computed with the max subtracted.
pub fn softmax_temperature(logits: &[f64], gamma: f64) -> Vec<f64> {
    debug_assert!(gamma > 0.0);
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| ((z - max) / gamma).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= sum);
    out
}

/// `log softmax(z / gamma)` via log-sum-exp.
pub fn log_softmax_temperature(logits: &[f64], gamma: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|z| ((z - max) / gamma).exp()).sum::<f64>().ln();
    logits.iter().map(|z| (z - max) / gamma - lse).collect()
}

/// Row-wise [`softmax_temperature`].
pub fn softmax_rows(logits: &Matrix, gamma: f64) -> Matrix {
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        out.row_mut(i).copy_from_slice(&softmax_temperature(logits.row(i), gamma));
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Hyperparameters of SGD with classical momentum and coupled L2 decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Which parameter groups an optimizer step may change.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateScope {
    All,
    /// Trunk stays bit-identical (balanced fine-tuning).
    HeadsOnly,
}

/// Velocity buffers mirror the model they were created for.
///
/// Update per parameter: `v <- momentum * v + (g + weight_decay * p)`, then
/// `p <- p - lr * v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: SgdConfig,
    velocity: Gradients,
}

impl OptimizerState {
    pub fn new(model: &Model, config: SgdConfig) -> Self {
        Self { config, velocity: Gradients::zeros_like(model) }
    }

    pub fn velocity(&self) -> &Gradients {
        &self.velocity
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients, scope: UpdateScope) -> Result<()> {
        if grads.heads.len() != model.heads.len()
            || grads.trunk.len() != model.trunk.len()
            || self.velocity.heads.len() != model.heads.len()
        {
            return Err(Error::Contract("gradient or velocity layout does not match the model".into()));
        }
        grads.check_finite()?;
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        let update = |p: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + (g + weight_decay * *p);
                *p -= lr * *v;
            }
        };
        if scope == UpdateScope::All {
            for ((l, v), g) in model.trunk.iter_mut().zip(&mut self.velocity.trunk).zip(&grads.trunk) {
                update(&mut l.weights, &mut v.weights, &g.weights);
                update(&mut l.bias, &mut v.bias, &g.bias);
            }
        }
        for ((l, v), g) in model.heads.iter_mut().zip(&mut self.velocity.heads).zip(&grads.heads) {
            update(&mut l.weights, &mut v.weights, &g.weights);
            update(&mut l.bias, &mut v.bias, &g.bias);
        }
        model.generation += 1;
        Ok(())
    }
}
