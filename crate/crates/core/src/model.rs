//! Minimal differentiable classifier.
//!
//! Either multinomial logistic regression (`hidden_dim == 0`) or a
//! one-hidden-layer ReLU network, trained with mean cross-entropy.
//! Parameters live in one flat vector so the consensus and mixing code can
//! treat a model as an opaque payload.
//!
//! Flat layout, weights stored output-major (`w[o * fan_in + i]`):
//!
//! * linear: `[W (classes x input), b (classes)]`
//! * mlp:    `[W1 (hidden x input), b1 (hidden), W2 (classes x hidden), b2 (classes)]`

use std::fmt;

use rand::Rng;
use rand_distr::Uniform;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed::rng_from;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModelShape {
    pub input_dim: usize,
    /// 0 selects the linear softmax model.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelShape {
    pub fn new(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidDimension(format!(
                "model shape needs input_dim > 0 and num_classes > 0 (got {input_dim}, {num_classes})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_dim,
            num_classes,
        })
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.num_classes);
        if h > 0 {
            d * h + h + h * c + c
        } else {
            d * c + c
        }
    }
}

impl fmt::Display for ModelShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.input_dim, self.hidden_dim, self.num_classes)
    }
}

/// Shape descriptor carried by a [`ParamVector`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamShape {
    /// Plain vector payload, e.g. scalar consensus signals.
    Flat(usize),
    Model(ModelShape),
}

impl ParamShape {
    pub fn len(&self) -> usize {
        match self {
            ParamShape::Flat(n) => *n,
            ParamShape::Model(s) => s.param_count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for ParamShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamShape::Flat(n) => write!(f, "flat({n})"),
            ParamShape::Model(s) => write!(f, "model{s}"),
        }
    }
}

/// Flattened parameters with their shape descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    shape: ParamShape,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(shape: ParamShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                format!("{} values", values.len()),
            ));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite parameter at index {k}")));
        }
        Ok(Self { shape, values })
    }

    pub fn flat(values: Vec<f64>) -> Self {
        Self {
            shape: ParamShape::Flat(values.len()),
            values,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::flat(vec![v])
    }

    pub fn zeros(shape: ParamShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> ParamShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ensure_same_shape(&self, other: &ParamVector) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.ensure_same_shape(other)?;
        Ok(ParamVector {
            shape: self.shape,
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Arithmetic mean of equally shaped vectors, summed in index order.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors
            .first()
            .ok_or_else(|| Error::Empty("mean of zero vectors".into()))?;
        let mut acc = first.clone();
        for v in &vectors[1..] {
            acc.ensure_same_shape(v)?;
            for (a, b) in acc.values.iter_mut().zip(&v.values) {
                *a += b;
            }
        }
        let n = vectors.len() as f64;
        for a in &mut acc.values {
            *a /= n;
        }
        Ok(acc)
    }
}

fn model_shape(params: &ParamVector) -> Result<ModelShape> {
    match params.shape {
        ParamShape::Model(s) => Ok(s),
        other => Err(Error::shape("model parameters", other)),
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(shape: ModelShape, seed: u64) -> ParamVector {
    let mut rng = rng_from(seed);
    let mut values = Vec::with_capacity(shape.param_count());
    let mut push_layer = |fan_in: usize, fan_out: usize, values: &mut Vec<f64>| {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new(-limit, limit).expect("positive glorot limit");
        values.extend((0..fan_in * fan_out).map(|_| rng.sample(dist)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    };
    if shape.hidden_dim > 0 {
        push_layer(shape.input_dim, shape.hidden_dim, &mut values);
        push_layer(shape.hidden_dim, shape.num_classes, &mut values);
    } else {
        push_layer(shape.input_dim, shape.num_classes, &mut values);
    }
    ParamVector {
        shape: ParamShape::Model(shape),
        values,
    }
}

/// Borrowed views into the flat parameter layout.
struct Layers<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
}

fn split<'a>(shape: &ModelShape, v: &'a [f64]) -> Layers<'a> {
    let (d, h, c) = (shape.input_dim, shape.hidden_dim, shape.num_classes);
    if h > 0 {
        let (w1, rest) = v.split_at(d * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h * c);
        Layers { w1, b1, w2, b2 }
    } else {
        let (w, b) = v.split_at(d * c);
        Layers {
            w1: &[],
            b1: &[],
            w2: w,
            b2: b,
        }
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let fan_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        let row = &w[o * fan_in..(o + 1) * fan_in];
        *y = b[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Per-sample forward pass. Fills `hidden_pre` (empty for the linear model)
/// and `logits`.
fn forward(shape: &ModelShape, layers: &Layers<'_>, x: &[f64], hidden_pre: &mut [f64], hidden_act: &mut [f64], logits: &mut [f64]) {
    if shape.hidden_dim > 0 {
        affine(layers.w1, layers.b1, x, hidden_pre);
        for (a, z) in hidden_act.iter_mut().zip(hidden_pre.iter()) {
            *a = z.max(0.0);
        }
        affine(layers.w2, layers.b2, hidden_act, logits);
    } else {
        affine(layers.w2, layers.b2, x, logits);
    }
}

/// `log(sum(exp(logits)))` with max subtraction.
fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn check_batch(shape: &ModelShape, batch: &Dataset) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("batch has no samples".into()));
    }
    if batch.dim() != shape.input_dim {
        return Err(Error::shape(
            format!("feature dim {}", shape.input_dim),
            format!("feature dim {}", batch.dim()),
        ));
    }
    if let Some(&label) = batch.labels().iter().find(|&&y| y >= shape.num_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: shape.num_classes,
        });
    }
    Ok(())
}

struct Scratch {
    hidden_pre: Vec<f64>,
    hidden_act: Vec<f64>,
    logits: Vec<f64>,
}

impl Scratch {
    fn new(shape: &ModelShape) -> Self {
        Self {
            hidden_pre: vec![0.0; shape.hidden_dim],
            hidden_act: vec![0.0; shape.hidden_dim],
            logits: vec![0.0; shape.num_classes],
        }
    }
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ParamVector, batch: &Dataset) -> Result<f64> {
    let shape = model_shape(params)?;
    check_batch(&shape, batch)?;
    let layers = split(&shape, &params.values);
    let mut s = Scratch::new(&shape);
    let mut total = 0.0;
    for (x, &y) in batch.rows().zip(batch.labels()) {
        forward(&shape, &layers, x, &mut s.hidden_pre, &mut s.hidden_act, &mut s.logits);
        total += log_sum_exp(&s.logits) - s.logits[y];
    }
    Ok(total / batch.len() as f64)
}

/// Mean cross-entropy and its gradient by backpropagation.
pub fn loss_and_grad(params: &ParamVector, batch: &Dataset) -> Result<(f64, ParamVector)> {
    let shape = model_shape(params)?;
    check_batch(&shape, batch)?;
    let (d, h, c) = (shape.input_dim, shape.hidden_dim, shape.num_classes);
    let layers = split(&shape, &params.values);
    let mut grad = ParamVector::zeros(params.shape);
    let scale = 1.0 / batch.len() as f64;

    let mut s = Scratch::new(&shape);
    let mut dlogits = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let mut total = 0.0;

    for (x, &y) in batch.rows().zip(batch.labels()) {
        forward(&shape, &layers, x, &mut s.hidden_pre, &mut s.hidden_act, &mut s.logits);
        let lse = log_sum_exp(&s.logits);
        total += lse - s.logits[y];
        for (k, (g, l)) in dlogits.iter_mut().zip(&s.logits).enumerate() {
            let p = (l - lse).exp();
            *g = (p - if k == y { 1.0 } else { 0.0 }) * scale;
        }

        let g = grad.values_mut();
        if h > 0 {
            let (gw1, rest) = g.split_at_mut(d * h);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(h * c);
            for k in 0..c {
                let dl = dlogits[k];
                gb2[k] += dl;
                for (gw, a) in gw2[k * h..(k + 1) * h].iter_mut().zip(&s.hidden_act) {
                    *gw += dl * a;
                }
            }
            for (j, dh) in dhidden.iter_mut().enumerate() {
                let back: f64 = (0..c).map(|k| layers.w2[k * h + j] * dlogits[k]).sum();
                *dh = if s.hidden_pre[j] > 0.0 { back } else { 0.0 };
            }
            for j in 0..h {
                let dh = dhidden[j];
                gb1[j] += dh;
                for (gw, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                    *gw += dh * xi;
                }
            }
        } else {
            let (gw, gb) = g.split_at_mut(d * c);
            for k in 0..c {
                let dl = dlogits[k];
                gb[k] += dl;
                for (w, xi) in gw[k * d..(k + 1) * d].iter_mut().zip(x) {
                    *w += dl * xi;
                }
            }
        }
    }
    Ok((total * scale, grad))
}

/// Central-difference gradient, one coordinate at a time.
pub fn finite_diff_grad(params: &ParamVector, batch: &Dataset, eps: f64) -> Result<ParamVector> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.clone();
    let mut out = ParamVector::zeros(params.shape);
    for k in 0..params.len() {
        let orig = params.values[k];
        probe.values[k] = orig + eps;
        let up = loss(&probe, batch)?;
        probe.values[k] = orig - eps;
        let down = loss(&probe, batch)?;
        probe.values[k] = orig;
        out.values[k] = (up - down) / (2.0 * eps);
    }
    Ok(out)
}

/// Smallest |pre-activation| of any hidden unit over the batch. Central
/// differences are unreliable when this is within the step size of a ReLU
/// kink. `None` for the linear model.
pub fn min_abs_preactivation(params: &ParamVector, batch: &Dataset) -> Result<Option<f64>> {
    let shape = model_shape(params)?;
    check_batch(&shape, batch)?;
    if shape.hidden_dim == 0 {
        return Ok(None);
    }
    let layers = split(&shape, &params.values);
    let mut s = Scratch::new(&shape);
    let mut min = f64::INFINITY;
    for x in batch.rows() {
        affine(layers.w1, layers.b1, x, &mut s.hidden_pre);
        min = s.hidden_pre.iter().fold(min, |m, z| m.min(z.abs()));
    }
    Ok(Some(min))
}

/// Max over coordinates of `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &ParamVector, numeric: &ParamVector, floor: f64) -> f64 {
    analytic
        .values
        .iter()
        .zip(&numeric.values)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
    }
    params.ensure_same_shape(grad)?;
    let mut out = params.clone();
    sgd_in_place(&mut out, grad, lr);
    Ok(out)
}

pub(crate) fn sgd_in_place(params: &mut ParamVector, grad: &ParamVector, lr: f64) {
    for (p, g) in params.values.iter_mut().zip(&grad.values) {
        *p -= lr * g;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Argmax accuracy (ties go to the lowest class index) and mean loss.
pub fn evaluate(params: &ParamVector, dataset: &Dataset) -> Result<Evaluation> {
    let shape = model_shape(params)?;
    check_batch(&shape, dataset)?;
    let layers = split(&shape, &params.values);
    let mut s = Scratch::new(&shape);
    let mut correct = 0usize;
    let mut total = 0.0;
    for (x, &y) in dataset.rows().zip(dataset.labels()) {
        forward(&shape, &layers, x, &mut s.hidden_pre, &mut s.hidden_act, &mut s.logits);
        let mut best = 0;
        for k in 1..s.logits.len() {
            if s.logits[k] > s.logits[best] {
                best = k;
            }
        }
        if best == y {
            correct += 1;
        }
        total += log_sum_exp(&s.logits) - s.logits[y];
    }
    let m = dataset.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / m,
        loss: total / m,
    })
}
