//! Reverse-mode gradients for small dense encoders, bias-free linear heads
//! and softmax cross-entropy, plus a central-difference gradient checker.
//!
//! The operator set is deliberately tiny: affine layers with identity, ReLU
//! or tanh activations (the output layer is always affine). A forward pass
//! returns a [`Tape`] holding what the backward pass needs; a tape can be
//! played back exactly once, for one or several upstream gradients.
//!
//! Parameters flatten in registration order: for each layer, the weight in
//! row-major `(out, in)` order followed by the bias.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DagrError, Result};
use crate::geom::EmbeddingBatch;
use crate::pareto::FlatGradient;
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn grad(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = DagrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(DagrError::Range {
                key: "activation".into(),
                reason: format!("unknown activation {other:?}"),
            }),
        }
    }
}

/// Layer widths `input -> hidden... -> d`, one activation per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
    pub seed: u64,
}

impl EncoderSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>, seed: u64) -> Result<Self> {
        let spec = Self {
            widths,
            activations,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Same activation on every hidden layer.
    pub fn uniform(widths: Vec<usize>, activation: Activation, seed: u64) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![activation; hidden], seed)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(DagrError::ShapeMismatch(
                "encoder needs at least one layer (two widths)".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(DagrError::ShapeMismatch("layer widths must be >= 1".into()));
        }
        if self.activations.len() != self.widths.len() - 2 {
            return Err(DagrError::ShapeMismatch(format!(
                "{} hidden layers but {} activations",
                self.widths.len() - 2,
                self.activations.len()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

/// Encoder parameters together with their spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub spec: EncoderSpec,
    pub layers: Vec<Layer>,
    pub group: String,
}

impl Encoder {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization drawn from
    /// `SplitMix64::new(spec.seed)` in flattening order.
    pub fn init(spec: EncoderSpec, group: impl Into<String>) -> Result<Self> {
        spec.validate()?;
        let mut rng = SplitMix64::new(spec.seed);
        let layers = spec
            .widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut weight = DMatrix::zeros(fan_out, fan_in);
                for i in 0..fan_out {
                    for j in 0..fan_in {
                        weight[(i, j)] = rng.uniform(-bound, bound);
                    }
                }
                let bias = DVector::from_fn(fan_out, |_, _| rng.uniform(-bound, bound));
                Layer { weight, bias }
            })
            .collect();
        Ok(Self {
            spec,
            layers,
            group: group.into(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    out.push(l.weight[(i, j)]);
                }
            }
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(DagrError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for i in 0..l.weight.nrows() {
                for j in 0..l.weight.ncols() {
                    l.weight[(i, j)] = flat[k];
                    k += 1;
                }
            }
            for v in l.bias.iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }

    /// `theta <- theta - eta * g`.
    pub fn apply_step(&mut self, grad: &FlatGradient, eta: f64) -> Result<()> {
        if grad.group != self.group {
            return Err(DagrError::GroupMismatch(self.group.clone(), grad.group.clone()));
        }
        let mut flat = self.flatten();
        if flat.len() != grad.len() {
            return Err(DagrError::ShapeMismatch("gradient length".into()));
        }
        for (p, g) in flat.iter_mut().zip(&grad.values) {
            *p -= eta * g;
        }
        self.set_flat(&flat)
    }

    fn check_input(&self, inputs: &DMatrix<f64>) -> Result<()> {
        if inputs.ncols() != self.spec.input_dim() {
            return Err(DagrError::ShapeMismatch(format!(
                "encoder {} expects {} input columns, got {}",
                self.group,
                self.spec.input_dim(),
                inputs.ncols()
            )));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(DagrError::NonFiniteInput("encoder input"));
        }
        Ok(())
    }

    /// Forward pass without recording.
    pub fn apply(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_input(inputs)?;
        let mut h = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = affine(&h, layer);
            if let Some(act) = self.spec.activations.get(l) {
                a.apply(|v| *v = act.apply(*v));
            }
            h = a;
        }
        Ok(h)
    }

    pub fn forward(&self, inputs: &DMatrix<f64>) -> Result<(EmbeddingBatch, Tape)> {
        self.check_input(inputs)?;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut h = inputs.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let a = affine(&h, layer);
            layer_inputs.push(h);
            h = match self.spec.activations.get(l) {
                Some(act) => a.map(|v| act.apply(v)),
                None => a.clone(),
            };
            pre_acts.push(a);
        }
        let out = EmbeddingBatch::new(h)?;
        let tape = Tape {
            group: self.group.clone(),
            weights: self.layers.iter().map(|l| l.weight.clone()).collect(),
            activations: self.spec.activations.clone(),
            layer_inputs,
            pre_acts,
            out_shape: (out.rows(), out.dim()),
            consumed: false,
        };
        Ok((out, tape))
    }
}

fn affine(h: &DMatrix<f64>, layer: &Layer) -> DMatrix<f64> {
    let mut a = h * layer.weight.transpose();
    for mut row in a.row_iter_mut() {
        row += layer.bias.transpose();
    }
    a
}

/// Forward intermediates of one minibatch.
#[derive(Debug, Clone)]
pub struct Tape {
    group: String,
    weights: Vec<DMatrix<f64>>,
    activations: Vec<Activation>,
    layer_inputs: Vec<DMatrix<f64>>,
    pre_acts: Vec<DMatrix<f64>>,
    out_shape: (usize, usize),
    consumed: bool,
}

impl Tape {
    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn backward(&mut self, upstream: &DMatrix<f64>) -> Result<FlatGradient> {
        let mut v = self.backward_many(&[upstream])?;
        Ok(v.pop().expect("one gradient"))
    }

    /// Parameter gradients for several upstream embedding gradients in one pass.
    pub fn backward_many(&mut self, upstreams: &[&DMatrix<f64>]) -> Result<Vec<FlatGradient>> {
        if self.consumed {
            return Err(DagrError::TapeConsumed);
        }
        for u in upstreams {
            if u.shape() != self.out_shape {
                return Err(DagrError::ShapeMismatch(format!(
                    "upstream {:?} vs output {:?}",
                    u.shape(),
                    self.out_shape
                )));
            }
        }
        self.consumed = true;
        Ok(upstreams.iter().map(|u| self.backprop(u)).collect())
    }

    fn backprop(&self, upstream: &DMatrix<f64>) -> FlatGradient {
        let n = self.weights.len();
        let mut per_layer: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n);
        let mut delta = upstream.clone();
        for l in (0..n).rev() {
            if let Some(act) = self.activations.get(l) {
                delta.zip_apply(&self.pre_acts[l], |d, a| *d *= act.grad(a));
            }
            let gw = delta.transpose() * &self.layer_inputs[l];
            let gb = DVector::from_iterator(
                delta.ncols(),
                delta.column_iter().map(|c| c.iter().sum::<f64>()),
            );
            if l > 0 {
                delta = &delta * &self.weights[l];
            }
            per_layer.push((gw, gb));
        }
        per_layer.reverse();
        let mut values = Vec::new();
        for (gw, gb) in per_layer {
            for i in 0..gw.nrows() {
                for j in 0..gw.ncols() {
                    values.push(gw[(i, j)]);
                }
            }
            values.extend(gb.iter());
        }
        FlatGradient::new(self.group.clone(), values)
    }
}

/// Mean softmax cross-entropy of `z W^T` and its exact gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CeResult {
    pub value: f64,
    pub grad_z: DMatrix<f64>,
    pub grad_w: DMatrix<f64>,
}

/// `w` is `K x d`, `z` is `B x d`, labels in `0..K`.
pub fn ce_loss_and_grad(w: &DMatrix<f64>, z: &DMatrix<f64>, labels: &[usize]) -> Result<CeResult> {
    let k = w.nrows();
    if w.ncols() != z.ncols() {
        return Err(DagrError::ShapeMismatch(format!(
            "head has {} columns, embeddings {}",
            w.ncols(),
            z.ncols()
        )));
    }
    if labels.len() != z.nrows() {
        return Err(DagrError::DimensionMismatch {
            expected: z.nrows(),
            got: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(DagrError::LabelOutOfRange {
            label: bad,
            classes: k,
        });
    }
    let b = z.nrows();
    let logits = z * w.transpose();
    let mut dlogits = DMatrix::zeros(b, k);
    let mut total = 0.0;
    for i in 0..b {
        let row = logits.row(i);
        let (arg, m) = row
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let mut rest = 0.0;
        for j in 0..k {
            if j != arg {
                rest += (row[j] - m).exp();
            }
        }
        // -log p_y = log(sum exp(l - m)) + m - l_y
        total += rest.ln_1p() + (m - row[labels[i]]);
        let denom = 1.0 + rest;
        for j in 0..k {
            let p = (row[j] - m).exp() / denom;
            dlogits[(i, j)] = (p - if j == labels[i] { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(CeResult {
        value: total / b as f64,
        grad_z: &dlogits * w,
        grad_w: dlogits.transpose() * z,
    })
}

/// Index of the largest logit per row, ties to the lowest index.
pub fn predict(w: &DMatrix<f64>, z: &DMatrix<f64>) -> Vec<usize> {
    let logits = z * w.transpose();
    logits
        .row_iter()
        .map(|row| {
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences of its value, coordinate by coordinate, using
/// `|a - n| / max(1e-8, |a| + |n|)`.
///
/// The numeric derivative uses Ridders' extrapolation: central differences
/// at `step`, `step / 1.4`, ... feed a Neville tableau and the entry with the
/// smallest internal error estimate wins. A single fixed step cannot reach
/// `1e-5` relative accuracy everywhere, since round-off dominates on tiny
/// gradients and truncation on sharply curved ones (rows of small norm
/// under normalization).
pub fn finite_diff_check<F>(f: F, params: &[f64], step: f64) -> GradCheck
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (_, analytic) = f(params);
    let mut x = params.to_vec();
    let mut worst = (0.0, 0);
    for i in 0..params.len() {
        let numeric = ridders(
            |h| {
                let orig = x[i];
                x[i] = orig + h;
                let fp = f(&x).0;
                x[i] = orig - h;
                let fm = f(&x).0;
                x[i] = orig;
                (fp - fm) / (2.0 * h)
            },
            step,
        );
        let a = analytic[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        if rel > worst.0 || rel.is_nan() {
            worst = (if rel.is_nan() { f64::INFINITY } else { rel }, i);
        }
    }
    GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        coordinates: params.len(),
    }
}

fn ridders(mut central: impl FnMut(f64) -> f64, step: f64) -> f64 {
    const SHRINK: f64 = 1.4;
    const TAB: usize = 10;
    let mut table = [[0.0; TAB]; TAB];
    let mut h = step;
    table[0][0] = central(h);
    let (mut best, mut err) = (table[0][0], f64::INFINITY);
    for i in 1..TAB {
        h /= SHRINK;
        table[0][i] = central(h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        // higher orders stopped helping: round-off has taken over
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    best
}
