//! A one-hidden-layer tanh network with hand-derived gradients.
//!
//! One encoder feeds either a single logistic head or one head per group;
//! optional per-class adversaries predict the group from the hidden layer.
//! All parameters live in one flat vector so that optimizers, finite
//! differences and serialization treat them uniformly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_inputs: usize,
    pub hidden: usize,
    pub n_heads: usize,
    /// One adversary per class value, or none.
    pub n_adversaries: usize,
    /// Output width of each adversary (number of groups).
    pub adv_groups: usize,
}

impl ModelShape {
    pub fn single(n_inputs: usize, hidden: usize) -> Self {
        ModelShape {
            n_inputs,
            hidden,
            n_heads: 1,
            n_adversaries: 0,
            adv_groups: 0,
        }
    }

    fn w1(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.n_inputs
    }

    fn b1(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.n_inputs;
        s..s + self.hidden
    }

    fn encoder_len(&self) -> usize {
        self.hidden * (self.n_inputs + 1)
    }

    /// `[v (hidden), c]` of head `r`.
    fn head(&self, r: usize) -> std::ops::Range<usize> {
        let s = self.encoder_len() + r * (self.hidden + 1);
        s..s + self.hidden + 1
    }

    fn heads_end(&self) -> usize {
        self.encoder_len() + self.n_heads * (self.hidden + 1)
    }

    /// `[W (adv_groups × hidden), b (adv_groups)]` of adversary `c`.
    fn adversary(&self, c: usize) -> std::ops::Range<usize> {
        let len = self.adv_groups * (self.hidden + 1);
        let s = self.heads_end() + c * len;
        s..s + len
    }

    pub fn n_params(&self) -> usize {
        self.heads_end() + self.n_adversaries * self.adv_groups * (self.hidden + 1)
    }
}

/// Flat parameter vector with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        ModelParams {
            shape,
            data: vec![0.0; shape.n_params()],
        }
    }

    /// Glorot-uniform weights and zero biases.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::zeros(shape);
        let h = shape.hidden;
        let lim = (6.0 / (shape.n_inputs + h) as f64).sqrt();
        for v in &mut p.data[shape.w1()] {
            *v = rng.random_range(-lim..lim);
        }
        let lim = (6.0 / (h + 1) as f64).sqrt();
        for r in 0..shape.n_heads {
            let range = shape.head(r);
            for v in &mut p.data[range.start..range.start + h] {
                *v = rng.random_range(-lim..lim);
            }
        }
        if shape.adv_groups > 0 {
            let lim = (6.0 / (h + shape.adv_groups) as f64).sqrt();
            for c in 0..shape.n_adversaries {
                let range = shape.adversary(c);
                for v in &mut p.data[range.start..range.start + shape.adv_groups * h] {
                    *v = rng.random_range(-lim..lim);
                }
            }
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn w1(&self) -> &[f64] {
        &self.data[self.shape.w1()]
    }

    fn b1(&self) -> &[f64] {
        &self.data[self.shape.b1()]
    }

    fn head(&self, r: usize) -> (&[f64], f64) {
        let s = &self.data[self.shape.head(r)];
        (&s[..self.shape.hidden], s[self.shape.hidden])
    }

    fn adversary(&self, c: usize) -> (&[f64], &[f64]) {
        let s = &self.data[self.shape.adversary(c)];
        s.split_at(self.shape.adv_groups * self.shape.hidden)
    }

    fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    /// Mask of encoder parameters (input→hidden weights and biases).
    pub fn is_encoder(&self, idx: usize) -> bool {
        idx < self.shape.encoder_len()
    }

    pub fn is_adversary(&self, idx: usize) -> bool {
        idx >= self.shape.heads_end()
    }

    /// Sum of two gradient vectors.
    pub fn plus(&self, other: &ModelParams) -> ModelParams {
        let mut out = self.clone();
        out.add_scaled(other, 1.0);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: ModelParams = serde_json::from_str(s)?;
        if p.data.len() != p.shape.n_params() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a shape with {} parameters",
                p.data.len(),
                p.shape.n_params()
            )));
        }
        Ok(p)
    }
}

/// Features `[B × d]` row-major with labels and group ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_inputs: usize,
    pub features: Vec<f64>,
    pub y: Vec<u8>,
    pub groups: Vec<usize>,
}

impl Batch {
    pub fn new(n_inputs: usize, features: Vec<f64>, y: Vec<u8>, groups: Vec<usize>) -> Result<Self> {
        let b = y.len();
        if b == 0 || features.len() != b * n_inputs || groups.len() != b {
            return Err(Error::DimensionMismatch(format!(
                "batch of {b} labels, {} features for {n_inputs} inputs, {} groups",
                features.len(),
                groups.len()
            )));
        }
        Ok(Batch {
            n_inputs,
            features,
            y,
            groups,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_inputs..(i + 1) * self.n_inputs]
    }
}

/// Which head each sample's classification loss flows through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadRouting {
    /// Every sample uses head 0.
    Single,
    /// Sample `i` uses head `groups[i]`.
    PerGroup,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `[B × hidden]`
    pub hidden: Vec<f64>,
    /// `[B × n_heads]`
    pub logits: Vec<f64>,
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Forward> {
    let sh = params.shape;
    if batch.n_inputs != sh.n_inputs {
        return Err(Error::DimensionMismatch(format!(
            "model expects {} inputs, batch has {}",
            sh.n_inputs, batch.n_inputs
        )));
    }
    let b = batch.len();
    let h = sh.hidden;
    let (w1, b1) = (params.w1(), params.b1());
    let mut hidden = vec![0.0; b * h];
    let mut logits = vec![0.0; b * sh.n_heads];
    for i in 0..b {
        let x = batch.row(i);
        let hi = &mut hidden[i * h..(i + 1) * h];
        for (u, out) in hi.iter_mut().enumerate() {
            let w = &w1[u * sh.n_inputs..(u + 1) * sh.n_inputs];
            let z: f64 = b1[u] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
            *out = z.tanh();
        }
        for r in 0..sh.n_heads {
            let (v, c) = params.head(r);
            logits[i * sh.n_heads + r] = c + v.iter().zip(hi.iter()).map(|(v, h)| v * h).sum::<f64>();
        }
    }
    Ok(Forward { hidden, logits })
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn route(routing: HeadRouting, batch: &Batch, i: usize, n_heads: usize) -> Result<usize> {
    match routing {
        HeadRouting::Single => Ok(0),
        HeadRouting::PerGroup => {
            let g = batch.groups[i];
            if g >= n_heads {
                return Err(Error::DimensionMismatch(format!("group {g} but {n_heads} heads")));
            }
            Ok(g)
        }
    }
}

/// Backpropagates `d loss / d hidden` (plus any head gradients already in
/// `grads`) into the encoder.
fn backprop_encoder(params: &ModelParams, batch: &Batch, fwd: &Forward, dhidden: &[f64], grads: &mut ModelParams) {
    let sh = params.shape;
    let h = sh.hidden;
    let (w1r, b1r) = (sh.w1(), sh.b1());
    for i in 0..batch.len() {
        let x = batch.row(i);
        for u in 0..h {
            let hu = fwd.hidden[i * h + u];
            let da = dhidden[i * h + u] * (1.0 - hu * hu);
            if da == 0.0 {
                continue;
            }
            grads.data[b1r.start + u] += da;
            let row = &mut grads.data[w1r.start + u * sh.n_inputs..w1r.start + (u + 1) * sh.n_inputs];
            for (g, xv) in row.iter_mut().zip(x) {
                *g += da * xv;
            }
        }
    }
}

/// Weighted binary cross-entropy `Σ_i w_i ℓ_i / B` and its exact gradient.
pub fn bce_loss_and_grad(
    params: &ModelParams,
    batch: &Batch,
    sample_weights: &[f64],
    routing: HeadRouting,
) -> Result<(f64, ModelParams)> {
    if sample_weights.len() != batch.len() {
        return Err(Error::DimensionMismatch("one weight per sample required".into()));
    }
    if sample_weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::OutOfRange("sample weights must be ≥ 0".into()));
    }
    let sh = params.shape;
    let h = sh.hidden;
    let fwd = forward(params, batch)?;
    let inv_b = 1.0 / batch.len() as f64;
    let mut grads = ModelParams::zeros(sh);
    let mut dhidden = vec![0.0; batch.len() * h];
    let mut loss = 0.0;
    for i in 0..batch.len() {
        let r = route(routing, batch, i, sh.n_heads)?;
        let z = fwd.logits[i * sh.n_heads + r];
        let y = batch.y[i] as f64;
        let w = sample_weights[i] * inv_b;
        loss += w * (softplus(z) - y * z);
        let dz = w * (sigmoid(z) - y);
        if dz == 0.0 {
            continue;
        }
        let (v, _) = params.head(r);
        let head = sh.head(r);
        for u in 0..h {
            grads.data[head.start + u] += dz * fwd.hidden[i * h + u];
            dhidden[i * h + u] += dz * v[u];
        }
        grads.data[head.start + h] += dz;
    }
    backprop_encoder(params, batch, &fwd, &dhidden, &mut grads);
    Ok((loss, grads))
}

/// Group-prediction loss of the per-class adversaries: for each class `c`,
/// mean softmax cross-entropy of adversary `c` over the batch samples with
/// `y = c`, summed over classes. The gradient covers the adversaries and,
/// through the hidden layer, the encoder.
pub fn adversary_loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, ModelParams)> {
    let sh = params.shape;
    if sh.n_adversaries == 0 || sh.adv_groups == 0 {
        return Err(Error::DimensionMismatch("model has no adversaries".into()));
    }
    let h = sh.hidden;
    let k = sh.adv_groups;
    let fwd = forward(params, batch)?;
    let mut grads = ModelParams::zeros(sh);
    let mut dhidden = vec![0.0; batch.len() * h];
    let mut loss = 0.0;
    let mut logits = vec![0.0; k];
    for c in 0..sh.n_adversaries {
        let members: Vec<usize> = (0..batch.len()).filter(|&i| batch.y[i] as usize == c).collect();
        if members.is_empty() {
            continue;
        }
        let scale = 1.0 / members.len() as f64;
        let (wmat, bias) = params.adversary(c);
        let range = sh.adversary(c);
        for &i in &members {
            let g = batch.groups[i];
            if g >= k {
                return Err(Error::DimensionMismatch(format!("group {g} but {k} adversary outputs")));
            }
            let hi = &fwd.hidden[i * h..(i + 1) * h];
            for (o, out) in logits.iter_mut().enumerate() {
                *out = bias[o] + wmat[o * h..(o + 1) * h].iter().zip(hi).map(|(w, x)| w * x).sum::<f64>();
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            loss += scale * (lse - logits[g]);
            for o in 0..k {
                let d = scale * ((logits[o] - lse).exp() - if o == g { 1.0 } else { 0.0 });
                for u in 0..h {
                    grads.data[range.start + o * h + u] += d * hi[u];
                    dhidden[i * h + u] += d * wmat[o * h + u];
                }
                grads.data[range.start + k * h + o] += d;
            }
        }
    }
    backprop_encoder(params, batch, &fwd, &dhidden, &mut grads);
    Ok((loss, grads))
}

/// Gradient reversal: the adversaries keep their own gradient while the
/// encoder receives it scaled by `−mu`. Head entries are zeroed.
pub fn grad_reversal_backward(adversary_grads: &ModelParams, mu: f64) -> Result<ModelParams> {
    if !(mu >= 0.0) {
        return Err(Error::OutOfRange(format!("mu = {mu}")));
    }
    let mut out = adversary_grads.clone();
    for (idx, g) in out.data.iter_mut().enumerate() {
        if adversary_grads.is_encoder(idx) {
            *g *= -mu;
        } else if !adversary_grads.is_adversary(idx) {
            *g = 0.0;
        }
    }
    Ok(out)
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(n_params: usize) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One Adam update with decoupled weight decay.
pub fn adam_step(params: &mut ModelParams, grads: &ModelParams, state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::OutOfRange(format!("lr = {lr}")));
    }
    if grads.data.len() != params.data.len() || state.m.len() != params.data.len() {
        return Err(Error::DimensionMismatch("gradient / optimizer state size".into()));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - AdamState::BETA1.powi(t);
    let c2 = 1.0 - AdamState::BETA2.powi(t);
    for (((p, &g), m), v) in params.data.iter_mut().zip(&grads.data).zip(&mut state.m).zip(&mut state.v) {
        *m = AdamState::BETA1 * *m + (1.0 - AdamState::BETA1) * g;
        *v = AdamState::BETA2 * *v + (1.0 - AdamState::BETA2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * (m_hat / (v_hat.sqrt() + AdamState::EPS) + weight_decay * *p);
    }
    Ok(())
}
