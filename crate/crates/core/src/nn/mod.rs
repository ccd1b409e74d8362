//! A small fully-connected noise predictor with hand-written backprop and a
//! low-rank residual adapter.
//!
//! Inputs are the concatenation of the state `x`, sinusoidal features of
//! `t`, a one-hot condition, and the six view coefficients. Each dense layer
//! computes `(W + s·A·B) h + b`; the adapter factors `A` (out × r) and `B`
//! (r × in) are the only trainable parameters during bridge training.

mod snapshot;
mod train;

pub use snapshot::{load_snapshot, save_snapshot, Snapshot, SnapshotManifest};
pub use train::{
    optimal_denoiser_mse, train_bridge_score, train_dsm, Adam, BridgeEndpointSpec, BridgeHyper,
    BridgeTrainer, BridgeTuple, DsmHyper, TrainReport, DIVERGENCE_FACTOR, DIVERGENCE_PATIENCE,
};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::check_dim;
use crate::gmm::Condition;
use crate::render::ViewTransform;
use crate::rng::{standard_normal, Rng};
use crate::score::ScoreModel;
use crate::{Error, Result};

pub const TIME_FREQUENCIES: usize = 8;
pub const VIEW_FEATURES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

/// How `(x, t, y, c)` is laid out in the network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputLayout {
    pub data_dim: usize,
    pub n_conditions: usize,
}

impl InputLayout {
    pub fn width(&self) -> usize {
        self.data_dim + 2 * TIME_FREQUENCIES + self.n_conditions + VIEW_FEATURES
    }

    pub fn encode(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        check_dim("network input", self.data_dim, x.len())?;
        let mut out = Vec::with_capacity(self.width());
        out.extend_from_slice(x);
        for k in 0..TIME_FREQUENCIES {
            let w = std::f64::consts::PI * (k + 1) as f64;
            out.push((w * t).sin());
            out.push((w * t).cos());
        }
        let start = out.len();
        out.resize(start + self.n_conditions, 0.0);
        if let Condition::Class(k) = y {
            if k >= self.n_conditions {
                return Err(Error::domain(format!(
                    "condition {k} outside the network's {} classes",
                    self.n_conditions
                )));
            }
            out[start + k] = 1.0;
        }
        out.extend_from_slice(&view.encode());
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `n_out x n_in`.
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Dense {
    fn random(n_in: usize, n_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let sd = gain / (n_in as f64).sqrt();
        Self {
            n_in,
            n_out,
            w: (0..n_in * n_out).map(|_| sd * standard_normal(rng)).collect(),
            b: vec![0.0; n_out],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layout: InputLayout,
    pub activation: Activation,
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `hidden` lists the hidden widths; input and output widths follow from
    /// the layout.
    pub fn random(layout: InputLayout, hidden: &[usize], activation: Activation, rng: &mut Rng) -> Result<Self> {
        if hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be positive"));
        }
        let mut widths = vec![layout.width()];
        widths.extend_from_slice(hidden);
        widths.push(layout.data_dim);
        let n = widths.len() - 1;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| Dense::random(w[0], w[1], if l + 1 == n { 0.5 } else { 1.0 }, rng))
            .collect();
        Ok(Self {
            layout,
            activation,
            layers,
        })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].n_in];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("mlp parameters", self.param_count(), flat.len())?;
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Hex SHA-256 of the parameter bytes.
    pub fn fingerprint(&self) -> String {
        fingerprint(&self.flat_params())
    }
}

pub(crate) fn fingerprint(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRank {
    /// Row-major `n_out x rank`.
    pub a: Vec<f64>,
    /// Row-major `rank x n_in`.
    pub b: Vec<f64>,
}

/// Low-rank residuals on every layer whose input and output widths both
/// exceed the rank; narrower layers (typically the output) stay unadapted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub rank: usize,
    pub scale: f64,
    pub layers: Vec<Option<LowRank>>,
}

impl AdapterParams {
    /// `A = 0`, `B ~ N(0, 1/n_in)` on each adaptable layer of `base`.
    pub fn new(base: &Mlp, rank: usize, scale: f64, rng: &mut Rng) -> Result<Self> {
        let adaptable = |l: &Dense| rank < l.n_in.min(l.n_out);
        if rank == 0 || !base.layers.iter().any(adaptable) {
            let widest = base.layers.iter().map(|l| l.n_in.min(l.n_out)).max().unwrap_or(0);
            return Err(Error::config(format!(
                "adapter rank {rank} must lie in 1..{widest}"
            )));
        }
        let layers = base
            .layers
            .iter()
            .map(|l| {
                adaptable(l).then(|| {
                    let sd = 1.0 / (l.n_in as f64).sqrt();
                    LowRank {
                        a: vec![0.0; l.n_out * rank],
                        b: (0..rank * l.n_in).map(|_| sd * standard_normal(rng)).collect(),
                    }
                })
            })
            .collect();
        Ok(Self {
            rank,
            scale,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flatten().map(|l| l.a.len() + l.b.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.layers.iter().flatten() {
            out.extend_from_slice(&l.a);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_dim("adapter parameters", self.param_count(), flat.len())?;
        let mut off = 0;
        for l in self.layers.iter_mut().flatten() {
            let na = l.a.len();
            l.a.copy_from_slice(&flat[off..off + na]);
            off += na;
            let nb = l.b.len();
            l.b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    fn check_against(&self, base: &Mlp) -> Result<()> {
        check_dim("adapter layers", base.layers.len(), self.layers.len())?;
        for (l, lr) in base.layers.iter().zip(&self.layers) {
            let Some(lr) = lr else { continue };
            check_dim("adapter A", l.n_out * self.rank, lr.a.len())?;
            check_dim("adapter B", self.rank * l.n_in, lr.b.len())?;
        }
        Ok(())
    }
}

/// Activations kept for the backward pass.
struct Trace {
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Vec<f64>>,
    /// `B h` per adapted layer.
    down: Vec<Option<Vec<f64>>>,
}

fn matvec(w: &[f64], n_out: usize, n_in: usize, h: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(n_in)).take(n_out) {
        *o += row.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn forward_trace(model: &Mlp, adapter: Option<&AdapterParams>, input: &[f64]) -> (Vec<f64>, Trace) {
    let n = model.layers.len();
    let mut trace = Trace {
        inputs: Vec::with_capacity(n),
        pre: Vec::with_capacity(n),
        down: Vec::with_capacity(n),
    };
    let mut h = input.to_vec();
    for (li, layer) in model.layers.iter().enumerate() {
        let mut z = layer.b.clone();
        matvec(&layer.w, layer.n_out, layer.n_in, &h, &mut z);
        let mut down = None;
        if let Some((ad, Some(lr))) = adapter.map(|ad| (ad, ad.layers[li].as_ref())) {
            let mut d = vec![0.0; ad.rank];
            matvec(&lr.b, ad.rank, layer.n_in, &h, &mut d);
            let mut up = vec![0.0; layer.n_out];
            matvec(&lr.a, layer.n_out, ad.rank, &d, &mut up);
            for (zi, ui) in z.iter_mut().zip(&up) {
                *zi += ad.scale * ui;
            }
            down = Some(d);
        }
        trace.down.push(down);
        let next = if li + 1 < n {
            z.iter().map(|&v| model.activation.apply(v)).collect()
        } else {
            z.clone()
        };
        trace.inputs.push(std::mem::replace(&mut h, next));
        trace.pre.push(z);
    }
    (h, trace)
}

/// Network output for an already-encoded input.
pub fn forward_encoded(model: &Mlp, adapter: Option<&AdapterParams>, input: &[f64]) -> Result<Vec<f64>> {
    check_dim("encoded input", model.layers[0].n_in, input.len())?;
    if let Some(ad) = adapter {
        ad.check_against(model)?;
    }
    Ok(forward_trace(model, adapter, input).0)
}

pub fn mlp_forward(
    model: &Mlp,
    adapter: Option<&AdapterParams>,
    x: &[f64],
    t: f64,
    y: Condition,
    view: &ViewTransform,
) -> Result<Vec<f64>> {
    let input = model.layout.encode(x, t, y, view)?;
    forward_encoded(model, adapter, &input)
}

/// One regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub x: Vec<f64>,
    pub t: f64,
    pub y: Condition,
    pub view: ViewTransform,
    pub target: Vec<f64>,
}

/// Which parameter group receives gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Base,
    Adapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub loss: f64,
    /// Same layout as [`Mlp::flat_params`]; `None` when frozen.
    pub base: Option<Vec<f64>>,
    /// Same layout as [`AdapterParams::flat_params`]; `None` when frozen.
    pub adapter: Option<Vec<f64>>,
}

/// Loss `mean_i ||f(x_i) - target_i||²` and its gradient with respect to
/// the trainable group.
pub fn mlp_grad(
    model: &Mlp,
    adapter: Option<&AdapterParams>,
    batch: &[TrainingExample],
    trainable: Trainable,
) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::domain("gradient of an empty batch"));
    }
    if let Some(ad) = adapter {
        ad.check_against(model)?;
    }
    if trainable == Trainable::Adapter && adapter.is_none() {
        return Err(Error::config("adapter gradients requested without an adapter"));
    }
    let n_layers = model.layers.len();
    let inv_n = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut g_w: Vec<Vec<f64>> = Vec::new();
    let mut g_b: Vec<Vec<f64>> = Vec::new();
    let mut g_a: Vec<Vec<f64>> = Vec::new();
    let mut g_bb: Vec<Vec<f64>> = Vec::new();
    match trainable {
        Trainable::Base => {
            g_w = model.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
            g_b = model.layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
        }
        Trainable::Adapter => {
            let ad = adapter.expect("checked above");
            // unadapted layers keep empty buffers so the flat layout matches
            g_a = ad.layers.iter().map(|l| vec![0.0; l.as_ref().map_or(0, |l| l.a.len())]).collect();
            g_bb = ad.layers.iter().map(|l| vec![0.0; l.as_ref().map_or(0, |l| l.b.len())]).collect();
        }
    }

    for ex in batch {
        check_dim("regression target", model.layout.data_dim, ex.target.len())?;
        let input = model.layout.encode(&ex.x, ex.t, ex.y, &ex.view)?;
        let (out, trace) = forward_trace(model, adapter, &input);
        let mut delta: Vec<f64> = out
            .iter()
            .zip(&ex.target)
            .map(|(o, y)| {
                loss += (o - y) * (o - y) * inv_n;
                2.0 * (o - y) * inv_n
            })
            .collect();
        for li in (0..n_layers).rev() {
            let layer = &model.layers[li];
            if li + 1 < n_layers {
                for (d, z) in delta.iter_mut().zip(&trace.pre[li]) {
                    *d *= model.activation.derivative(*z);
                }
            }
            let h = &trace.inputs[li];
            match trainable {
                Trainable::Base => {
                    for (o, d) in delta.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        let row = &mut g_w[li][o * layer.n_in..(o + 1) * layer.n_in];
                        for (g, hi) in row.iter_mut().zip(h) {
                            *g += d * hi;
                        }
                        g_b[li][o] += d;
                    }
                }
                Trainable::Adapter => {
                    let ad = adapter.expect("checked above");
                    if let (Some(lr), Some(down)) = (&ad.layers[li], &trace.down[li]) {
                    let r = ad.rank;
                    // dA = s δ (B h)ᵀ
                    for (o, d) in delta.iter().enumerate() {
                        for k in 0..r {
                            g_a[li][o * r + k] += ad.scale * d * down[k];
                        }
                    }
                    // dB = s (Aᵀ δ) hᵀ
                    for k in 0..r {
                        let at_d: f64 = (0..layer.n_out).map(|o| lr.a[o * r + k] * delta[o]).sum();
                        if at_d == 0.0 {
                            continue;
                        }
                        let row = &mut g_bb[li][k * layer.n_in..(k + 1) * layer.n_in];
                        for (g, hi) in row.iter_mut().zip(h) {
                            *g += ad.scale * at_d * hi;
                        }
                    }
                    }
                }
            }
            if li == 0 {
                break;
            }
            // δ_prev = Wᵀ δ + s Bᵀ (Aᵀ δ)
            let mut prev = vec![0.0; layer.n_in];
            for (o, d) in delta.iter().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                for (p, w) in prev.iter_mut().zip(row) {
                    *p += w * d;
                }
            }
            if let Some((ad, Some(lr))) = adapter.map(|ad| (ad, ad.layers[li].as_ref())) {
                let r = ad.rank;
                for k in 0..r {
                    let at_d: f64 = (0..layer.n_out).map(|o| lr.a[o * r + k] * delta[o]).sum();
                    if at_d == 0.0 {
                        continue;
                    }
                    let row = &lr.b[k * layer.n_in..(k + 1) * layer.n_in];
                    for (p, bv) in prev.iter_mut().zip(row) {
                        *p += ad.scale * at_d * bv;
                    }
                }
            }
            delta = prev;
        }
    }

    let interleave = |first: Vec<Vec<f64>>, second: Vec<Vec<f64>>| {
        first
            .into_iter()
            .zip(second)
            .flat_map(|(a, b)| a.into_iter().chain(b))
            .collect::<Vec<f64>>()
    };
    Ok(match trainable {
        Trainable::Base => Gradients {
            loss,
            base: Some(interleave(g_w, g_b)),
            adapter: None,
        },
        Trainable::Adapter => Gradients {
            loss,
            base: None,
            adapter: Some(interleave(g_a, g_bb)),
        },
    })
}

/// Base network plus optional adapter, usable wherever a noise predictor is.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpScore {
    pub base: Mlp,
    pub adapter: Option<AdapterParams>,
}

impl ScoreModel for MlpScore {
    fn dim(&self) -> usize {
        self.base.layout.data_dim
    }

    fn epsilon(&self, x: &[f64], t: f64, y: Condition, view: &ViewTransform) -> Result<Vec<f64>> {
        mlp_forward(&self.base, self.adapter.as_ref(), x, t, y, view)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    fn small_model(seed: u64) -> (Mlp, AdapterParams) {
        let layout = InputLayout {
            data_dim: 2,
            n_conditions: 2,
        };
        let mut rng = rng_for(seed, &[]);
        let model = Mlp::random(layout, &[8, 8], Activation::Tanh, &mut rng).unwrap();
        let mut ad = AdapterParams::new(&model, 2, 0.7, &mut rng).unwrap();
        // non-zero A so that both factors receive gradient
        for l in ad.layers.iter_mut().flatten() {
            for a in &mut l.a {
                *a = 0.3 * standard_normal(&mut rng);
            }
        }
        (model, ad)
    }

    fn batch(seed: u64, n: usize) -> Vec<TrainingExample> {
        let mut rng = rng_for(seed, &[1]);
        (0..n)
            .map(|i| TrainingExample {
                x: vec![standard_normal(&mut rng), standard_normal(&mut rng)],
                t: 0.1 + 0.8 * (i as f64 / n as f64),
                y: if i % 3 == 0 {
                    Condition::Unconditional
                } else {
                    Condition::Class(i % 2)
                },
                view: ViewTransform::similarity(0.5, 0.3 * i as f64, [0.1, -0.2]),
                target: vec![standard_normal(&mut rng), standard_normal(&mut rng)],
            })
            .collect()
    }

    fn loss_of(model: &Mlp, ad: Option<&AdapterParams>, b: &[TrainingExample]) -> f64 {
        b.iter()
            .map(|ex| {
                let o = mlp_forward(model, ad, &ex.x, ex.t, ex.y, &ex.view).unwrap();
                o.iter().zip(&ex.target).map(|(a, y)| (a - y).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / b.len() as f64
    }

    fn assert_close(analytic: f64, fd: f64, ctx: &str) {
        let scale = analytic.abs().max(fd.abs());
        if scale < 1e-7 {
            assert!((analytic - fd).abs() < 1e-9, "{ctx}: {analytic} vs {fd}");
        } else {
            assert!((analytic - fd).abs() / scale < 1e-5, "{ctx}: {analytic} vs {fd}");
        }
    }

    #[test]
    fn base_gradient_matches_finite_difference() {
        for act in [Activation::Tanh, Activation::Silu] {
            let (mut model, ad) = small_model(3);
            model.activation = act;
            let b = batch(4, 5);
            let g = mlp_grad(&model, Some(&ad), &b, Trainable::Base).unwrap();
            let grad = g.base.unwrap();
            let flat = model.flat_params();
            for i in 0..flat.len() {
                let mut p = flat.clone();
                p[i] += 1e-5;
                let mut m1 = model.clone();
                m1.set_flat_params(&p).unwrap();
                p[i] -= 2e-5;
                let mut m2 = model.clone();
                m2.set_flat_params(&p).unwrap();
                let fd = (loss_of(&m1, Some(&ad), &b) - loss_of(&m2, Some(&ad), &b)) / 2e-5;
                assert_close(grad[i], fd, &format!("{act:?} base[{i}]"));
            }
        }
    }

    #[test]
    fn adapter_gradient_matches_finite_difference() {
        let (model, ad) = small_model(5);
        let b = batch(6, 4);
        let g = mlp_grad(&model, Some(&ad), &b, Trainable::Adapter).unwrap();
        assert!(g.base.is_none());
        let grad = g.adapter.unwrap();
        let flat = ad.flat_params();
        for i in 0..flat.len() {
            let mut p = flat.clone();
            p[i] += 1e-5;
            let mut a1 = ad.clone();
            a1.set_flat_params(&p).unwrap();
            p[i] -= 2e-5;
            let mut a2 = ad.clone();
            a2.set_flat_params(&p).unwrap();
            let fd = (loss_of(&model, Some(&a1), &b) - loss_of(&model, Some(&a2), &b)) / 2e-5;
            assert_close(grad[i], fd, &format!("adapter[{i}]"));
        }
    }

    #[test]
    fn zero_residual_gives_zero_gradient() {
        let (model, ad) = small_model(7);
        let mut b = batch(8, 3);
        for ex in &mut b {
            ex.target = mlp_forward(&model, Some(&ad), &ex.x, ex.t, ex.y, &ex.view).unwrap();
        }
        let g = mlp_grad(&model, Some(&ad), &b, Trainable::Base).unwrap();
        assert_eq!(g.loss, 0.0);
        assert!(g.base.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_initialised_adapter_is_transparent() {
        let layout = InputLayout {
            data_dim: 3,
            n_conditions: 1,
        };
        let mut rng = rng_for(9, &[]);
        let model = Mlp::random(layout, &[16, 16], Activation::Silu, &mut rng).unwrap();
        let ad = AdapterParams::new(&model, 4, 1.0, &mut rng).unwrap();
        let v = ViewTransform::similarity(0.3, 2.0, [0.5, 0.5]);
        let x = [0.2, -1.0, 0.7];
        let a = mlp_forward(&model, None, &x, 0.4, Condition::Class(0), &v).unwrap();
        let b = mlp_forward(&model, Some(&ad), &x, 0.4, Condition::Class(0), &v).unwrap();
        assert_eq!(a, b);
        let c = mlp_forward(&model, Some(&ad), &x, 0.4, Condition::Class(0), &v).unwrap();
        assert_eq!(b, c);
    }

    #[test]
    fn zero_weights_collapse_to_final_bias() {
        let layout = InputLayout {
            data_dim: 2,
            n_conditions: 0,
        };
        let mut model = Mlp::random(layout, &[4], Activation::Tanh, &mut rng_for(0, &[])).unwrap();
        for l in &mut model.layers {
            l.w.iter_mut().for_each(|w| *w = 0.0);
            l.b.iter_mut().for_each(|b| *b = 0.5);
        }
        let out = mlp_forward(&model, None, &[3.0, -2.0], 0.2, Condition::Unconditional, &ViewTransform::identity()).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn adapter_rank_bounds() {
        let (model, _) = small_model(1);
        let mut rng = rng_for(0, &[]);
        assert!(AdapterParams::new(&model, 0, 1.0, &mut rng).is_err());
        assert!(AdapterParams::new(&model, 2, 1.0, &mut rng).is_ok());
        assert!(AdapterParams::new(&model, 8, 1.0, &mut rng).is_err());
    }

    #[test]
    fn encoding_rejects_unknown_condition() {
        let layout = InputLayout {
            data_dim: 1,
            n_conditions: 2,
        };
        assert!(layout.encode(&[0.0], 0.5, Condition::Class(2), &ViewTransform::identity()).is_err());
        let e = layout.encode(&[0.0], 0.5, Condition::Class(1), &ViewTransform::identity()).unwrap();
        assert_eq!(e.len(), layout.width());
    }
}
