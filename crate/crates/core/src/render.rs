//! Differentiable 2D generators.
//!
//! Canvas coordinates are centred: pixel `(row i, col j)` of an `H x W`
//! canvas sits at `p = (j + 0.5 - W/2, i + 0.5 - H/2)`. A view maps `p` to
//! scene coordinates `q = A p + b`; generators are evaluated at `q`.
//!
//! Splat compositing is additive: each pixel is the background plus the
//! sum of every splat's `opacity * intensity * exp(-d'Σ⁻¹d / 2)` with
//! `d = q - center`. No depth ordering is involved, so the Jacobian is
//! exact and cheap.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::check_dim;
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// Row-major 2x2 linear part.
    pub linear: [[f64; 2]; 2],
    pub translation: [f64; 2],
}

impl Default for ViewTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ViewTransform {
    pub fn identity() -> Self {
        Self {
            linear: [[1.0, 0.0], [0.0, 1.0]],
            translation: [0.0, 0.0],
        }
    }

    /// `scale * R(rotation)` followed by `translation`.
    pub fn similarity(scale: f64, rotation: f64, translation: [f64; 2]) -> Self {
        let (s, c) = rotation.sin_cos();
        Self {
            linear: [[scale * c, -scale * s], [scale * s, scale * c]],
            translation,
        }
    }

    pub fn det(&self) -> f64 {
        self.linear[0][0] * self.linear[1][1] - self.linear[0][1] * self.linear[1][0]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.linear.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !ok || self.det().abs() <= 1e-6 {
            return Err(Error::domain(format!(
                "degenerate view transform (det {})",
                self.det()
            )));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let a = &self.linear;
        [
            a[0][0] * p[0] + a[0][1] * p[1] + self.translation[0],
            a[1][0] * p[0] + a[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Result<Self> {
        self.validate()?;
        let d = self.det();
        let a = &self.linear;
        let inv = [[a[1][1] / d, -a[0][1] / d], [-a[1][0] / d, a[0][0] / d]];
        let t = self.translation;
        Ok(Self {
            linear: inv,
            translation: [
                -(inv[0][0] * t[0] + inv[0][1] * t[1]),
                -(inv[1][0] * t[0] + inv[1][1] * t[1]),
            ],
        })
    }

    /// Six coefficients relative to the identity view, as fed to networks.
    pub fn encode(&self) -> [f64; 6] {
        let a = &self.linear;
        [
            a[0][0] - 1.0,
            a[0][1],
            a[1][0],
            a[1][1] - 1.0,
            self.translation[0],
            self.translation[1],
        ]
    }
}

/// Uniform ranges for random views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewRanges {
    pub scale: [f64; 2],
    pub rotation: [f64; 2],
    /// Each translation coordinate is drawn from `[-t, t]`.
    pub translation: f64,
}

impl Default for ViewRanges {
    /// Scales follow the inverse of a camera-distance range of `[1.5, 4.0]`.
    fn default() -> Self {
        Self {
            scale: [1.0 / 4.0, 1.0 / 1.5],
            rotation: [0.0, std::f64::consts::TAU],
            translation: 1.0,
        }
    }
}

impl ViewRanges {
    pub fn fixed_identity() -> Self {
        Self {
            scale: [1.0, 1.0],
            rotation: [0.0, 0.0],
            translation: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return Err(Error::config("view scale range must be positive and ordered"));
        }
        if self.rotation[0] > self.rotation[1] || !(self.translation >= 0.0) {
            return Err(Error::config("invalid view rotation or translation range"));
        }
        Ok(())
    }
}

fn draw(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * rng.random::<f64>()
    }
}

pub fn sample_view(ranges: &ViewRanges, rng: &mut Rng) -> ViewTransform {
    let scale = draw(rng, ranges.scale[0], ranges.scale[1]);
    let rotation = draw(rng, ranges.rotation[0], ranges.rotation[1]);
    let tx = draw(rng, -ranges.translation, ranges.translation);
    let ty = draw(rng, -ranges.translation, ranges.translation);
    ViewTransform::similarity(scale, rotation, [tx, ty])
}

/// `H x W x C` intensities, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Canvas {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Canvas {
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        check_dim("canvas data", height * width * channels, data.len())?;
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn index(&self, i: usize, j: usize, ch: usize) -> usize {
        (i * self.width + j) * self.channels + ch
    }

    pub fn get(&self, i: usize, j: usize, ch: usize) -> f64 {
        self.data[self.index(i, j, ch)]
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

fn pixel_center(i: usize, j: usize, h: usize, w: usize) -> [f64; 2] {
    [
        j as f64 + 0.5 - 0.5 * w as f64,
        i as f64 + 0.5 - 0.5 * h as f64,
    ]
}

/// The canvas is the parameter image itself, resampled bilinearly under the
/// view with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectField {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// One bilinear tap: flat parameter index and weight.
type Tap = (usize, f64);

impl DirectField {
    fn taps(&self, q: [f64; 2], ch: usize) -> [Option<Tap>; 4] {
        // scene coordinate -> fractional parameter index
        let fx = q[0] + 0.5 * self.width as f64 - 0.5;
        let fy = q[1] + 0.5 * self.height as f64 - 0.5;
        let x0 = fx.floor();
        let y0 = fy.floor();
        let ax = fx - x0;
        let ay = fy - y0;
        let mut out = [None; 4];
        let corners = [
            (y0, x0, (1.0 - ay) * (1.0 - ax)),
            (y0, x0 + 1.0, (1.0 - ay) * ax),
            (y0 + 1.0, x0, ay * (1.0 - ax)),
            (y0 + 1.0, x0 + 1.0, ay * ax),
        ];
        for (slot, (yy, xx, wgt)) in out.iter_mut().zip(corners) {
            if wgt == 0.0 {
                continue;
            }
            if yy < 0.0 || xx < 0.0 || yy >= self.height as f64 || xx >= self.width as f64 {
                continue;
            }
            let idx = ((yy as usize) * self.width + xx as usize) * self.channels + ch;
            *slot = Some((idx, wgt));
        }
        out
    }

    fn render(&self, theta: &[f64], view: &ViewTransform) -> Canvas {
        let mut canvas = Canvas::filled(self.height, self.width, self.channels, 0.0);
        for i in 0..self.height {
            for j in 0..self.width {
                let q = view.apply(pixel_center(i, j, self.height, self.width));
                for ch in 0..self.channels {
                    let taps = self.taps(q, ch);
                    let idx = canvas.index(i, j, ch);
                    // a single unit tap is copied so identity views are bit-exact
                    canvas.data[idx] = match taps {
                        [Some((k, w)), None, None, None] if w == 1.0 => theta[k],
                        _ => taps.iter().flatten().map(|(k, w)| w * theta[*k]).sum(),
                    };
                }
            }
        }
        canvas
    }

    fn vjp(&self, view: &ViewTransform, grad: &Canvas) -> Vec<f64> {
        let mut out = vec![0.0; self.height * self.width * self.channels];
        for i in 0..self.height {
            for j in 0..self.width {
                let q = view.apply(pixel_center(i, j, self.height, self.width));
                for ch in 0..self.channels {
                    let g = grad.get(i, j, ch);
                    match self.taps(q, ch) {
                        [Some((k, w)), None, None, None] if w == 1.0 => out[k] += g,
                        taps => {
                            for (k, w) in taps.iter().flatten() {
                                out[*k] += w * g;
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// Number of parameters per splat besides intensity channels:
/// center (2), log-scales (2), rotation (1), opacity logit (1).
pub const SPLAT_GEOMETRY_PARAMS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplatRenderer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_splats: usize,
    pub background: f64,
}

/// Readable view of one splat's raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatParams {
    pub center: [f64; 2],
    pub log_scales: [f64; 2],
    pub rotation: f64,
    pub logit_opacity: f64,
    pub intensity: Vec<f64>,
}

impl SplatParams {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.logit_opacity)
    }

    pub fn write(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.center);
        out.extend_from_slice(&self.log_scales);
        out.push(self.rotation);
        out.push(self.logit_opacity);
        out.extend_from_slice(&self.intensity);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl SplatRenderer {
    pub fn stride(&self) -> usize {
        SPLAT_GEOMETRY_PARAMS + self.channels
    }

    pub fn splat(&self, theta: &[f64], k: usize) -> SplatParams {
        let p = &theta[k * self.stride()..(k + 1) * self.stride()];
        SplatParams {
            center: [p[0], p[1]],
            log_scales: [p[2], p[3]],
            rotation: p[4],
            logit_opacity: p[5],
            intensity: p[6..].to_vec(),
        }
    }

    /// Random scene: centres spread over the canvas, a few pixels wide.
    pub fn random_params(&self, rng: &mut Rng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_splats * self.stride());
        let half_w = 0.4 * self.width as f64;
        let half_h = 0.4 * self.height as f64;
        for _ in 0..self.n_splats {
            SplatParams {
                center: [draw(rng, -half_w, half_w), draw(rng, -half_h, half_h)],
                log_scales: [draw(rng, 0.3, 1.3), draw(rng, 0.3, 1.3)],
                rotation: draw(rng, 0.0, std::f64::consts::PI),
                logit_opacity: draw(rng, -1.0, 1.0),
                intensity: (0..self.channels).map(|_| draw(rng, -1.0, 1.0)).collect(),
            }
            .write(&mut out);
        }
        out
    }

    fn render(&self, theta: &[f64], view: &ViewTransform) -> Canvas {
        let mut canvas = Canvas::filled(self.height, self.width, self.channels, self.background);
        let stride = self.stride();
        for i in 0..self.height {
            for j in 0..self.width {
                let q = view.apply(pixel_center(i, j, self.height, self.width));
                let base = canvas.index(i, j, 0);
                for k in 0..self.n_splats {
                    let p = &theta[k * stride..(k + 1) * stride];
                    let g = SplatEval::new(p, q);
                    let o = sigmoid(p[5]);
                    for ch in 0..self.channels {
                        canvas.data[base + ch] += o * p[6 + ch] * g.value;
                    }
                }
            }
        }
        canvas
    }

    fn vjp(&self, theta: &[f64], view: &ViewTransform, grad: &Canvas) -> Vec<f64> {
        let stride = self.stride();
        let mut out = vec![0.0; theta.len()];
        for i in 0..self.height {
            for j in 0..self.width {
                let q = view.apply(pixel_center(i, j, self.height, self.width));
                let base = grad.index(i, j, 0);
                let gpix = &grad.data[base..base + self.channels];
                if gpix.iter().all(|&g| g == 0.0) {
                    continue;
                }
                for k in 0..self.n_splats {
                    let p = &theta[k * stride..(k + 1) * stride];
                    let dst = &mut out[k * stride..(k + 1) * stride];
                    let e = SplatEval::new(p, q);
                    let o = sigmoid(p[5]);
                    // s = sum_ch grad_ch * intensity_ch
                    let s: f64 = gpix.iter().zip(&p[6..]).map(|(g, c)| g * c).sum();
                    for ch in 0..self.channels {
                        dst[6 + ch] += gpix[ch] * o * e.value;
                    }
                    dst[5] += s * e.value * o * (1.0 - o);
                    // d value / d quad-form = -value / 2
                    let dq = -0.5 * s * o * e.value;
                    // quad form q = u1^2 a1 + u2^2 a2, a_i = exp(-2 ls_i)
                    let dq_du1 = 2.0 * e.u[0] * e.a[0];
                    let dq_du2 = 2.0 * e.u[1] * e.a[1];
                    let (sn, cs) = (e.sin, e.cos);
                    // u = R^T (q - c)
                    dst[0] += dq * (dq_du1 * -cs + dq_du2 * sn);
                    dst[1] += dq * (dq_du1 * -sn + dq_du2 * -cs);
                    dst[2] += dq * (-2.0 * e.u[0] * e.u[0] * e.a[0]);
                    dst[3] += dq * (-2.0 * e.u[1] * e.u[1] * e.a[1]);
                    dst[4] += dq * (dq_du1 * e.u[1] + dq_du2 * -e.u[0]);
                }
            }
        }
        out
    }
}

/// Gaussian footprint of one splat at one scene point.
struct SplatEval {
    u: [f64; 2],
    a: [f64; 2],
    sin: f64,
    cos: f64,
    value: f64,
}

impl SplatEval {
    fn new(p: &[f64], q: [f64; 2]) -> Self {
        let dx = q[0] - p[0];
        let dy = q[1] - p[1];
        let (sin, cos) = p[4].sin_cos();
        let u = [cos * dx + sin * dy, -sin * dx + cos * dy];
        let a = [(-2.0 * p[2]).exp(), (-2.0 * p[3]).exp()];
        let quad = u[0] * u[0] * a[0] + u[1] * u[1] * a[1];
        Self {
            u,
            a,
            sin,
            cos,
            value: (-0.5 * quad).exp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Generator {
    DirectField(DirectField),
    Splat2d(SplatRenderer),
}

impl Generator {
    pub fn direct_field(height: usize, width: usize, channels: usize) -> Self {
        Generator::DirectField(DirectField {
            height,
            width,
            channels,
        })
    }

    pub fn splats(height: usize, width: usize, channels: usize, n_splats: usize) -> Self {
        Generator::Splat2d(SplatRenderer {
            height,
            width,
            channels,
            n_splats,
            background: 0.0,
        })
    }

    pub fn canvas_shape(&self) -> (usize, usize, usize) {
        match self {
            Generator::DirectField(g) => (g.height, g.width, g.channels),
            Generator::Splat2d(g) => (g.height, g.width, g.channels),
        }
    }

    pub fn canvas_len(&self) -> usize {
        let (h, w, c) = self.canvas_shape();
        h * w * c
    }

    pub fn param_len(&self) -> usize {
        match self {
            Generator::DirectField(g) => g.height * g.width * g.channels,
            Generator::Splat2d(g) => g.n_splats * g.stride(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.canvas_shape();
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::config("canvas dimensions must be positive"));
        }
        Ok(())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_dim("generator parameters", self.param_len(), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::domain("non-finite generator parameters"));
        }
        Ok(())
    }

    pub fn render(&self, theta: &[f64], view: &ViewTransform) -> Result<Canvas> {
        self.check_theta(theta)?;
        view.validate()?;
        Ok(match self {
            Generator::DirectField(g) => g.render(theta, view),
            Generator::Splat2d(g) => g.render(theta, view),
        })
    }

    /// `(∂render/∂θ)ᵀ · grad`.
    pub fn render_vjp(&self, theta: &[f64], view: &ViewTransform, grad: &Canvas) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        view.validate()?;
        if grad.shape() != self.canvas_shape() {
            return Err(Error::Dimension {
                context: "canvas gradient",
                expected: self.canvas_len(),
                got: grad.len(),
            });
        }
        Ok(match self {
            Generator::DirectField(g) => g.vjp(view, grad),
            Generator::Splat2d(g) => g.vjp(theta, view, grad),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn empty_scene_is_background() {
        let g = Generator::splats(8, 8, 1, 0);
        let c = g.render(&[], &ViewTransform::identity()).unwrap();
        assert!(c.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn isotropic_splat_profile() {
        let g = Generator::splats(16, 16, 1, 1);
        // centre on pixel (8, 8): p = (0.5, 0.5)
        let sigma: f64 = 2.0;
        let theta = vec![0.5, 0.5, sigma.ln(), sigma.ln(), 0.3, 40.0, 1.0];
        let c = g.render(&theta, &ViewTransform::identity()).unwrap();
        let center = c.get(8, 8, 0);
        let max = c.data.iter().copied().fold(f64::MIN, f64::max);
        assert_eq!(center, max);
        for (di, dj) in [(0i64, 3i64), (2, 1), (-4, 0), (-3, -3)] {
            let r2 = (di * di + dj * dj) as f64;
            let v = c.get((8 + di) as usize, (8 + dj) as usize, 0);
            assert!((v - (-r2 / (2.0 * 4.0)).exp() * center).abs() < 1e-12);
        }
    }

    #[test]
    fn direct_field_identity_view_is_exact() {
        let g = Generator::direct_field(4, 5, 2);
        let mut rng = rng_for(0, &[]);
        let theta: Vec<f64> = (0..40).map(|_| draw(&mut rng, -1.0, 1.0)).collect();
        let c = g.render(&theta, &ViewTransform::identity()).unwrap();
        assert_eq!(c.data, theta);
        let grad = Canvas::from_vec(4, 5, 2, theta.clone()).unwrap();
        assert_eq!(g.render_vjp(&theta, &ViewTransform::identity(), &grad).unwrap(), theta);
    }

    #[test]
    fn zero_canvas_gradient_gives_zero() {
        let g = Generator::splats(8, 8, 1, 3);
        let mut rng = rng_for(1, &[]);
        let Generator::Splat2d(r) = g else { unreachable!() };
        let theta = r.random_params(&mut rng);
        let grad = Canvas::filled(8, 8, 1, 0.0);
        let v = g.render_vjp(&theta, &ViewTransform::identity(), &grad).unwrap();
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_view_is_rejected() {
        let g = Generator::direct_field(2, 2, 1);
        let mut v = ViewTransform::identity();
        v.linear = [[1.0, 2.0], [0.5, 1.0]];
        assert!(matches!(g.render(&[0.0; 4], &v), Err(Error::Domain(_))));
    }

    #[test]
    fn sampled_views_respect_ranges() {
        let ranges = ViewRanges::default();
        let mut rng = rng_for(9, &[]);
        for _ in 0..10_000 {
            let v = sample_view(&ranges, &mut rng);
            let scale = v.det().sqrt();
            assert!(scale >= 1.0 / 4.0 - 1e-12 && scale <= 1.0 / 1.5 + 1e-12);
        }
        let a = sample_view(&ranges, &mut rng_for(3, &[1]));
        let b = sample_view(&ranges, &mut rng_for(3, &[1]));
        assert_eq!(a, b);
        let id = sample_view(&ViewRanges::fixed_identity(), &mut rng);
        assert_eq!(id, ViewTransform::identity());
    }

    #[test]
    fn intensity_linearity() {
        let g = Generator::Splat2d(SplatRenderer {
            height: 10,
            width: 10,
            channels: 3,
            n_splats: 4,
            background: 0.25,
        });
        let Generator::Splat2d(r) = g else { unreachable!() };
        let theta = r.random_params(&mut rng_for(4, &[]));
        let mut doubled = theta.clone();
        for k in 0..4 {
            for ch in 0..3 {
                doubled[k * r.stride() + 6 + ch] *= 2.0;
            }
        }
        let v = ViewTransform::similarity(0.7, 0.4, [0.3, -0.2]);
        let a = g.render(&theta, &v).unwrap();
        let b = g.render(&doubled, &v).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((y - (2.0 * (x - 0.25) + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn inverse_view_round_trip() {
        let v = ViewTransform::similarity(0.4, 1.1, [0.5, -1.0]);
        let w = v.inverse().unwrap();
        let p = [2.0, -3.0];
        let q = w.apply(v.apply(p));
        assert!((q[0] - p[0]).abs() < 1e-12 && (q[1] - p[1]).abs() < 1e-12);
    }
}
