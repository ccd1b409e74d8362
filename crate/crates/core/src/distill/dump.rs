use super::{sds_grad, trace_grad, DistillConfig, Method};
use crate::render::{Canvas, Generator, ViewTransform};
use crate::schedule::NoiseSchedule;
use crate::score::ScoreModel;
use crate::Result;

/// Lanes used by dumps start here so they never coincide with run lanes.
const DUMP_LANE_BASE: u64 = 1 << 32;

/// Canvas-space gradient statistics over repeated `(t, noise)` draws.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDump {
    pub method: Method,
    /// Per-pixel mean of `|g|`.
    pub magnitude: Canvas,
    /// Per-pixel signed mean of `g`.
    pub mean: Canvas,
    /// Per-pixel variance across draws, averaged over pixels.
    pub mean_variance: f64,
}

/// Canvas gradients of `method` at `theta` under `view`, over `n_draws`
/// draws taken at iteration `iter`.
#[allow(clippy::too_many_arguments)]
pub fn dump_gradient_field<P: ScoreModel + ?Sized, A: ScoreModel + ?Sized>(
    gen: &Generator,
    theta: &[f64],
    view: &ViewTransform,
    method: Method,
    cfg: &DistillConfig,
    guided_pretrained: &P,
    adapted: &A,
    bridge_sched: &NoiseSchedule,
    pretrain_sched: &NoiseSchedule,
    iter: usize,
    n_draws: usize,
) -> Result<GradientDump> {
    let n = gen.canvas_len();
    let mut sum = vec![0.0; n];
    let mut sum_abs = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for k in 0..n_draws {
        let lane = DUMP_LANE_BASE + k as u64;
        let g = match method {
            Method::Sds => sds_grad(gen, theta, view, guided_pretrained, pretrain_sched, cfg, iter, lane)?.canvas_grad,
            Method::Trace => {
                trace_grad(
                    gen,
                    theta,
                    view,
                    guided_pretrained,
                    adapted,
                    bridge_sched,
                    pretrain_sched,
                    cfg,
                    iter,
                    lane,
                )?
                .canvas_grad
            }
        };
        for i in 0..n {
            sum[i] += g[i];
            sum_abs[i] += g[i].abs();
            sum_sq[i] += g[i] * g[i];
        }
    }
    let m = n_draws.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
    let mean_variance = sum_sq
        .iter()
        .zip(&mean)
        .map(|(sq, mu)| (sq / m - mu * mu).max(0.0))
        .sum::<f64>()
        / n as f64;
    let (h, w, c) = gen.canvas_shape();
    Ok(GradientDump {
        method,
        magnitude: Canvas::from_vec(h, w, c, sum_abs.iter().map(|s| s / m).collect())?,
        mean: Canvas::from_vec(h, w, c, mean)?,
        mean_variance,
    })
}
