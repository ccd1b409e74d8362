//! Cross products of runs over method, guidance weight and seed, with the
//! per-setting statistics the guidance study reports.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::config::{Experiment, RunConfig};
use crate::distill::{Method, RunRecord, RunStatus};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunKey {
    pub method: Method,
    pub cfg_weight: f64,
    pub seed: u64,
}

/// One finished (or failed) run. Failures are rows, not errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub key: RunKey,
    /// `completed`, `aborted` or `error`.
    pub status: String,
    pub sliced_w1: Option<f64>,
    pub mmd_rbf: Option<f64>,
    pub detail: String,
}

pub struct SweepOutcome {
    pub row: SweepRow,
    pub record: Option<RunRecord>,
}

/// Runs in the fixed order method → cfg → seed.
pub fn sweep_keys(methods: &[Method], cfg_weights: &[f64], seeds: &[u64]) -> Result<Vec<RunKey>> {
    if methods.is_empty() || cfg_weights.is_empty() || seeds.is_empty() {
        return Err(Error::config("sweep lists must be non-empty"));
    }
    let mut keys = Vec::with_capacity(methods.len() * cfg_weights.len() * seeds.len());
    for &method in methods {
        for &cfg_weight in cfg_weights {
            for &seed in seeds {
                keys.push(RunKey {
                    method,
                    cfg_weight,
                    seed,
                });
            }
        }
    }
    Ok(keys)
}

fn run_one(base: &RunConfig, key: RunKey) -> SweepOutcome {
    let result = Experiment::new(base.with_run(key.seed, key.cfg_weight)).and_then(|e| e.run(key.method));
    match result {
        Ok(record) => {
            let (status, detail) = match &record.status {
                RunStatus::Completed => ("completed", String::new()),
                RunStatus::Aborted { iteration, reason } => ("aborted", format!("iteration {iteration}: {reason}")),
            };
            let m = record.final_metrics;
            SweepOutcome {
                row: SweepRow {
                    key,
                    status: status.to_string(),
                    sliced_w1: m.map(|m| m.sliced_w1),
                    mmd_rbf: m.map(|m| m.mmd_rbf),
                    detail,
                },
                record: Some(record),
            }
        }
        Err(e) => SweepOutcome {
            row: SweepRow {
                key,
                status: "error".to_string(),
                sliced_w1: None,
                mmd_rbf: None,
                detail: e.to_string(),
            },
            record: None,
        },
    }
}

/// Executes `keys` on at most `jobs` worker threads. Each run is sequential
/// and seeded by its key alone, so the outcome does not depend on `jobs`.
pub fn run_sweep(base: &RunConfig, keys: &[RunKey], jobs: usize) -> Vec<SweepOutcome> {
    let jobs = jobs.clamp(1, keys.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<SweepOutcome>>> = Mutex::new((0..keys.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&key) = keys.get(i) else { break };
                let out = run_one(base, key);
                slots.lock().expect("sweep slots")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("sweep slots")
        .into_iter()
        .map(|o| o.expect("every key ran"))
        .collect()
}

/// Seed statistics of the final sliced-W1 at one `(method, cfg)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfgSummary {
    pub method: Method,
    pub cfg_weight: f64,
    /// Completed runs contributing.
    pub n: usize,
    pub mean: f64,
    /// Unbiased variance over seeds; 0 for a single seed.
    pub seed_variance: f64,
}

pub fn summarize(rows: &[SweepRow]) -> Vec<CfgSummary> {
    let mut groups: Vec<(Method, f64, Vec<f64>)> = Vec::new();
    for r in rows {
        let pos = groups
            .iter()
            .position(|(m, w, _)| *m == r.key.method && *w == r.key.cfg_weight);
        let idx = match pos {
            Some(i) => i,
            None => {
                groups.push((r.key.method, r.key.cfg_weight, Vec::new()));
                groups.len() - 1
            }
        };
        if let Some(v) = r.sliced_w1 {
            groups[idx].2.push(v);
        }
    }
    groups
        .into_iter()
        .map(|(method, cfg_weight, v)| {
            let n = v.len();
            let mean = if n == 0 { f64::NAN } else { v.iter().sum::<f64>() / n as f64 };
            let seed_variance = if n < 2 {
                0.0
            } else {
                v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
            };
            CfgSummary {
                method,
                cfg_weight,
                n,
                mean,
                seed_variance,
            }
        })
        .collect()
}

/// Spread of the seed-mean metric across guidance weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub method: Method,
    pub low_weights: Vec<f64>,
    pub high_weights: Vec<f64>,
    pub low_variance: f64,
    pub high_variance: f64,
    /// `high_variance <= 2 * low_variance`.
    pub holds: bool,
}

fn population_variance(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64
}

/// Variance across `high` weights of the per-weight seed means, against
/// the same quantity over `low`. Missing weights are an error.
pub fn plateau(summaries: &[CfgSummary], method: Method, low: &[f64], high: &[f64]) -> Result<Plateau> {
    let means = |ws: &[f64]| -> Result<Vec<f64>> {
        ws.iter()
            .map(|w| {
                summaries
                    .iter()
                    .find(|s| s.method == method && s.cfg_weight == *w && s.n > 0)
                    .map(|s| s.mean)
                    .ok_or_else(|| Error::config(format!("no completed {} runs at cfg {w}", method.as_str())))
            })
            .collect()
    };
    let (lo, hi) = (means(low)?, means(high)?);
    let low_variance = population_variance(&lo);
    let high_variance = population_variance(&hi);
    Ok(Plateau {
        method,
        low_weights: low.to_vec(),
        high_weights: high.to_vec(),
        low_variance,
        high_variance,
        holds: high_variance <= 2.0 * low_variance,
    })
}

/// Default split of the guidance study: low weights and the high plateau.
pub const LOW_CFG: [f64; 3] = [5.0, 7.5, 10.0];
pub const HIGH_CFG: [f64; 5] = [15.0, 20.0, 25.0, 50.0, 100.0];
