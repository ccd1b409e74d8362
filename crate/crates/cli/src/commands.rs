use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::json;
use tracelab_core::config::{BaseInit, Experiment, RunConfig};
use tracelab_core::distill::{dump_gradient_field, eval_views, GradientDump, Method, RunRecord, EVAL_SEED};
use tracelab_core::gmm::Condition;
use tracelab_core::io::{
    plot_lines, save_run_record, run_summary, write_canvas_png, write_csv, write_pgm, Series, Stamp,
};
use tracelab_core::nn::{optimal_denoiser_mse, save_snapshot, train_dsm, MlpScore};
use tracelab_core::render::{sample_view, Canvas, ViewTransform};
use tracelab_core::rng::{rng_for, stream};
use tracelab_core::score::Guided;
use tracelab_core::sweep::{plateau, run_sweep, summarize, sweep_keys, HIGH_CFG, LOW_CFG};
use tracelab_core::verify::{run_verify, VerifyOptions};

use crate::{Cli, Command};

struct Ctx {
    config: RunConfig,
    out: PathBuf,
    jobs: usize,
}

impl Ctx {
    fn stamp(&self) -> Result<Stamp> {
        Ok(Stamp::new(self.config.hash()?, self.config.seed))
    }

    fn dir(&self, sub: &str) -> Result<PathBuf> {
        let d = self.out.join(sub);
        fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        Ok(d)
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut config = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::from_toml_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

pub fn dispatch(cli: Cli) -> Result<ExitCode> {
    let ctx = Ctx {
        config: load_config(cli.config.as_deref(), cli.seed)?,
        out: cli.out,
        jobs: cli.jobs.max(1),
    };
    match cli.command {
        Command::Verify { inject_gamma_offset } => verify(&ctx, inject_gamma_offset),
        Command::TrainScore => train_score(&ctx),
        Command::Distill { method } => distill(&ctx, method),
        Command::Sweep {
            methods,
            cfg_weights,
            seeds,
        } => sweep(&ctx, methods, cfg_weights, seeds),
        Command::DumpGradients => dump_gradients(&ctx),
        Command::Plot { input } => plot(&ctx, &input),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Wall-clock time lives apart from the primary outputs so those stay
/// byte-identical across reruns.
fn write_timing(dir: &Path, start: Instant) -> Result<()> {
    write_json(
        &dir.join("timing.json"),
        &json!({ "wall_clock_seconds": start.elapsed().as_secs_f64() }),
    )
}

fn verify(ctx: &Ctx, gamma_offset: f64) -> Result<ExitCode> {
    let dir = ctx.dir("verify")?;
    let opts = VerifyOptions {
        seed: ctx.config.seed,
        gamma_offset,
    };
    let report = run_verify(&opts)?;
    let st = ctx.stamp()?;
    write_json(
        &dir.join("report.json"),
        &json!({ "config_hash": st.config_hash, "seed": st.seed, "report": report }),
    )?;
    for c in &report.checks {
        println!(
            "{} {:<32} measured {:>11.4e}  tolerance {:.1e}",
            if c.passed { "ok  " } else { "FAIL" },
            c.name,
            c.measured,
            c.tolerance
        );
    }
    let failing: Vec<&str> = report.failing().map(|c| c.name.as_str()).collect();
    if failing.is_empty() {
        println!("{} checks passed", report.checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing checks: {}", failing.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn train_score(ctx: &Ctx) -> Result<ExitCode> {
    let start = Instant::now();
    let dir = ctx.dir("train-score")?;
    let st = ctx.stamp()?;
    let prior = ctx.config.build_prior()?;
    let mut init = ctx.config.clone();
    init.model.base = BaseInit::Random;
    let (mut model, _) = init.build_base(&prior)?;
    let report = train_dsm(&mut model, &prior, &ctx.config.dsm_hyper())?;
    let scored = MlpScore {
        base: model,
        adapter: None,
    };
    save_snapshot(&dir.join("model"), &scored, Some(&st.config_hash), Some(st.seed))?;
    let rows: Vec<Vec<String>> = report
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    write_csv(fs::File::create(dir.join("losses.csv"))?, &st, &["step", "loss"], &rows)?;
    let mut mse = Vec::new();
    for k in 0..prior.family().len() {
        let m = optimal_denoiser_mse(&scored, &prior, Condition::Class(k), 2000, EVAL_SEED)?;
        mse.push(json!({ "class": k, "mse_to_optimal": m }));
        println!("class {k}: mse to optimal denoiser {m:.5}");
    }
    write_json(
        &dir.join("report.json"),
        &json!({
            "config_hash": st.config_hash,
            "seed": st.seed,
            "steps": report.losses.len(),
            "final_loss": report.losses.last(),
            "snapshot_id": report.snapshot_id,
            "evaluation": mse,
        }),
    )?;
    write_timing(&dir, start)?;
    Ok(ExitCode::SUCCESS)
}

/// Fixed render views: drawn from the configured ranges on the evaluation
/// seed, independent of the run seed.
fn render_views(config: &RunConfig) -> Vec<ViewTransform> {
    (0..config.output.render_views)
        .map(|i| {
            sample_view(
                &config.distill.view_ranges,
                &mut rng_for(EVAL_SEED, &[stream::VIEW, u64::MAX, i as u64]),
            )
        })
        .collect()
}

fn write_canvas(dir: &Path, name: &str, c: &Canvas, st: &Stamp, scale: usize) -> Result<()> {
    write_canvas_png(&dir.join(format!("{name}.png")), c, st, scale)?;
    write_pgm(&dir.join(format!("{name}.pgm")), c, st, scale)?;
    Ok(())
}

fn write_dump(dir: &Path, prefix: &str, d: &GradientDump, st: &Stamp, scale: usize) -> Result<()> {
    write_canvas(dir, &format!("{prefix}_magnitude"), &d.magnitude, st, scale)?;
    write_canvas(dir, &format!("{prefix}_mean"), &d.mean, st, scale)
}

fn distill(ctx: &Ctx, method: Method) -> Result<ExitCode> {
    let start = Instant::now();
    let dir = ctx.dir(&format!("distill/{}", method.as_str()))?;
    let dumps_dir = ctx.dir(&format!("distill/{}/dumps", method.as_str()))?;
    let st = ctx.stamp()?;
    let exp = Experiment::new(ctx.config.clone())?;
    let cfg = ctx.config.distill_config();
    let total = cfg.total_iterations;
    let dump_at = [0, total / 2, total];
    let view = eval_views(&cfg).first().copied().unwrap_or_default();
    let guided = Guided::new(&exp.prior, cfg.cfg_weight);
    let scale = ctx.config.output.image_scale;
    let mut dump_stats = Vec::new();
    let record = exp.run_observed(method, |state| {
        if !dump_at.contains(&state.iter) || dump_stats.iter().any(|(i, _)| *i == state.iter) {
            return Ok(());
        }
        let adapted = MlpScore {
            base: exp.base.clone(),
            adapter: Some(state.adapter.clone()),
        };
        let d = dump_gradient_field(
            &ctx.config.generator,
            &state.particles[0],
            &view,
            method,
            &cfg,
            &guided,
            &adapted,
            &ctx.config.bridge_schedule,
            &ctx.config.pretrain_schedule,
            state.iter,
            ctx.config.output.dump_draws,
        )?;
        write_dump(&dumps_dir, &format!("iter_{}", state.iter), &d, &st, scale)
            .map_err(|e| tracelab_core::Error::Io(std::io::Error::other(e.to_string())))?;
        dump_stats.push((state.iter, d.mean_variance));
        Ok(())
    })?;
    save_run_record(&dir.join("run.jsonl"), &record)?;
    fs::write(dir.join("summary.txt"), run_summary(&record))?;
    write_json(
        &dir.join("dumps.json"),
        &json!({
            "config_hash": st.config_hash,
            "seed": st.seed,
            "method": method,
            "draws": ctx.config.output.dump_draws,
            "mean_variance": dump_stats.iter().map(|(i, v)| json!({ "iter": i, "mean_variance": v })).collect::<Vec<_>>(),
        }),
    )?;
    write_renders(&dir, &ctx.config, &record, &st)?;
    write_timing(&dir, start)?;
    print!("{}", run_summary(&record));
    Ok(ExitCode::SUCCESS)
}

fn write_renders(dir: &Path, config: &RunConfig, record: &RunRecord, st: &Stamp) -> Result<()> {
    let renders = dir.join("renders");
    fs::create_dir_all(&renders)?;
    let Some(theta) = record.final_particles.first() else {
        return Ok(());
    };
    for (k, v) in render_views(config).iter().enumerate() {
        let c = config.generator.render(theta, v)?;
        write_canvas(&renders, &format!("view_{k}"), &c, st, config.output.image_scale)?;
    }
    let rows: Vec<Vec<String>> = record
        .final_particles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let vals: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            vec![i.to_string(), vals.join(" ")]
        })
        .collect();
    write_csv(fs::File::create(dir.join("particles.csv"))?, st, &["particle", "theta"], &rows)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn sweep(
    ctx: &Ctx,
    methods: Option<Vec<Method>>,
    cfg_weights: Option<Vec<f64>>,
    seeds: Option<Vec<u64>>,
) -> Result<ExitCode> {
    let start = Instant::now();
    let dir = ctx.dir("sweep")?;
    let runs_dir = ctx.dir("sweep/runs")?;
    let st = ctx.stamp()?;
    let s = &ctx.config.sweep;
    let methods = methods.unwrap_or_else(|| s.methods.clone());
    let cfg_weights = cfg_weights.unwrap_or_else(|| s.cfg_weights.clone());
    let seeds = seeds.unwrap_or_else(|| s.seeds.clone());
    let keys = sweep_keys(&methods, &cfg_weights, &seeds)?;
    let outcomes = run_sweep(&ctx.config, &keys, ctx.jobs);

    let mut rows = Vec::new();
    let mut csv_rows = Vec::new();
    for o in &outcomes {
        let r = &o.row;
        if let Some(rec) = &o.record {
            let name = format!("{}_cfg{}_seed{}.jsonl", r.key.method.as_str(), r.key.cfg_weight, r.key.seed);
            save_run_record(&runs_dir.join(name), rec)?;
        }
        println!(
            "{:<5} cfg {:>6} seed {:>3}: {} sliced_w1 {}",
            r.key.method.as_str(),
            r.key.cfg_weight,
            r.key.seed,
            r.status,
            fmt_opt(r.sliced_w1)
        );
        csv_rows.push(vec![
            r.key.method.as_str().to_string(),
            r.key.cfg_weight.to_string(),
            r.key.seed.to_string(),
            r.status.clone(),
            fmt_opt(r.sliced_w1),
            fmt_opt(r.mmd_rbf),
            r.detail.replace(',', ";"),
        ]);
        rows.push(r.clone());
    }
    write_csv(
        fs::File::create(dir.join("results.csv"))?,
        &st,
        &["method", "cfg_weight", "seed", "status", "sliced_w1", "mmd_rbf", "detail"],
        &csv_rows,
    )?;

    let summary = summarize(&rows);
    let summary_rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| {
            vec![
                s.method.as_str().to_string(),
                s.cfg_weight.to_string(),
                s.n.to_string(),
                s.mean.to_string(),
                s.seed_variance.to_string(),
            ]
        })
        .collect();
    write_csv(
        fs::File::create(dir.join("summary.csv"))?,
        &st,
        &["method", "cfg_weight", "n", "mean_sliced_w1", "seed_variance"],
        &summary_rows,
    )?;

    let plateaus: Vec<_> = methods
        .iter()
        .filter_map(|m| plateau(&summary, *m, &LOW_CFG, &HIGH_CFG).ok())
        .collect();
    for p in &plateaus {
        println!(
            "{} plateau: variance over high cfg {:.3e}, 2 x variance over low cfg {:.3e}: {}",
            p.method.as_str(),
            p.high_variance,
            2.0 * p.low_variance,
            if p.holds { "stable" } else { "not stable" }
        );
    }
    write_json(
        &dir.join("stability.json"),
        &json!({ "config_hash": st.config_hash, "seed": st.seed, "summary": summary, "plateaus": plateaus }),
    )?;
    plot_lines(&dir.join("sliced_w1_vs_cfg.png"), &summary_series(&summary), true, &st)?;
    write_timing(&dir, start)?;
    Ok(ExitCode::SUCCESS)
}

fn summary_series(summary: &[tracelab_core::sweep::CfgSummary]) -> Vec<Series> {
    let mut series: Vec<Series> = Vec::new();
    for s in summary.iter().filter(|s| s.n > 0) {
        let label = s.method.as_str();
        match series.iter_mut().find(|x| x.label == label) {
            Some(x) => x.points.push((s.cfg_weight, s.mean)),
            None => series.push(Series {
                label: label.to_string(),
                points: vec![(s.cfg_weight, s.mean)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    series
}

fn dump_gradients(ctx: &Ctx) -> Result<ExitCode> {
    let start = Instant::now();
    let dir = ctx.dir("dump-gradients")?;
    let st = ctx.stamp()?;
    let exp = Experiment::new(ctx.config.clone())?;
    let cfg = ctx.config.distill_config();
    let theta = ctx
        .config
        .build_particles()
        .into_iter()
        .next()
        .context("configuration has no particles")?;
    let view = eval_views(&cfg).first().copied().unwrap_or_default();
    let guided = Guided::new(&exp.prior, cfg.cfg_weight);
    let adapted = MlpScore {
        base: exp.base.clone(),
        adapter: Some(ctx.config.build_adapter(&exp.base)?),
    };
    let n = ctx.config.output.dump_draws;
    let mut variances = Vec::new();
    for method in [Method::Sds, Method::Trace] {
        let d = dump_gradient_field(
            &ctx.config.generator,
            &theta,
            &view,
            method,
            &cfg,
            &guided,
            &adapted,
            &ctx.config.bridge_schedule,
            &ctx.config.pretrain_schedule,
            0,
            n,
        )?;
        write_dump(&dir, method.as_str(), &d, &st, ctx.config.output.image_scale)?;
        variances.push(d.mean_variance);
    }
    let (sds, trace) = (variances[0], variances[1]);
    println!("mean per-pixel variance over {n} draws: sds {sds:.4e}, trace {trace:.4e}");
    write_json(
        &dir.join("report.json"),
        &json!({
            "config_hash": st.config_hash,
            "seed": st.seed,
            "draws": n,
            "sds_mean_variance": sds,
            "trace_mean_variance": trace,
            "trace_not_above_sds": trace <= sds,
        }),
    )?;
    write_timing(&dir, start)?;
    Ok(ExitCode::SUCCESS)
}

fn parse_sweep_csv(text: &str) -> Result<Vec<Series>> {
    let mut series: Vec<Series> = Vec::new();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().context("empty CSV")?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).with_context(|| format!("missing column {name}"));
    let (m, w, v) = (col("method")?, col("cfg_weight")?, col("sliced_w1")?);
    let mut groups: Vec<(String, f64, Vec<f64>)> = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let Ok(val) = f.get(v).copied().unwrap_or("").parse::<f64>() else { continue };
        let weight: f64 = f[w].parse()?;
        match groups.iter_mut().find(|g| g.0 == f[m] && g.1 == weight) {
            Some(g) => g.2.push(val),
            None => groups.push((f[m].to_string(), weight, vec![val])),
        }
    }
    for (method, weight, vals) in groups {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        match series.iter_mut().find(|s| s.label == method) {
            Some(s) => s.points.push((weight, mean)),
            None => series.push(Series {
                label: method,
                points: vec![(weight, mean)],
            }),
        }
    }
    for s in &mut series {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(series)
}

fn parse_run_jsonl(text: &str) -> Result<Vec<Series>> {
    let mut sw = Vec::new();
    let mut phi = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line)?;
        if v["kind"] != "iteration" {
            continue;
        }
        let r = &v["record"];
        let it = r["iter"].as_f64().unwrap_or(f64::NAN);
        if let Some(x) = r["sliced_w1"].as_f64() {
            sw.push((it, x));
        }
        if let Some(x) = r["phi_loss"].as_f64() {
            phi.push((it, x));
        }
    }
    let mut out = vec![Series {
        label: "sliced_w1".into(),
        points: sw,
    }];
    if !phi.is_empty() {
        out.push(Series {
            label: "phi_loss".into(),
            points: phi,
        });
    }
    Ok(out)
}

fn plot(ctx: &Ctx, input: &Path) -> Result<ExitCode> {
    let dir = ctx.dir("plot")?;
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let (series, log_x) = match input.extension().and_then(|e| e.to_str()) {
        Some("csv") => (parse_sweep_csv(&text)?, true),
        Some("jsonl") => (parse_run_jsonl(&text)?, false),
        _ => bail!("plot input must be a sweep .csv or a run .jsonl"),
    };
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let path = dir.join(format!("{stem}.png"));
    plot_lines(&path, &series, log_x, &ctx.stamp()?)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}
