//! `solo9`: train, evaluate, augment, replay and plot.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use plotters::prelude::*;

use solo9::coopt::{builtin_plan, run_plan, IterationPlan};
use solo9::dataset::{augment_zero_waist, replay_clip, solo8_trot_fixture, MotionDataset};
use solo9::eval::{builtin_protocol, evaluate, EvalProtocol};
use solo9::nn::Checkpoint;
use solo9::physics::log::{LogEncoding, TrajectoryLog};
use solo9::ppo::Policy;
use solo9::rollout::{Controller, ZeroController};
use solo9::variant::Variant;

#[derive(Parser)]
#[command(name = "solo9", version, about = "Waist-articulated quadruped: training and evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a co-optimization plan and write its lineage.
    Train {
        /// Plan file, or a bundled plan name (`default`, `desk`).
        #[arg(long)]
        plan: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Lineage directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Starting dataset; the bundled trot fixture when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// `section.key=value` overrides applied to the plan.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Run an evaluation protocol and write its report.
    Evaluate {
        /// Protocol file, or a bundled name (`steering`, `tableII`, `tableIII`).
        #[arg(long)]
        protocol: String,
        #[arg(long)]
        variant: Option<String>,
        /// Policy checkpoint; zero actions when omitted.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "report.json")]
        out: PathBuf,
        /// Directory for per-episode trajectory logs.
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Insert an all-zero waist channel into an 8-joint dataset.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = solo9::dataset::WAIST_INDEX)]
        waist_index: usize,
        /// Write the text encoding instead of binary.
        #[arg(long)]
        text: bool,
    },
    /// Step a dataset clip through kinematics into a trajectory log.
    Replay {
        #[arg(long)]
        dataset: PathBuf,
        /// Clip index or name.
        #[arg(long, default_value = "0")]
        clip: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        text: bool,
    },
    /// Render a metrics stream or a trajectory log to SVG.
    Plot {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Metric columns to draw (metrics streams only).
        #[arg(long, value_delimiter = ',', default_value = "mean_reward,r_imitation")]
        columns: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { plan, seed, out, dataset, overrides } => train(&plan, seed, &out, dataset.as_deref(), &overrides),
        Cmd::Evaluate { protocol, variant, policy, seed, out, log_dir, overrides } => {
            eval(&protocol, variant.as_deref(), policy.as_deref(), seed, &out, log_dir.as_deref(), &overrides)
        }
        Cmd::Augment { input, out, waist_index, text } => {
            let ds = MotionDataset::load(&input).with_context(|| format!("reading {}", input.display()))?;
            let aug = augment_zero_waist(&ds, waist_index)?;
            aug.save(&out, encoding(text))?;
            println!("{} clips, {} joints -> {}", aug.clips.len(), aug.meta.dof, out.display());
            Ok(())
        }
        Cmd::Replay { dataset, clip, out, text } => {
            let ds = MotionDataset::load(&dataset).with_context(|| format!("reading {}", dataset.display()))?;
            let idx = match clip.parse::<usize>() {
                Ok(i) => i,
                Err(_) => ds.clips.iter().position(|c| c.name == clip).ok_or_else(|| anyhow!("no clip named `{clip}`"))?,
            };
            let variant = match ds.meta.dof {
                8 => Variant::Solo8,
                9 => Variant::Solo9,
                n => bail!("no robot with {n} joints"),
            };
            let log = replay_clip(&ds, idx, Arc::new(variant.model()))?;
            let mut f = std::io::BufWriter::new(std::fs::File::create(&out)?);
            log.write(&mut f, encoding(text))?;
            println!("{} frames -> {}", log.frames.len(), out.display());
            Ok(())
        }
        Cmd::Plot { input, out, columns } => plot(&input, &out, &columns),
    }
}

fn encoding(text: bool) -> LogEncoding {
    if text {
        LogEncoding::Text
    } else {
        LogEncoding::Binary
    }
}

fn train(plan: &str, seed: u64, out: &Path, dataset: Option<&Path>, overrides: &[String]) -> Result<()> {
    let plan = match builtin_plan(plan) {
        Some(text) => IterationPlan::from_toml(text, overrides)?,
        None => IterationPlan::load(Path::new(plan), overrides).with_context(|| format!("plan {plan}"))?,
    };
    let ds = match dataset {
        Some(p) => MotionDataset::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => solo8_trot_fixture(),
    };
    let result = run_plan(&plan, &ds, seed, Some(out))?;
    for r in &result.reports {
        println!(
            "iteration {}: w_I {:.2}, survival {:.3}, tracking rmse {:.3}, r_I {:.4}, exported {}",
            r.iteration, r.w_imitation, r.survival_rate, r.tracking_rmse, r.mean_imitation_reward, r.exported
        );
    }
    for l in &result.lineage {
        println!("{} {}", l.dataset_hash, l.dataset);
    }
    if let Some(e) = result.failure {
        bail!("plan stopped: {e}");
    }
    Ok(())
}

fn eval(
    protocol: &str,
    variant: Option<&str>,
    policy: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    log_dir: Option<&Path>,
    overrides: &[String],
) -> Result<()> {
    let mut p = match builtin_protocol(protocol) {
        Some(text) => EvalProtocol::from_toml(text, overrides)?,
        None => EvalProtocol::load(Path::new(protocol), overrides).with_context(|| format!("protocol {protocol}"))?,
    };
    let ck = policy.map(Checkpoint::load).transpose()?;
    if let Some(v) = variant.or_else(|| ck.as_ref().and_then(|c| c.meta.get("variant")).map(String::as_str)) {
        p.variant = Variant::parse(v).ok_or_else(|| anyhow!("unknown variant `{v}`"))?;
    }
    if let Some(s) = seed {
        p.seed = s;
    }
    let (ctrl, id): (Box<dyn Controller>, String) = match (&ck, policy) {
        (Some(ck), Some(path)) => {
            let pol = Policy::from_checkpoint(ck, "policy/")?;
            if pol.action_dim() != p.variant.dof() {
                bail!("policy drives {} joints but {} has {}", pol.action_dim(), p.variant, p.variant.dof());
            }
            (Box::new(pol), path.display().to_string())
        }
        _ => (Box::new(ZeroController(p.variant.dof())), "zero".into()),
    };
    let report = evaluate(ctrl.as_ref(), &p, &id, log_dir)?;
    std::fs::write(out, report.to_json())?;
    for c in &report.conditions {
        println!("{}: survival {:.3} ± {:.3} ({}/{})", c.label, c.survival_rate, c.survival_std, c.survived, c.episodes);
    }
    println!("report -> {}", out.display());
    Ok(())
}

fn plot(input: &Path, out: &Path, columns: &[String]) -> Result<()> {
    let bytes = std::fs::read(input).with_context(|| format!("reading {}", input.display()))?;
    if let Ok(log) = TrajectoryLog::read(&mut bytes.as_slice()) {
        return plot_path(&log, out);
    }
    let text = String::from_utf8(bytes).map_err(|_| anyhow!("{} is neither a trajectory log nor a metrics stream", input.display()))?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| anyhow!("empty metrics stream"))?.split(',').collect();
    let idx: Vec<usize> = columns
        .iter()
        .map(|c| header.iter().position(|h| h == c).ok_or_else(|| anyhow!("no column `{c}` in {}", input.display())))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|v| v.parse::<f64>().unwrap_or(f64::NAN)).collect())
        .collect();
    let series: Vec<Vec<(f64, f64)>> =
        idx.iter().map(|&i| rows.iter().enumerate().map(|(k, r)| (k as f64, r[i])).filter(|p| p.1.is_finite()).collect()).collect();
    let (lo, hi) = bounds(series.iter().flatten().map(|p| p.1));
    let root = SVGBackend::new(out, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training metrics", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(0f64..rows.len().max(2) as f64 - 1.0, lo..hi)?;
    chart.configure_mesh().x_desc("update").draw()?;
    for (k, (s, name)) in series.into_iter().zip(columns).enumerate() {
        let color = Palette99::pick(k).to_rgba();
        chart
            .draw_series(LineSeries::new(s, color.stroke_width(2)))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    println!("plot -> {}", out.display());
    Ok(())
}

fn plot_path(log: &TrajectoryLog, out: &Path) -> Result<()> {
    let (x, y) = match (log.channel("base_x"), log.channel("base_y")) {
        (Some(x), Some(y)) => (x, y),
        _ => bail!("trajectory log has no base_x/base_y channels"),
    };
    let pts: Vec<(f64, f64)> = log.frames.iter().map(|f| (f[x], f[y])).collect();
    let (x0, x1) = bounds(pts.iter().map(|p| p.0));
    let (y0, y1) = bounds(pts.iter().map(|p| p.1));
    // equal axis scales, so circles look like circles
    let half = 0.5 * (x1 - x0).max(y1 - y0);
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let root = SVGBackend::new(out, (600, 600)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("base path", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(30)
        .y_label_area_size(50)
        .build_cartesian_2d(cx - half..cx + half, cy - half..cy + half)?;
    chart.configure_mesh().x_desc("x (m)").y_desc("y (m)").draw()?;
    chart.draw_series(LineSeries::new(pts, BLUE.stroke_width(2)))?;
    root.present()?;
    println!("plot -> {}", out.display());
    Ok(())
}

fn bounds(v: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = v.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-3);
    (lo - pad, hi + pad)
}
