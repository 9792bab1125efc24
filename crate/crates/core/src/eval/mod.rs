//! Evaluation protocols: yaw-rate steering, terrain survival and velocity
//! disturbances, for any robot variant.
//!
//! Episodes run in chunks of independent environments. Every result is
//! reduced in episode-index order, so a fixed seed gives the same report.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{env_seed, ConfigError, EnvConfig, EnvError, TerrainBank};
use crate::physics::log::{channel_names, LogEncoding, LogError, TrajectoryLog};
use crate::physics::{PhysicsError, TerrainKind, TerrainParams};
use crate::rollout::{make_envs, run_episodes, Controller, EpisodeTrace, RolloutError, RolloutOptions};
use crate::variant::Variant;

/// Environments stepped together per chunk.
const CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    #[default]
    Steering,
    Terrain,
    Disturbance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainSpec {
    pub label: String,
    pub kind: TerrainKind,
    pub params: TerrainParams,
}

impl Default for TerrainSpec {
    fn default() -> Self {
        Self {
            label: "flat".into(),
            kind: TerrainKind::Flat,
            params: TerrainParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub name: String,
    pub kind: ProtocolKind,
    pub variant: Variant,
    /// Forward velocity command (m/s).
    pub lin_vel: f64,
    /// Yaw-rate commands (rad/s). Steering runs one condition per entry;
    /// the survival protocols cycle them over episodes.
    pub yaw_rates: Vec<f64>,
    /// Terrain protocol: one condition per entry. Others use the first.
    pub terrains: Vec<TerrainSpec>,
    /// Disturbance protocol: one condition per magnitude (m/s).
    pub push_magnitudes: Vec<f64>,
    pub duration_s: f64,
    /// Episodes per seed group.
    pub n_episodes: usize,
    pub seed_groups: usize,
    pub seed: u64,
    pub terrain_variants: usize,
    /// Steering statistics skip the transient before this time (s).
    pub steady_start_s: f64,
    /// |mean yaw rate| below this (rad/s) is reported as straight.
    pub straight_threshold: f64,
    /// Episodes per condition whose trajectory logs are written.
    pub log_episodes: usize,
    pub env: EnvConfig,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        let mut env = EnvConfig::default();
        env.curriculum.enabled = false;
        env.randomization.enabled = false;
        Self {
            name: "steering".into(),
            kind: ProtocolKind::Steering,
            variant: Variant::Solo9,
            lin_vel: 0.6,
            yaw_rates: vec![-0.4],
            terrains: vec![TerrainSpec::default()],
            push_magnitudes: vec![0.0],
            duration_s: 15.0,
            n_episodes: 200,
            seed_groups: 5,
            seed: 0,
            terrain_variants: 4,
            steady_start_s: 2.0,
            straight_threshold: 0.02,
            log_episodes: 2,
            env,
        }
    }
}

impl EvalProtocol {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, EvalError> {
        let p: Self = crate::env::config::parse_with_overrides(text, overrides)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, EvalError> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("protocol serializes")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: &str| Err(EvalError::Protocol(m.into()));
        if self.n_episodes == 0 || self.seed_groups == 0 {
            return bad("n_episodes and seed_groups must be positive");
        }
        if !(self.duration_s > 0.0) {
            return bad("duration_s must be positive");
        }
        if self.yaw_rates.is_empty() || self.terrains.is_empty() {
            return bad("yaw_rates and terrains need at least one entry");
        }
        if self.kind == ProtocolKind::Disturbance && self.push_magnitudes.is_empty() {
            return bad("disturbance protocol needs push magnitudes");
        }
        if self.push_magnitudes.iter().any(|m| !(*m >= 0.0)) {
            return bad("push magnitudes must be ≥ 0");
        }
        self.env.validate()?;
        Ok(())
    }
}

/// Turning radius of a steering condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurningRadius {
    Radius(f64),
    /// Mean yaw rate below the straight-line threshold.
    Straight,
    /// No surviving episode to measure.
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub label: String,
    pub lin_vel: f64,
    pub yaw_rates: Vec<f64>,
    pub terrain: String,
    pub push_magnitude: f64,
    pub episodes: usize,
    pub survived: usize,
    /// `survived / episodes`.
    pub survival_rate: f64,
    pub group_rates: Vec<f64>,
    /// Sample standard deviation of `group_rates`.
    pub survival_std: f64,
    /// Per-episode survival, group-major.
    pub outcomes: Vec<bool>,
    pub tracking_rmse: Option<f64>,
    pub turning_radius: Option<TurningRadius>,
    pub circle_fit_radius: Option<f64>,
    pub logs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: EvalProtocol,
    pub controller: String,
    pub conditions: Vec<ConditionResult>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Survival statistics: exact rate, per-group rates and their sample std.
pub fn survival_stats(outcomes: &[bool], groups: usize) -> (f64, Vec<f64>, f64) {
    let n = outcomes.len();
    let rate = if n == 0 { 0.0 } else { outcomes.iter().filter(|s| **s).count() as f64 / n as f64 };
    let per = n / groups.max(1);
    let rates: Vec<f64> = outcomes
        .chunks(per.max(1))
        .take(groups)
        .map(|c| c.iter().filter(|s| **s).count() as f64 / c.len() as f64)
        .collect();
    let std = if rates.len() < 2 {
        0.0
    } else {
        let m = rates.iter().sum::<f64>() / rates.len() as f64;
        (rates.iter().map(|r| (r - m).powi(2)).sum::<f64>() / (rates.len() - 1) as f64).sqrt()
    };
    (rate, rates, std)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteeringMetrics {
    pub rmse: f64,
    pub mean_speed: f64,
    pub mean_yaw_rate: f64,
    pub radius: TurningRadius,
    pub circle_fit: Option<f64>,
}

/// Steady-state steering statistics over logs (frames after
/// `steady_start_s`). Radius is `mean(speed) / mean(|yaw rate|)`.
pub fn steering_metrics(logs: &[&TrajectoryLog], cmd_yaw: f64, steady_start_s: f64, straight_threshold: f64) -> SteeringMetrics {
    let (mut speed, mut yaw, mut abs_yaw, mut se, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    let mut fits = Vec::new();
    for l in logs {
        let ch = |c: &str| l.channel(c).expect("state log channels");
        let (vx, vy, wz, x, y) = (ch("vel_x"), ch("vel_y"), ch("angvel_z"), ch("base_x"), ch("base_y"));
        let first = (steady_start_s / l.dt).round() as usize;
        let rows = l.frames.get(first.min(l.frames.len())..).unwrap_or(&[]);
        for r in rows {
            speed += r[vx].hypot(r[vy]);
            yaw += r[wz];
            abs_yaw += r[wz].abs();
            se += (r[wz] - cmd_yaw).powi(2);
            n += 1;
        }
        if let Some(f) = circle_fit(&rows.iter().map(|r| [r[x], r[y]]).collect::<Vec<_>>()) {
            fits.push(f);
        }
    }
    if n == 0 {
        return SteeringMetrics {
            rmse: f64::NAN,
            mean_speed: f64::NAN,
            mean_yaw_rate: f64::NAN,
            radius: TurningRadius::Undefined,
            circle_fit: None,
        };
    }
    let nf = n as f64;
    let mean_yaw = yaw / nf;
    let radius = if mean_yaw.abs() < straight_threshold {
        TurningRadius::Straight
    } else {
        TurningRadius::Radius((speed / nf) / (abs_yaw / nf))
    };
    SteeringMetrics {
        rmse: (se / nf).sqrt(),
        mean_speed: speed / nf,
        mean_yaw_rate: mean_yaw,
        radius,
        circle_fit: (!fits.is_empty()).then(|| fits.iter().sum::<f64>() / fits.len() as f64),
    }
}

/// Algebraic least-squares circle through planar points; `None` when the
/// points are (nearly) collinear or too few.
pub fn circle_fit(pts: &[[f64; 2]]) -> Option<f64> {
    if pts.len() < 3 {
        return None;
    }
    // shift to the centroid for conditioning
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for p in pts {
        let (x, y) = (p[0] - cx, p[1] - cy);
        let row = Vector3::new(x, y, 1.0);
        a += row * row.transpose();
        b -= row * (x * x + y * y);
    }
    let sol = a.lu().solve(&b)?;
    let r2 = sol[0] * sol[0] / 4.0 + sol[1] * sol[1] / 4.0 - sol[2];
    (r2 > 0.0 && r2.is_finite() && r2.sqrt() < 1e6).then(|| r2.sqrt())
}

/// State log of a base moving at speed `v` with constant yaw rate `w`
/// (counter-clockwise circle from the origin, heading +x). Joints stay at 0.
pub fn scripted_twist_log(joint_names: &[String], v: f64, w: f64, dt: f64, steps: usize, height: f64) -> TrajectoryLog {
    let mut log = TrajectoryLog::new(dt, channel_names(joint_names));
    let ch = |c: &str| log.channel(c).expect("channel");
    let idx = [
        ch("base_x"),
        ch("base_y"),
        ch("base_z"),
        ch("quat_w"),
        ch("quat_z"),
        ch("vel_x"),
        ch("vel_y"),
        ch("angvel_z"),
        ch("normal_z"),
        ch("base_height"),
    ];
    let width = log.channels.len();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let psi = w * t;
        let (x, y) = if w == 0.0 { (v * t, 0.0) } else { (v / w * psi.sin(), v / w * (1.0 - psi.cos())) };
        let mut r = vec![0.0; width];
        let vals = [x, y, height, (psi / 2.0).cos(), (psi / 2.0).sin(), v * psi.cos(), v * psi.sin(), w, 1.0, height];
        for (i, v) in idx.iter().zip(vals) {
            r[*i] = v;
        }
        log.push(r);
    }
    log
}

struct Condition {
    label: String,
    yaw_rates: Vec<f64>,
    terrain: TerrainSpec,
    push: f64,
}

fn conditions(p: &EvalProtocol) -> Vec<Condition> {
    let t0 = p.terrains[0].clone();
    match p.kind {
        ProtocolKind::Steering => p
            .yaw_rates
            .iter()
            .map(|w| Condition {
                label: format!("yaw {w:+.2} rad/s"),
                yaw_rates: vec![*w],
                terrain: t0.clone(),
                push: 0.0,
            })
            .collect(),
        ProtocolKind::Terrain => p
            .terrains
            .iter()
            .map(|t| Condition {
                label: t.label.clone(),
                yaw_rates: p.yaw_rates.clone(),
                terrain: t.clone(),
                push: 0.0,
            })
            .collect(),
        ProtocolKind::Disturbance => p
            .push_magnitudes
            .iter()
            .map(|m| Condition {
                label: format!("push {m:.2} m/s"),
                yaw_rates: p.yaw_rates.clone(),
                terrain: t0.clone(),
                push: *m,
            })
            .collect(),
    }
}

/// Runs every condition of `protocol` with `ctrl`. Trajectory logs of the
/// first `log_episodes` episodes per condition go to `log_dir` if given.
pub fn evaluate<C: Controller + ?Sized>(ctrl: &C, protocol: &EvalProtocol, controller_id: &str, log_dir: Option<&Path>) -> Result<EvalReport, EvalError> {
    protocol.validate()?;
    let model = Arc::new(protocol.variant.model());
    let mut out = Vec::new();
    for (ci, cond) in conditions(protocol).into_iter().enumerate() {
        // the generator rejects a zero amplitude; the degenerate case is flat
        let kind = match cond.terrain.kind {
            TerrainKind::Uneven if cond.terrain.params.amplitude == 0.0 => TerrainKind::Flat,
            k => k,
        };
        let mut cfg = protocol.env.clone();
        cfg.termination.episode_length_s = protocol.duration_s;
        cfg.sim.terrain = kind;
        cfg.sim.terrain_params = cond.terrain.params.clone();
        protocol.variant.configure(&mut cfg);
        let cfg = Arc::new(cfg);
        let bank = Arc::new(TerrainBank::fixed(kind, &cond.terrain.params, protocol.terrain_variants.max(1), protocol.seed)?);
        let commands: Vec<[f64; 2]> = cond.yaw_rates.iter().map(|w| [protocol.lin_vel, *w]).collect();
        let steering = protocol.kind == ProtocolKind::Steering;
        let mut outcomes = Vec::with_capacity(protocol.seed_groups * protocol.n_episodes);
        let mut steady_logs: Vec<TrajectoryLog> = Vec::new();
        let mut logs = Vec::new();
        for g in 0..protocol.seed_groups {
            let group_seed = env_seed(protocol.seed, 1000 * ci + g);
            let mut start = 0;
            while start < protocol.n_episodes {
                let end = (start + CHUNK).min(protocol.n_episodes);
                let mut envs = make_envs(&cfg, &model, &bank, start..end, group_seed, &commands)?;
                let want_log = steering || (g == 0 && start < protocol.log_episodes);
                let opts = RolloutOptions {
                    log: want_log,
                    push_magnitude: cond.push,
                    push_seed: group_seed ^ 0x5EED,
                    first_episode: start,
                };
                let traces = run_episodes(ctrl, &mut envs, opts)?;
                for (j, t) in traces.into_iter().enumerate() {
                    let ep = start + j;
                    outcomes.push(t.survived());
                    if g == 0 && ep < protocol.log_episodes {
                        if let (Some(dir), Some(l)) = (log_dir, &t.log) {
                            logs.push(write_log(dir, &protocol.name, ci, ep, l)?);
                        }
                    }
                    if steering {
                        keep_steady(&mut steady_logs, t);
                    }
                }
                start = end;
            }
        }
        let (rate, group_rates, std) = survival_stats(&outcomes, protocol.seed_groups);
        let (rmse, radius, fit) = if steering {
            let refs: Vec<&TrajectoryLog> = steady_logs.iter().collect();
            let m = steering_metrics(&refs, cond.yaw_rates[0], protocol.steady_start_s, protocol.straight_threshold);
            (m.rmse.is_finite().then_some(m.rmse), Some(m.radius), m.circle_fit)
        } else {
            (None, None, None)
        };
        out.push(ConditionResult {
            label: cond.label,
            lin_vel: protocol.lin_vel,
            yaw_rates: cond.yaw_rates,
            terrain: cond.terrain.label,
            push_magnitude: cond.push,
            episodes: outcomes.len(),
            survived: outcomes.iter().filter(|s| **s).count(),
            survival_rate: rate,
            group_rates,
            survival_std: std,
            outcomes,
            tracking_rmse: rmse,
            turning_radius: radius,
            circle_fit_radius: fit,
            logs,
        });
    }
    Ok(EvalReport {
        protocol: protocol.clone(),
        controller: controller_id.to_string(),
        conditions: out,
    })
}

fn keep_steady(logs: &mut Vec<TrajectoryLog>, t: EpisodeTrace) {
    if t.survived() {
        if let Some(l) = t.log {
            logs.push(l);
        }
    }
}

fn write_log(dir: &Path, name: &str, cond: usize, ep: usize, l: &TrajectoryLog) -> Result<String, EvalError> {
    std::fs::create_dir_all(dir)?;
    let path: PathBuf = dir.join(format!("{name}_c{cond}_ep{ep:03}.csv"));
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    l.write(&mut f, LogEncoding::Text)?;
    Ok(path.display().to_string())
}

fn require(p: &EvalProtocol, kind: ProtocolKind) -> Result<(), EvalError> {
    if p.kind != kind {
        return Err(EvalError::Protocol(format!("expected a {kind:?} protocol, got {:?}", p.kind)));
    }
    Ok(())
}

pub fn eval_steering<C: Controller + ?Sized>(ctrl: &C, p: &EvalProtocol) -> Result<EvalReport, EvalError> {
    require(p, ProtocolKind::Steering)?;
    evaluate(ctrl, p, "policy", None)
}

pub fn eval_survival<C: Controller + ?Sized>(ctrl: &C, p: &EvalProtocol) -> Result<EvalReport, EvalError> {
    require(p, ProtocolKind::Terrain)?;
    evaluate(ctrl, p, "policy", None)
}

pub fn eval_disturbance<C: Controller + ?Sized>(ctrl: &C, p: &EvalProtocol) -> Result<EvalReport, EvalError> {
    require(p, ProtocolKind::Disturbance)?;
    evaluate(ctrl, p, "policy", None)
}

/// Bundled protocol files.
pub fn builtin_protocol(name: &str) -> Option<&'static str> {
    match name {
        "steering" => Some(include_str!("../../assets/protocols/steering.toml")),
        "tableII" => Some(include_str!("../../assets/protocols/table2.toml")),
        "tableIII" => Some(include_str!("../../assets/protocols/table3.toml")),
        _ => None,
    }
}
