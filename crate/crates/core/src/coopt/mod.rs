//! Dataset-policy co-optimization: train against the current reference
//! dataset, harvest surviving command-guided rollouts as the next dataset,
//! raise the imitation weight, repeat.
//!
//! Lineage layout under the output directory:
//!
//! ```text
//! datasets/iter_000.qmds     input dataset, then one per iteration
//! checkpoints/iter_001.json  policy + discriminator after iteration k
//! reports/iter_001.json      iteration report
//! metrics.csv                one row per training update
//! lineage.json               hashes and parent links of the whole chain
//! ```

mod amp;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::{export_rollouts, DatasetError, ExportMeta, MotionDataset, Rollout};
use crate::disc::{DiscConfig, Discriminator};
use crate::env::{env_seed, ConfigError, EnvConfig, EnvError, TerrainBank, VecEnv};
use crate::nn::{Checkpoint, NnError};
use crate::physics::log::LogEncoding;
use crate::ppo::{Policy, Ppo, PpoConfig, PpoError};
use crate::rollout::{make_envs, run_episodes, RolloutError, RolloutOptions};
use crate::variant::Variant;

pub use amp::{AmpEnv, MetricsLog, Trainer, UpdateRecord, TERM_NAMES};

#[derive(Debug, Error)]
pub enum CoOptError {
    #[error("plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("iteration {iteration}: no eligible rollouts ({diagnostics})")]
    NoEligibleRollouts { iteration: usize, diagnostics: String },
}

/// One row of the plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlanStep {
    pub w_imitation: f64,
    pub updates: usize,
    pub lin_vel_cmd: [f64; 2],
    pub ang_vel_cmd: [f64; 2],
    /// Command-guided rollouts to run after training; `0` keeps the dataset.
    pub export_episodes: usize,
    /// Clips of the input dataset used as reference; empty keeps all.
    pub allowlist: Vec<String>,
}

impl Default for PlanStep {
    fn default() -> Self {
        Self {
            w_imitation: 0.5,
            updates: 100,
            lin_vel_cmd: [0.0, 1.0],
            ang_vel_cmd: [-0.5, 0.5],
            export_episodes: 16,
            allowlist: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterationPlan {
    pub variant: Variant,
    pub n_envs: usize,
    pub steps_per_update: usize,
    /// Carry policy parameters from one iteration to the next.
    pub warm_start: bool,
    /// Carry the discriminator too. Off by default: a fresh discriminator
    /// judges each iteration against its own reference dataset only.
    pub carry_discriminator: bool,
    /// Largest mean |yaw-rate error| (rad/s) an exported rollout may have.
    pub tracking_gate: f64,
    pub export_duration_s: f64,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub disc: DiscConfig,
    #[serde(rename = "iteration")]
    pub iterations: Vec<PlanStep>,
}

impl Default for IterationPlan {
    fn default() -> Self {
        Self {
            variant: Variant::Solo9,
            n_envs: 64,
            steps_per_update: 24,
            warm_start: true,
            carry_discriminator: false,
            tracking_gate: 0.3,
            export_duration_s: 15.0,
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            disc: DiscConfig::default(),
            iterations: [0.3, 0.5, 0.7]
                .into_iter()
                .map(|w| PlanStep {
                    w_imitation: w,
                    ..PlanStep::default()
                })
                .collect(),
        }
    }
}

impl IterationPlan {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CoOptError> {
        let p: Self = crate::env::config::parse_with_overrides(text, overrides)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, CoOptError> {
        Self::from_toml(&std::fs::read_to_string(path)?, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<(), CoOptError> {
        let bad = |m: String| Err(CoOptError::Plan(m));
        if self.iterations.is_empty() {
            return bad("at least one iteration is required".into());
        }
        if self.n_envs == 0 || self.steps_per_update == 0 {
            return bad("n_envs and steps_per_update must be positive".into());
        }
        if !(self.tracking_gate >= 0.0) || !(self.export_duration_s > 0.0) {
            return bad("tracking_gate must be ≥ 0 and export_duration_s > 0".into());
        }
        self.env.validate()?;
        let mut prev = f64::NEG_INFINITY;
        for (k, s) in self.iterations.iter().enumerate() {
            if !(0.0..=1.0).contains(&s.w_imitation) {
                return bad(format!("iteration {k}: w_imitation {} outside [0, 1]", s.w_imitation));
            }
            if s.w_imitation < prev {
                return bad(format!("iteration {k}: w_imitation {} decreases from {prev}", s.w_imitation));
            }
            prev = s.w_imitation;
            if s.updates == 0 {
                return bad(format!("iteration {k}: updates must be positive"));
            }
            for (name, r) in [("lin_vel_cmd", s.lin_vel_cmd), ("ang_vel_cmd", s.ang_vel_cmd)] {
                if !(r[0] <= r[1]) {
                    return bad(format!("iteration {k}: {name} lower bound exceeds upper bound"));
                }
            }
        }
        Ok(())
    }

    /// Environment config of iteration `k` (commands from the plan step).
    pub fn env_for(&self, k: usize) -> EnvConfig {
        let mut c = self.env.clone();
        let s = &self.iterations[k];
        c.randomization.lin_vel_cmd = s.lin_vel_cmd;
        c.randomization.ang_vel_cmd = s.ang_vel_cmd;
        c.rewards.w_imitation = s.w_imitation;
        self.variant.configure(&mut c);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub iteration: usize,
    pub variant: Variant,
    pub w_imitation: f64,
    pub updates: usize,
    pub episodes: usize,
    pub survived: usize,
    pub survival_rate: f64,
    /// RMS yaw-rate tracking error over all evaluation steps (rad/s).
    pub tracking_rmse: f64,
    /// Mean imitation reward over every training transition of the
    /// iteration, as logged in the metrics stream.
    pub mean_imitation_reward: f64,
    /// Mean imitation reward of the final discriminator over the export
    /// rollouts' windows. Deterministic rollouts of a converged policy sit
    /// near the top of the range, so this is noisy across iterations.
    pub export_imitation_reward: f64,
    pub eligible: usize,
    pub exported: usize,
    pub dataset_in_hash: String,
    pub dataset_out_hash: String,
    pub final_d_expert: f64,
    pub final_d_policy: f64,
}

pub struct IterationOutput {
    pub dataset: MotionDataset,
    pub policy: Policy,
    pub disc: Discriminator,
    pub report: IterationReport,
    pub records: Vec<UpdateRecord>,
}

fn sub_seed(seed: u64, k: usize, salt: u64) -> u64 {
    env_seed(seed ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03), k)
}

/// Trains for one plan step, then exports eligible rollouts. With
/// `export_episodes = 0` the dataset passes through unchanged.
pub fn run_iteration(
    plan: &IterationPlan,
    k: usize,
    dataset_in: &MotionDataset,
    policy_in: Option<Policy>,
    disc_in: Option<Discriminator>,
    seed: u64,
    metrics: &mut MetricsLog,
) -> Result<IterationOutput, CoOptError> {
    let step = plan.iterations.get(k).ok_or_else(|| CoOptError::Plan(format!("no iteration {k}")))?;
    dataset_in.validate()?;
    if dataset_in.meta.dof != plan.variant.dof() {
        return Err(CoOptError::Plan(format!(
            "{} needs a {}-DOF dataset, got {}",
            plan.variant,
            plan.variant.dof(),
            dataset_in.meta.dof
        )));
    }
    let expert = if step.allowlist.is_empty() { dataset_in.clone() } else { dataset_in.select(&step.allowlist)? };
    let cfg = Arc::new(plan.env_for(k));
    let model = Arc::new(plan.variant.model());
    let bank = Arc::new(TerrainBank::for_config(&cfg).map_err(EnvError::from)?);
    let venv = VecEnv::with_bank(cfg.clone(), model.clone(), bank.clone(), plan.n_envs, sub_seed(seed, k, 1))?;
    let dim = crate::dataset::disc_obs_dim(plan.variant.dof());
    let disc = match disc_in {
        Some(d) if d.input_dim() == dim * d.cfg.window.max(1) => d,
        Some(_) => return Err(CoOptError::Plan("carried discriminator does not match the robot".into())),
        None => Discriminator::new(plan.disc.clone(), dim, sub_seed(seed, k, 2)),
    };
    let env = AmpEnv::new(venv, disc, step.w_imitation);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, k, 3));
    let policy = match policy_in {
        Some(p) => {
            if p.action_dim() != plan.variant.dof() {
                return Err(CoOptError::Plan("carried policy does not match the robot".into()));
            }
            p
        }
        None => {
            use crate::ppo::VecEnvironment;
            Policy::new(&plan.ppo, env.actor_dim(), env.critic_dim(), env.action_dim(), &mut rng)
        }
    };
    let mut trainer = Trainer::new(env, policy, Ppo::new(plan.ppo.clone()), expert, plan.steps_per_update, rng.random())?;
    trainer.iteration = k as u32;
    let mut records = Vec::with_capacity(step.updates);
    for _ in 0..step.updates {
        let r = trainer.update()?;
        metrics.write(&r)?;
        records.push(r);
    }
    let Trainer { env, policy, .. } = trainer;
    let disc = env.disc;

    // Command-guided evaluation and export rollouts.
    let mut ecfg = (*cfg).clone();
    ecfg.curriculum.enabled = false;
    ecfg.termination.episode_length_s = plan.export_duration_s;
    let ecfg = Arc::new(ecfg);
    let mut envs = make_envs(&ecfg, &model, &bank, 0..step.export_episodes, sub_seed(seed, k, 4), &[])?;
    let traces = run_episodes(&policy, &mut envs, RolloutOptions { log: true, ..Default::default() })?;

    let h = disc.cfg.window.max(1);
    let mut windows = Vec::new();
    for t in &traces {
        for w in t.disc_frames.windows(h) {
            windows.push(w.concat());
        }
    }
    let mean_ri = if windows.is_empty() {
        0.0
    } else {
        let m = nalgebra::DMatrix::from_fn(windows[0].len(), windows.len(), |r, c| windows[c][r]);
        let r = disc.reward(&m)?;
        r.iter().sum::<f64>() / r.len() as f64
    };
    let (mut se, mut n) = (0.0, 0usize);
    for t in &traces {
        se += t.yaw_rates.iter().map(|w| (w - t.cmd[1]).powi(2)).sum::<f64>();
        n += t.yaw_rates.len();
    }
    let survived = traces.iter().filter(|t| t.survived()).count();
    let eligible: Vec<usize> = (0..traces.len())
        .filter(|&i| traces[i].survived() && traces[i].mean_yaw_error() <= plan.tracking_gate)
        .collect();

    let in_hash = dataset_in.content_hash();
    let dataset = if step.export_episodes == 0 {
        dataset_in.clone()
    } else {
        if eligible.is_empty() {
            let errs: Vec<String> = traces.iter().map(|t| format!("{:.3}", t.mean_yaw_error())).collect();
            return Err(CoOptError::NoEligibleRollouts {
                iteration: k,
                diagnostics: format!(
                    "{survived}/{} survived {} s; mean |yaw error| per episode [{}] vs gate {}",
                    traces.len(),
                    plan.export_duration_s,
                    errs.join(", "),
                    plan.tracking_gate
                ),
            });
        }
        let rollouts: Vec<Rollout> = eligible
            .iter()
            .map(|&i| {
                let t = &traces[i];
                Rollout {
                    name: format!("iter{}_ep{:03}_vx{:+.2}_wz{:+.2}", k + 1, i, t.cmd[0], t.cmd[1]),
                    log: t.log.clone().expect("rollouts are logged"),
                    status: t.status,
                }
            })
            .collect();
        let meta = ExportMeta {
            parent: dataset_in.meta.clone(),
            parent_hash: Some(in_hash.clone()),
            policy_id: format!("{}-seed{seed}-iter{}", plan.variant, k + 1),
            command_desc: format!("vx {:?} wz {:?}", step.lin_vel_cmd, step.ang_vel_cmd),
            min_frames: h,
        };
        export_rollouts(&rollouts, &meta)?
    };
    let last = records.last();
    let report = IterationReport {
        iteration: k + 1,
        variant: plan.variant,
        w_imitation: step.w_imitation,
        updates: step.updates,
        episodes: traces.len(),
        survived,
        survival_rate: if traces.is_empty() { 0.0 } else { survived as f64 / traces.len() as f64 },
        tracking_rmse: if n == 0 { 0.0 } else { (se / n as f64).sqrt() },
        mean_imitation_reward: if records.is_empty() {
            0.0
        } else {
            records.iter().filter_map(|r| r.term("imitation")).sum::<f64>() / records.len() as f64
        },
        export_imitation_reward: mean_ri,
        eligible: eligible.len(),
        exported: if step.export_episodes == 0 { 0 } else { eligible.len() },
        dataset_in_hash: in_hash,
        dataset_out_hash: dataset.content_hash(),
        final_d_expert: last.map_or(0.0, |r| r.d_expert),
        final_d_policy: last.map_or(0.0, |r| r.d_policy),
    };
    Ok(IterationOutput {
        dataset,
        policy,
        disc,
        report,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineageEntry {
    pub iteration: usize,
    pub dataset: String,
    pub dataset_hash: String,
    pub parent_hash: Option<String>,
    pub checkpoint: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub report: Option<String>,
}

pub struct PlanResult {
    pub policy: Option<Policy>,
    pub datasets: Vec<MotionDataset>,
    pub reports: Vec<IterationReport>,
    pub lineage: Vec<LineageEntry>,
    /// Set when an iteration failed; the lineage covers every earlier one.
    pub failure: Option<CoOptError>,
}

impl PlanResult {
    pub fn hashes(&self) -> Vec<String> {
        self.lineage.iter().map(|l| l.dataset_hash.clone()).collect()
    }
}

fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Policy and discriminator of one iteration as a checkpoint.
pub fn iteration_checkpoint(out: &IterationOutput, seed: u64, dataset_hash: &str) -> Checkpoint {
    let mut ck = Checkpoint {
        step: out.records.len() as u64,
        ..Default::default()
    };
    out.policy.to_checkpoint(&mut ck, "policy/");
    ck.nets.insert("disc/net".into(), out.disc.net.clone());
    ck.normalizers.insert("disc/input".into(), out.disc.norm.clone());
    ck.meta.insert("variant".into(), out.report.variant.to_string());
    ck.meta.insert("iteration".into(), out.report.iteration.to_string());
    ck.meta.insert("seed".into(), seed.to_string());
    ck.meta.insert("dataset_hash".into(), dataset_hash.to_string());
    ck
}

/// Runs every plan iteration in order. `dataset0` is adapted to the plan's
/// variant first. With `out_dir`, the lineage is written as it grows.
/// An iteration failure stops the loop and is returned inside the result
/// alongside the lineage built so far.
pub fn run_plan(plan: &IterationPlan, dataset0: &MotionDataset, seed: u64, out_dir: Option<&Path>) -> Result<PlanResult, CoOptError> {
    plan.validate()?;
    let ds0 = plan.variant.adapt_dataset(dataset0)?;
    if ds0.meta.iteration != 0 {
        return Err(CoOptError::Plan(format!("input dataset is at iteration {}, expected 0", ds0.meta.iteration)));
    }
    ds0.validate()?;
    let dirs = match out_dir {
        Some(d) => {
            for sub in ["datasets", "checkpoints", "reports"] {
                std::fs::create_dir_all(d.join(sub))?;
            }
            std::fs::write(d.join("plan.toml"), plan.to_toml())?;
            Some(d.to_path_buf())
        }
        None => None,
    };
    let mut metrics = match &dirs {
        Some(d) => MetricsLog::append(&d.join("metrics.csv"))?,
        None => MetricsLog::sink(),
    };
    let save_ds = |ds: &MotionDataset, k: usize| -> Result<String, CoOptError> {
        let name = format!("datasets/iter_{k:03}.qmds");
        if let Some(d) = &dirs {
            ds.save(&d.join(&name), LogEncoding::Binary)?;
        }
        Ok(name)
    };
    let write_lineage = |lineage: &[LineageEntry]| -> Result<(), CoOptError> {
        if let Some(d) = &dirs {
            std::fs::write(d.join("lineage.json"), serde_json::to_string_pretty(lineage).expect("lineage serializes"))?;
        }
        Ok(())
    };

    let mut result = PlanResult {
        policy: None,
        datasets: vec![ds0.clone()],
        reports: Vec::new(),
        lineage: vec![LineageEntry {
            iteration: 0,
            dataset: save_ds(&ds0, 0)?,
            dataset_hash: ds0.content_hash(),
            parent_hash: ds0.meta.parent_hash.clone(),
            checkpoint: None,
            checkpoint_hash: None,
            report: None,
        }],
        failure: None,
    };
    write_lineage(&result.lineage)?;
    let mut current = ds0;
    let mut policy: Option<Policy> = None;
    let mut disc: Option<Discriminator> = None;
    for k in 0..plan.iterations.len() {
        let carried = if plan.warm_start { policy.clone() } else { None };
        let carried_disc = if plan.carry_discriminator { disc.take() } else { None };
        let out = match run_iteration(plan, k, &current, carried, carried_disc, seed, &mut metrics) {
            Ok(o) => o,
            Err(e) => {
                result.policy = policy;
                result.failure = Some(e);
                return Ok(result);
            }
        };
        let hash = out.dataset.content_hash();
        let ck = iteration_checkpoint(&out, seed, &hash);
        let ck_json = ck.to_json();
        let ck_name = format!("checkpoints/iter_{:03}.json", k + 1);
        let rep_name = format!("reports/iter_{:03}.json", k + 1);
        if let Some(d) = &dirs {
            std::fs::write(d.join(&ck_name), &ck_json)?;
            std::fs::write(d.join(&rep_name), serde_json::to_string_pretty(&out.report).expect("report serializes"))?;
        }
        result.lineage.push(LineageEntry {
            iteration: k + 1,
            dataset: save_ds(&out.dataset, k + 1)?,
            dataset_hash: hash,
            parent_hash: out.dataset.meta.parent_hash.clone(),
            checkpoint: Some(ck_name),
            checkpoint_hash: Some(sha_hex(ck_json.as_bytes())),
            report: Some(rep_name),
        });
        write_lineage(&result.lineage)?;
        result.reports.push(out.report);
        result.datasets.push(out.dataset.clone());
        current = out.dataset;
        policy = Some(out.policy);
        disc = Some(out.disc);
    }
    result.policy = policy;
    Ok(result)
}

/// Checks every lineage link offline: each dataset file hashes to its
/// recorded value and names its predecessor as parent (unless unchanged).
pub fn verify_lineage(dir: &Path) -> Result<Vec<LineageEntry>, CoOptError> {
    let text = std::fs::read_to_string(dir.join("lineage.json"))?;
    let lineage: Vec<LineageEntry> = serde_json::from_str(&text).map_err(|e| CoOptError::Plan(format!("lineage.json: {e}")))?;
    for (i, l) in lineage.iter().enumerate() {
        let ds = MotionDataset::load(&dir.join(&l.dataset))?;
        if ds.content_hash() != l.dataset_hash {
            return Err(CoOptError::Plan(format!("{} does not match its recorded hash", l.dataset)));
        }
        if i > 0 {
            let prev = &lineage[i - 1].dataset_hash;
            if l.dataset_hash != *prev && l.parent_hash.as_ref() != Some(prev) {
                return Err(CoOptError::Plan(format!("{} does not name its predecessor as parent", l.dataset)));
            }
        }
        if let (Some(c), Some(h)) = (&l.checkpoint, &l.checkpoint_hash) {
            if sha_hex(&std::fs::read(dir.join(c))?) != *h {
                return Err(CoOptError::Plan(format!("{c} does not match its recorded hash")));
            }
        }
    }
    Ok(lineage)
}

/// Path of iteration `k`'s checkpoint inside a lineage directory.
/// Bundled plan files.
pub fn builtin_plan(name: &str) -> Option<&'static str> {
    match name {
        "default" => Some(include_str!("../../assets/plans/default.toml")),
        "desk" => Some(include_str!("../../assets/plans/desk.toml")),
        _ => None,
    }
}

pub fn checkpoint_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("checkpoints/iter_{k:03}.json"))
}
