//! Locomotion environment: actions, observations, rewards, randomization,
//! curriculum, termination and a parallel vectorized runner.

pub mod config;
pub mod curriculum;
pub mod obs;
pub mod randomize;
pub mod reward;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::discriminator_obs;
use crate::physics::{generate_terrain, Model, PhysicsError, Sim, SimState, Terrain, TerrainKind, TerrainParams, Vec3};

pub use config::{
    ActionConfig, ActionMode, ConfigError, CurriculumConfig, EnvConfig, RandomizationRanges, RewardConfig, SimConfig,
    TerminationConfig, WaistMode,
};
pub use curriculum::{curriculum_update, CurriculumLimits, CurriculumState};
pub use obs::{actor_dim, build_observations, critic_dim, ActorObservation, CriticObservation};
pub use randomize::{randomize_env, MassError, Overrides};
pub use reward::{
    gait_terms, reward_angvel, reward_clearance, reward_slip, reward_smooth, total_reward, GaitInputs, RewardTerms,
};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Mass(#[from] MassError),
    #[error("action has {got} entries, expected {expected}")]
    ActionShape { got: usize, expected: usize },
}

/// Standing pose: front legs bent backwards, hind legs forwards, waist straight.
pub fn default_pose(model: &Model) -> Vec<f64> {
    model
        .joints
        .iter()
        .map(|j| {
            if j.is_waist {
                return 0.0;
            }
            let front = j.name.starts_with('F');
            let knee = j.name.ends_with("KFE");
            match (front, knee) {
                (true, false) => 0.8,
                (true, true) => -1.6,
                (false, false) => -0.8,
                (false, true) => 1.6,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PdGains {
    pub kp: f64,
    pub kd: f64,
}

/// `q_target = default_pose + scale · a`
pub fn q_target(a: &[f64], default_pose: &[f64], scale: f64) -> Vec<f64> {
    a.iter().zip(default_pose).map(|(a, d)| d + scale * a).collect()
}

/// Maps an action to clamped joint torques. `target` is the PD target in
/// `PdTarget` mode and ignored otherwise.
pub fn apply_action(
    a: &[f64],
    mode: ActionMode,
    gains: PdGains,
    target: &[f64],
    q: &[f64],
    qdot: &[f64],
    limits: &[f64],
) -> Vec<f64> {
    let raw: Vec<f64> = match mode {
        ActionMode::PdTarget => (0..a.len())
            .map(|k| gains.kp * (target[k] - q[k]) - gains.kd * qdot[k])
            .collect(),
        ActionMode::DirectTorque => a.iter().zip(limits).map(|(a, l)| l * a).collect(),
    };
    raw.iter().zip(limits).map(|(t, l)| t.clamp(-l, *l)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Alive,
    Fallen,
    Timeout,
}

pub fn base_height(terrain: &Terrain, s: &SimState) -> f64 {
    s.base_pos.z - terrain.height(s.base_pos.x, s.base_pos.y)
}

pub fn check_termination(terrain: &Terrain, s: &SimState, cfg: &TerminationConfig) -> Termination {
    let (roll, pitch, _) = s.base_quat.euler_angles();
    let fallen = base_height(terrain, s) < cfg.min_base_height
        || roll.abs() > cfg.max_tilt
        || pitch.abs() > cfg.max_tilt
        || (cfg.body_contact_is_fall && s.body_contact);
    if fallen {
        Termination::Fallen
    } else if s.time >= cfg.episode_length_s - 1e-9 {
        Termination::Timeout
    } else {
        Termination::Alive
    }
}

/// Pre-generated terrains, `variants` per curriculum level. Level `l` of `L`
/// scales roughness or step heights by `l / L`; level 0 is flat.
#[derive(Debug)]
pub struct TerrainBank {
    levels: Vec<Vec<Arc<Terrain>>>,
}

impl TerrainBank {
    pub fn build(kind: TerrainKind, params: &TerrainParams, max_level: u32, variants: usize, seed: u64) -> Result<Self, PhysicsError> {
        let mut levels = Vec::new();
        for l in 0..=max_level {
            let frac = if max_level == 0 { 1.0 } else { l as f64 / max_level as f64 };
            let mut p = params.clone();
            p.amplitude *= frac;
            for h in &mut p.step_heights {
                *h *= frac;
            }
            let k = if frac == 0.0 { TerrainKind::Flat } else { kind };
            let mut row: Vec<Arc<Terrain>> = Vec::new();
            for v in 0..variants.max(1) {
                if k == TerrainKind::Flat && v > 0 {
                    row.push(row[0].clone());
                    continue;
                }
                let s = seed ^ ((l as u64) << 32 | v as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                row.push(Arc::new(generate_terrain(k, &p, s)?));
            }
            levels.push(row);
        }
        Ok(Self { levels })
    }

    /// A single full-difficulty level.
    pub fn fixed(kind: TerrainKind, params: &TerrainParams, variants: usize, seed: u64) -> Result<Self, PhysicsError> {
        Self::build(kind, params, 0, variants, seed)
    }

    pub fn for_config(cfg: &EnvConfig) -> Result<Self, PhysicsError> {
        let max = if cfg.curriculum.enabled { cfg.curriculum.max_terrain_level } else { 0 };
        Self::build(cfg.sim.terrain, &cfg.sim.terrain_params, max, cfg.sim.terrain_variants, cfg.sim.terrain_seed)
    }

    pub fn max_level(&self) -> u32 {
        self.levels.len() as u32 - 1
    }

    pub fn get(&self, level: u32, variant: usize) -> Arc<Terrain> {
        let row = &self.levels[(level as usize).min(self.levels.len() - 1)];
        row[variant % row.len()].clone()
    }
}

/// Result of one control step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub terms: RewardTerms,
    pub status: Termination,
    /// The simulator rejected the step; the episode counts as fallen.
    pub sim_error: bool,
    /// Discriminator observation of the post-step state.
    pub disc_obs: Vec<f64>,
    /// Critic observation of the post-step state.
    pub critic_obs: Vec<f64>,
    /// Applied torques of the last substep.
    pub torques: Vec<f64>,
}

impl StepOutcome {
    pub fn done(&self) -> bool {
        self.status != Termination::Alive
    }
}

/// Summary of a finished episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeInfo {
    pub status: Termination,
    pub steps: usize,
    pub walked: f64,
    pub cmd: [f64; 2],
    pub terrain_level: u32,
    pub pd_level: u32,
}

pub struct LocomotionEnv {
    cfg: Arc<EnvConfig>,
    base_model: Arc<Model>,
    bank: Arc<TerrainBank>,
    rng: ChaCha8Rng,
    sim: Sim,
    state: SimState,
    default_pose: Vec<f64>,
    limits: Vec<f64>,
    waist: Option<usize>,
    cmd: [f64; 2],
    q_prev: Vec<f64>,
    target_prev: Vec<f64>,
    gains: PdGains,
    air_time: [f64; 4],
    steps: usize,
    walked: f64,
    curriculum: CurriculumState,
    overrides: Overrides,
    /// Forces the command of subsequent resets.
    pub command_override: Option<[f64; 2]>,
}

impl LocomotionEnv {
    pub fn new(cfg: Arc<EnvConfig>, model: Arc<Model>, bank: Arc<TerrainBank>, seed: u64) -> Result<Self, EnvError> {
        cfg.validate()?;
        let default_pose = if cfg.action.default_pose.is_empty() {
            default_pose(&model)
        } else {
            cfg.action.default_pose.clone()
        };
        if default_pose.len() != model.n_act() {
            return Err(ConfigError::Invalid(format!(
                "action.default_pose has {} entries, robot has {} joints",
                default_pose.len(),
                model.n_act()
            ))
            .into());
        }
        let (t0, p0) = if cfg.curriculum.enabled {
            (cfg.curriculum.initial_terrain_level, cfg.curriculum.initial_pd_level)
        } else {
            (bank.max_level(), cfg.curriculum.max_pd_level)
        };
        let sim = Sim::new(model.clone(), bank.get(t0, 0), cfg.sim.contact.clone());
        let state = sim.standing_state(&default_pose, 0.0, 0.0, 0.0);
        let n = model.n_act();
        let mut env = Self {
            limits: model.torque_limits(),
            waist: model.waist_index(),
            cfg,
            base_model: model,
            bank,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sim,
            state,
            q_prev: default_pose.clone(),
            target_prev: default_pose.clone(),
            default_pose,
            cmd: [0.0; 2],
            gains: PdGains { kp: 0.0, kd: 0.0 },
            air_time: [0.0; 4],
            steps: 0,
            walked: 0.0,
            curriculum: CurriculumState {
                terrain_level: t0,
                pd_gain_level: p0,
                walked: 0.0,
            },
            overrides: Overrides::nominal(n, [0.0; 2]),
            command_override: None,
        };
        env.reset()?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn sim(&self) -> &Sim {
        &self.sim
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn command(&self) -> [f64; 2] {
        self.cmd
    }

    pub fn set_command(&mut self, cmd: [f64; 2]) {
        self.cmd = cmd;
    }

    pub fn overrides(&self) -> &Overrides {
        &self.overrides
    }

    pub fn curriculum(&self) -> CurriculumState {
        self.curriculum
    }

    pub fn gains(&self) -> PdGains {
        self.gains
    }

    pub fn n_act(&self) -> usize {
        self.default_pose.len()
    }

    pub fn default_pose(&self) -> &[f64] {
        &self.default_pose
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn walked(&self) -> f64 {
        self.walked
    }

    fn gains_for(&self, level: u32) -> PdGains {
        let a = &self.cfg.action;
        let c = &self.cfg.curriculum;
        let frac = if c.max_pd_level == 0 { 1.0 } else { (level as f64 / c.max_pd_level as f64).min(1.0) };
        let kp = c.kp_start + (a.kp - c.kp_start) * frac;
        PdGains { kp, kd: a.kd * kp / a.kp }
    }

    /// Ends the current episode (updating the curriculum) and starts a new one.
    pub fn reset(&mut self) -> Result<EpisodeInfo, EnvError> {
        let info = self.episode_info(check_termination(&self.sim.terrain, &self.state, &self.cfg.termination));
        if self.cfg.curriculum.enabled && self.steps > 0 {
            let target = self.cmd[0].abs() * self.cfg.termination.episode_length_s * self.cfg.curriculum.target_fraction;
            if target >= self.cfg.curriculum.min_target {
                let limits = CurriculumLimits {
                    max_terrain_level: self.bank.max_level(),
                    max_pd_level: self.cfg.curriculum.max_pd_level,
                };
                self.curriculum = curriculum_update(&self.curriculum, self.walked, target, limits, &mut self.rng);
            }
        }
        let n = self.n_act();
        let trunk_mass: f64 = self.base_model.trunk.iter().map(|b| self.base_model.bodies[*b].mass).sum();
        let mut o = randomize_env(&self.cfg.randomization, n, trunk_mass, self.rng.random())?;
        if let Some(c) = self.command_override {
            o.cmd = c;
        }
        let model = if o.base_mass_delta == 0.0 && o.com_offset == [0.0; 3] {
            self.base_model.clone()
        } else {
            Arc::new(self.base_model.with_trunk_overrides(o.base_mass_delta, Vec3::from(o.com_offset)))
        };
        let mut contact = self.cfg.sim.contact.clone();
        contact.friction *= o.friction_multiplier;
        let variant = self.rng.random_range(0..self.cfg.sim.terrain_variants.max(1));
        let terrain = self.bank.get(self.curriculum.terrain_level, variant);
        self.sim = Sim::new(model, terrain, contact);
        let q0: Vec<f64> = self.default_pose.iter().zip(&o.joint_angle_scale).map(|(d, s)| d * s).collect();
        self.state = self.sim.standing_state(&q0, 0.0, 0.0, 0.0);
        self.q_prev = q0.clone();
        self.target_prev = q0;
        self.gains = self.gains_for(self.curriculum.pd_gain_level);
        self.cmd = o.cmd;
        self.overrides = o;
        self.air_time = [0.0; 4];
        self.steps = 0;
        self.walked = 0.0;
        Ok(info)
    }

    fn episode_info(&self, status: Termination) -> EpisodeInfo {
        EpisodeInfo {
            status,
            steps: self.steps,
            walked: self.walked,
            cmd: self.cmd,
            terrain_level: self.curriculum.terrain_level,
            pd_level: self.curriculum.pd_gain_level,
        }
    }

    pub fn observe(&self) -> (ActorObservation, CriticObservation) {
        build_observations(&self.state, self.cmd, &self.q_prev)
    }

    pub fn disc_obs(&self) -> Vec<f64> {
        discriminator_obs(&self.state, &self.sim.terrain)
    }

    /// Adds a planar velocity change to the base.
    pub fn push(&mut self, delta_v: [f64; 2]) {
        self.state = crate::physics::apply_push(&self.state, delta_v);
    }

    /// Advances one control step. Does not reset.
    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        let n = self.n_act();
        if action.len() != n {
            return Err(EnvError::ActionShape {
                got: action.len(),
                expected: n,
            });
        }
        let clip = self.cfg.action.clip;
        let a: Vec<f64> = action.iter().map(|x| if x.is_finite() { x.clamp(-clip, clip) } else { 0.0 }).collect();
        let target = q_target(&a, &self.default_pose, self.cfg.action.scale);
        let q_before = self.state.q.clone();
        let xy_before = [self.state.base_pos.x, self.state.base_pos.y];
        let mut torques = vec![0.0; n];
        let mut sim_error = false;
        for _ in 0..self.cfg.sim.decimation {
            let s = &self.state;
            torques = apply_action(&a, self.cfg.action.mode, self.gains, &target, &s.q, &s.qdot, &self.limits);
            if let (WaistMode::Free, Some(w)) = (self.cfg.action.waist, self.waist) {
                torques[w] = 0.0;
            }
            match self.sim.step(s, &torques, self.cfg.sim.dt) {
                Ok((next, _)) => self.state = next,
                Err(_) => {
                    sim_error = true;
                    break;
                }
            }
        }
        self.steps += 1;
        let s = &self.state;
        self.walked += (s.base_pos.x - xy_before[0]).hypot(s.base_pos.y - xy_before[1]);

        let ctrl_dt = self.cfg.control_dt();
        let mut touchdown = [None; 4];
        for f in 0..4 {
            if s.foot_contacts[f] {
                if self.air_time[f] > 0.0 {
                    touchdown[f] = Some(self.air_time[f]);
                }
                self.air_time[f] = 0.0;
            } else {
                self.air_time[f] += ctrl_dt;
            }
        }
        let rc = &self.cfg.rewards;
        let feet = self.sim.foot_kinematics(s);
        let (_, _, yaw) = s.base_quat.euler_angles();
        let (sy, cy) = yaw.sin_cos();
        let v = s.base_lin_vel;
        let (lin_vel, air_time, torque, base_height_r, alive) = gait_terms(
            rc,
            &GaitInputs {
                cmd_vx: self.cmd[0],
                vx: cy * v.x + sy * v.y,
                lateral_v: -sy * v.x + cy * v.y,
                touchdown_air_time: touchdown,
                torques: &torques,
                base_height: base_height(&self.sim.terrain, s),
            },
        );
        let terms = RewardTerms {
            turning: reward_angvel(self.cmd[1], s.base_ang_vel.z, rc.c_angvel, rc.angvel_sigma, rc.literal_eq1),
            slip: reward_slip(&feet, rc.c_slip),
            clearance: reward_clearance(&feet, rc.p_z_max, rc.c_clear),
            smooth: reward_smooth(&target, &self.target_prev, rc.c_smooth),
            lin_vel,
            air_time,
            torque,
            base_height: base_height_r,
            alive,
        };
        self.target_prev = target;
        self.q_prev = q_before;
        let status = if sim_error {
            Termination::Fallen
        } else {
            check_termination(&self.sim.terrain, s, &self.cfg.termination)
        };
        let (_, critic) = self.observe();
        Ok(StepOutcome {
            terms,
            status,
            sim_error,
            disc_obs: self.disc_obs(),
            critic_obs: critic.0,
            torques,
        })
    }
}

/// Independently owned environments stepped in parallel. Results are returned
/// in environment order, so runs are reproducible for any thread count.
pub struct VecEnv {
    pub envs: Vec<LocomotionEnv>,
}

/// Per-env result of a vectorized step. Finished episodes are already reset.
#[derive(Debug, Clone)]
pub struct VecStep {
    pub outcome: StepOutcome,
    pub episode: Option<EpisodeInfo>,
}

pub fn env_seed(master: u64, index: usize) -> u64 {
    master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl VecEnv {
    pub fn new(cfg: Arc<EnvConfig>, model: Arc<Model>, n: usize, seed: u64) -> Result<Self, EnvError> {
        let bank = Arc::new(TerrainBank::for_config(&cfg)?);
        Self::with_bank(cfg, model, bank, n, seed)
    }

    pub fn with_bank(cfg: Arc<EnvConfig>, model: Arc<Model>, bank: Arc<TerrainBank>, n: usize, seed: u64) -> Result<Self, EnvError> {
        let envs = (0..n)
            .map(|i| LocomotionEnv::new(cfg.clone(), model.clone(), bank.clone(), env_seed(seed, i)))
            .collect::<Result<_, _>>()?;
        Ok(Self { envs })
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<VecStep>, EnvError> {
        assert_eq!(actions.len(), self.envs.len(), "one action per env");
        self.envs
            .par_iter_mut()
            .zip(actions.par_iter())
            .map(|(env, a)| {
                let outcome = env.step(a)?;
                let episode = if outcome.done() {
                    let mut info = env.reset()?;
                    info.status = outcome.status;
                    Some(info)
                } else {
                    None
                };
                Ok(VecStep { outcome, episode })
            })
            .collect()
    }
}
