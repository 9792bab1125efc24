//! Environment configuration. Every section has defaults; a TOML file only
//! needs the keys it changes, and `--set section.key=value` overrides patch the
//! parsed document before it is deserialized.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::physics::{ContactParams, TerrainKind, TerrainParams, DEFAULT_DT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: expected section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub c_angvel: f64,
    /// Width of the yaw-rate tracking kernel (rad/s).
    pub angvel_sigma: f64,
    /// Use the positive exponent exactly as printed in the turning reward.
    pub literal_eq1: bool,
    pub c_slip: f64,
    pub c_clear: f64,
    /// Foot height target for the clearance term (m).
    pub p_z_max: f64,
    pub c_smooth: f64,
    /// Gait terms.
    pub c_lin_vel: f64,
    pub lin_vel_sigma: f64,
    pub c_air_time: f64,
    /// Air time (s) that breaks even in the touchdown reward.
    pub air_time_target: f64,
    pub c_torque: f64,
    pub c_base_height: f64,
    pub base_height_target: f64,
    pub c_alive: f64,
    /// Imitation mix weight.
    pub w_imitation: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            c_angvel: 1.0,
            angvel_sigma: 0.25,
            literal_eq1: false,
            c_slip: -0.05,
            c_clear: -20.0,
            p_z_max: 0.05,
            c_smooth: -0.05,
            c_lin_vel: 1.0,
            lin_vel_sigma: 0.25,
            c_air_time: 0.5,
            air_time_target: 0.25,
            c_torque: -1e-3,
            c_base_height: -5.0,
            base_height_target: 0.22,
            c_alive: 0.2,
            w_imitation: 0.3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.w_imitation) {
            return bad(format!("rewards.w_imitation {} outside [0, 1]", self.w_imitation));
        }
        for (k, v) in [
            ("c_slip", self.c_slip),
            ("c_clear", self.c_clear),
            ("c_smooth", self.c_smooth),
            ("c_torque", self.c_torque),
            ("c_base_height", self.c_base_height),
        ] {
            if v > 0.0 {
                return bad(format!("rewards.{k} is a penalty weight and must be <= 0, got {v}"));
            }
        }
        for (k, v) in [
            ("c_angvel", self.c_angvel),
            ("c_lin_vel", self.c_lin_vel),
            ("c_air_time", self.c_air_time),
            ("c_alive", self.c_alive),
        ] {
            if v < 0.0 {
                return bad(format!("rewards.{k} is a tracking weight and must be >= 0, got {v}"));
            }
        }
        if !(self.angvel_sigma > 0.0 && self.lin_vel_sigma > 0.0 && self.p_z_max > 0.0) {
            return bad("reward kernel widths and p_z_max must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationRanges {
    /// Ground friction multiplier.
    pub friction: [f64; 2],
    /// Additive trunk mass (kg).
    pub base_mass: [f64; 2],
    /// Trunk centre-of-mass offset per axis (cm).
    pub center_of_mass: [f64; 2],
    /// Multiplier on the default joint angles at reset.
    pub initial_joint_angles: [f64; 2],
    pub lin_vel_cmd: [f64; 2],
    pub ang_vel_cmd: [f64; 2],
    pub enabled: bool,
}

impl Default for RandomizationRanges {
    fn default() -> Self {
        Self {
            friction: [0.2, 2.5],
            base_mass: [-0.7, 1.5],
            center_of_mass: [-1.5, 1.5],
            initial_joint_angles: [0.9, 1.1],
            lin_vel_cmd: [0.0, 1.0],
            ang_vel_cmd: [-0.5, 0.5],
            enabled: true,
        }
    }
}

impl RandomizationRanges {
    pub fn validate(&self) -> Result<(), ConfigError> {
        for (k, r) in [
            ("friction", self.friction),
            ("base_mass", self.base_mass),
            ("center_of_mass", self.center_of_mass),
            ("initial_joint_angles", self.initial_joint_angles),
            ("lin_vel_cmd", self.lin_vel_cmd),
            ("ang_vel_cmd", self.ang_vel_cmd),
        ] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(ConfigError::Invalid(format!("randomization.{k}: lower {} > upper {}", r[0], r[1])));
            }
        }
        if self.friction[0] < 0.0 {
            return Err(ConfigError::Invalid("randomization.friction must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub max_terrain_level: u32,
    pub max_pd_level: u32,
    pub initial_terrain_level: u32,
    pub initial_pd_level: u32,
    /// Fraction of the commanded travel that counts as success.
    pub target_fraction: f64,
    /// Smallest promotion target (m), so standing commands can promote.
    pub min_target: f64,
    /// Proportional gain at PD level 0; the top level uses `action.kp`.
    pub kp_start: f64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_terrain_level: 4,
            max_pd_level: 4,
            initial_terrain_level: 0,
            initial_pd_level: 0,
            target_fraction: 0.5,
            min_target: 0.5,
            kp_start: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerminationConfig {
    /// Base height above local terrain below which the robot has fallen (m).
    pub min_base_height: f64,
    /// Roll or pitch magnitude beyond which the robot has fallen (rad).
    pub max_tilt: f64,
    pub body_contact_is_fall: bool,
    /// Episode horizon (s).
    pub episode_length_s: f64,
}

impl Default for TerminationConfig {
    fn default() -> Self {
        Self {
            min_base_height: 0.08,
            max_tilt: 1.2,
            body_contact_is_fall: true,
            episode_length_s: 15.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    #[default]
    PdTarget,
    DirectTorque,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WaistMode {
    #[default]
    Actuated,
    /// Joint stays free but receives zero torque.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConfig {
    pub mode: ActionMode,
    pub kp: f64,
    pub kd: f64,
    /// `q_target = default_pose + scale · a`.
    pub scale: f64,
    /// Actions are clipped to `[-clip, clip]` before use.
    pub clip: f64,
    pub waist: WaistMode,
    /// Overrides the built-in standing pose when non-empty.
    pub default_pose: Vec<f64>,
}

impl Default for ActionConfig {
    fn default() -> Self {
        Self {
            mode: ActionMode::PdTarget,
            kp: 5.0,
            kd: 0.2,
            scale: 0.25,
            clip: 4.0,
            waist: WaistMode::Actuated,
            default_pose: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub dt: f64,
    /// Physics substeps per control step.
    pub decimation: usize,
    pub contact: ContactParams,
    pub terrain: TerrainKind,
    pub terrain_params: TerrainParams,
    /// Terrain samples generated per curriculum level.
    pub terrain_variants: usize,
    pub terrain_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            decimation: 5,
            contact: ContactParams::default(),
            terrain: TerrainKind::Flat,
            terrain_params: TerrainParams {
                half_extent: 8.0,
                ..Default::default()
            },
            terrain_variants: 4,
            terrain_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub sim: SimConfig,
    pub rewards: RewardConfig,
    pub randomization: RandomizationRanges,
    pub curriculum: CurriculumConfig,
    pub termination: TerminationConfig,
    pub action: ActionConfig,
}

impl EnvConfig {
    pub fn control_dt(&self) -> f64 {
        self.sim.dt * self.sim.decimation as f64
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.rewards.validate()?;
        self.randomization.validate()?;
        if !(self.sim.dt > 0.0) || self.sim.decimation == 0 || self.sim.terrain_variants == 0 {
            return Err(ConfigError::Invalid("sim.dt must be > 0, sim.decimation and sim.terrain_variants >= 1".into()));
        }
        if !(self.termination.episode_length_s > 0.0) {
            return Err(ConfigError::Invalid("termination.episode_length_s must be > 0".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        parse_with_overrides(text, overrides)
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let c: EnvConfig = parse_with_overrides(&text, overrides)?;
        c.validate()?;
        Ok(c)
    }
}

/// Parses a TOML document after applying `a.b.c=value` overrides. Values are
/// read as TOML literals, falling back to a bare string.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T, ConfigError> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
        let path: Vec<&str> = key.trim().split('.').collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(ConfigError::Override(o.clone()));
        }
        let value = parse_value(raw.trim());
        let mut table = &mut doc;
        for p in &path[..path.len() - 1] {
            let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(o.clone()))?;
        }
        table.insert(path[path.len() - 1].to_string(), value);
    }
    toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or(toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid_and_table_one_ranges() {
        let c = EnvConfig::default();
        c.validate().unwrap();
        assert_eq!(c.randomization.friction, [0.2, 2.5]);
        assert_eq!(c.randomization.base_mass, [-0.7, 1.5]);
        assert_eq!(c.randomization.ang_vel_cmd, [-0.5, 0.5]);
        assert_eq!(c.control_dt(), 0.02);
    }

    #[test]
    fn overrides_patch_nested_keys() {
        let c = EnvConfig::from_toml(
            "[rewards]\nc_slip = -0.1\n",
            &["rewards.angvel_sigma=0.5".into(), "action.mode=direct_torque".into(), "sim.contact.friction=0.7".into()],
        )
        .unwrap();
        assert_eq!(c.rewards.c_slip, -0.1);
        assert_eq!(c.rewards.angvel_sigma, 0.5);
        assert_eq!(c.action.mode, ActionMode::DirectTorque);
        assert_eq!(c.sim.contact.friction, 0.7);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(EnvConfig::from_toml("[rewards]\nnope = 1\n", &[]).is_err());
        assert!(EnvConfig::from_toml("", &["rewards".into()]).is_err());
        let c = EnvConfig::from_toml("", &["rewards.w_imitation=1.5".into()]).unwrap();
        assert!(c.validate().is_err());
        let c = EnvConfig::from_toml("", &["randomization.friction=[2.0, 1.0]".into()]).unwrap();
        assert!(c.validate().is_err());
    }
}
