use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::config::RandomizationRanges;

#[derive(Debug, Error)]
#[error("randomized trunk mass stayed <= 0 after {0} draws")]
pub struct MassError(pub usize);

/// Physical overrides and command for one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Overrides {
    pub friction_multiplier: f64,
    pub base_mass_delta: f64,
    /// Metres.
    pub com_offset: [f64; 3],
    pub joint_angle_scale: Vec<f64>,
    /// `[V_x (m/s), yaw rate (rad/s)]`
    pub cmd: [f64; 2],
}

impl Overrides {
    pub fn nominal(n_joints: usize, cmd: [f64; 2]) -> Self {
        Self {
            friction_multiplier: 1.0,
            base_mass_delta: 0.0,
            com_offset: [0.0; 3],
            joint_angle_scale: vec![1.0; n_joints],
            cmd,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

const MASS_DRAWS: usize = 100;

/// Draws one episode's overrides. Deterministic in `seed`. With
/// `ranges.enabled == false` only the command is sampled.
pub fn randomize_env(ranges: &RandomizationRanges, n_joints: usize, trunk_mass: f64, seed: u64) -> Result<Overrides, MassError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cmd = [uniform(&mut rng, ranges.lin_vel_cmd), uniform(&mut rng, ranges.ang_vel_cmd)];
    if !ranges.enabled {
        return Ok(Overrides::nominal(n_joints, cmd));
    }
    let friction_multiplier = uniform(&mut rng, ranges.friction);
    let mut base_mass_delta = uniform(&mut rng, ranges.base_mass);
    let mut draws = 1;
    while trunk_mass + base_mass_delta <= 0.0 {
        if draws >= MASS_DRAWS {
            return Err(MassError(draws));
        }
        base_mass_delta = uniform(&mut rng, ranges.base_mass);
        draws += 1;
    }
    let com_offset = std::array::from_fn(|_| 0.01 * uniform(&mut rng, ranges.center_of_mass));
    let joint_angle_scale = (0..n_joints).map(|_| uniform(&mut rng, ranges.initial_joint_angles)).collect();
    Ok(Overrides {
        friction_multiplier,
        base_mass_delta,
        com_offset,
        joint_angle_scale,
        cmd,
    })
}
