//! Reward kernels. All are pure functions of their arguments.

use crate::physics::FootKinematics;

use super::config::RewardConfig;

/// Yaw-rate tracking: `c · exp(−|V_cmd − V_wz|² / σ²)`, or `c · exp(+|·|²)`
/// in literal mode.
pub fn reward_angvel(v_cmd: f64, v_wz: f64, c_angvel: f64, sigma: f64, literal: bool) -> f64 {
    let e2 = (v_cmd - v_wz) * (v_cmd - v_wz);
    if literal {
        c_angvel * e2.exp()
    } else {
        c_angvel * (-e2 / (sigma * sigma)).exp()
    }
}

/// `c · Σ C_i |ṗ_xy,i|²`
pub fn reward_slip(feet: &[FootKinematics; 4], c_slip: f64) -> f64 {
    c_slip
        * feet
            .iter()
            .filter(|f| f.contact)
            .map(|f| f.v_xy[0] * f.v_xy[0] + f.v_xy[1] * f.v_xy[1])
            .sum::<f64>()
}

/// `c · Σ |p_z,i − p_z^max|² |ṗ_xy,i|²`
pub fn reward_clearance(feet: &[FootKinematics; 4], p_z_max: f64, c_clear: f64) -> f64 {
    c_clear
        * feet
            .iter()
            .map(|f| {
                let dz = f.p_z - p_z_max;
                dz * dz * (f.v_xy[0] * f.v_xy[0] + f.v_xy[1] * f.v_xy[1])
            })
            .sum::<f64>()
}

/// `c · |q_target,t − q_target,t−1|²`
pub fn reward_smooth(target: &[f64], prev: &[f64], c_smooth: f64) -> f64 {
    assert_eq!(target.len(), prev.len(), "target lengths differ");
    c_smooth * target.iter().zip(prev).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
}

/// `w_I r^I + (1 − w_I)(r^C + r^G + r^Tu)`
pub fn total_reward(r_i: f64, r_g: f64, r_c: f64, r_tu: f64, w_i: f64) -> f64 {
    w_i * r_i + (1.0 - w_i) * (r_c + r_g + r_tu)
}

/// Per-term rewards of one control step, before imitation mixing.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardTerms {
    pub turning: f64,
    pub slip: f64,
    pub clearance: f64,
    pub smooth: f64,
    pub lin_vel: f64,
    pub air_time: f64,
    pub torque: f64,
    pub base_height: f64,
    pub alive: f64,
}

impl RewardTerms {
    pub fn constraint(&self) -> f64 {
        self.slip + self.clearance + self.smooth
    }

    pub fn gait(&self) -> f64 {
        self.lin_vel + self.air_time + self.torque + self.base_height + self.alive
    }

    /// `r^Ta = r^C + r^G + r^Tu`
    pub fn task(&self) -> f64 {
        self.constraint() + self.gait() + self.turning
    }

    pub fn mixed(&self, r_imitation: f64, w_i: f64) -> f64 {
        total_reward(r_imitation, self.gait(), self.constraint(), self.turning, w_i)
    }
}

/// Inputs of the gait-term computation for one control step.
#[derive(Debug, Clone, Copy)]
pub struct GaitInputs<'a> {
    pub cmd_vx: f64,
    /// Forward speed in the heading frame.
    pub vx: f64,
    pub lateral_v: f64,
    /// Air time of each foot that touched down this step (s), else `None`.
    pub touchdown_air_time: [Option<f64>; 4],
    pub torques: &'a [f64],
    pub base_height: f64,
}

pub fn gait_terms(cfg: &RewardConfig, g: &GaitInputs) -> (f64, f64, f64, f64, f64) {
    let s2 = cfg.lin_vel_sigma * cfg.lin_vel_sigma;
    let ev = (g.cmd_vx - g.vx).powi(2) + g.lateral_v * g.lateral_v;
    let lin = cfg.c_lin_vel * (-ev / s2).exp();
    let air = if g.cmd_vx > 0.1 {
        cfg.c_air_time
            * g.touchdown_air_time
                .iter()
                .flatten()
                .map(|t| t - cfg.air_time_target)
                .sum::<f64>()
    } else {
        0.0
    };
    let torque = cfg.c_torque * g.torques.iter().map(|t| t * t).sum::<f64>();
    let dh = g.base_height - cfg.base_height_target;
    let height = cfg.c_base_height * dh * dh;
    (lin, air, torque, height, cfg.c_alive)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn foot(p_z: f64, vx: f64, vy: f64, contact: bool) -> FootKinematics {
        FootKinematics {
            p_z,
            v_xy: [vx, vy],
            contact,
        }
    }

    #[test]
    fn angvel_cases() {
        assert_eq!(reward_angvel(0.3, 0.3, 2.0, 0.25, false), 2.0);
        assert_eq!(reward_angvel(0.3, 0.3, 2.0, 0.25, true), 2.0);
        let r = reward_angvel(-0.4, 0.0, 1.0, 0.25, false);
        assert!((r - (-2.56f64).exp()).abs() < 1e-15);
        assert!((r - 0.0773).abs() < 1e-4);
        assert!((reward_angvel(-0.4, 0.0, 1.0, 0.25, true) - 0.16f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn slip_cases() {
        let air = [foot(0.1, 1.0, 1.0, false); 4];
        assert_eq!(reward_slip(&air, -1.0), 0.0);
        let mut one = air;
        one[2] = foot(0.0, 0.3, 0.4, true);
        assert!((reward_slip(&one, -1.0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn clearance_cases() {
        let at = [foot(0.05, 0.7, -0.2, true); 4];
        assert_eq!(reward_clearance(&at, 0.05, -1.0), 0.0);
        let still = [foot(0.0, 0.0, 0.0, true); 4];
        assert_eq!(reward_clearance(&still, 0.05, -1.0), 0.0);
        let mut one = still;
        one[0] = foot(0.0, 1.0, 0.0, false);
        assert!((reward_clearance(&one, 0.05, -1.0) + 0.0025).abs() < 1e-15);
    }

    #[test]
    fn smooth_cases() {
        let a = [0.1, -0.2, 0.3];
        assert_eq!(reward_smooth(&a, &a, -1.0), 0.0);
        let b = [0.2, -0.2, 0.3];
        assert!((reward_smooth(&b, &a, -1.0) + 0.01).abs() < 1e-15);
    }

    #[test]
    fn total_cases() {
        assert_eq!(total_reward(5.0, 1.0, -0.5, 0.25, 0.0), 0.75);
        assert_eq!(total_reward(5.0, 1.0, -0.5, 0.25, 1.0), 5.0);
        assert_eq!(total_reward(2.0, 1.0, -0.5, 0.5, 0.5), 1.5);
    }

    proptest! {
        #[test]
        fn angvel_strictly_decreasing_in_error(cmd in -1.0..1.0f64, e1 in 0.0..1.0f64, de in 1e-3..1.0f64) {
            let a = reward_angvel(cmd, cmd + e1, 1.0, 0.25, false);
            let b = reward_angvel(cmd, cmd - (e1 + de), 1.0, 0.25, false);
            prop_assert!(b < a || a == 0.0);
        }

        #[test]
        fn slip_quadratic_homogeneity(v in proptest::collection::vec(-2.0..2.0f64, 8), c in proptest::collection::vec(any::<bool>(), 4)) {
            let feet: [FootKinematics; 4] = std::array::from_fn(|i| foot(0.0, v[2 * i], v[2 * i + 1], c[i]));
            let fast: [FootKinematics; 4] = std::array::from_fn(|i| foot(0.0, 2.0 * v[2 * i], 2.0 * v[2 * i + 1], c[i]));
            let (a, b) = (reward_slip(&feet, -0.7), reward_slip(&fast, -0.7));
            prop_assert!((b - 4.0 * a).abs() <= 1e-12 * a.abs().max(1e-300));
        }

        #[test]
        fn smooth_permutation_invariant(t in proptest::collection::vec(-1.0..1.0f64, 9), p in proptest::collection::vec(-1.0..1.0f64, 9), rot in 0usize..9) {
            let mut tr = t.clone();
            let mut pr = p.clone();
            tr.rotate_left(rot);
            pr.rotate_left(rot);
            let a = reward_smooth(&t, &p, -0.3);
            let b = reward_smooth(&tr, &pr, -0.3);
            prop_assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
