//! Observation layout.
//!
//! Actor: `[quat w,x,y,z (4) | cmd vx, wz (2) | q (n) | qdot (n) | q_prev (n)]`,
//! 33 entries for nine joints and 30 for eight.
//! Critic: actor followed by the base linear velocity in the body frame (3).

use crate::physics::SimState;

#[derive(Debug, Clone, PartialEq)]
pub struct ActorObservation(pub Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct CriticObservation(pub Vec<f64>);

impl CriticObservation {
    pub fn actor_part(&self) -> &[f64] {
        &self.0[..self.0.len() - 3]
    }
}

pub fn actor_dim(n_joints: usize) -> usize {
    6 + 3 * n_joints
}

pub fn critic_dim(n_joints: usize) -> usize {
    actor_dim(n_joints) + 3
}

pub fn build_observations(state: &SimState, cmd: [f64; 2], q_prev: &[f64]) -> (ActorObservation, CriticObservation) {
    let n = state.q.len();
    assert_eq!(q_prev.len(), n, "q_prev length");
    let quat = state.base_quat.quaternion();
    let mut a = Vec::with_capacity(critic_dim(n));
    a.extend([quat.w, quat.i, quat.j, quat.k]);
    a.extend(cmd);
    a.extend(&state.q);
    a.extend(&state.qdot);
    a.extend(q_prev);
    let mut c = a.clone();
    c.extend((state.base_quat.inverse() * state.base_lin_vel).iter());
    (ActorObservation(a), CriticObservation(c))
}
