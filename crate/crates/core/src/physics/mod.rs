//! Floating-base articulated dynamics with penalty contact on heightfield
//! terrain.
//!
//! The integrator is a position-Verlet splitting: half drift, a velocity kick
//! with forces evaluated at the midpoint (contacts, joint damping and limit
//! dampers treated implicitly in the end velocity), then a second half drift.
//! A final base-velocity correction makes the discrete change of total spatial
//! momentum equal the applied gravity and contact impulses.

pub mod contact;
pub mod dynamics;
pub mod log;
pub mod model;
pub mod spatial;
pub mod terrain;

use std::sync::Arc;

use nalgebra::{DVector, Matrix6, UnitQuaternion};
use thiserror::Error;

pub use contact::ContactParams;
pub use model::{Model, BASE_DOF};
pub use spatial::{SVec, Vec3};
pub use terrain::{generate_terrain, Terrain, TerrainKind, TerrainParams};

use contact::{Candidate, Mode};
use dynamics::{bias_forces, mass_matrix, point_jacobian, world_momentum, world_wrench_to_base, Kinematics};
use spatial::{lin, sv};

/// Default physics substep (s). Five substeps per 50 Hz control step.
pub const DEFAULT_DT: f64 = 1.0 / 250.0;

#[derive(Debug, Error)]
pub enum PhysicsError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("singular dynamics at t = {0}")]
    Singular(f64),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("state does not match model: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub base_pos: Vec3,
    pub base_quat: UnitQuaternion<f64>,
    /// Base-origin linear velocity, world frame.
    pub base_lin_vel: Vec3,
    /// Base angular velocity, world frame.
    pub base_ang_vel: Vec3,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    /// Debounced contact indicator per foot.
    pub foot_contacts: [bool; 4],
    pub foot_positions: [Vec3; 4],
    pub foot_velocities: [Vec3; 4],
    pub time: f64,
    /// Tangential spring anchors, one slot per model contact point.
    pub anchors: Vec<Option<Vec3>>,
    /// Raw contact bits per foot, newest in bit 0.
    pub contact_history: [u32; 4],
    pub foot_normal_forces: [f64; 4],
    /// Any non-foot contact point carried load in the last substep.
    pub body_contact: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FootKinematics {
    /// Height above the local terrain (m).
    pub p_z: f64,
    pub v_xy: [f64; 2],
    pub contact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactForce {
    pub index: usize,
    pub point: Vec3,
    pub force: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub contacts: Vec<ContactForce>,
    /// Gravity plus contact impulse `[moment about origin; force]` in world.
    pub external_impulse: SVec,
    pub applied_torques: Vec<f64>,
    pub passes: usize,
}

/// Simulator bound to one robot model, terrain and contact parameter set.
#[derive(Debug, Clone)]
pub struct Sim {
    pub model: Arc<Model>,
    pub terrain: Arc<Terrain>,
    pub contact: ContactParams,
}

fn check_finite(v: &[f64], what: &'static str) -> Result<(), PhysicsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(PhysicsError::NonFinite(what))
    }
}

struct Config {
    pos: Vec3,
    quat: UnitQuaternion<f64>,
    q: Vec<f64>,
}

impl Config {
    fn drift(&self, u: &DVector<f64>, h: f64) -> Config {
        let wb = Vec3::new(u[0], u[1], u[2]);
        let vb = Vec3::new(u[3], u[4], u[5]);
        let mid = self.quat * UnitQuaternion::from_scaled_axis(wb * (h / 2.0));
        let mut quat = self.quat * UnitQuaternion::from_scaled_axis(wb * h);
        quat.renormalize();
        Config {
            pos: self.pos + mid * vb * h,
            quat,
            q: self.q.iter().enumerate().map(|(k, q)| q + h * u[BASE_DOF + k]).collect(),
        }
    }

    fn kinematics(&self, model: &Model) -> Kinematics {
        Kinematics::new(model, self.quat.to_rotation_matrix().matrix(), &self.pos, &self.q)
    }
}

impl Sim {
    pub fn new(model: Arc<Model>, terrain: Arc<Terrain>, contact: ContactParams) -> Self {
        Self { model, terrain, contact }
    }

    fn config(s: &SimState) -> Config {
        Config {
            pos: s.base_pos,
            quat: s.base_quat,
            q: s.q.clone(),
        }
    }

    fn generalized_velocity(&self, s: &SimState) -> DVector<f64> {
        let rt = s.base_quat.inverse();
        let w = rt * s.base_ang_vel;
        let v = rt * s.base_lin_vel;
        let mut u = DVector::zeros(self.model.n_dof());
        u.fixed_rows_mut::<3>(0).copy_from(&w);
        u.fixed_rows_mut::<3>(3).copy_from(&v);
        for (k, qd) in s.qdot.iter().enumerate() {
            u[BASE_DOF + k] = *qd;
        }
        u
    }

    /// A state at rest with the given base pose and joint angles.
    pub fn state_at(&self, base_pos: Vec3, base_quat: UnitQuaternion<f64>, q: &[f64]) -> SimState {
        let n = self.model.n_act();
        assert_eq!(q.len(), n, "joint vector length");
        let mut s = SimState {
            base_pos,
            base_quat,
            base_lin_vel: Vec3::zeros(),
            base_ang_vel: Vec3::zeros(),
            q: q.to_vec(),
            qdot: vec![0.0; n],
            foot_contacts: [false; 4],
            foot_positions: [Vec3::zeros(); 4],
            foot_velocities: [Vec3::zeros(); 4],
            time: 0.0,
            anchors: vec![None; self.model.contacts.len()],
            contact_history: [0; 4],
            foot_normal_forces: [0.0; 4],
            body_contact: false,
        };
        self.refresh_feet(&mut s);
        s
    }

    /// Places the robot with joint angles `q` and heading `yaw` at `(x, y)` so
    /// that the lowest foot just touches the terrain.
    pub fn standing_state(&self, q: &[f64], x: f64, y: f64, yaw: f64) -> SimState {
        let quat = UnitQuaternion::from_euler_angles(0.0, 0.0, yaw);
        let probe = self.state_at(Vec3::new(x, y, 0.0), quat, q);
        let r = self.model.contact_radius;
        let lift = probe
            .foot_positions
            .iter()
            .map(|p| self.terrain.height(p.x, p.y) + r - p.z)
            .fold(f64::NEG_INFINITY, f64::max);
        self.state_at(Vec3::new(x, y, lift), quat, q)
    }

    fn refresh_feet(&self, s: &mut SimState) {
        let kin = Self::config(s).kinematics(&self.model);
        let u = self.generalized_velocity(s);
        for c in self.model.contacts.iter() {
            if let Some(f) = c.foot {
                let (p, j) = point_jacobian(&self.model, &kin, c.body, &c.local);
                s.foot_positions[f] = p;
                s.foot_velocities[f] = (j * &u).fixed_rows::<3>(0).into();
            }
        }
    }

    /// Advances one substep. Torques are clamped to the joint limits.
    pub fn step(&self, s: &SimState, torques: &[f64], dt: f64) -> Result<(SimState, StepInfo), PhysicsError> {
        let m = &*self.model;
        let n_act = m.n_act();
        if torques.len() != n_act || s.q.len() != n_act || s.qdot.len() != n_act {
            return Err(PhysicsError::Shape(format!(
                "expected {n_act} joints, got torques {} q {} qdot {}",
                torques.len(),
                s.q.len(),
                s.qdot.len()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(PhysicsError::Parameter(format!("dt must be > 0, got {dt}")));
        }
        check_finite(torques, "torque")?;
        check_finite(&s.q, "joint position")?;
        check_finite(&s.qdot, "joint velocity")?;
        check_finite(s.base_pos.as_slice(), "base position")?;
        check_finite(s.base_lin_vel.as_slice(), "base velocity")?;
        check_finite(s.base_ang_vel.as_slice(), "base angular velocity")?;
        check_finite(s.base_quat.coords.as_slice(), "base orientation")?;

        let tau: Vec<f64> = torques
            .iter()
            .zip(&m.joints)
            .map(|(t, j)| t.clamp(-j.torque_limit, j.torque_limit))
            .collect();
        let p = &self.contact;
        let u0 = self.generalized_velocity(s);
        let c0 = Self::config(s);
        let kin0 = c0.kinematics(m);
        let h0 = world_momentum(&kin0, &mass_matrix(m, &kin0), &u0);

        let cm = c0.drift(&u0, dt / 2.0);
        let kin = cm.kinematics(m);
        let hm = mass_matrix(m, &kin);
        let bias = bias_forces(m, &kin, &u0);

        let mut a = hm.clone();
        let mut rhs = &hm * &u0 - dt * &bias;
        for (k, j) in m.joints.iter().enumerate() {
            let d = BASE_DOF + k;
            rhs[d] += dt * tau[k];
            a[(d, d)] += dt * j.damping;
            if let Some((lo, hi)) = j.limits {
                let q = cm.q[k];
                let over = if q > hi { q - hi } else if q < lo { q - lo } else { 0.0 };
                if over != 0.0 {
                    rhs[d] -= dt * p.limit_stiffness * over;
                    a[(d, d)] += dt * (p.limit_damping + p.limit_stiffness * dt / 2.0);
                }
            }
        }

        let r = m.contact_radius;
        let mut cands = Vec::new();
        for (i, c) in m.contacts.iter().enumerate() {
            let pt = kin.point(c.body, &c.local);
            let (h, n) = self.terrain.sample(pt.x, pt.y);
            let depth = r - (pt.z - h) * n.z;
            if depth <= 0.0 {
                continue;
            }
            let (_, jac) = point_jacobian(m, &kin, c.body, &c.local);
            let anchor = s.anchors.get(i).copied().flatten().unwrap_or(pt);
            let e = pt - anchor;
            cands.push(Candidate {
                index: i,
                point: pt,
                normal: n,
                depth,
                stretch: e - n * n.dot(&e),
                jac,
            });
        }
        let sol = contact::solve(&a, &rhs, &cands, p, dt).ok_or(PhysicsError::Singular(s.time))?;
        let mut u = sol.u;

        let c1 = cm.drift(&u, dt / 2.0);
        let kin1 = c1.kinematics(m);
        let h1m = mass_matrix(m, &kin1);

        // impulse of gravity (at the midpoint centre of mass) and contacts
        let weight = Vec3::new(0.0, 0.0, -m.total_mass() * m.gravity);
        let mut ext = sv(kin.com(m).cross(&weight), weight);
        let mut contacts = Vec::with_capacity(cands.len());
        for (c, f) in cands.iter().zip(&sol.forces) {
            ext += sv(c.point.cross(f), *f);
            contacts.push(ContactForce {
                index: c.index,
                point: c.point,
                force: *f,
            });
        }
        let impulse = ext * dt;
        let h1 = world_momentum(&kin1, &h1m, &u);
        let dh = world_wrench_to_base(&kin1, &(h0 + impulse - h1));
        let hbb: Matrix6<f64> = h1m.fixed_view::<6, 6>(0, 0).into_owned();
        let du = hbb.cholesky().ok_or(PhysicsError::Singular(s.time))?.solve(&dh);
        for r in 0..6 {
            u[r] += du[r];
        }

        let mut next = SimState {
            base_pos: c1.pos,
            base_quat: c1.quat,
            base_lin_vel: c1.quat * Vec3::new(u[3], u[4], u[5]),
            base_ang_vel: c1.quat * Vec3::new(u[0], u[1], u[2]),
            q: c1.q,
            qdot: (0..n_act).map(|k| u[BASE_DOF + k]).collect(),
            foot_contacts: [false; 4],
            foot_positions: s.foot_positions,
            foot_velocities: s.foot_velocities,
            time: s.time + dt,
            anchors: vec![None; m.contacts.len()],
            contact_history: s.contact_history,
            foot_normal_forces: [0.0; 4],
            body_contact: false,
        };
        let mut raw = [false; 4];
        for ((c, mode), fnorm) in cands.iter().zip(&sol.modes).zip(&sol.normal_forces) {
            let v: Vec3 = (&c.jac * &u).fixed_rows::<3>(0).into();
            next.anchors[c.index] = match mode {
                Mode::Off => None,
                Mode::Stick => Some(c.point - c.stretch),
                Mode::Slide(t) => {
                    let end = c.point + v * (dt / 2.0);
                    Some(end + t * (p.friction * fnorm / p.tangential_stiffness))
                }
            };
            let loaded = *fnorm > 0.0;
            match m.contacts[c.index].foot {
                Some(f) => {
                    raw[f] = loaded;
                    next.foot_normal_forces[f] = *fnorm;
                }
                None => next.body_contact |= loaded,
            }
        }
        let window = p.filter_window.clamp(1, 32);
        let mask = if window == 32 { u32::MAX } else { (1u32 << window) - 1 };
        for f in 0..4 {
            next.contact_history[f] = ((s.contact_history[f] << 1) | raw[f] as u32) & mask;
            next.foot_contacts[f] = next.contact_history[f] != 0;
        }
        self.refresh_feet(&mut next);

        check_finite(u.as_slice(), "velocity after step")?;
        check_finite(next.base_pos.as_slice(), "position after step")?;
        Ok((
            next,
            StepInfo {
                contacts,
                external_impulse: impulse,
                applied_torques: tau,
                passes: sol.passes,
            },
        ))
    }

    /// Kinetic plus gravitational potential energy.
    pub fn energy(&self, s: &SimState) -> f64 {
        let kin = Self::config(s).kinematics(&self.model);
        let u = self.generalized_velocity(s);
        dynamics::kinetic_energy(&mass_matrix(&self.model, &kin), &u) + dynamics::potential_energy(&self.model, &kin)
    }

    /// Total spatial momentum `[L about origin; P]` in world coordinates.
    pub fn momentum(&self, s: &SimState) -> SVec {
        let kin = Self::config(s).kinematics(&self.model);
        world_momentum(&kin, &mass_matrix(&self.model, &kin), &self.generalized_velocity(s))
    }

    pub fn linear_momentum(&self, s: &SimState) -> Vec3 {
        lin(&self.momentum(s))
    }

    pub fn com(&self, s: &SimState) -> Vec3 {
        Self::config(s).kinematics(&self.model).com(&self.model)
    }

    /// Terrain-relative foot heights, planar foot speeds and filtered contacts.
    pub fn foot_kinematics(&self, s: &SimState) -> [FootKinematics; 4] {
        let r = self.model.contact_radius;
        std::array::from_fn(|f| {
            let p = s.foot_positions[f];
            let v = s.foot_velocities[f];
            FootKinematics {
                p_z: p.z - r - self.terrain.height(p.x, p.y),
                v_xy: [v.x, v.y],
                contact: s.foot_contacts[f],
            }
        })
    }
}

/// Adds a planar velocity disturbance to the base.
pub fn apply_push(s: &SimState, delta_v: [f64; 2]) -> SimState {
    let mut out = s.clone();
    out.base_lin_vel.x += delta_v[0];
    out.base_lin_vel.y += delta_v[1];
    out
}

/// Reflection through the sagittal (x–z) plane: left and right legs swap.
#[derive(Debug, Clone)]
pub struct Mirror {
    /// `joint[k]` of the mirrored state is `sign[k] * joint[perm[k]]`.
    pub perm: Vec<usize>,
    pub sign: Vec<f64>,
    pub contact_perm: Vec<usize>,
    pub foot_perm: [usize; 4],
}

fn swap_side(name: &str) -> String {
    let mut c: Vec<char> = name.chars().collect();
    if c.len() >= 2 && matches!(c[0], 'F' | 'H') {
        c[1] = match c[1] {
            'L' => 'R',
            'R' => 'L',
            x => x,
        };
    }
    c.into_iter().collect()
}

impl Mirror {
    pub fn new(model: &Model) -> Result<Self, PhysicsError> {
        let reflect = |v: &Vec3| Vec3::new(v.x, -v.y, v.z);
        let body_of = |name: &str| model.bodies.iter().position(|b| b.name == name);
        let missing = |what: &str| PhysicsError::Parameter(format!("model is not mirror symmetric: {what}"));
        let mut perm = Vec::new();
        let mut sign = Vec::new();
        for j in &model.joints {
            let partner = swap_side(&j.name);
            let k = model.joints.iter().position(|o| o.name == partner).ok_or_else(|| missing(&j.name))?;
            let ma = reflect(&model.bodies[j.body].axis);
            let a2 = model.bodies[model.joints[k].body].axis;
            let s = if (ma - a2).norm() < 1e-9 {
                -1.0
            } else if (ma + a2).norm() < 1e-9 {
                1.0
            } else {
                return Err(missing(&j.name));
            };
            perm.push(k);
            sign.push(s);
        }
        let mut contact_perm = Vec::new();
        for c in &model.contacts {
            let b = body_of(&swap_side(&model.bodies[c.body].name)).ok_or_else(|| missing("contact body"))?;
            let target = reflect(&c.local);
            let k = model
                .contacts
                .iter()
                .position(|o| o.body == b && (o.local - target).norm() < 1e-9)
                .ok_or_else(|| missing("contact point"))?;
            contact_perm.push(k);
        }
        let mut foot_perm = [0; 4];
        for (i, c) in model.contacts.iter().enumerate() {
            if let Some(f) = c.foot {
                foot_perm[f] = model.contacts[contact_perm[i]].foot.ok_or_else(|| missing("foot"))?;
            }
        }
        Ok(Self {
            perm,
            sign,
            contact_perm,
            foot_perm,
        })
    }

    pub fn joints(&self, v: &[f64]) -> Vec<f64> {
        self.perm.iter().zip(&self.sign).map(|(&k, s)| s * v[k]).collect()
    }

    pub fn state(&self, s: &SimState) -> SimState {
        let reflect = |v: &Vec3| Vec3::new(v.x, -v.y, v.z);
        let axial = |v: &Vec3| Vec3::new(-v.x, v.y, -v.z);
        let qc = s.base_quat.quaternion();
        let quat = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(qc.w, -qc.i, qc.j, -qc.k));
        let mut out = s.clone();
        out.base_pos = reflect(&s.base_pos);
        out.base_quat = quat;
        out.base_lin_vel = reflect(&s.base_lin_vel);
        out.base_ang_vel = axial(&s.base_ang_vel);
        out.q = self.joints(&s.q);
        out.qdot = self.joints(&s.qdot);
        // contact_perm is an involution, so it maps both ways
        for (i, &k) in self.contact_perm.iter().enumerate() {
            out.anchors[i] = s.anchors[k].map(|a| reflect(&a));
        }
        for f in 0..4 {
            let g = self.foot_perm[f];
            out.foot_contacts[f] = s.foot_contacts[g];
            out.foot_positions[f] = reflect(&s.foot_positions[g]);
            out.foot_velocities[f] = reflect(&s.foot_velocities[g]);
            out.contact_history[f] = s.contact_history[g];
            out.foot_normal_forces[f] = s.foot_normal_forces[g];
        }
        out
    }
}
