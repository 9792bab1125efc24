use crate::robot::{JointKind, JointRole, RobotSpec};

use super::spatial::{spatial_inertia, Mat3, SMat, Vec3};

/// Number of generalized velocity components owned by the floating base.
pub const BASE_DOF: usize = 6;

#[derive(Debug, Clone)]
pub struct Body {
    pub name: String,
    /// Parent body index; `usize::MAX` for the root.
    pub parent: usize,
    /// Joint origin in the parent frame.
    pub origin: Vec3,
    pub axis: Vec3,
    /// Column in the generalized velocity vector, `None` for the root and welds.
    pub dof: Option<usize>,
    pub mass: f64,
    pub com: Vec3,
    pub inertia_com: Mat3,
    pub inertia: SMat,
}

#[derive(Debug, Clone)]
pub struct ActuatedJoint {
    pub name: String,
    pub body: usize,
    pub torque_limit: f64,
    pub damping: f64,
    pub armature: f64,
    pub limits: Option<(f64, f64)>,
    pub is_waist: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContactPoint {
    pub body: usize,
    pub local: Vec3,
    /// Foot ordinal (0..4) for foot contacts.
    pub foot: Option<usize>,
}

/// Kinematic tree compiled from a `RobotSpec`, ready for the dynamics routines.
#[derive(Debug, Clone)]
pub struct Model {
    pub name: String,
    pub bodies: Vec<Body>,
    pub joints: Vec<ActuatedJoint>,
    pub contacts: Vec<ContactPoint>,
    pub contact_radius: f64,
    pub gravity: f64,
    /// Bodies `[0, split)` form the front half.
    pub base_split_index: usize,
    /// Root plus, when present, the body behind the waist.
    pub trunk: Vec<usize>,
}

impl Model {
    pub fn from_spec(spec: &RobotSpec) -> Self {
        let mut bodies = Vec::with_capacity(spec.links.len());
        let mut joints = Vec::new();
        for (i, link) in spec.links.iter().enumerate() {
            let com = Vec3::from(link.com);
            let ic = Mat3::from_diagonal(&Vec3::from(link.inertia));
            let (parent, origin, axis, dof) = if i == 0 {
                (usize::MAX, Vec3::zeros(), Vec3::zeros(), None)
            } else {
                let j = &spec.joints[i - 1];
                let dof = match j.kind {
                    JointKind::Revolute => {
                        joints.push(ActuatedJoint {
                            name: j.name.clone(),
                            body: i,
                            torque_limit: j.torque_limit,
                            damping: j.damping,
                            armature: j.armature,
                            limits: j.position_limits,
                            is_waist: j.role == JointRole::Waist,
                        });
                        Some(BASE_DOF + joints.len() - 1)
                    }
                    JointKind::Fixed => None,
                };
                (j.parent, Vec3::from(j.origin), Vec3::from(j.axis), dof)
            };
            bodies.push(Body {
                name: link.name.clone(),
                parent,
                origin,
                axis,
                dof,
                mass: link.mass,
                com,
                inertia_com: ic,
                inertia: spatial_inertia(link.mass, &com, &ic),
            });
        }
        let mut contacts = Vec::new();
        let mut foot = 0;
        for (i, link) in spec.links.iter().enumerate() {
            if let Some(p) = link.foot {
                contacts.push(ContactPoint {
                    body: i,
                    local: Vec3::from(p),
                    foot: Some(foot),
                });
                foot += 1;
            }
        }
        for (i, link) in spec.links.iter().enumerate() {
            for p in &link.contact_points {
                contacts.push(ContactPoint {
                    body: i,
                    local: Vec3::from(*p),
                    foot: None,
                });
            }
        }
        let mut trunk = vec![0];
        trunk.extend(spec.joints.iter().filter(|j| j.role == JointRole::Waist).map(|j| j.child));
        Self {
            name: spec.name.clone(),
            bodies,
            joints,
            contacts,
            contact_radius: spec.contact_radius,
            gravity: 9.81,
            base_split_index: spec.base_split_index,
            trunk,
        }
    }

    pub fn n_act(&self) -> usize {
        self.joints.len()
    }

    pub fn n_dof(&self) -> usize {
        BASE_DOF + self.joints.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.bodies.iter().map(|b| b.mass).sum()
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.joints.iter().map(|j| j.torque_limit).collect()
    }

    pub fn waist_index(&self) -> Option<usize> {
        self.joints.iter().position(|j| j.is_waist)
    }

    /// Returns a copy with the trunk mass shifted by `delta_mass` (split evenly
    /// across trunk bodies) and trunk centres of mass moved by `com_offset`.
    pub fn with_trunk_overrides(&self, delta_mass: f64, com_offset: Vec3) -> Model {
        let mut m = self.clone();
        let share = delta_mass / self.trunk.len() as f64;
        for &b in &self.trunk {
            let body = &mut m.bodies[b];
            let scale = (body.mass + share) / body.mass;
            body.mass += share;
            body.inertia_com *= scale;
            body.com += com_offset;
            body.inertia = spatial_inertia(body.mass, &body.com, &body.inertia_com);
        }
        m
    }
}
