//! Rigid-body algorithms over a floating-base tree.
//!
//! Generalized velocity layout: `[ω_b, v_b, q̇]` where `ω_b` and `v_b` are the
//! base angular velocity and base-origin linear velocity in base coordinates.

use nalgebra::{DMatrix, DVector};

use super::model::{Model, BASE_DOF};
use super::spatial::{cross_force, cross_motion, lin, skew, sv, axis_angle, Mat3, SMat, SVec, Vec3, Xform};

/// Per-configuration kinematic cache.
#[derive(Debug, Clone)]
pub struct Kinematics {
    /// Parent-to-child transforms (entry 0 unused).
    pub xup: Vec<Xform>,
    /// Body-to-world rotations.
    pub rot: Vec<Mat3>,
    /// Body origins in world.
    pub pos: Vec<Vec3>,
}

impl Kinematics {
    pub fn new(model: &Model, base_rot: &Mat3, base_pos: &Vec3, q: &[f64]) -> Self {
        let n = model.bodies.len();
        let mut xup = Vec::with_capacity(n);
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        xup.push(Xform::identity());
        rot.push(*base_rot);
        pos.push(*base_pos);
        for (i, b) in model.bodies.iter().enumerate().skip(1) {
            let rj = match b.dof {
                Some(d) => axis_angle(&b.axis, q[d - BASE_DOF]),
                None => Mat3::identity(),
            };
            xup.push(Xform {
                rot: rj.transpose(),
                pos: b.origin,
            });
            let (pr, pp) = (rot[b.parent], pos[b.parent]);
            rot.push(pr * rj);
            pos.push(pp + pr * b.origin);
            debug_assert_eq!(rot.len(), i + 1);
        }
        Self { xup, rot, pos }
    }

    /// World position of a point fixed in `body`.
    #[inline]
    pub fn point(&self, body: usize, local: &Vec3) -> Vec3 {
        self.pos[body] + self.rot[body] * local
    }

    pub fn com(&self, model: &Model) -> Vec3 {
        let mut c = Vec3::zeros();
        for (i, b) in model.bodies.iter().enumerate() {
            c += b.mass * self.point(i, &b.com);
        }
        c / model.total_mass()
    }
}

fn motion_subspace(axis: &Vec3) -> SVec {
    sv(*axis, Vec3::zeros())
}

/// Joint-space inertia matrix (composite rigid body algorithm), with rotor
/// armature on the joint diagonal.
pub fn mass_matrix(model: &Model, kin: &Kinematics) -> DMatrix<f64> {
    let nb = model.bodies.len();
    let n = model.n_dof();
    let mut ic: Vec<SMat> = model.bodies.iter().map(|b| b.inertia).collect();
    for i in (1..nb).rev() {
        let x = kin.xup[i].matrix();
        let contrib = x.transpose() * ic[i] * x;
        let p = model.bodies[i].parent;
        ic[p] += contrib;
    }
    let mut h = DMatrix::zeros(n, n);
    h.view_mut((0, 0), (6, 6)).copy_from(&ic[0]);
    for i in 1..nb {
        let Some(di) = model.bodies[i].dof else { continue };
        let s = motion_subspace(&model.bodies[i].axis);
        let mut f = ic[i] * s;
        h[(di, di)] = s.dot(&f);
        let mut j = i;
        loop {
            f = kin.xup[j].apply_force_transpose(&f);
            j = model.bodies[j].parent;
            if j == 0 {
                for r in 0..6 {
                    h[(r, di)] = f[r];
                    h[(di, r)] = f[r];
                }
                break;
            }
            if let Some(dj) = model.bodies[j].dof {
                let v = motion_subspace(&model.bodies[j].axis).dot(&f);
                h[(di, dj)] = v;
                h[(dj, di)] = v;
            }
        }
    }
    for (k, jt) in model.joints.iter().enumerate() {
        h[(BASE_DOF + k, BASE_DOF + k)] += jt.armature;
    }
    h
}

/// Velocity-product and gravity terms `C(q, u)` (recursive Newton–Euler with
/// zero acceleration).
pub fn bias_forces(model: &Model, kin: &Kinematics, u: &DVector<f64>) -> DVector<f64> {
    let nb = model.bodies.len();
    let mut v = vec![SVec::zeros(); nb];
    let mut a = vec![SVec::zeros(); nb];
    let mut f = vec![SVec::zeros(); nb];
    v[0] = SVec::from_iterator(u.iter().take(6).copied());
    // uniform gravity as a fictitious upward base acceleration
    a[0] = sv(Vec3::zeros(), kin.rot[0].transpose() * Vec3::new(0.0, 0.0, model.gravity));
    for i in 0..nb {
        let b = &model.bodies[i];
        if i > 0 {
            let x = &kin.xup[i];
            let vj = match b.dof {
                Some(d) => motion_subspace(&b.axis) * u[d],
                None => SVec::zeros(),
            };
            v[i] = x.apply_motion(&v[b.parent]) + vj;
            a[i] = x.apply_motion(&a[b.parent]) + cross_motion(&v[i], &vj);
        }
        let iv = b.inertia * v[i];
        f[i] = b.inertia * a[i] + cross_force(&v[i], &iv);
    }
    let mut c = DVector::zeros(model.n_dof());
    for i in (1..nb).rev() {
        let b = &model.bodies[i];
        if let Some(d) = b.dof {
            c[d] = motion_subspace(&b.axis).dot(&f[i]);
        }
        let back = kin.xup[i].apply_force_transpose(&f[i]);
        f[b.parent] += back;
    }
    for r in 0..6 {
        c[r] = f[0][r];
    }
    c
}

/// World-frame linear-velocity Jacobian (3 × n) of a point fixed in `body`,
/// together with the point's world position.
pub fn point_jacobian(model: &Model, kin: &Kinematics, body: usize, local: &Vec3) -> (Vec3, DMatrix<f64>) {
    let p = kin.point(body, local);
    let mut j = DMatrix::zeros(3, model.n_dof());
    let r0 = kin.rot[0];
    let w = -skew(&(p - kin.pos[0])) * r0;
    j.view_mut((0, 0), (3, 3)).copy_from(&w);
    j.view_mut((0, 3), (3, 3)).copy_from(&r0);
    let mut k = body;
    while k != 0 {
        let b = &model.bodies[k];
        if let Some(d) = b.dof {
            let z = kin.rot[k] * b.axis;
            let col = z.cross(&(p - kin.pos[k]));
            j[(0, d)] = col.x;
            j[(1, d)] = col.y;
            j[(2, d)] = col.z;
        }
        k = b.parent;
    }
    (p, j)
}

/// Total spatial momentum `[L; P]` in world coordinates about the world origin,
/// given the mass matrix at the same configuration.
pub fn world_momentum(kin: &Kinematics, h: &DMatrix<f64>, u: &DVector<f64>) -> SVec {
    let hb = h.rows(0, 6) * u;
    let r = kin.rot[0];
    let force = r * Vec3::new(hb[3], hb[4], hb[5]);
    let moment = r * Vec3::new(hb[0], hb[1], hb[2]) + kin.pos[0].cross(&force);
    sv(moment, force)
}

/// Maps a world wrench `[moment about origin; force]` to base coordinates.
pub fn world_wrench_to_base(kin: &Kinematics, w: &SVec) -> SVec {
    let rt = kin.rot[0].transpose();
    let f = lin(w);
    let n = Vec3::new(w[0], w[1], w[2]) - kin.pos[0].cross(&f);
    sv(rt * n, rt * f)
}

pub fn kinetic_energy(h: &DMatrix<f64>, u: &DVector<f64>) -> f64 {
    0.5 * u.dot(&(h * u))
}

pub fn potential_energy(model: &Model, kin: &Kinematics) -> f64 {
    model
        .bodies
        .iter()
        .enumerate()
        .map(|(i, b)| b.mass * model.gravity * kin.point(i, &b.com).z)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot::solo9;
    use nalgebra::UnitQuaternion;

    fn setup() -> (Model, Kinematics, DVector<f64>) {
        let m = Model::from_spec(&solo9());
        let q: Vec<f64> = (0..m.n_act()).map(|k| 0.3 * (k as f64 * 1.7).sin()).collect();
        let rot = *UnitQuaternion::from_euler_angles(0.2, -0.1, 0.4).to_rotation_matrix().matrix();
        let kin = Kinematics::new(&m, &rot, &Vec3::new(0.3, -0.2, 0.4), &q);
        let u = DVector::from_fn(m.n_dof(), |i, _| 0.5 * ((i as f64) * 0.9 + 0.3).cos());
        (m, kin, u)
    }

    #[test]
    fn mass_matrix_symmetric_positive_definite() {
        let (m, kin, _) = setup();
        let h = mass_matrix(&m, &kin);
        assert!((&h - h.transpose()).amax() < 1e-12);
        assert!(h.clone().cholesky().is_some());
        // translational block carries the whole mass
        for r in 3..6 {
            assert!((h[(r, r)] - m.total_mass()).abs() < 1e-12);
        }
    }

    #[test]
    fn kinetic_energy_matches_point_jacobians_of_coms() {
        // independent: sum over bodies of ½ m |v_com|² + ½ ω·I ω using finite
        // differences of COM positions along u
        let (m, kin, u) = setup();
        let h = mass_matrix(&m, &kin);
        let mut ke_lin = 0.0;
        for (i, b) in m.bodies.iter().enumerate() {
            let (_, j) = point_jacobian(&m, &kin, i, &b.com);
            ke_lin += 0.5 * b.mass * (j * &u).norm_squared();
        }
        // rotational part: angular velocity of each body
        let mut ke_rot = 0.0;
        for (i, b) in m.bodies.iter().enumerate() {
            let mut w = kin.rot[0] * Vec3::new(u[0], u[1], u[2]);
            let mut k = i;
            while k != 0 {
                if let Some(d) = m.bodies[k].dof {
                    w += kin.rot[k] * m.bodies[k].axis * u[d];
                }
                k = m.bodies[k].parent;
            }
            let wb = kin.rot[i].transpose() * w;
            ke_rot += 0.5 * wb.dot(&(b.inertia_com * wb));
        }
        let arm: f64 = m.joints.iter().enumerate().map(|(k, j)| 0.5 * j.armature * u[6 + k] * u[6 + k]).sum();
        let ke = kinetic_energy(&h, &u);
        assert!((ke - (ke_lin + ke_rot + arm)).abs() < 1e-10, "{ke} vs {}", ke_lin + ke_rot + arm);
    }

    #[test]
    fn gravity_bias_is_gradient_of_potential() {
        let (m, kin, _) = setup();
        let zero = DVector::zeros(m.n_dof());
        let c = bias_forces(&m, &kin, &zero);
        // joint components: dV/dq by central differences
        let q0: Vec<f64> = (0..m.n_act()).map(|k| 0.3 * (k as f64 * 1.7).sin()).collect();
        let eps = 1e-6;
        for k in 0..m.n_act() {
            let mut qp = q0.clone();
            let mut qm = q0.clone();
            qp[k] += eps;
            qm[k] -= eps;
            let vp = potential_energy(&m, &Kinematics::new(&m, &kin.rot[0], &kin.pos[0], &qp));
            let vm = potential_energy(&m, &Kinematics::new(&m, &kin.rot[0], &kin.pos[0], &qm));
            let fd = (vp - vm) / (2.0 * eps);
            assert!((c[6 + k] - fd).abs() < 1e-7, "joint {k}: {} vs {fd}", c[6 + k]);
        }
        // base linear components: weight in base coordinates
        let w = kin.rot[0].transpose() * Vec3::new(0.0, 0.0, m.total_mass() * m.gravity);
        for r in 0..3 {
            assert!((c[3 + r] - w[r]).abs() < 1e-10);
        }
    }

    #[test]
    fn momentum_linear_part_is_mass_times_com_velocity() {
        let (m, kin, u) = setup();
        let h = mass_matrix(&m, &kin);
        let hw = world_momentum(&kin, &h, &u);
        let mut p = Vec3::zeros();
        for (i, b) in m.bodies.iter().enumerate() {
            let (_, j) = point_jacobian(&m, &kin, i, &b.com);
            p += b.mass * (j * &u);
        }
        assert!((lin(&hw) - p).norm() < 1e-12);
    }
}
