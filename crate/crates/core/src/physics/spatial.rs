//! Plücker spatial algebra. Motion vectors are `[angular; linear]`, force
//! vectors `[moment; force]`, both as `Vector6`.

use nalgebra::{Matrix3, Matrix6, Vector3, Vector6};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type SVec = Vector6<f64>;
pub type SMat = Matrix6<f64>;

#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
pub fn sv(ang: Vec3, lin: Vec3) -> SVec {
    SVec::new(ang.x, ang.y, ang.z, lin.x, lin.y, lin.z)
}

#[inline]
pub fn ang(v: &SVec) -> Vec3 {
    Vec3::new(v[0], v[1], v[2])
}

#[inline]
pub fn lin(v: &SVec) -> Vec3 {
    Vec3::new(v[3], v[4], v[5])
}

/// Motion cross product `v ×m m`.
#[inline]
pub fn cross_motion(v: &SVec, m: &SVec) -> SVec {
    let (w, vo) = (ang(v), lin(v));
    let (mw, mv) = (ang(m), lin(m));
    sv(w.cross(&mw), w.cross(&mv) + vo.cross(&mw))
}

/// Force cross product `v ×* f`.
#[inline]
pub fn cross_force(v: &SVec, f: &SVec) -> SVec {
    let (w, vo) = (ang(v), lin(v));
    let (n, fl) = (ang(f), lin(f));
    sv(w.cross(&n) + vo.cross(&fl), w.cross(&fl))
}

/// Coordinate transform from frame A to frame B: `rot` maps A coordinates to
/// B coordinates, `pos` is B's origin expressed in A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Xform {
    pub rot: Mat3,
    pub pos: Vec3,
}

impl Xform {
    pub fn identity() -> Self {
        Self {
            rot: Mat3::identity(),
            pos: Vec3::zeros(),
        }
    }

    #[inline]
    pub fn apply_motion(&self, m: &SVec) -> SVec {
        let w = ang(m);
        sv(self.rot * w, self.rot * (lin(m) - self.pos.cross(&w)))
    }

    /// `Xᵀ f`: maps a force expressed in B back to A.
    #[inline]
    pub fn apply_force_transpose(&self, f: &SVec) -> SVec {
        let n = self.rot.transpose() * ang(f);
        let fl = self.rot.transpose() * lin(f);
        sv(n + self.pos.cross(&fl), fl)
    }

    pub fn matrix(&self) -> SMat {
        let mut x = SMat::zeros();
        x.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        x.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rot);
        x.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-self.rot * skew(&self.pos)));
        x
    }
}

/// Spatial inertia about a frame origin for a body of `mass` whose centre of
/// mass sits at `com` with centroidal rotational inertia `ic`.
pub fn spatial_inertia(mass: f64, com: &Vec3, ic: &Mat3) -> SMat {
    let c = skew(com);
    let mut i = SMat::zeros();
    i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(ic + mass * c * c.transpose()));
    i.fixed_view_mut::<3, 3>(0, 3).copy_from(&(mass * c));
    i.fixed_view_mut::<3, 3>(3, 0).copy_from(&(mass * c.transpose()));
    i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(mass * Mat3::identity()));
    i
}

/// Rodrigues rotation: child axes expressed in the parent after rotating by
/// `angle` about unit `axis`.
#[inline]
pub fn axis_angle(axis: &Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    let k = skew(axis);
    Mat3::identity() + s * k + (1.0 - c) * k * k
}
