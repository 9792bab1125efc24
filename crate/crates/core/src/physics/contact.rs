//! Velocity-implicit penalty contact with a Coulomb cap.
//!
//! Each penetrating sphere contributes a normal spring-damper and a tangential
//! anchor spring. Forces are linear in the end-of-step velocity, so the step
//! solves one linear system per active-set pass; the pass loop decides which
//! contacts separate, stick, or slide on the friction cone boundary.

use nalgebra::{DMatrix, DVector, Matrix3};
use serde::{Deserialize, Serialize};

use super::spatial::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContactParams {
    /// Normal penalty stiffness (N/m).
    pub stiffness: f64,
    /// Normal penalty damping (N·s/m).
    pub damping: f64,
    pub tangential_stiffness: f64,
    pub tangential_damping: f64,
    /// Coulomb coefficient before randomization.
    pub friction: f64,
    pub limit_stiffness: f64,
    pub limit_damping: f64,
    /// Window (substeps) of the foot-contact debounce filter.
    pub filter_window: usize,
    pub max_passes: usize,
}

impl Default for ContactParams {
    fn default() -> Self {
        Self {
            stiffness: 4000.0,
            damping: 40.0,
            tangential_stiffness: 4000.0,
            tangential_damping: 40.0,
            friction: 1.0,
            limit_stiffness: 50.0,
            limit_damping: 0.5,
            filter_window: 2,
            max_passes: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mode {
    Off,
    Stick,
    Slide(Vec3),
}

/// One penetrating contact sphere at the mid-step configuration.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub index: usize,
    pub point: Vec3,
    pub normal: Vec3,
    pub depth: f64,
    /// Tangential spring stretch `P - anchor` projected on the tangent plane.
    pub stretch: Vec3,
    pub jac: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub u: DVector<f64>,
    pub modes: Vec<Mode>,
    pub forces: Vec<Vec3>,
    pub normal_forces: Vec<f64>,
    pub passes: usize,
}

struct Linear {
    f0: Vec3,
    d: Mat3,
}

fn tangent_projector(n: &Vec3) -> Mat3 {
    Mat3::identity() - n * n.transpose()
}

fn linearize(c: &Candidate, mode: Mode, p: &ContactParams, dt: f64) -> Option<Linear> {
    let n = c.normal;
    let cn = p.damping + p.stiffness * dt / 2.0;
    let ct = p.tangential_damping + p.tangential_stiffness * dt / 2.0;
    match mode {
        Mode::Off => None,
        Mode::Stick => Some(Linear {
            f0: p.stiffness * c.depth * n - p.tangential_stiffness * c.stretch,
            d: cn * n * n.transpose() + ct * tangent_projector(&n),
        }),
        Mode::Slide(t) => {
            let dir = n + p.friction * t;
            Some(Linear {
                f0: p.stiffness * c.depth * dir,
                d: cn * dir * n.transpose(),
            })
        }
    }
}

/// Normal force and stick-hypothesis tangential force at velocity `v`.
fn evaluate(c: &Candidate, v: &Vec3, p: &ContactParams, dt: f64) -> (f64, Vec3) {
    let n = c.normal;
    let cn = p.damping + p.stiffness * dt / 2.0;
    let ct = p.tangential_damping + p.tangential_stiffness * dt / 2.0;
    let fnorm = p.stiffness * c.depth - cn * n.dot(v);
    let vt = tangent_projector(&n) * v;
    (fnorm, -p.tangential_stiffness * c.stretch - ct * vt)
}

fn classify(c: &Candidate, v: &Vec3, p: &ContactParams, dt: f64) -> Mode {
    let (fnorm, ft) = evaluate(c, v, p, dt);
    if fnorm <= 0.0 {
        return Mode::Off;
    }
    let m = ft.norm();
    if m <= p.friction * fnorm {
        Mode::Stick
    } else {
        Mode::Slide(ft / m)
    }
}

fn same(a: &Mode, b: &Mode) -> bool {
    match (a, b) {
        (Mode::Off, Mode::Off) | (Mode::Stick, Mode::Stick) => true,
        (Mode::Slide(x), Mode::Slide(y)) => (x - y).norm() < 1e-9,
        _ => false,
    }
}

/// Solves `(A + dt Σ Jᵀ D J) u = b + dt Σ Jᵀ f0` over active-set passes.
///
/// `a` and `b` hold everything except contact terms.
pub fn solve(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    cands: &[Candidate],
    p: &ContactParams,
    dt: f64,
) -> Option<Solution> {
    let mut modes = vec![Mode::Stick; cands.len()];
    let mut passes = 0;
    let mut u;
    loop {
        passes += 1;
        let mut am = a.clone();
        let mut bm = b.clone();
        for (c, m) in cands.iter().zip(&modes) {
            if let Some(l) = linearize(c, *m, p, dt) {
                let dj = Matrix3::from(l.d) * &c.jac;
                am.gemm_tr(dt, &c.jac, &dj, 1.0);
                bm.gemv_tr(dt, &c.jac, &DVector::from_column_slice(l.f0.as_slice()), 1.0);
            }
        }
        u = am.lu().solve(&bm)?;
        if passes >= p.max_passes {
            break;
        }
        let next: Vec<Mode> = cands.iter().map(|c| classify(c, &(&c.jac * &u).fixed_rows::<3>(0).into(), p, dt)).collect();
        if next.iter().zip(&modes).all(|(x, y)| same(x, y)) {
            break;
        }
        modes = next;
    }
    let mut forces = Vec::with_capacity(cands.len());
    let mut normal_forces = Vec::with_capacity(cands.len());
    for (c, m) in cands.iter().zip(&modes) {
        let v: Vec3 = (&c.jac * &u).fixed_rows::<3>(0).into();
        match linearize(c, *m, p, dt) {
            Some(l) => {
                let f = l.f0 - l.d * v;
                normal_forces.push(f.dot(&c.normal));
                forces.push(f);
            }
            None => {
                normal_forces.push(0.0);
                forces.push(Vec3::zeros());
            }
        }
    }
    Some(Solution {
        u,
        modes,
        forces,
        normal_forces,
        passes,
    })
}
