//! A small hand-made 8-joint trot used as the origin gait in tests and demos.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::UnitQuaternion;

use super::{Clip, DatasetMeta, FrameRecord, MotionDataset};
use crate::env::default_pose;
use crate::physics::{Model, Sim, Terrain, Vec3};
use crate::robot::solo8;

const DT: f64 = 0.02;
const PERIOD: f64 = 0.4;
const HIP_SWING: f64 = 0.25;
const KNEE_LIFT: f64 = 0.5;
const PITCH: f64 = 0.02;

fn clip(name: &str, speed: f64, frames: usize, pose: &[f64], names: &[String], z0: f64) -> Clip {
    let w = 2.0 * PI / PERIOD;
    let frames = (0..frames)
        .map(|k| {
            let t = k as f64 * DT;
            let mut q = pose.to_vec();
            let mut qd = vec![0.0; pose.len()];
            for (j, n) in names.iter().enumerate() {
                // diagonal pairs FL+HR and FR+HL move in antiphase
                let phase = if n.starts_with("FL") || n.starts_with("HR") { 0.0 } else { PI };
                let sign = if n.starts_with('F') { 1.0 } else { -1.0 };
                let ph = w * t + phase;
                if n.ends_with("HFE") {
                    q[j] += HIP_SWING * ph.cos();
                    qd[j] = -HIP_SWING * w * ph.sin();
                } else if ph.sin() > 0.0 {
                    q[j] -= sign * KNEE_LIFT * ph.sin();
                    qd[j] = -sign * KNEE_LIFT * w * ph.cos();
                }
            }
            // pitch sways at twice the stride frequency
            let pitch = PITCH * (2.0 * w * t).sin();
            let pitch_rate = PITCH * 2.0 * w * (2.0 * w * t).cos();
            let rot = UnitQuaternion::from_euler_angles(0.0, pitch, 0.0);
            let quat = rot.quaternion();
            let normal = rot.inverse() * Vec3::z();
            FrameRecord {
                base_pos: [speed * t, 0.0, z0],
                base_quat: [quat.w, quat.i, quat.j, quat.k],
                lin_vel: [speed, 0.0, 0.0],
                ang_vel: [0.0, pitch_rate, 0.0],
                normal: normal.into(),
                height: z0,
                q,
                qdot: qd,
            }
        })
        .collect();
    Clip {
        name: name.into(),
        frames,
    }
}

/// Two forward trot clips (0.3 and 0.6 m/s), 200 frames each at 50 Hz.
pub fn solo8_trot_fixture() -> MotionDataset {
    let spec = solo8();
    let model = Model::from_spec(&spec);
    let pose = default_pose(&model);
    let names: Vec<String> = model.joints.iter().map(|j| j.name.clone()).collect();
    let sim = Sim::new(Arc::new(model), Arc::new(Terrain::flat()), Default::default());
    let z0 = sim.standing_state(&pose, 0.0, 0.0, 0.0).base_pos.z;
    MotionDataset {
        meta: DatasetMeta {
            dt: DT,
            dof: 8,
            gait: "trot".into(),
            iteration: 0,
            joint_names: names.clone(),
            provenance: "hand-made periodic trot fixture".into(),
            parent_hash: None,
        },
        clips: vec![
            clip("trot_slow", 0.3, 200, &pose, &names, z0),
            clip("trot_fast", 0.6, 200, &pose, &names, z0),
        ],
    }
}
