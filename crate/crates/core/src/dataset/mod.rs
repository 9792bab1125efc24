//! Reference motion datasets.
//!
//! A dataset is a metadata block plus named clips of [`FrameRecord`]s. Files
//! come in two encodings with the same schema: binary (`QMDS`, version 1,
//! little-endian) and line-oriented text. Both round-trip bit-exactly.

use std::fs;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env::Termination;
use crate::physics::log::{channel_names, state_channels, LogEncoding, TrajectoryLog};
use crate::physics::{ContactParams, Model, Sim, SimState, Terrain, Vec3};

mod fixture;

pub use fixture::solo8_trot_fixture;

const MAGIC: &[u8; 4] = b"QMDS";
const TEXT_MAGIC: &str = "QMDS-TEXT";
const VERSION: u32 = 1;

/// Position of the waist channel in nine-joint vectors.
pub const WAIST_INDEX: usize = 4;
/// Default discriminator window length.
pub const DEFAULT_WINDOW: usize = 2;
/// Discriminator observation size for nine joints.
pub const DISC_OBS_DIM: usize = 27;
const FRAME_FIXED: usize = 17;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("dataset already has {0} joints; expected 8")]
    AlreadyAugmented(usize),
    #[error("expected a 9-joint frame, got {0} joints")]
    NotNineDof(usize),
    #[error("clip `{clip}` has {frames} frames, shorter than the window {window}")]
    ClipTooShort { clip: String, frames: usize, window: usize },
    #[error("no eligible rollouts to export")]
    NoEligibleRollouts,
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One time sample of the robot's state.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub base_pos: [f64; 3],
    /// `w x y z`
    pub base_quat: [f64; 4],
    /// World frame.
    pub lin_vel: [f64; 3],
    /// World frame.
    pub ang_vel: [f64; 3],
    /// World up axis expressed in the base frame.
    pub normal: [f64; 3],
    /// Base height above the local terrain.
    pub height: f64,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
}

impl FrameRecord {
    pub fn from_state(s: &SimState, terrain: &Terrain) -> Self {
        let q = s.base_quat.quaternion();
        let n = s.base_quat.inverse() * Vec3::z();
        Self {
            base_pos: s.base_pos.into(),
            base_quat: [q.w, q.i, q.j, q.k],
            lin_vel: s.base_lin_vel.into(),
            ang_vel: s.base_ang_vel.into(),
            normal: n.into(),
            height: s.base_pos.z - terrain.height(s.base_pos.x, s.base_pos.y),
            q: s.q.clone(),
            qdot: s.qdot.clone(),
        }
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.base_quat;
        UnitQuaternion::new_unchecked(Quaternion::new(w, x, y, z))
    }

    /// Flat row in channel order.
    pub fn to_row(&self) -> Vec<f64> {
        let mut r = Vec::with_capacity(FRAME_FIXED + 2 * self.dof());
        r.extend(self.base_pos);
        r.extend(self.base_quat);
        r.extend(self.lin_vel);
        r.extend(self.ang_vel);
        r.extend(self.normal);
        r.push(self.height);
        r.extend(&self.q);
        r.extend(&self.qdot);
        r
    }

    /// Reads the first `17 + 2 dof` entries of a row; trailing entries (such
    /// as the foot positions of a trajectory log) are ignored.
    pub fn from_row(r: &[f64], dof: usize) -> Result<Self> {
        if r.len() < FRAME_FIXED + 2 * dof {
            return Err(DatasetError::Format(format!("row has {} values, need {}", r.len(), FRAME_FIXED + 2 * dof)));
        }
        let a3 = |i: usize| [r[i], r[i + 1], r[i + 2]];
        Ok(Self {
            base_pos: a3(0),
            base_quat: [r[3], r[4], r[5], r[6]],
            lin_vel: a3(7),
            ang_vel: a3(10),
            normal: a3(13),
            height: r[16],
            q: r[FRAME_FIXED..FRAME_FIXED + dof].to_vec(),
            qdot: r[FRAME_FIXED + dof..FRAME_FIXED + 2 * dof].to_vec(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.to_row().iter().all(|v| v.is_finite()) {
            return Err(DatasetError::Invalid("non-finite frame value".into()));
        }
        if self.q.len() != self.qdot.len() {
            return Err(DatasetError::Invalid("q and qdot lengths differ".into()));
        }
        let qn = self.base_quat.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(DatasetError::Invalid(format!("quaternion norm {qn}")));
        }
        let up = self.rotation().inverse() * Vec3::z();
        if (up - Vec3::from(self.normal)).norm() > 1e-6 {
            return Err(DatasetError::Invalid("normal does not match the quaternion".into()));
        }
        Ok(())
    }

    /// Discriminator features for any joint count: linear velocity (3),
    /// body roll and pitch rates (2), normal (3), height (1), q, qdot.
    ///
    /// Yaw rate and base position are left out; with nine joints this gives
    /// 3 + 2 + 3 + 1 + 9 + 9 = 27.
    pub fn disc_features(&self) -> Vec<f64> {
        let w = self.rotation().inverse() * Vec3::from(self.ang_vel);
        let mut o = Vec::with_capacity(9 + 2 * self.dof());
        o.extend(self.lin_vel);
        o.extend([w.x, w.y]);
        o.extend(self.normal);
        o.push(self.height);
        o.extend(&self.q);
        o.extend(&self.qdot);
        o
    }
}

pub fn disc_obs_dim(dof: usize) -> usize {
    9 + 2 * dof
}

/// Nine-joint discriminator observation.
pub fn extract_discriminator_obs(frame: &FrameRecord) -> Result<[f64; DISC_OBS_DIM]> {
    if frame.dof() != 9 {
        return Err(DatasetError::NotNineDof(frame.dof()));
    }
    let f = frame.disc_features();
    let mut out = [0.0; DISC_OBS_DIM];
    out.copy_from_slice(&f);
    Ok(out)
}

/// Discriminator features of a live simulator state.
pub fn discriminator_obs(s: &SimState, terrain: &Terrain) -> Vec<f64> {
    FrameRecord::from_state(s, terrain).disc_features()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub dt: f64,
    pub dof: usize,
    pub gait: String,
    /// 0 is the zero-waist-augmented origin dataset.
    pub iteration: u32,
    pub joint_names: Vec<String>,
    pub provenance: String,
    /// Content hash of the dataset this one was derived from.
    pub parent_hash: Option<String>,
}

impl DatasetMeta {
    pub fn channels(&self) -> Vec<String> {
        let mut c = crate::physics::log::channel_names(&self.joint_names);
        c.truncate(FRAME_FIXED + 2 * self.joint_names.len());
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub name: String,
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionDataset {
    pub meta: DatasetMeta,
    pub clips: Vec<Clip>,
}

/// `H_I` consecutive frames of one clip mapped to discriminator features.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationWindow {
    pub clip: usize,
    pub start: usize,
    pub obs: Vec<Vec<f64>>,
}

impl ImitationWindow {
    pub fn flat(&self) -> Vec<f64> {
        self.obs.concat()
    }
}

impl MotionDataset {
    pub fn frame_count(&self) -> usize {
        self.clips.iter().map(|c| c.frames.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if !(m.dt > 0.0) {
            return Err(DatasetError::Invalid(format!("dt must be > 0, got {}", m.dt)));
        }
        if m.joint_names.len() != m.dof {
            return Err(DatasetError::Invalid(format!("{} joint names for dof {}", m.joint_names.len(), m.dof)));
        }
        if self.clips.is_empty() {
            return Err(DatasetError::Invalid("no clips".into()));
        }
        for c in &self.clips {
            if c.frames.is_empty() {
                return Err(DatasetError::Invalid(format!("clip `{}` is empty", c.name)));
            }
            for f in &c.frames {
                if f.dof() != m.dof {
                    return Err(DatasetError::Invalid(format!("clip `{}` has a {}-joint frame", c.name, f.dof())));
                }
                f.validate()?;
            }
        }
        Ok(())
    }

    /// Keeps only the named clips, in the given order.
    pub fn select(&self, allow: &[String]) -> Result<Self> {
        let clips = allow
            .iter()
            .map(|n| {
                self.clips
                    .iter()
                    .find(|c| &c.name == n)
                    .cloned()
                    .ok_or_else(|| DatasetError::Invalid(format!("no clip named `{n}`")))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            meta: self.meta.clone(),
            clips,
        })
    }

    pub fn write<W: Write>(&self, w: &mut W, enc: LogEncoding) -> Result<()> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| DatasetError::Format(e.to_string()))?;
        match enc {
            LogEncoding::Binary => {
                w.write_all(MAGIC)?;
                w.write_all(&VERSION.to_le_bytes())?;
                w.write_all(&(meta.len() as u64).to_le_bytes())?;
                w.write_all(meta.as_bytes())?;
                w.write_all(&(self.clips.len() as u64).to_le_bytes())?;
                for c in &self.clips {
                    w.write_all(&(c.name.len() as u64).to_le_bytes())?;
                    w.write_all(c.name.as_bytes())?;
                    w.write_all(&(c.frames.len() as u64).to_le_bytes())?;
                    for f in &c.frames {
                        for v in f.to_row() {
                            w.write_all(&v.to_le_bytes())?;
                        }
                    }
                }
            }
            LogEncoding::Text => {
                writeln!(w, "{TEXT_MAGIC} {VERSION}")?;
                writeln!(w, "meta {meta}")?;
                writeln!(w, "channels {}", self.meta.channels().join(","))?;
                for c in &self.clips {
                    if c.name.contains(char::is_whitespace) {
                        return Err(DatasetError::Invalid(format!("clip name `{}` contains whitespace", c.name)));
                    }
                    writeln!(w, "clip {} {}", c.name, c.frames.len())?;
                    for f in &c.frames {
                        let row: Vec<String> = f.to_row().iter().map(|v| v.to_string()).collect();
                        writeln!(w, "{}", row.join(","))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads either encoding, detected from the first bytes.
    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let ds = if buf.starts_with(MAGIC) && !buf.starts_with(TEXT_MAGIC.as_bytes()) {
            read_binary(&buf)?
        } else if buf.starts_with(TEXT_MAGIC.as_bytes()) {
            read_text(&buf)?
        } else {
            return Err(DatasetError::Format("unknown header".into()));
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path, enc: LogEncoding) -> Result<()> {
        let mut f = io::BufWriter::new(fs::File::create(path)?);
        self.write(&mut f, enc)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read(&mut io::BufReader::new(fs::File::open(path)?))
    }

    /// SHA-256 of the binary encoding, hex.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf, LogEncoding::Binary).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }

    /// Uniform windows of `h` consecutive frames, deterministic in `seed`.
    /// The start is drawn uniformly over all valid (clip, start) pairs.
    pub fn sample_windows(&self, batch: usize, h: usize, seed: u64) -> Result<Vec<ImitationWindow>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_windows_with(batch, h, &mut rng)
    }

    pub fn sample_windows_with<R: Rng>(&self, batch: usize, h: usize, rng: &mut R) -> Result<Vec<ImitationWindow>> {
        let h = h.max(1);
        let mut starts = Vec::with_capacity(self.clips.len());
        let mut total = 0usize;
        for c in &self.clips {
            if c.frames.len() < h {
                return Err(DatasetError::ClipTooShort {
                    clip: c.name.clone(),
                    frames: c.frames.len(),
                    window: h,
                });
            }
            total += c.frames.len() - h + 1;
            starts.push(total);
        }
        Ok((0..batch)
            .map(|_| {
                let k = rng.random_range(0..total);
                let clip = starts.partition_point(|&e| e <= k);
                let start = k - if clip == 0 { 0 } else { starts[clip - 1] };
                let obs = self.clips[clip].frames[start..start + h].iter().map(|f| f.disc_features()).collect();
                ImitationWindow { clip, start, obs }
            })
            .collect())
    }
}

fn read_binary(buf: &[u8]) -> Result<MotionDataset> {
    let mut c = Cursor { buf, pos: 4 };
    let version = u32::from_le_bytes(c.bytes(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(DatasetError::Format(format!("unsupported version {version}")));
    }
    let meta_len = c.u64()? as usize;
    let meta: DatasetMeta = serde_json::from_slice(c.bytes(meta_len)?).map_err(|e| DatasetError::Format(e.to_string()))?;
    let width = FRAME_FIXED + 2 * meta.dof;
    let n_clips = c.u64()? as usize;
    let mut clips = Vec::with_capacity(n_clips.min(1 << 16));
    for _ in 0..n_clips {
        let nl = c.u64()? as usize;
        let name = String::from_utf8(c.bytes(nl)?.to_vec()).map_err(|e| DatasetError::Format(e.to_string()))?;
        let nf = c.u64()? as usize;
        let mut frames = Vec::with_capacity(nf.min(1 << 20));
        let mut row = vec![0.0; width];
        for _ in 0..nf {
            for v in row.iter_mut() {
                *v = f64::from_le_bytes(c.bytes(8)?.try_into().unwrap());
            }
            frames.push(FrameRecord::from_row(&row, meta.dof)?);
        }
        clips.push(Clip { name, frames });
    }
    if c.pos != buf.len() {
        return Err(DatasetError::Format("trailing bytes".into()));
    }
    Ok(MotionDataset { meta, clips })
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos.checked_add(n).ok_or_else(|| DatasetError::Format("length overflow".into()))?)
            .ok_or_else(|| DatasetError::Format("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

fn read_text(buf: &[u8]) -> Result<MotionDataset> {
    let bad = |m: &str| DatasetError::Format(m.to_string());
    let mut lines = buf.lines();
    let mut next = || -> Result<String> { lines.next().ok_or_else(|| bad("unexpected end of file"))?.map_err(Into::into) };
    let head = next()?;
    if head != format!("{TEXT_MAGIC} {VERSION}") {
        return Err(bad(&format!("bad header `{head}`")));
    }
    let meta_line = next()?;
    let meta: DatasetMeta = serde_json::from_str(meta_line.strip_prefix("meta ").ok_or_else(|| bad("missing meta line"))?)
        .map_err(|e| DatasetError::Format(e.to_string()))?;
    let ch = next()?;
    let channels: Vec<String> = ch
        .strip_prefix("channels ")
        .ok_or_else(|| bad("missing channels line"))?
        .split(',')
        .map(String::from)
        .collect();
    if channels != meta.channels() {
        return Err(bad("channel list does not match metadata"));
    }
    let mut clips = Vec::new();
    while let Some(line) = lines.next() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("clip") {
            return Err(bad(&format!("expected clip header, got `{line}`")));
        }
        let name = parts.next().ok_or_else(|| bad("clip without name"))?.to_string();
        let nf: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| bad("clip without frame count"))?;
        let mut frames = Vec::with_capacity(nf);
        for _ in 0..nf {
            let row = lines.next().ok_or_else(|| bad("truncated clip"))??;
            let vals = row
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| DatasetError::Format(e.to_string()))?;
            if vals.len() != channels.len() {
                return Err(bad(&format!("row has {} values, expected {}", vals.len(), channels.len())));
            }
            frames.push(FrameRecord::from_row(&vals, meta.dof)?);
        }
        clips.push(Clip { name, frames });
    }
    Ok(MotionDataset { meta, clips })
}

fn insert_at<T: Clone>(v: &[T], idx: usize, x: T) -> Vec<T> {
    let mut out = v.to_vec();
    out.insert(idx, x);
    out
}

/// Inserts all-zero waist position and velocity channels at `waist_index`.
/// The result is the iteration-0 dataset.
pub fn augment_zero_waist(ds: &MotionDataset, waist_index: usize) -> Result<MotionDataset> {
    if ds.meta.dof != 8 {
        return Err(DatasetError::AlreadyAugmented(ds.meta.dof));
    }
    if waist_index > 8 {
        return Err(DatasetError::Invalid(format!("waist index {waist_index} outside 0..=8")));
    }
    let mut meta = ds.meta.clone();
    meta.dof = 9;
    meta.iteration = 0;
    meta.joint_names = insert_at(&meta.joint_names, waist_index, "waist".to_string());
    meta.provenance = format!("{} + zero waist at {waist_index}", ds.meta.provenance);
    meta.parent_hash = Some(ds.content_hash());
    let clips = ds
        .clips
        .iter()
        .map(|c| Clip {
            name: c.name.clone(),
            frames: c
                .frames
                .iter()
                .map(|f| FrameRecord {
                    q: insert_at(&f.q, waist_index, 0.0),
                    qdot: insert_at(&f.qdot, waist_index, 0.0),
                    ..f.clone()
                })
                .collect(),
        })
        .collect();
    Ok(MotionDataset { meta, clips })
}

/// Inverse of [`augment_zero_waist`]: removes the waist channels.
pub fn drop_waist(ds: &MotionDataset, waist_index: usize, original: &DatasetMeta) -> Result<MotionDataset> {
    if ds.meta.dof != 9 || waist_index > 8 {
        return Err(DatasetError::NotNineDof(ds.meta.dof));
    }
    let drop = |v: &[f64]| {
        let mut o = v.to_vec();
        o.remove(waist_index);
        o
    };
    Ok(MotionDataset {
        meta: original.clone(),
        clips: ds
            .clips
            .iter()
            .map(|c| Clip {
                name: c.name.clone(),
                frames: c
                    .frames
                    .iter()
                    .map(|f| FrameRecord {
                        q: drop(&f.q),
                        qdot: drop(&f.qdot),
                        ..f.clone()
                    })
                    .collect(),
            })
            .collect(),
    })
}

/// A recorded policy rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub name: String,
    pub log: TrajectoryLog,
    pub status: Termination,
}

#[derive(Debug, Clone)]
pub struct ExportMeta {
    pub parent: DatasetMeta,
    pub parent_hash: Option<String>,
    pub policy_id: String,
    pub command_desc: String,
    pub min_frames: usize,
}

/// Converts surviving rollouts into the next iteration's dataset.
pub fn export_rollouts(rollouts: &[Rollout], meta: &ExportMeta) -> Result<MotionDataset> {
    let mut clips = Vec::new();
    let mut dims: Option<(f64, Vec<String>)> = None;
    for r in rollouts {
        if r.status == Termination::Fallen || r.log.frames.len() < meta.min_frames.max(1) {
            continue;
        }
        let joints: Vec<String> = r
            .log
            .channels
            .iter()
            .filter_map(|c| c.strip_prefix("q_").map(String::from))
            .collect();
        if let Some((dt, j)) = &dims {
            if *dt != r.log.dt || *j != joints {
                return Err(DatasetError::Invalid(format!("rollout `{}` has a different layout", r.name)));
            }
        } else {
            dims = Some((r.log.dt, joints.clone()));
        }
        let frames = r
            .log
            .frames
            .iter()
            .map(|row| FrameRecord::from_row(row, joints.len()))
            .collect::<Result<_>>()?;
        clips.push(Clip {
            name: r.name.clone(),
            frames,
        });
    }
    let (dt, joint_names) = dims.ok_or(DatasetError::NoEligibleRollouts)?;
    let ds = MotionDataset {
        meta: DatasetMeta {
            dt,
            dof: joint_names.len(),
            gait: meta.parent.gait.clone(),
            iteration: meta.parent.iteration + 1,
            joint_names,
            provenance: format!("policy {} rollouts, commands {}", meta.policy_id, meta.command_desc),
            parent_hash: meta.parent_hash.clone(),
        },
        clips,
    };
    ds.validate()?;
    Ok(ds)
}

/// Steps one clip through forward kinematics and returns a trajectory log
/// with foot positions filled in. The recorded base height is kept, so
/// clips from rough terrain replay faithfully without the heightfield.
pub fn replay_clip(ds: &MotionDataset, clip: usize, model: Arc<Model>) -> Result<TrajectoryLog> {
    let c = ds
        .clips
        .get(clip)
        .ok_or_else(|| DatasetError::Invalid(format!("no clip {clip}; dataset has {}", ds.clips.len())))?;
    if model.n_act() != ds.meta.dof {
        return Err(DatasetError::Invalid(format!("model has {} joints, dataset {}", model.n_act(), ds.meta.dof)));
    }
    let sim = Sim::new(model, Arc::new(Terrain::flat()), ContactParams::default());
    let mut log = TrajectoryLog::new(ds.meta.dt, channel_names(&ds.meta.joint_names));
    for f in &c.frames {
        let mut s = sim.state_at(Vec3::from(f.base_pos), f.rotation(), &f.q);
        s.base_lin_vel = Vec3::from(f.lin_vel);
        s.base_ang_vel = Vec3::from(f.ang_vel);
        s.qdot = f.qdot.clone();
        let mut row = state_channels(&sim, &s);
        row[FRAME_FIXED - 1] = f.height;
        log.push(row);
    }
    Ok(log)
}
