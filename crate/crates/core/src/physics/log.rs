//! Trajectory logs: a header (`dt`, channel names) followed by one row of
//! state channels per frame.
//!
//! Channel order matches motion-dataset frames: base position (3), base
//! quaternion `w x y z` (4), base linear velocity (3, world), base angular
//! velocity (3, world), base normal (3), base height (1), joint positions,
//! joint velocities, then foot positions (4 × 3, world).

use std::io::{self, BufRead, Read, Write};

use thiserror::Error;

use super::{Sim, SimState};

const MAGIC: &[u8; 4] = b"QTRJ";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed log: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogEncoding {
    #[default]
    Binary,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub dt: f64,
    pub channels: Vec<String>,
    pub frames: Vec<Vec<f64>>,
}

pub fn channel_names(joint_names: &[String]) -> Vec<String> {
    let mut c: Vec<String> = [
        "base_x", "base_y", "base_z", "quat_w", "quat_x", "quat_y", "quat_z", "vel_x", "vel_y", "vel_z", "angvel_x",
        "angvel_y", "angvel_z", "normal_x", "normal_y", "normal_z", "base_height",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    c.extend(joint_names.iter().map(|j| format!("q_{j}")));
    c.extend(joint_names.iter().map(|j| format!("qd_{j}")));
    for f in 0..4 {
        for a in ["x", "y", "z"] {
            c.push(format!("foot{f}_{a}"));
        }
    }
    c
}

/// Flattens a state into one log row.
pub fn state_channels(sim: &Sim, s: &SimState) -> Vec<f64> {
    let q = s.base_quat.quaternion();
    let normal = s.base_quat.inverse() * super::Vec3::z();
    let height = s.base_pos.z - sim.terrain.height(s.base_pos.x, s.base_pos.y);
    let mut row = Vec::with_capacity(17 + 2 * s.q.len() + 12);
    row.extend(s.base_pos.iter());
    row.extend([q.w, q.i, q.j, q.k]);
    row.extend(s.base_lin_vel.iter());
    row.extend(s.base_ang_vel.iter());
    row.extend(normal.iter());
    row.push(height);
    row.extend(&s.q);
    row.extend(&s.qdot);
    for p in &s.foot_positions {
        row.extend(p.iter());
    }
    row
}

impl TrajectoryLog {
    pub fn new(dt: f64, channels: Vec<String>) -> Self {
        Self {
            dt,
            channels,
            frames: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.channels.len());
        self.frames.push(row);
    }

    pub fn channel(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c == name)
    }

    pub fn write<W: Write>(&self, w: &mut W, enc: LogEncoding) -> Result<(), LogError> {
        match enc {
            LogEncoding::Binary => {
                w.write_all(MAGIC)?;
                w.write_all(&VERSION.to_le_bytes())?;
                w.write_all(&self.dt.to_le_bytes())?;
                w.write_all(&(self.channels.len() as u32).to_le_bytes())?;
                for c in &self.channels {
                    w.write_all(&(c.len() as u32).to_le_bytes())?;
                    w.write_all(c.as_bytes())?;
                }
                w.write_all(&(self.frames.len() as u64).to_le_bytes())?;
                for f in &self.frames {
                    for v in f {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
            LogEncoding::Text => {
                writeln!(w, "# trajectory v{VERSION}")?;
                writeln!(w, "# dt {:e}", self.dt)?;
                writeln!(w, "{}", self.channels.join(","))?;
                for f in &self.frames {
                    let row: Vec<String> = f.iter().map(|v| format!("{v:e}")).collect();
                    writeln!(w, "{}", row.join(","))?;
                }
            }
        }
        Ok(())
    }

    /// Reads either encoding, detected from the first bytes.
    pub fn read<R: BufRead>(r: &mut R) -> Result<Self, LogError> {
        let head = r.fill_buf()?;
        if head.starts_with(MAGIC) {
            Self::read_binary(r)
        } else {
            Self::read_text(r)
        }
    }

    fn read_binary<R: Read>(r: &mut R) -> Result<Self, LogError> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != VERSION {
            return Err(LogError::Format(format!("unsupported version {version}")));
        }
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let nc = u32::from_le_bytes(b4) as usize;
        let mut channels = Vec::with_capacity(nc);
        for _ in 0..nc {
            r.read_exact(&mut b4)?;
            let mut s = vec![0u8; u32::from_le_bytes(b4) as usize];
            r.read_exact(&mut s)?;
            channels.push(String::from_utf8(s).map_err(|e| LogError::Format(e.to_string()))?);
        }
        r.read_exact(&mut b8)?;
        let nf = u64::from_le_bytes(b8) as usize;
        let mut frames = Vec::with_capacity(nf);
        for _ in 0..nf {
            let mut row = Vec::with_capacity(nc);
            for _ in 0..nc {
                r.read_exact(&mut b8)?;
                row.push(f64::from_le_bytes(b8));
            }
            frames.push(row);
        }
        Ok(Self { dt, channels, frames })
    }

    fn read_text<R: BufRead>(r: &mut R) -> Result<Self, LogError> {
        let mut dt = None;
        let mut channels: Option<Vec<String>> = None;
        let mut frames = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("dt ") {
                    dt = Some(v.trim().parse::<f64>().map_err(|e| LogError::Format(format!("line {}: {e}", i + 1)))?);
                }
                continue;
            }
            match &channels {
                None => channels = Some(line.split(',').map(str::to_string).collect()),
                Some(ch) => {
                    let row = line
                        .split(',')
                        .map(|t| t.parse::<f64>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|e| LogError::Format(format!("line {}: {e}", i + 1)))?;
                    if row.len() != ch.len() {
                        return Err(LogError::Format(format!("line {}: {} values for {} channels", i + 1, row.len(), ch.len())));
                    }
                    frames.push(row);
                }
            }
        }
        Ok(Self {
            dt: dt.ok_or_else(|| LogError::Format("missing dt".into()))?,
            channels: channels.ok_or_else(|| LogError::Format("missing channel header".into()))?,
            frames,
        })
    }
}
