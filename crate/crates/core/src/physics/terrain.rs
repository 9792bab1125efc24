//! Procedural heightfield terrain: flat ground, uniformly random uneven ground,
//! and irregular concentric steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::spatial::Vec3;
use super::PhysicsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TerrainKind {
    #[default]
    Flat,
    Uneven,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TerrainParams {
    /// Uneven ground: heights drawn uniformly from `[-amplitude, amplitude]`.
    pub amplitude: f64,
    /// Largest amplitude accepted by the generator.
    pub max_amplitude: f64,
    /// Steps: candidate first-step heights.
    pub step_heights: Vec<f64>,
    /// Steps: ring widths are drawn from this range (m).
    pub step_width: [f64; 2],
    /// Steps: the flat spawn square around the origin has this half-width (m).
    pub spawn_half_width: f64,
    /// Steps: the plateau height stays within `[0, max_step_levels * first_step]`.
    pub max_step_levels: u32,
    pub cell_size: f64,
    /// The field covers `[-half_extent, half_extent]^2`.
    pub half_extent: f64,
}

impl Default for TerrainParams {
    fn default() -> Self {
        Self {
            amplitude: 0.035,
            max_amplitude: 0.035,
            step_heights: vec![0.025, 0.0275, 0.029],
            step_width: [0.3, 0.5],
            spawn_half_width: 0.5,
            max_step_levels: 3,
            cell_size: 0.1,
            half_extent: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub x0: f64,
    pub y0: f64,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
    /// Vertex heights, row-major in y then x.
    pub heights: Vec<f64>,
}

impl HeightField {
    fn vertex(&self, ix: usize, iy: usize) -> f64 {
        self.heights[iy * self.nx + ix]
    }

    /// Bilinear height and gradient; `None` outside the field.
    pub fn sample(&self, x: f64, y: f64) -> Option<(f64, f64, f64)> {
        let fx = (x - self.x0) / self.cell;
        let fy = (y - self.y0) / self.cell;
        if !(fx >= 0.0 && fy >= 0.0) {
            return None;
        }
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        if ix + 1 >= self.nx || iy + 1 >= self.ny {
            return None;
        }
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let h00 = self.vertex(ix, iy);
        let h10 = self.vertex(ix + 1, iy);
        let h01 = self.vertex(ix, iy + 1);
        let h11 = self.vertex(ix + 1, iy + 1);
        let h = h00 * (1.0 - tx) * (1.0 - ty) + h10 * tx * (1.0 - ty) + h01 * (1.0 - tx) * ty + h11 * tx * ty;
        let dx = ((h10 - h00) * (1.0 - ty) + (h11 - h01) * ty) / self.cell;
        let dy = ((h01 - h00) * (1.0 - tx) + (h11 - h10) * tx) / self.cell;
        Some((h, dx, dy))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Terrain {
    pub kind: TerrainKind,
    pub params: TerrainParams,
    pub field: Option<HeightField>,
    /// Steps only: the height of the first ring around the spawn square.
    pub first_step_height: Option<f64>,
}

impl Terrain {
    pub fn flat() -> Self {
        Self {
            kind: TerrainKind::Flat,
            params: TerrainParams::default(),
            field: None,
            first_step_height: None,
        }
    }

    /// Terrain height at `(x, y)`; flat ground (0 m) outside the field.
    #[inline]
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.sample(x, y).0
    }

    /// Height and upward unit normal.
    #[inline]
    pub fn sample(&self, x: f64, y: f64) -> (f64, Vec3) {
        match self.field.as_ref().and_then(|f| f.sample(x, y)) {
            Some((h, dx, dy)) => (h, Vec3::new(-dx, -dy, 1.0).normalize()),
            None => (0.0, Vec3::z()),
        }
    }
}

/// Builds a terrain. Deterministic for a given `(kind, params, seed)`.
pub fn generate_terrain(kind: TerrainKind, params: &TerrainParams, seed: u64) -> Result<Terrain, PhysicsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bad = |msg: String| Err(PhysicsError::Parameter(msg));
    if kind != TerrainKind::Flat && (!(params.cell_size > 0.0) || !(params.half_extent > params.cell_size)) {
        return bad(format!("cell size {} / extent {} invalid", params.cell_size, params.half_extent));
    }
    let grid = |cell: f64| {
        let n = (2.0 * params.half_extent / cell).round() as usize + 1;
        (n, -params.half_extent)
    };
    match kind {
        TerrainKind::Flat => Ok(Terrain {
            kind,
            params: params.clone(),
            field: None,
            first_step_height: None,
        }),
        TerrainKind::Uneven => {
            let a = params.amplitude;
            if !(a > 0.0) {
                return bad(format!("uneven amplitude must be > 0, got {a}"));
            }
            if a > params.max_amplitude {
                return bad(format!("amplitude {a} exceeds configured max {}", params.max_amplitude));
            }
            let (n, origin) = grid(params.cell_size);
            let heights = (0..n * n).map(|_| rng.random_range(-a..=a)).collect();
            Ok(Terrain {
                kind,
                params: params.clone(),
                field: Some(HeightField {
                    x0: origin,
                    y0: origin,
                    cell: params.cell_size,
                    nx: n,
                    ny: n,
                    heights,
                }),
                first_step_height: None,
            })
        }
        TerrainKind::Steps => {
            if params.step_heights.is_empty() || params.step_heights.iter().any(|h| !(*h > 0.0)) {
                return bad("step heights must be a non-empty set of positive values".into());
            }
            let [wlo, whi] = params.step_width;
            if !(wlo > 0.0 && wlo <= whi) {
                return bad(format!("step width range [{wlo}, {whi}] invalid"));
            }
            let first = params.step_heights[rng.random_range(0..params.step_heights.len())];
            // ring boundaries (Chebyshev radius) and plateau heights
            let mut edges = vec![params.spawn_half_width];
            let mut levels = vec![0i32, 1];
            while *edges.last().unwrap() < params.half_extent * 1.5 {
                let w = if wlo == whi { wlo } else { rng.random_range(wlo..whi) };
                edges.push(edges.last().unwrap() + w);
                let prev = *levels.last().unwrap();
                let up = rng.random_bool(0.5);
                let next = if (up && prev < params.max_step_levels as i32) || prev == 0 {
                    prev + 1
                } else {
                    prev - 1
                };
                levels.push(next);
            }
            let cell = params.cell_size.min(0.025);
            let (n, origin) = grid(cell);
            let mut heights = Vec::with_capacity(n * n);
            for iy in 0..n {
                for ix in 0..n {
                    let x = origin + ix as f64 * cell;
                    let y = origin + iy as f64 * cell;
                    let r = x.abs().max(y.abs());
                    let ring = edges.iter().position(|&e| r < e).unwrap_or(edges.len());
                    heights.push(levels[ring.min(levels.len() - 1)] as f64 * first);
                }
            }
            Ok(Terrain {
                kind,
                params: params.clone(),
                field: Some(HeightField {
                    x0: origin,
                    y0: origin,
                    cell,
                    nx: n,
                    ny: n,
                    heights,
                }),
                first_step_height: Some(first),
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TerrainParams {
        TerrainParams {
            half_extent: 3.0,
            ..Default::default()
        }
    }

    #[test]
    fn uneven_heights_bounded_by_amplitude() {
        let t = generate_terrain(TerrainKind::Uneven, &small(), 7).unwrap();
        let f = t.field.as_ref().unwrap();
        assert!(f.heights.iter().all(|h| (-0.035..=0.035).contains(h)));
        for i in 0..500 {
            let x = -3.5 + 7.0 * (i as f64 * 0.6180339887 % 1.0);
            let y = -3.5 + 7.0 * (i as f64 * 0.4142135623 % 1.0);
            let h = t.height(x, y);
            assert!((-0.035..=0.035).contains(&h));
        }
    }

    #[test]
    fn flat_is_zero_everywhere() {
        let t = generate_terrain(TerrainKind::Flat, &small(), 99).unwrap();
        for (x, y) in [(0.0, 0.0), (1.3, -7.0), (1e4, 2.0)] {
            assert_eq!(t.sample(x, y), (0.0, Vec3::z()));
        }
    }

    #[test]
    fn first_step_from_given_set() {
        let t = generate_terrain(TerrainKind::Steps, &small(), 3).unwrap();
        let h = t.first_step_height.unwrap();
        assert!([0.025, 0.0275, 0.029].contains(&h));
        assert_eq!(t.height(0.0, 0.0), 0.0);
        // just outside the spawn square the first plateau begins
        assert!((t.height(0.55, 0.0) - h).abs() < 1e-12);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_terrain(TerrainKind::Uneven, &small(), 11).unwrap();
        let b = generate_terrain(TerrainKind::Uneven, &small(), 11).unwrap();
        let c = generate_terrain(TerrainKind::Uneven, &small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_errors() {
        let mut p = small();
        p.amplitude = 0.0;
        assert!(generate_terrain(TerrainKind::Uneven, &p, 1).is_err());
        p.amplitude = 0.05;
        assert!(generate_terrain(TerrainKind::Uneven, &p, 1).is_err());
    }

    #[test]
    fn out_of_bounds_is_flat() {
        let t = generate_terrain(TerrainKind::Uneven, &small(), 5).unwrap();
        assert_eq!(t.height(50.0, 0.0), 0.0);
        assert_eq!(t.height(-3.2, 0.0), 0.0);
    }
}
