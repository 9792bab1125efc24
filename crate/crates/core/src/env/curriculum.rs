use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumLimits {
    pub max_terrain_level: u32,
    pub max_pd_level: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurriculumState {
    pub terrain_level: u32,
    pub pd_gain_level: u32,
    /// Distance walked in the current episode (m).
    pub walked: f64,
}

fn step_level<R: Rng>(level: u32, max: u32, promote: bool, demote: bool, rng: &mut R) -> u32 {
    if promote {
        if level >= max {
            rng.random_range(0..=max)
        } else {
            level + 1
        }
    } else if demote {
        level.saturating_sub(1)
    } else {
        level
    }
}

/// Promotes when `walked ≥ target`, demotes when `walked < target / 2`.
/// Levels already at their maximum are reshuffled uniformly on promotion.
pub fn curriculum_update<R: Rng>(
    cs: &CurriculumState,
    walked: f64,
    target: f64,
    limits: CurriculumLimits,
    rng: &mut R,
) -> CurriculumState {
    let promote = walked >= target;
    let demote = walked < target / 2.0;
    CurriculumState {
        terrain_level: step_level(cs.terrain_level.min(limits.max_terrain_level), limits.max_terrain_level, promote, demote, rng),
        pd_gain_level: step_level(cs.pd_gain_level.min(limits.max_pd_level), limits.max_pd_level, promote, demote, rng),
        walked: 0.0,
    }
}
