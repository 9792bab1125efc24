//! Robot variants compared in the waist ablations.

use serde::{Deserialize, Serialize};

use crate::dataset::{augment_zero_waist, drop_waist, DatasetError, DatasetMeta, MotionDataset, WAIST_INDEX};
use crate::env::{EnvConfig, WaistMode};
use crate::physics::Model;
use crate::robot::{make_solo8_from_solo9, solo8, solo9};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Solo9,
    Solo8,
    /// solo9 with the waist welded at 0 rad.
    Solo9Fixed,
    /// solo9 with the waist joint free and unpowered.
    Solo9Free,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Solo9, Variant::Solo8, Variant::Solo9Fixed, Variant::Solo9Free];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Solo9 => "solo9",
            Variant::Solo8 => "solo8",
            Variant::Solo9Fixed => "solo9_fixed",
            Variant::Solo9Free => "solo9_free",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn model(self) -> Model {
        match self {
            Variant::Solo9 | Variant::Solo9Free => Model::from_spec(&solo9()),
            Variant::Solo8 => Model::from_spec(&solo8()),
            Variant::Solo9Fixed => Model::from_spec(&make_solo8_from_solo9(&solo9()).expect("solo9 has a waist")),
        }
    }

    /// Actuated joint count.
    pub fn dof(self) -> usize {
        match self {
            Variant::Solo9 | Variant::Solo9Free => 9,
            Variant::Solo8 | Variant::Solo9Fixed => 8,
        }
    }

    /// Sets the waist actuation mode of `cfg` for this variant.
    pub fn configure(self, cfg: &mut EnvConfig) {
        cfg.action.waist = if self == Variant::Solo9Free { WaistMode::Free } else { WaistMode::Actuated };
    }

    /// Brings a reference dataset to this variant's joint count, inserting
    /// zero waist channels or removing them as needed.
    pub fn adapt_dataset(self, ds: &MotionDataset) -> Result<MotionDataset, DatasetError> {
        match (ds.meta.dof, self.dof()) {
            (a, b) if a == b => Ok(ds.clone()),
            (8, 9) => augment_zero_waist(ds, WAIST_INDEX),
            (9, 8) => {
                let mut names = ds.meta.joint_names.clone();
                names.remove(WAIST_INDEX);
                let meta = DatasetMeta {
                    dof: 8,
                    joint_names: names,
                    provenance: format!("{} without waist", ds.meta.provenance),
                    parent_hash: Some(ds.content_hash()),
                    ..ds.meta.clone()
                };
                drop_waist(ds, WAIST_INDEX, &meta)
            }
            (a, b) => Err(DatasetError::Invalid(format!("cannot adapt a {a}-DOF dataset to {b} joints"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}
