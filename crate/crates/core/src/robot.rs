//! Robot morphology: declarative link/joint description, validation, and the
//! waist-weld transform used for the fixed-waist ablation.
//!
//! Morphology files are TOML with one `[link.<name>]` table per rigid body and
//! one `[joint.<name>]` table per joint. See `docs/morphology.md` for the field
//! reference.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance for the link-mass bookkeeping check.
pub const MASS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum RobotError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid morphology ({invariant}): {detail}")]
    Invalid {
        invariant: &'static str,
        detail: String,
    },
    #[error("morphology has no waist joint")]
    NoWaist,
}

type Result<T> = std::result::Result<T, RobotError>;

fn invalid(invariant: &'static str, detail: impl Into<String>) -> RobotError {
    RobotError::Invalid {
        invariant,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointRole {
    #[default]
    Leg,
    Waist,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JointKind {
    #[default]
    Revolute,
    /// Rigid weld; the joint keeps its place in the tree but carries no DOF.
    Fixed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Box { size: [f64; 3] },
    Rod { length: f64, radius: f64 },
}

impl Shape {
    /// Solid-body principal inertia about the centroid for the given mass.
    /// Rods are cylinders aligned with the link z axis.
    pub fn inertia_diag(&self, mass: f64) -> [f64; 3] {
        match *self {
            Shape::Box { size: [x, y, z] } => [
                mass * (y * y + z * z) / 12.0,
                mass * (x * x + z * z) / 12.0,
                mass * (x * x + y * y) / 12.0,
            ],
            Shape::Rod { length, radius } => {
                let side = mass * (3.0 * radius * radius + length * length) / 12.0;
                [side, side, 0.5 * mass * radius * radius]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub name: String,
    pub mass: f64,
    /// Centre of mass in the link frame.
    pub com: [f64; 3],
    /// Principal inertia about the centre of mass, link-frame axes.
    pub inertia: [f64; 3],
    pub shape: Shape,
    /// Foot contact point (sphere centre) in the link frame, if this link ends in a foot.
    pub foot: Option<[f64; 3]>,
    /// Non-foot collision points; touching the ground with these counts as a fall.
    pub contact_points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub role: JointRole,
    pub kind: JointKind,
    pub axis: [f64; 3],
    pub parent: usize,
    pub child: usize,
    /// Joint origin in the parent link frame.
    pub origin: [f64; 3],
    pub motor_torque_limit: f64,
    pub motors: u32,
    /// Effective joint torque limit, `motor_torque_limit * motors`.
    pub torque_limit: f64,
    pub position_limits: Option<(f64, f64)>,
    pub damping: f64,
    /// Reflected rotor inertia added to the joint diagonal of the mass matrix.
    pub armature: f64,
}

impl JointSpec {
    pub fn is_actuated(&self) -> bool {
        self.kind == JointKind::Revolute
    }
}

/// Validated robot description. Links are stored in depth-first order from the
/// root (index 0); `joints[k]` connects `links[k + 1]` to its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotSpec {
    pub name: String,
    pub links: Vec<LinkSpec>,
    pub joints: Vec<JointSpec>,
    /// Links `[0, base_split_index)` belong to the front half, the rest to the rear.
    pub base_split_index: usize,
    pub total_mass: f64,
    pub body_length: f64,
    pub body_width: f64,
    pub contact_radius: f64,
}

// ---- on-disk representation -------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRobot {
    name: String,
    total_mass: f64,
    body_length: f64,
    body_width: f64,
    contact_radius: f64,
    base_split_link: String,
    joint_order: Vec<String>,
    link: BTreeMap<String, RawLink>,
    joint: BTreeMap<String, RawJoint>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLink {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mass: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mass_fraction: Option<f64>,
    com: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    inertia: Option<[f64; 3]>,
    shape: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    size: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    foot: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    contact_points: Vec<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawJoint {
    #[serde(default)]
    role: JointRole,
    #[serde(default)]
    kind: JointKind,
    axis: [f64; 3],
    parent: String,
    child: String,
    origin: [f64; 3],
    motor_torque_limit: f64,
    #[serde(default = "one")]
    motors: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    limits: Option<[f64; 2]>,
    #[serde(default)]
    damping: f64,
    #[serde(default = "default_armature")]
    armature: f64,
}

fn one() -> u32 {
    1
}

fn default_armature() -> f64 {
    // rotor inertia ~6e-6 kg m^2 through a 9:1 reduction
    5e-4
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses a morphology document.
pub fn parse_robot_spec(text: &str) -> Result<RobotSpec> {
    let raw: RawRobot = toml::from_str(text).map_err(|e| RobotError::Parse {
        line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
        message: e.message().to_string(),
    })?;
    build(raw)
}

pub fn load_robot_spec(path: impl AsRef<Path>) -> Result<RobotSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| RobotError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_robot_spec(&text)
}

/// Built-in solo9 morphology.
pub fn solo9() -> RobotSpec {
    parse_robot_spec(include_str!("../assets/robots/solo9.toml")).expect("bundled solo9 morphology")
}

/// Built-in solo8 morphology.
pub fn solo8() -> RobotSpec {
    parse_robot_spec(include_str!("../assets/robots/solo8.toml")).expect("bundled solo8 morphology")
}

fn build(raw: RawRobot) -> Result<RobotSpec> {
    if !(raw.total_mass > 0.0) {
        return Err(invalid("positive mass", "total_mass must be > 0"));
    }
    if raw.joint_order.len() != raw.joint.len() {
        return Err(invalid(
            "joint order",
            "joint_order must list every [joint.*] table exactly once",
        ));
    }
    for name in &raw.joint_order {
        if !raw.joint.contains_key(name) {
            return Err(invalid("joint order", format!("unknown joint '{name}'")));
        }
    }

    // children of each link, in joint_order order
    let mut children: HashMap<&str, Vec<&str>> = HashMap::new();
    let mut has_parent: HashMap<&str, &str> = HashMap::new();
    for jname in &raw.joint_order {
        let j = &raw.joint[jname];
        for end in [&j.parent, &j.child] {
            if !raw.link.contains_key(end) {
                return Err(invalid("tree", format!("joint '{jname}' references unknown link '{end}'")));
            }
        }
        if let Some(prev) = has_parent.insert(j.child.as_str(), jname.as_str()) {
            return Err(invalid(
                "tree",
                format!("link '{}' has two parent joints ('{prev}', '{jname}')", j.child),
            ));
        }
        children.entry(j.parent.as_str()).or_default().push(jname.as_str());
    }
    let roots: Vec<&String> = raw.link.keys().filter(|l| !has_parent.contains_key(l.as_str())).collect();
    if roots.len() != 1 {
        return Err(invalid(
            "tree",
            format!("expected exactly one root link, found {roots:?}"),
        ));
    }
    let root = roots[0].as_str();

    // depth-first order, children in joint_order
    let mut order: Vec<&str> = Vec::with_capacity(raw.link.len());
    let mut joint_for: Vec<Option<&str>> = Vec::with_capacity(raw.link.len());
    let mut stack: Vec<(&str, Option<&str>)> = vec![(root, None)];
    while let Some((link, via)) = stack.pop() {
        if order.contains(&link) {
            return Err(invalid("tree", format!("cycle through link '{link}'")));
        }
        order.push(link);
        joint_for.push(via);
        if let Some(js) = children.get(link) {
            for jn in js.iter().rev() {
                stack.push((raw.joint[*jn].child.as_str(), Some(jn)));
            }
        }
    }
    if order.len() != raw.link.len() {
        return Err(invalid("tree", "not every link is reachable from the root"));
    }
    let index: HashMap<&str, usize> = order.iter().enumerate().map(|(i, n)| (*n, i)).collect();

    let fraction_mode = raw.link.values().any(|l| l.mass_fraction.is_some());
    let mut links = Vec::with_capacity(order.len());
    for name in &order {
        let rl = &raw.link[*name];
        let mass = match (rl.mass, rl.mass_fraction) {
            (Some(m), None) if !fraction_mode => m,
            (None, Some(f)) if fraction_mode => f * raw.total_mass,
            _ => {
                return Err(invalid(
                    "mass",
                    format!("link '{name}': give either `mass` on every link or `mass_fraction` on every link"),
                ))
            }
        };
        if !(mass > 0.0) {
            return Err(invalid("positive mass", format!("link '{name}' has mass {mass}")));
        }
        let shape = match (rl.shape.as_str(), rl.size, rl.length, rl.radius) {
            ("box", Some(size), None, None) => Shape::Box { size },
            ("rod", None, Some(length), Some(radius)) => Shape::Rod { length, radius },
            _ => {
                return Err(invalid(
                    "shape",
                    format!("link '{name}': box needs `size`, rod needs `length` and `radius`"),
                ))
            }
        };
        let inertia = rl.inertia.unwrap_or_else(|| shape.inertia_diag(mass));
        if inertia.iter().any(|&v| !(v > 0.0)) {
            return Err(invalid("positive inertia", format!("link '{name}'")));
        }
        links.push(LinkSpec {
            name: name.to_string(),
            mass,
            com: rl.com,
            inertia,
            shape,
            foot: rl.foot,
            contact_points: rl.contact_points.clone(),
        });
    }

    let mut joints = Vec::with_capacity(order.len() - 1);
    for (k, via) in joint_for.iter().enumerate().skip(1) {
        let jname = via.expect("non-root link has a joint");
        let rj = &raw.joint[jname];
        let n = (rj.axis[0].powi(2) + rj.axis[1].powi(2) + rj.axis[2].powi(2)).sqrt();
        if (n - 1.0).abs() > 1e-9 {
            return Err(invalid("unit axis", format!("joint '{jname}' axis norm {n}")));
        }
        if !(rj.motor_torque_limit > 0.0) || rj.motors == 0 {
            return Err(invalid("torque limit", format!("joint '{jname}'")));
        }
        let position_limits = rj.limits.map(|[lo, hi]| (lo, hi));
        if let Some((lo, hi)) = position_limits {
            if !(lo < hi) {
                return Err(invalid("position limits", format!("joint '{jname}': {lo} >= {hi}")));
            }
        }
        joints.push(JointSpec {
            name: jname.to_string(),
            role: rj.role,
            kind: rj.kind,
            axis: rj.axis,
            parent: index[rj.parent.as_str()],
            child: k,
            origin: rj.origin,
            motor_torque_limit: rj.motor_torque_limit,
            motors: rj.motors,
            torque_limit: rj.motor_torque_limit * rj.motors as f64,
            position_limits,
            damping: rj.damping,
            armature: rj.armature,
        });
    }

    let base_split_index = *index
        .get(raw.base_split_link.as_str())
        .ok_or_else(|| invalid("base split", format!("unknown link '{}'", raw.base_split_link)))?;

    let spec = RobotSpec {
        name: raw.name,
        links,
        joints,
        base_split_index,
        total_mass: raw.total_mass,
        body_length: raw.body_length,
        body_width: raw.body_width,
        contact_radius: raw.contact_radius,
    };
    spec.validate()?;
    Ok(spec)
}

impl RobotSpec {
    /// Checks every structural invariant. Called by the loader; exposed for
    /// specs assembled or edited in code.
    pub fn validate(&self) -> Result<()> {
        if self.links.is_empty() || self.joints.len() + 1 != self.links.len() {
            return Err(invalid("tree", "N links require exactly N-1 joints"));
        }
        for (k, j) in self.joints.iter().enumerate() {
            if j.child != k + 1 || j.parent >= j.child {
                return Err(invalid("tree", format!("joint '{}' breaks depth-first ordering", j.name)));
            }
        }
        if !(self.total_mass > 0.0) || self.links.iter().any(|l| !(l.mass > 0.0)) {
            return Err(invalid("positive mass", "every link and the total must have mass > 0"));
        }
        let sum: f64 = self.links.iter().map(|l| l.mass).sum();
        if (sum - self.total_mass).abs() > MASS_TOLERANCE {
            return Err(invalid(
                "mass bookkeeping",
                format!("link masses sum to {sum}, total_mass is {}", self.total_mass),
            ));
        }
        let waists: Vec<&JointSpec> = self.joints.iter().filter(|j| j.role == JointRole::Waist).collect();
        if waists.len() > 1 {
            return Err(invalid("single waist", "more than one waist joint"));
        }
        if let Some(w) = waists.first() {
            if w.position_limits.is_some() {
                return Err(invalid("unlimited waist", format!("joint '{}' has position limits", w.name)));
            }
            if w.parent != 0 {
                return Err(invalid("waist at root", "the waist must attach to the front base (root)"));
            }
        }
        let feet = self.links.iter().filter(|l| l.foot.is_some()).count();
        if feet != 4 {
            return Err(invalid("four feet", format!("found {feet} foot links")));
        }
        let n_act = self.actuated_count();
        match self.name.as_str() {
            "solo9" if n_act != 9 => return Err(invalid("solo9 actuation", format!("{n_act} actuated joints"))),
            "solo8" if n_act != 8 => return Err(invalid("solo8 actuation", format!("{n_act} actuated joints"))),
            _ => {}
        }
        Ok(())
    }

    pub fn actuated_count(&self) -> usize {
        self.joints.iter().filter(|j| j.is_actuated()).count()
    }

    pub fn actuated_joints(&self) -> impl Iterator<Item = &JointSpec> {
        self.joints.iter().filter(|j| j.is_actuated())
    }

    pub fn actuated_joint_names(&self) -> Vec<String> {
        self.actuated_joints().map(|j| j.name.clone()).collect()
    }

    pub fn torque_limits(&self) -> Vec<f64> {
        self.actuated_joints().map(|j| j.torque_limit).collect()
    }

    /// Index of the waist within the actuated-joint vector, if actuated.
    pub fn waist_actuated_index(&self) -> Option<usize> {
        self.actuated_joints().position(|j| j.role == JointRole::Waist)
    }

    pub fn has_waist_joint(&self) -> bool {
        self.joints.iter().any(|j| j.role == JointRole::Waist)
    }

    pub fn link_index(&self, name: &str) -> Option<usize> {
        self.links.iter().position(|l| l.name == name)
    }

    /// Foot link indices in link order (FL, FR, HL, HR for the bundled robots).
    pub fn foot_links(&self) -> Vec<usize> {
        self.links
            .iter()
            .enumerate()
            .filter(|(_, l)| l.foot.is_some())
            .map(|(i, _)| i)
            .collect()
    }

    /// Serializes back to the morphology file format, with absolute masses and
    /// explicit inertias.
    pub fn to_toml_string(&self) -> String {
        let mut link = BTreeMap::new();
        for l in &self.links {
            link.insert(
                l.name.clone(),
                RawLink {
                    mass: Some(l.mass),
                    mass_fraction: None,
                    com: l.com,
                    inertia: Some(l.inertia),
                    shape: match l.shape {
                        Shape::Box { .. } => "box".into(),
                        Shape::Rod { .. } => "rod".into(),
                    },
                    size: match l.shape {
                        Shape::Box { size } => Some(size),
                        _ => None,
                    },
                    length: match l.shape {
                        Shape::Rod { length, .. } => Some(length),
                        _ => None,
                    },
                    radius: match l.shape {
                        Shape::Rod { radius, .. } => Some(radius),
                        _ => None,
                    },
                    foot: l.foot,
                    contact_points: l.contact_points.clone(),
                },
            );
        }
        let mut joint = BTreeMap::new();
        for j in &self.joints {
            joint.insert(
                j.name.clone(),
                RawJoint {
                    role: j.role,
                    kind: j.kind,
                    axis: j.axis,
                    parent: self.links[j.parent].name.clone(),
                    child: self.links[j.child].name.clone(),
                    origin: j.origin,
                    motor_torque_limit: j.motor_torque_limit,
                    motors: j.motors,
                    limits: j.position_limits.map(|(a, b)| [a, b]),
                    damping: j.damping,
                    armature: j.armature,
                },
            );
        }
        let raw = RawRobot {
            name: self.name.clone(),
            total_mass: self.total_mass,
            body_length: self.body_length,
            body_width: self.body_width,
            contact_radius: self.contact_radius,
            base_split_link: self.links[self.base_split_index].name.clone(),
            joint_order: self.joints.iter().map(|j| j.name.clone()).collect(),
            link,
            joint,
        };
        toml::to_string(&raw).expect("robot spec serializes")
    }
}

/// Welds the waist at 0 rad, producing the fixed-waist ablation morphology.
/// Link masses and the tree are untouched; only the actuated-joint count drops.
pub fn make_solo8_from_solo9(spec: &RobotSpec) -> Result<RobotSpec> {
    let mut out = spec.clone();
    let waist = out
        .joints
        .iter_mut()
        .find(|j| j.role == JointRole::Waist && j.kind == JointKind::Revolute)
        .ok_or(RobotError::NoWaist)?;
    waist.kind = JointKind::Fixed;
    out.name = format!("{}_fixed", spec.name);
    out.validate()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_solo9_matches_measured_dimensions() {
        let s = solo9();
        assert_eq!(s.actuated_count(), 9);
        assert_eq!(s.body_length, 0.465);
        assert_eq!(s.body_width, 0.31);
        assert_eq!(s.total_mass, 2.3);
        assert_eq!(s.links[0].name, "front_base");
        assert_eq!(s.waist_actuated_index(), Some(4));
    }

    #[test]
    fn bundled_solo8() {
        let s = solo8();
        assert_eq!(s.actuated_count(), 8);
        assert_eq!(s.total_mass, 1.9);
        assert!(!s.has_waist_joint());
    }

    #[test]
    fn waist_limit_is_twice_single_motor() {
        let s = solo9();
        let w = s.joints.iter().find(|j| j.role == JointRole::Waist).unwrap();
        assert_eq!(w.torque_limit, 2.0 * w.motor_torque_limit);
        assert!(w.position_limits.is_none());
    }

    #[test]
    fn waist_limits_rejected() {
        let text = include_str!("../assets/robots/solo9.toml").replace(
            "motors = 2\n",
            "motors = 2\nlimits = [-0.5, 0.5]\n",
        );
        match parse_robot_spec(&text) {
            Err(RobotError::Invalid { invariant, .. }) => assert_eq!(invariant, "unlimited waist"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let text = "name = \"x\"\ntotal_mass = \"heavy\"\n";
        match parse_robot_spec(text) {
            Err(RobotError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn tree_and_mass_bookkeeping() {
        for s in [solo9(), solo8()] {
            assert_eq!(s.joints.len() + 1, s.links.len());
            let mut seen = vec![false; s.links.len()];
            seen[0] = true;
            for j in &s.joints {
                assert!(seen[j.parent], "parent visited before child");
                assert!(!seen[j.child]);
                seen[j.child] = true;
            }
            assert!(seen.iter().all(|&v| v));
            let sum: f64 = s.links.iter().map(|l| l.mass).sum();
            assert!((sum - s.total_mass).abs() < MASS_TOLERANCE);
        }
    }

    #[test]
    fn round_trip_is_structurally_equal() {
        for s in [solo9(), solo8()] {
            let again = parse_robot_spec(&s.to_toml_string()).unwrap();
            assert_eq!(again, s);
        }
    }

    #[test]
    fn weld_keeps_masses_and_drops_one_dof() {
        let s9 = solo9();
        let w = make_solo8_from_solo9(&s9).unwrap();
        assert_eq!(w.actuated_count(), 8);
        assert_eq!(w.links, s9.links);
        assert!(matches!(make_solo8_from_solo9(&w), Err(RobotError::NoWaist)));
        assert!(matches!(make_solo8_from_solo9(&solo8()), Err(RobotError::NoWaist)));
    }
}
