//! Morphology data model: links with primitive geometry, joints with limits,
//! validation, and the on-disk description format.
//!
//! A morphology is a rooted chain/tree of links in topological order. Link 0
//! is the base (parent = -1); every other link i is attached to its parent by
//! joint i-1. The description file is JSON with the exact field layout used
//! by [`save_morphology`] / [`load_morphology`].

use crate::error::{Error, Result};
use crate::math::{vnorm, Quat, Vec3};
use crate::util::fnv1a;
use serde::{Deserialize, Serialize};

/// Hard cap on links per morphology; token layouts are sized against this.
pub const MAX_LINKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeomKind {
    Box,
    Sphere,
    Cylinder,
}

/// Primitive shape. `params` are half-extents for boxes, (r, r, r) for
/// spheres, and (radius, radius, half_height) for cylinders (axis = local z).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometryPrimitive {
    pub kind: GeomKind,
    pub params: [f64; 3],
}

impl GeometryPrimitive {
    pub fn boxed(hx: f64, hy: f64, hz: f64) -> Self {
        GeometryPrimitive {
            kind: GeomKind::Box,
            params: [hx, hy, hz],
        }
    }

    pub fn sphere(r: f64) -> Self {
        GeometryPrimitive {
            kind: GeomKind::Sphere,
            params: [r, r, r],
        }
    }

    pub fn cylinder(radius: f64, half_height: f64) -> Self {
        GeometryPrimitive {
            kind: GeomKind::Cylinder,
            params: [radius, radius, half_height],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Prismatic,
    Revolute,
    Fixed,
}

/// Joint attaching a link to its parent. `origin` is the joint frame in the
/// parent link frame; motion is about/along `axis` in that frame.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSpec {
    pub kind: JointKind,
    pub axis: Vec3,
    pub origin_pos: Vec3,
    pub origin_quat: Quat,
    pub lower: f64,
    pub upper: f64,
}

impl JointSpec {
    pub fn fixed(origin_pos: Vec3, origin_quat: Quat) -> Self {
        JointSpec {
            kind: JointKind::Fixed,
            axis: [0.0, 0.0, 1.0],
            origin_pos,
            origin_quat: origin_quat.canonical(),
            lower: 0.0,
            upper: 0.0,
        }
    }

    pub fn revolute(axis: Vec3, origin_pos: Vec3, lower: f64, upper: f64) -> Self {
        JointSpec {
            kind: JointKind::Revolute,
            axis,
            origin_pos,
            origin_quat: Quat::IDENTITY,
            lower,
            upper,
        }
    }

    pub fn prismatic(axis: Vec3, origin_pos: Vec3, lower: f64, upper: f64) -> Self {
        JointSpec {
            kind: JointKind::Prismatic,
            axis,
            origin_pos,
            origin_quat: Quat::IDENTITY,
            lower,
            upper,
        }
    }

    pub fn is_movable(&self) -> bool {
        self.kind != JointKind::Fixed
    }
}

/// One rigid link. `origin` places the geometry in the link (post-motion
/// joint) frame; for the base it is relative to the mount pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Link {
    pub index: usize,
    pub parent: i64,
    pub geometry: GeometryPrimitive,
    pub origin_pos: Vec3,
    pub origin_quat: Quat,
    pub is_ee: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Morphology {
    pub name: String,
    pub category: String,
    pub links: Vec<Link>,
    /// joints[i] attaches links[i + 1] to its parent.
    pub joints: Vec<JointSpec>,
}

impl Morphology {
    pub fn n_links(&self) -> usize {
        self.links.len()
    }

    pub fn n_joints(&self) -> usize {
        self.joints.len()
    }

    /// Joint attaching `link_idx` to its parent (none for the base).
    pub fn joint_of(&self, link_idx: usize) -> Option<&JointSpec> {
        if link_idx == 0 {
            None
        } else {
            self.joints.get(link_idx - 1)
        }
    }

    /// Index of the first end-effector link.
    pub fn ee_index(&self) -> Option<usize> {
        self.links.iter().position(|l| l.is_ee)
    }

    pub fn movable_mask(&self) -> Vec<bool> {
        self.joints.iter().map(|j| j.is_movable()).collect()
    }

    pub fn n_movable(&self) -> usize {
        self.joints.iter().filter(|j| j.is_movable()).count()
    }

    /// Movable joints on the chain from the base to the EE link.
    pub fn n_movable_till_ee(&self) -> usize {
        let mut count = 0;
        let mut idx = match self.ee_index() {
            Some(i) => i,
            None => return 0,
        };
        while idx != 0 {
            if self.joints[idx - 1].is_movable() {
                count += 1;
            }
            idx = self.links[idx].parent as usize;
        }
        count
    }

    /// Home configuration: q = 0 clamped into the limits of each joint.
    pub fn home_config(&self) -> Vec<f64> {
        self.joints
            .iter()
            .map(|j| 0.0f64.clamp(j.lower, j.upper))
            .collect()
    }

    /// Content hash over the serialized description; stable across runs.
    pub fn stable_hash(&self) -> u64 {
        fnv1a(save_morphology(self).as_bytes())
    }
}

/// One violated invariant, with the offending link where applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub link: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, link: Option<usize>, message: impl Into<String>) {
        self.violations.push(Violation {
            link,
            message: message.into(),
        });
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.ok() {
            return write!(f, "ok");
        }
        for v in &self.violations {
            match v.link {
                Some(i) => writeln!(f, "link {}: {}", i, v.message)?,
                None => writeln!(f, "{}", v.message)?,
            }
        }
        Ok(())
    }
}

const UNIT_TOL: f64 = 1e-9;

/// Check every structural invariant; the report lists all violations found.
pub fn validate_morphology(m: &Morphology) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let n = m.links.len();

    if n == 0 {
        rep.push(None, "morphology has no links");
        return rep;
    }
    if n > MAX_LINKS {
        rep.push(None, format!("{} links exceeds MAX_LINKS = {}", n, MAX_LINKS));
    }
    if m.joints.len() + 1 != n {
        rep.push(
            None,
            format!("expected {} joints for {} links, got {}", n - 1, n, m.joints.len()),
        );
    }

    let base_count = m.links.iter().filter(|l| l.parent == -1).count();
    if base_count == 0 {
        rep.push(None, "no base link (parent = -1)");
    } else if base_count > 1 {
        rep.push(None, "multiple base links");
    }
    if m.links.iter().filter(|l| l.is_ee).count() == 0 {
        rep.push(None, "no end-effector link (is_ee)");
    }

    for (i, link) in m.links.iter().enumerate() {
        if link.index != i {
            rep.push(Some(i), format!("link index {} out of order", link.index));
        }
        if i == 0 {
            if link.parent != -1 {
                rep.push(Some(i), "first link must be the base (parent = -1)");
            }
        } else if link.parent != -1 && link.parent as usize >= i {
            rep.push(Some(i), format!("parent {} not before link {}", link.parent, i));
        }
        if link.parent < -1 || link.parent >= n as i64 {
            rep.push(Some(i), format!("parent {} out of range", link.parent));
        }

        let g = &link.geometry;
        if g.params.iter().any(|&p| !(p > 0.0)) {
            rep.push(Some(i), format!("geometry params must be positive, got {:?}", g.params));
        }
        match g.kind {
            GeomKind::Sphere => {
                if g.params[0] != g.params[1] || g.params[1] != g.params[2] {
                    rep.push(Some(i), "sphere params must be equal");
                }
            }
            GeomKind::Cylinder => {
                if g.params[0] != g.params[1] {
                    rep.push(Some(i), "cylinder params[0] must equal params[1]");
                }
            }
            GeomKind::Box => {}
        }
        if (link.origin_quat.norm() - 1.0).abs() > UNIT_TOL {
            rep.push(Some(i), "link origin quaternion not unit-norm");
        }
    }

    for (k, joint) in m.joints.iter().enumerate() {
        let child = k + 1;
        if (vnorm(joint.axis) - 1.0).abs() > UNIT_TOL {
            rep.push(Some(child), "joint axis not unit-norm");
        }
        if joint.lower > joint.upper {
            rep.push(Some(child), "limits inverted (lower > upper)");
        }
        if joint.kind == JointKind::Fixed && (joint.lower != 0.0 || joint.upper != 0.0) {
            rep.push(Some(child), "fixed joint limits must both be zero");
        }
        if (joint.origin_quat.norm() - 1.0).abs() > UNIT_TOL {
            rep.push(Some(child), "joint origin quaternion not unit-norm");
        }
    }

    rep
}

// ---------------------------------------------------------------------------
// Description file format (JSON).
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WireOrigin {
    pos: [f64; 3],
    quat: [f64; 4],
}

#[derive(Serialize, Deserialize)]
struct WireLink {
    index: usize,
    parent: i64,
    is_ee: bool,
    geometry: GeometryPrimitive,
    origin: WireOrigin,
}

#[derive(Serialize, Deserialize)]
struct WireJoint {
    child: usize,
    kind: JointKind,
    axis: [f64; 3],
    origin: WireOrigin,
    lower: f64,
    upper: f64,
}

#[derive(Serialize, Deserialize)]
struct WireMorphology {
    name: String,
    category: String,
    links: Vec<WireLink>,
    joints: Vec<WireJoint>,
}

/// Serialize to the description format. Deterministic: fixed field order,
/// shortest round-trip float formatting.
pub fn save_morphology(m: &Morphology) -> String {
    let wire = WireMorphology {
        name: m.name.clone(),
        category: m.category.clone(),
        links: m
            .links
            .iter()
            .map(|l| WireLink {
                index: l.index,
                parent: l.parent,
                is_ee: l.is_ee,
                geometry: l.geometry,
                origin: WireOrigin {
                    pos: l.origin_pos,
                    quat: l.origin_quat.canonical().as_array(),
                },
            })
            .collect(),
        joints: m
            .joints
            .iter()
            .enumerate()
            .map(|(k, j)| WireJoint {
                child: k + 1,
                kind: j.kind,
                axis: j.axis,
                origin: WireOrigin {
                    pos: j.origin_pos,
                    quat: j.origin_quat.canonical().as_array(),
                },
                lower: j.lower,
                upper: j.upper,
            })
            .collect(),
    };
    let mut out = serde_json::to_string_pretty(&wire).expect("morphology serialization");
    out.push('\n');
    out
}

/// Parse and validate a description file.
pub fn load_morphology(text: &str) -> Result<Morphology> {
    let wire: WireMorphology = serde_json::from_str(text).map_err(|e| Error::Parse {
        context: "morphology description".into(),
        message: e.to_string(),
    })?;

    let mut joints_sorted = wire.joints;
    joints_sorted.sort_by_key(|j| j.child);
    for (k, j) in joints_sorted.iter().enumerate() {
        if j.child != k + 1 {
            return Err(Error::Parse {
                context: "morphology description".into(),
                message: format!("joints must cover children 1..{} exactly; got child {}", wire.links.len().saturating_sub(1), j.child),
            });
        }
    }

    let m = Morphology {
        name: wire.name,
        category: wire.category,
        links: wire
            .links
            .into_iter()
            .map(|l| Link {
                index: l.index,
                parent: l.parent,
                geometry: l.geometry,
                origin_pos: l.origin.pos,
                origin_quat: Quat::from_array(l.origin.quat).canonical(),
                is_ee: l.is_ee,
            })
            .collect(),
        joints: joints_sorted
            .into_iter()
            .map(|j| JointSpec {
                kind: j.kind,
                axis: j.axis,
                origin_pos: j.origin.pos,
                origin_quat: Quat::from_array(j.origin.quat).canonical(),
                lower: j.lower,
                upper: j.upper,
            })
            .collect(),
    };

    let report = validate_morphology(&m);
    if !report.ok() {
        return Err(Error::Validation(report.to_string()));
    }
    Ok(m)
}
