//! Procedural robot categories: parametric arms, primitive-shape robots, link
//! scaling, and end-effector attachment.
//!
//! Conventions shared by all generated chains: the base is a small pedestal
//! box hovering just above the table, the arm operates in a plane lifted to
//! `PLANE_Z`, every link extends along its local +x axis, and a small box
//! marker at the chain tip carries the EE flag so the EE position equals the
//! exact kinematic tip.

use crate::error::{Error, Result};
use crate::math::{Quat, Vec3};
use crate::morphology::{
    validate_morphology, GeometryPrimitive, JointSpec, Link, Morphology, MAX_LINKS,
};
use crate::util::seed_stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Height of the operating plane above the table.
pub const PLANE_Z: f64 = 0.045;

const REV_LIMIT: f64 = 2.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub seed: u64,
    pub link_length_range: (f64, f64),
    pub link_width_range: (f64, f64),
    pub dof: usize,
    pub ee_kind: Option<EeKind>,
}

impl GenParams {
    pub fn with_seed(seed: u64) -> Self {
        GenParams {
            seed,
            link_length_range: (0.15, 0.35),
            link_width_range: (0.03, 0.07),
            dof: 3,
            ee_kind: None,
        }
    }

    fn validate(&self) -> Result<()> {
        let (l0, l1) = self.link_length_range;
        let (w0, w1) = self.link_width_range;
        if !(l0 > 0.0 && l1 > l0 && w0 > 0.0 && w1 > w0) {
            return Err(Error::Config("generation ranges must be positive and non-degenerate".into()));
        }
        if self.dof == 0 {
            return Err(Error::Config("dof must be >= 1".into()));
        }
        Ok(())
    }

    fn rng(&self, category: u64) -> ChaCha8Rng {
        seed_stream(self.seed, &[0x9e4, category])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Stick,
    NLink,
    Prims,
    Chain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EeKind {
    Stick,
    Plane,
    Cylinder,
    Gripper,
}

impl EeKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EeKind::Stick => "stick",
            EeKind::Plane => "plane",
            EeKind::Cylinder => "cylinder",
            EeKind::Gripper => "gripper",
        }
    }
}

fn pedestal() -> Link {
    Link {
        index: 0,
        parent: -1,
        geometry: GeometryPrimitive::boxed(0.03, 0.03, 0.02),
        origin_pos: [0.0, 0.0, 0.021],
        origin_quat: Quat::IDENTITY,
        is_ee: false,
    }
}

fn ee_marker(index: usize, parent: usize, tip_offset: Vec3) -> (Link, JointSpec) {
    (
        Link {
            index,
            parent: parent as i64,
            geometry: GeometryPrimitive::boxed(0.01, 0.01, 0.01),
            origin_pos: [0.0; 3],
            origin_quat: Quat::IDENTITY,
            is_ee: true,
        },
        JointSpec::fixed(tip_offset, Quat::IDENTITY),
    )
}

fn finish(name: &str, category: &str, links: Vec<Link>, joints: Vec<JointSpec>) -> Result<Morphology> {
    let m = Morphology {
        name: name.to_string(),
        category: category.to_string(),
        links,
        joints,
    };
    let report = validate_morphology(&m);
    if !report.ok() {
        return Err(Error::Validation(format!("{}: {}", m.name, report)));
    }
    Ok(m)
}

/// 3-DOF planar arm with seeded link lengths and widths, plus an EE marker.
pub fn gen_arm3(p: &GenParams) -> Result<Morphology> {
    p.validate()?;
    if p.dof != 3 {
        return Err(Error::Config("arm3 requires dof = 3".into()));
    }
    let mut rng = p.rng(0xa3);
    let mut links = vec![pedestal()];
    let mut joints = Vec::new();
    let mut prev_len = 0.0;
    for i in 1..=3 {
        let len = rng.gen_range(p.link_length_range.0..p.link_length_range.1);
        let width = rng.gen_range(p.link_width_range.0..p.link_width_range.1);
        let origin = if i == 1 {
            [0.0, 0.0, PLANE_Z]
        } else {
            [prev_len, 0.0, 0.0]
        };
        joints.push(JointSpec::revolute([0.0, 0.0, 1.0], origin, -REV_LIMIT, REV_LIMIT));
        links.push(Link {
            index: i,
            parent: (i - 1) as i64,
            geometry: GeometryPrimitive::boxed(len / 2.0, width / 2.0, width / 2.0),
            origin_pos: [len / 2.0, 0.0, 0.0],
            origin_quat: Quat::IDENTITY,
            is_ee: false,
        });
        prev_len = len;
    }
    let (ee, ee_joint) = ee_marker(4, 3, [prev_len, 0.0, 0.0]);
    links.push(ee);
    joints.push(ee_joint);
    finish(&format!("arm3_{:016x}", p.seed), "arm3", links, joints)
}

/// Total link length of a generated planar chain (distance from shoulder to
/// EE at the straight configuration).
pub fn chain_length(m: &Morphology) -> f64 {
    m.joints
        .iter()
        .skip(1)
        .map(|j| j.origin_pos[0])
        .sum::<f64>()
        + m.links
            .last()
            .map(|l| l.origin_pos[0])
            .unwrap_or(0.0)
}

/// Primitive-shape robot categories.
pub fn gen_primitive_category(kind: PrimitiveKind, p: &GenParams) -> Result<Morphology> {
    p.validate()?;
    match kind {
        PrimitiveKind::Stick => gen_stick(p),
        PrimitiveKind::NLink => gen_nlink(p),
        PrimitiveKind::Prims => gen_prims(p),
        PrimitiveKind::Chain => gen_chain(p),
    }
}

/// One box link riding a revolute + prismatic 2-DOF base.
fn gen_stick(p: &GenParams) -> Result<Morphology> {
    let mut rng = p.rng(0x57);
    let len = rng.gen_range(p.link_length_range.0..p.link_length_range.1) * 2.0;
    let width = rng.gen_range(p.link_width_range.0..p.link_width_range.1);

    let links = vec![
        pedestal(),
        Link {
            index: 1,
            parent: 0,
            geometry: GeometryPrimitive::boxed(0.02, 0.02, 0.02),
            origin_pos: [0.0; 3],
            origin_quat: Quat::IDENTITY,
            is_ee: false,
        },
        Link {
            index: 2,
            parent: 1,
            geometry: GeometryPrimitive::boxed(len / 2.0, width / 2.0, 0.02),
            origin_pos: [len / 2.0, 0.0, 0.0],
            origin_quat: Quat::IDENTITY,
            is_ee: true,
        },
    ];
    let joints = vec![
        JointSpec::revolute([0.0, 0.0, 1.0], [0.0, 0.0, PLANE_Z], -REV_LIMIT, REV_LIMIT),
        JointSpec::prismatic([1.0, 0.0, 0.0], [0.02, 0.0, 0.0], 0.0, 0.5),
    ];
    finish(&format!("stick_{:016x}", p.seed), "stick", links, joints)
}

/// `dof` serial revolute box links with an EE marker at the exact tip.
fn gen_nlink(p: &GenParams) -> Result<Morphology> {
    let mut rng = p.rng(0x41);
    if p.dof + 2 > MAX_LINKS {
        return Err(Error::Config("nlink dof too large".into()));
    }
    let mut links = vec![pedestal()];
    let mut joints = Vec::new();
    let mut prev_len = 0.0;
    for i in 1..=p.dof {
        let len = rng.gen_range(p.link_length_range.0..p.link_length_range.1);
        let width = rng.gen_range(p.link_width_range.0..p.link_width_range.1);
        let origin = if i == 1 {
            [0.0, 0.0, PLANE_Z]
        } else {
            [prev_len, 0.0, 0.0]
        };
        joints.push(JointSpec::revolute([0.0, 0.0, 1.0], origin, -REV_LIMIT, REV_LIMIT));
        links.push(Link {
            index: i,
            parent: (i - 1) as i64,
            geometry: GeometryPrimitive::boxed(len / 2.0, width / 2.0, width / 2.0),
            origin_pos: [len / 2.0, 0.0, 0.0],
            origin_quat: Quat::IDENTITY,
            is_ee: false,
        });
        prev_len = len;
    }
    let (ee, ee_joint) = ee_marker(p.dof + 1, p.dof, [prev_len, 0.0, 0.0]);
    links.push(ee);
    joints.push(ee_joint);
    finish(&format!("nlink_{:016x}", p.seed), "nlink", links, joints)
}

/// 2-3 links of mixed primitive kinds on revolute joints.
fn gen_prims(p: &GenParams) -> Result<Morphology> {
    let mut rng = p.rng(0x9a);
    let n = rng.gen_range(2..=3usize);
    // Rotate through the three kinds from a seeded start so shapes stay mixed.
    let start = rng.gen_range(0..3usize);
    let kinds = [0, 1, 2].map(|i| (start + i) % 3);

    let mut links = vec![pedestal()];
    let mut joints = Vec::new();
    let mut prev_len = 0.0;
    for i in 1..=n {
        let len = rng.gen_range(p.link_length_range.0..p.link_length_range.1);
        let width = rng.gen_range(p.link_width_range.0..p.link_width_range.1);
        let origin = if i == 1 {
            [0.0, 0.0, PLANE_Z]
        } else {
            [prev_len, 0.0, 0.0]
        };
        let axis = if i % 2 == 1 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
        joints.push(JointSpec::revolute(axis, origin, -REV_LIMIT, REV_LIMIT));
        let (geometry, origin_quat, effective_len) = match kinds[(i - 1) % 3] {
            0 => (
                GeometryPrimitive::boxed(len / 2.0, width / 2.0, width / 2.0),
                Quat::IDENTITY,
                len,
            ),
            1 => {
                let r = (width / 2.0).max(0.02);
                (GeometryPrimitive::sphere(r), Quat::IDENTITY, 2.0 * r)
            }
            _ => (
                // Cylinder axis is local z; rotate it onto the link's +x.
                GeometryPrimitive::cylinder(width / 2.0, len / 2.0),
                Quat::from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2),
                len,
            ),
        };
        links.push(Link {
            index: i,
            parent: (i - 1) as i64,
            geometry,
            origin_pos: [effective_len / 2.0, 0.0, 0.0],
            origin_quat,
            is_ee: false,
        });
        prev_len = effective_len;
    }
    let (ee, ee_joint) = ee_marker(n + 1, n, [prev_len, 0.0, 0.0]);
    links.push(ee);
    joints.push(ee_joint);
    finish(&format!("prims_{:016x}", p.seed), "prims", links, joints)
}

/// `dof` serial sphere links on alternating-axis revolute joints.
fn gen_chain(p: &GenParams) -> Result<Morphology> {
    let r = 0.04;
    if p.dof + 1 > MAX_LINKS {
        return Err(Error::Config("chain dof too large".into()));
    }
    let mut links = vec![pedestal()];
    let mut joints = Vec::new();
    for i in 1..=p.dof {
        let origin = if i == 1 {
            [0.0, 0.0, PLANE_Z + r]
        } else {
            [2.0 * r, 0.0, 0.0]
        };
        let axis = if i % 2 == 1 { [0.0, 0.0, 1.0] } else { [0.0, 1.0, 0.0] };
        joints.push(JointSpec::revolute(axis, origin, -REV_LIMIT, REV_LIMIT));
        links.push(Link {
            index: i,
            parent: (i - 1) as i64,
            geometry: GeometryPrimitive::sphere(r),
            origin_pos: [r, 0.0, 0.0],
            origin_quat: Quat::IDENTITY,
            is_ee: i == p.dof,
        });
    }
    finish(&format!("chain_{:016x}", p.seed), "chain", links, joints)
}

/// Scale geometry and origin offsets per link. Joint types, axes, and limits
/// are unchanged. Spheres use factor[0]; cylinders use factor[0] for the
/// radius and factor[2] for the half-height.
pub fn scale_arm(m: &Morphology, factors: &[Vec3]) -> Result<Morphology> {
    if factors.len() != m.n_links() {
        return Err(Error::Shape(format!(
            "{} factors for {} links",
            factors.len(),
            m.n_links()
        )));
    }
    if factors.iter().any(|f| f.iter().any(|&x| !(x > 0.0))) {
        return Err(Error::Config("scale factors must be positive".into()));
    }

    let mut out = m.clone();
    for (i, link) in out.links.iter_mut().enumerate() {
        let f = factors[i];
        link.geometry.params = match link.geometry.kind {
            crate::morphology::GeomKind::Box => [
                link.geometry.params[0] * f[0],
                link.geometry.params[1] * f[1],
                link.geometry.params[2] * f[2],
            ],
            crate::morphology::GeomKind::Sphere => {
                let s = f[0];
                [
                    link.geometry.params[0] * s,
                    link.geometry.params[1] * s,
                    link.geometry.params[2] * s,
                ]
            }
            crate::morphology::GeomKind::Cylinder => [
                link.geometry.params[0] * f[0],
                link.geometry.params[1] * f[0],
                link.geometry.params[2] * f[2],
            ],
        };
        link.origin_pos = [
            link.origin_pos[0] * f[0],
            link.origin_pos[1] * f[1],
            link.origin_pos[2] * f[2],
        ];
    }
    for (k, joint) in out.joints.iter_mut().enumerate() {
        // The joint origin lives in the parent frame: scale with the parent.
        let parent = out.links[k + 1].parent as usize;
        let f = factors[parent];
        joint.origin_pos = [
            joint.origin_pos[0] * f[0],
            joint.origin_pos[1] * f[1],
            joint.origin_pos[2] * f[2],
        ];
    }
    Ok(out)
}

/// Transfer the EE flag onto a newly attached tool.
pub fn attach_end_effector(arm: &Morphology, ee: EeKind) -> Result<Morphology> {
    let ee_idx = arm
        .ee_index()
        .ok_or_else(|| Error::Validation("arm has no EE link".into()))?;
    let added = match ee {
        EeKind::Gripper => 3,
        _ => 1,
    };
    if arm.n_links() + added > MAX_LINKS {
        return Err(Error::Config(format!(
            "attaching {} exceeds MAX_LINKS",
            ee.as_str()
        )));
    }

    let mut out = arm.clone();
    out.links[ee_idx].is_ee = false;
    let old = &out.links[ee_idx];
    // Attach beyond the old EE geometry along its local +x.
    let tip = [old.origin_pos[0] + old.geometry.params[0], old.origin_pos[1], old.origin_pos[2]];
    let next = out.n_links();

    match ee {
        EeKind::Stick => {
            out.joints.push(JointSpec::fixed(tip, Quat::IDENTITY));
            out.links.push(Link {
                index: next,
                parent: ee_idx as i64,
                geometry: GeometryPrimitive::boxed(0.10, 0.01, 0.01),
                origin_pos: [0.10, 0.0, 0.0],
                origin_quat: Quat::IDENTITY,
                is_ee: true,
            });
        }
        EeKind::Plane => {
            out.joints.push(JointSpec::fixed(tip, Quat::IDENTITY));
            out.links.push(Link {
                index: next,
                parent: ee_idx as i64,
                geometry: GeometryPrimitive::boxed(0.01, 0.10, 0.04),
                origin_pos: [0.02, 0.0, 0.0],
                origin_quat: Quat::IDENTITY,
                is_ee: true,
            });
        }
        EeKind::Cylinder => {
            out.joints.push(JointSpec::fixed(tip, Quat::IDENTITY));
            out.links.push(Link {
                index: next,
                parent: ee_idx as i64,
                geometry: GeometryPrimitive::cylinder(0.02, 0.08),
                origin_pos: [0.08, 0.0, 0.0],
                origin_quat: Quat::from_axis_angle([0.0, 1.0, 0.0], std::f64::consts::FRAC_PI_2),
                is_ee: true,
            });
        }
        EeKind::Gripper => {
            // Palm carries the EE flag; two fingers extend forward.
            out.joints.push(JointSpec::fixed(tip, Quat::IDENTITY));
            out.links.push(Link {
                index: next,
                parent: ee_idx as i64,
                geometry: GeometryPrimitive::boxed(0.01, 0.05, 0.02),
                origin_pos: [0.01, 0.0, 0.0],
                origin_quat: Quat::IDENTITY,
                is_ee: true,
            });
            for (side, dy) in [(0, 0.04), (1, -0.04f64)] {
                out.joints.push(JointSpec::fixed([0.02, dy, 0.0], Quat::IDENTITY));
                out.links.push(Link {
                    index: next + 1 + side,
                    parent: next as i64,
                    geometry: GeometryPrimitive::boxed(0.04, 0.008, 0.015),
                    origin_pos: [0.04, 0.0, 0.0],
                    origin_quat: Quat::IDENTITY,
                    is_ee: false,
                });
            }
        }
    }

    out.category = format!("{}-{}", arm.category, ee.as_str());
    out.name = format!("{}-{}", arm.name, ee.as_str());
    let report = validate_morphology(&out);
    if !report.ok() {
        return Err(Error::Validation(report.to_string()));
    }
    Ok(out)
}

/// Scaled-copy helper used by the panda split: per-link factors drawn from
/// U[0.8, 1.25), deterministic per seed.
pub fn random_scale_factors(n_links: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = seed_stream(seed, &[0x5ca1e]);
    (0..n_links)
        .map(|_| {
            [
                rng.gen_range(0.8..1.25),
                rng.gen_range(0.8..1.25),
                rng.gen_range(0.8..1.25),
            ]
        })
        .collect()
}
